use crate::error::{Error, Result};
use crate::metrics::temporal_iou;
use crate::moment_map::Proposal;
use crate::numerics::{Mask, Real};

use super::ScoreMap;

/// Scores are clamped to `[BCE_CLAMP, 1 - BCE_CLAMP]` inside the logarithms.
pub const BCE_CLAMP: f64 = 1e-7;

/// Per valid cell, the temporal IoU with `gt` rescaled so that IoU ≤ `t_min`
/// maps to 0 and IoU ≥ `t_max` maps to 1. Invalid cells hold 0.
pub fn scaled_iou_targets(n: usize, gt: Proposal, t_min: f64, t_max: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&t_min) || !(0.0..=1.0).contains(&t_max) || t_min >= t_max {
        return Err(Error::InvalidConfig(format!(
            "need 0 <= t_min < t_max <= 1, got {t_min}, {t_max}"
        )));
    }
    if n == 0 || gt.end() > n {
        return Err(Error::InvalidInterval(gt.start(), gt.end()));
    }
    let mut out = vec![0.0; n * n];
    for i in 1..=n {
        for j in i..=n {
            let o = temporal_iou((i, j), gt.bounds())?;
            out[(i - 1) * n + (j - 1)] = if o <= t_min {
                0.0
            } else if o >= t_max {
                1.0
            } else {
                (o - t_min) / (t_max - t_min)
            };
        }
    }
    Ok(out)
}

/// Mean binary cross-entropy over valid cells.
pub fn bce_loss(scores: &ScoreMap, targets: &[f64]) -> Result<f64> {
    let (loss, _) = bce_loss_and_grad(scores.scores(), targets, scores.mask())?;
    Ok(loss)
}

/// Loss plus its gradient with respect to the pre-sigmoid logits, assuming
/// `scores = sigmoid(logits)`. Cells where the clamp is active get zero
/// gradient, matching the clamped forward.
pub fn bce_loss_and_grad<T: Real>(scores: &[T], targets: &[T], mask: &Mask) -> Result<(T, Vec<T>)> {
    if scores.len() != targets.len() || scores.len() != mask.n() * mask.n() {
        return Err(Error::ShapeMismatch(format!(
            "bce: {} scores, {} targets, mask side {}",
            scores.len(),
            targets.len(),
            mask.n()
        )));
    }
    let count = mask.count();
    if count == 0 {
        return Err(Error::EmptyInput("no valid cells"));
    }
    let lo = T::lit(BCE_CLAMP);
    let hi = T::one() - lo;
    let inv = T::one() / T::lit(count as f64);
    let mut total = T::zero();
    let mut grad = vec![T::zero(); scores.len()];
    for (k, valid) in mask.cells().iter().enumerate() {
        if !valid {
            continue;
        }
        let (s, t) = (scores[k], targets[k]);
        let sc = s.max(lo).min(hi);
        total -= t * sc.ln() + (T::one() - t) * (T::one() - sc).ln();
        if s > lo && s < hi {
            grad[k] = (s - t) * inv;
        }
    }
    Ok((total * inv, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::moment_map::validity_mask;

    #[test]
    fn target_examples() {
        let gt = Proposal::new(3, 6).unwrap();
        let t = scaled_iou_targets(10, gt, 0.3, 0.7).unwrap();
        assert_eq!(t[2 * 10 + 5], 1.0);
        assert_eq!(t[0], 0.0);
        assert!((t[3 * 10 + 7] - 0.5).abs() < 1e-12);
        assert_eq!(t[5 * 10 + 2], 0.0);
        assert!(scaled_iou_targets(10, gt, 0.7, 0.3).is_err());
        assert!(scaled_iou_targets(5, gt, 0.3, 0.7).is_err());
    }

    #[test]
    fn half_scores_on_half_targets() {
        let mask = validity_mask(3).unwrap();
        let s: Vec<f64> = mask.cells().iter().map(|v| if *v { 0.5 } else { 0.0 }).collect();
        let map = ScoreMap::new(mask, s.clone()).unwrap();
        let loss = bce_loss(&map, &s).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn perfect_prediction_is_near_zero() {
        let mask = validity_mask(3).unwrap();
        let t: Vec<f64> = mask
            .cells()
            .iter()
            .enumerate()
            .map(|(k, v)| if *v { (k % 2) as f64 } else { 0.0 })
            .collect();
        let map = ScoreMap::new(mask.clone(), t.clone()).unwrap();
        assert!(bce_loss(&map, &t).unwrap() <= 1e-6 * mask.count() as f64);
    }

    #[test]
    fn matches_scalar_loop() {
        let mask = validity_mask(3).unwrap();
        let s = [0.2, 0.7, 0.9, 0.0, 0.4, 0.55, 0.0, 0.0, 0.01];
        let t = [0.0, 1.0, 0.25, 0.0, 0.5, 0.0, 0.0, 0.0, 1.0];
        let map = ScoreMap::new(mask, s.to_vec()).unwrap();
        let got = bce_loss(&map, &t).unwrap();
        let mut want = 0.0;
        let mut cnt = 0.0;
        for i in 0..3 {
            for j in i..3 {
                let (sv, tv) = (s[i * 3 + j], t[i * 3 + j]);
                want += -(tv * f64::ln(sv) + (1.0 - tv) * f64::ln(1.0 - sv));
                cnt += 1.0;
            }
        }
        assert!((got - want / cnt).abs() < 1e-9);
    }
}
