//! Random concatenation augmentation.
//!
//! Two training samples with similar frame rates are cut around their
//! ground-truth moments (random margins `δ` on each side, always inside the
//! source video) and the two excerpts are concatenated along time. One of
//! the two queries is kept and its ground truth is remapped into the new
//! clip coordinates.

use std::sync::Arc;

use rand::Rng;

use crate::datastore::{ClipFeatureSequence, GroundingSample, QueryRecord};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RcaConfig {
    /// Allowed relative frame-rate difference between the two sources.
    pub frame_rate_tol: f64,
    /// Allowed relative deviation of the augmented length from the first
    /// source's clip count.
    pub length_tol: f64,
    pub max_attempts: usize,
}

impl Default for RcaConfig {
    fn default() -> Self {
        RcaConfig {
            frame_rate_tol: 0.2,
            length_tol: 0.25,
            max_attempts: 100,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QueryChoice {
    First,
    Second,
}

/// Clip margins taken before/after each source's ground truth, and which
/// query the augmented sample keeps.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RcaDraw {
    pub first_before: usize,
    pub first_after: usize,
    pub second_before: usize,
    pub second_after: usize,
    pub query: QueryChoice,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedSample {
    pub features: Arc<ClipFeatureSequence>,
    pub query: QueryRecord,
    pub gt_start: usize,
    pub gt_end: usize,
    pub frame_rate: f64,
    pub first_id: String,
    pub second_id: String,
    /// Number of clips taken from the first source.
    pub first_len: usize,
    pub draw: RcaDraw,
}

impl AugmentedSample {
    pub fn to_sample(&self) -> GroundingSample {
        GroundingSample {
            features: self.features.clone(),
            query: self.query.clone(),
            gt_start: self.gt_start,
            gt_end: self.gt_end,
            frame_rate: self.frame_rate,
        }
    }
}

pub fn frame_rate_compatible(a: &GroundingSample, b: &GroundingSample, rel_tol: f64) -> bool {
    let (fa, fb) = (a.frame_rate, b.frame_rate);
    (fa - fb).abs() / fa.max(fb) <= rel_tol
}

/// Deterministic part of the augmentation: builds the concatenation for a
/// given draw.
pub fn apply_draw(a: &GroundingSample, b: &GroundingSample, draw: RcaDraw) -> Result<AugmentedSample> {
    let lo_a = a.gt_start.checked_sub(draw.first_before).filter(|v| *v >= 1);
    let lo_b = b.gt_start.checked_sub(draw.second_before).filter(|v| *v >= 1);
    let hi_a = a.gt_end + draw.first_after;
    let hi_b = b.gt_end + draw.second_after;
    let (Some(lo_a), Some(lo_b)) = (lo_a, lo_b) else {
        return Err(Error::InvariantViolation(format!("offsets {draw:?} reach before clip 1")));
    };
    if hi_a > a.n_clips() || hi_b > b.n_clips() {
        return Err(Error::InvariantViolation(format!("offsets {draw:?} reach past the last clip")));
    }
    if a.features.dim() != b.features.dim() {
        return Err(Error::ShapeMismatch(format!(
            "feature dims {} and {}",
            a.features.dim(),
            b.features.dim()
        )));
    }
    let mut rows: Vec<&[f32]> = (lo_a..=hi_a).map(|t| a.features.clip(t)).collect();
    let first_len = rows.len();
    rows.extend((lo_b..=hi_b).map(|t| b.features.clip(t)));
    let video_id = format!("{}+{}", a.video_id(), b.video_id());
    let features = Arc::new(ClipFeatureSequence::from_rows(video_id, &rows)?);
    let (query, gt_start, gt_end) = match draw.query {
        QueryChoice::First => (
            a.query.clone(),
            draw.first_before + 1,
            draw.first_before + (a.gt_end - a.gt_start + 1),
        ),
        QueryChoice::Second => (
            b.query.clone(),
            first_len + draw.second_before + 1,
            first_len + draw.second_before + (b.gt_end - b.gt_start + 1),
        ),
    };
    Ok(AugmentedSample {
        features,
        query,
        gt_start,
        gt_end,
        frame_rate: a.frame_rate,
        first_id: a.id().to_string(),
        second_id: b.id().to_string(),
        first_len,
        draw,
    })
}

/// Draws margins uniformly per coordinate over their in-bounds ranges,
/// rejecting draws whose total length differs from `a`'s clip count by more
/// than `length_tol`, then picks the query uniformly.
pub fn rca_augment<R: Rng>(
    a: &GroundingSample,
    b: &GroundingSample,
    rng: &mut R,
    cfg: &RcaConfig,
) -> Result<AugmentedSample> {
    if !frame_rate_compatible(a, b, cfg.frame_rate_tol) {
        return Err(Error::IncompatibleFrameRate(a.frame_rate, b.frame_rate));
    }
    let n_a = a.n_clips() as f64;
    let core = (a.gt_end - a.gt_start + 1) + (b.gt_end - b.gt_start + 1);
    for _ in 0..cfg.max_attempts {
        let first_before = rng.gen_range(0..a.gt_start);
        let first_after = rng.gen_range(0..=a.n_clips() - a.gt_end);
        let second_before = rng.gen_range(0..b.gt_start);
        let second_after = rng.gen_range(0..=b.n_clips() - b.gt_end);
        let len = core + first_before + first_after + second_before + second_after;
        if (len as f64 - n_a).abs() > cfg.length_tol * n_a {
            continue;
        }
        let query = if rng.gen_bool(0.5) {
            QueryChoice::First
        } else {
            QueryChoice::Second
        };
        let draw = RcaDraw {
            first_before,
            first_after,
            second_before,
            second_after,
            query,
        };
        return apply_draw(a, b, draw);
    }
    Err(Error::InfeasibleLengths {
        attempts: cfg.max_attempts,
    })
}
