//! Box IoU, temporal IoU over inclusive index intervals, tube vIoU and the
//! aggregate report (`viou@0.3`, `viou@0.5`, `tiou`, `viou`, as percentages).

use std::collections::HashMap;
use std::fmt::Write;

use crate::error::{Error, Result};
use crate::spatial::{BBox, Tube};

pub fn box_iou(a: &BBox, b: &BBox) -> Result<f64> {
    for bx in [a, b] {
        if !bx.is_well_ordered() {
            return Err(Error::DegenerateBox((*bx).into()));
        }
    }
    let w = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let h = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = w * h;
    Ok(inter / (a.area() + b.area() - inter))
}

/// `|a ∩ b| / |a ∪ b|` over inclusive integer intervals.
pub fn temporal_iou(a: (usize, usize), b: (usize, usize)) -> Result<f64> {
    for (s, e) in [a, b] {
        if s > e {
            return Err(Error::InvalidInterval(s, e));
        }
    }
    let lo = a.0.max(b.0);
    let hi = a.1.min(b.1);
    if lo > hi {
        return Ok(0.0);
    }
    let inter = hi - lo + 1;
    let union = (a.1 - a.0 + 1) + (b.1 - b.0 + 1) - inter;
    Ok(inter as f64 / union as f64)
}

/// Sum of per-frame box IoU over the frames both tubes cover, divided by the
/// number of frames either covers.
pub fn viou(pred: &Tube, gt: &Tube) -> Result<f64> {
    pred.validate()?;
    gt.validate()?;
    if pred.video_id != gt.video_id {
        return Err(Error::InvalidTube(format!(
            "comparing tubes from {} and {}",
            pred.video_id, gt.video_id
        )));
    }
    let lo = pred.start_frame.max(gt.start_frame);
    let hi = pred.end_frame.min(gt.end_frame);
    if lo > hi {
        return Ok(0.0);
    }
    let union = pred.boxes.len() + gt.boxes.len() - (hi - lo + 1);
    let mut sum = 0.0;
    for f in lo..=hi {
        sum += box_iou(pred.box_at(f).unwrap(), gt.box_at(f).unwrap())?;
    }
    Ok(sum / union as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub viou_at_03: f64,
    pub viou_at_05: f64,
    pub tiou: f64,
    pub viou: f64,
    pub n_samples: usize,
}

impl MetricsReport {
    /// Aligned text table in the column order `viou@0.3 viou@0.5 tiou viou`.
    pub fn render_table(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{:>10} {:>10} {:>10} {:>10} {:>10}", "viou@0.3", "viou@0.5", "tiou", "viou", "n").unwrap();
        writeln!(
            s,
            "{:>10.1} {:>10.1} {:>10.1} {:>10.1} {:>10}",
            self.viou_at_03, self.viou_at_05, self.tiou, self.viou, self.n_samples
        )
        .unwrap();
        s
    }

    pub fn render_csv(&self) -> String {
        format!(
            "metric,value\nviou@0.3,{:.1}\nviou@0.5,{:.1}\ntiou,{:.1}\nviou,{:.1}\nn_samples,{}\n",
            self.viou_at_03, self.viou_at_05, self.tiou, self.viou, self.n_samples
        )
    }
}

fn key(t: &Tube) -> (String, String) {
    (t.video_id.clone(), t.query_id.clone())
}

/// Scores predictions against ground truth matched by `(video_id, query_id)`.
/// Ground-truth samples without a prediction score zero; predictions without
/// a ground truth are ignored.
pub fn evaluate(preds: &[Tube], gts: &[Tube]) -> Result<MetricsReport> {
    let mut by_key: HashMap<(String, String), &Tube> = HashMap::new();
    for p in preds {
        if by_key.insert(key(p), p).is_some() {
            return Err(Error::DuplicateId(format!("prediction {}/{}", p.video_id, p.query_id)));
        }
    }
    let mut seen = std::collections::HashSet::new();
    let (mut sum_v, mut sum_t, mut at03, mut at05) = (0.0, 0.0, 0usize, 0usize);
    for g in gts {
        if !seen.insert(key(g)) {
            return Err(Error::DuplicateId(format!("ground truth {}/{}", g.video_id, g.query_id)));
        }
        let (v, t) = match by_key.get(&key(g)) {
            Some(p) => (
                viou(p, g)?,
                temporal_iou((p.start_frame, p.end_frame), (g.start_frame, g.end_frame))?,
            ),
            None => {
                g.validate()?;
                (0.0, 0.0)
            }
        };
        sum_v += v;
        sum_t += t;
        at03 += usize::from(v > 0.3);
        at05 += usize::from(v > 0.5);
    }
    let n = gts.len();
    let pct = |x: f64| if n == 0 { 0.0 } else { 100.0 * x / n as f64 };
    Ok(MetricsReport {
        viou_at_03: pct(at03 as f64),
        viou_at_05: pct(at05 as f64),
        tiou: pct(sum_t),
        viou: pct(sum_v),
        n_samples: n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    fn tube(q: &str, start: usize, boxes: Vec<BBox>) -> Tube {
        Tube {
            video_id: "v".into(),
            query_id: q.into(),
            start_frame: start,
            end_frame: start + boxes.len() - 1,
            boxes,
        }
    }

    #[test]
    fn box_iou_examples() {
        let a = b(0.0, 0.0, 10.0, 10.0);
        assert_eq!(box_iou(&a, &a).unwrap(), 1.0);
        assert_eq!(box_iou(&a, &b(20.0, 20.0, 30.0, 30.0)).unwrap(), 0.0);
        assert!((box_iou(&a, &b(5.0, 5.0, 15.0, 15.0)).unwrap() - 25.0 / 175.0).abs() < 1e-15);
        let bad = BBox {
            x1: 1.0,
            y1: 0.0,
            x2: 1.0,
            y2: 2.0,
        };
        assert!(matches!(box_iou(&a, &bad), Err(Error::DegenerateBox(_))));
    }

    #[test]
    fn temporal_iou_examples() {
        assert_eq!(temporal_iou((3, 6), (3, 6)).unwrap(), 1.0);
        assert_eq!(temporal_iou((1, 2), (5, 6)).unwrap(), 0.0);
        assert_eq!(temporal_iou((3, 6), (4, 8)).unwrap(), 0.5);
        assert!(matches!(temporal_iou((4, 3), (1, 1)), Err(Error::InvalidInterval(4, 3))));
    }

    #[test]
    fn viou_examples() {
        let unit = b(0.0, 0.0, 10.0, 10.0);
        let half = b(0.0, 0.0, 10.0, 20.0);
        let t = tube("q", 0, vec![unit; 4]);
        assert_eq!(viou(&t, &t).unwrap(), 1.0);
        assert_eq!(viou(&t, &tube("q", 10, vec![unit; 2])).unwrap(), 0.0);
        let pred = tube("q", 0, vec![unit; 4]);
        let gt = tube("q", 2, vec![half; 4]);
        assert!((viou(&pred, &gt).unwrap() - 1.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn report_aggregation() {
        let unit = b(0.0, 0.0, 10.0, 10.0);
        // sample a: tiou 0.5 (2 of 4 frames), per-frame IoU 0.8 -> viou 0.4
        // sample b: tiou 1.0, per-frame IoU 0.6 -> viou 0.6
        let gt_a = tube("a", 0, vec![unit; 3]);
        let pred_a = tube("a", 1, vec![b(0.0, 0.0, 10.0, 8.0); 3]);
        let gt_b = tube("b", 0, vec![unit; 2]);
        let pred_b = tube("b", 0, vec![b(0.0, 0.0, 10.0, 6.0); 2]);
        let r = evaluate(&[pred_a, pred_b], &[gt_a, gt_b]).unwrap();
        assert!((r.viou - 50.0).abs() < 1e-9);
        assert!((r.tiou - 75.0).abs() < 1e-9);
        assert_eq!(r.viou_at_03, 100.0);
        assert_eq!(r.viou_at_05, 50.0);
        assert_eq!(r.n_samples, 2);
    }

    #[test]
    fn missing_predictions_score_zero_and_duplicates_fail() {
        let t = tube("a", 0, vec![b(0.0, 0.0, 1.0, 1.0)]);
        let r = evaluate(&[], std::slice::from_ref(&t)).unwrap();
        assert_eq!((r.viou, r.tiou), (0.0, 0.0));
        assert!(matches!(evaluate(&[t.clone(), t.clone()], &[t]), Err(Error::DuplicateId(_))));
    }

    #[test]
    fn rendering() {
        let r = MetricsReport {
            viou_at_03: 100.0,
            viou_at_05: 50.0,
            tiou: 75.0,
            viou: 50.0,
            n_samples: 2,
        };
        assert_eq!(
            r.render_csv(),
            "metric,value\nviou@0.3,100.0\nviou@0.5,50.0\ntiou,75.0\nviou,50.0\nn_samples,2\n"
        );
        assert!(r.render_table().contains("viou@0.3"));
    }
}
