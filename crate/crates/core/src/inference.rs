//! Decoding the best moment from a score map and averaging score maps across
//! models.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::datastore::GroundingSample;
use crate::model::{GroundingModel, ScoreMap};
use crate::numerics::Real;
use crate::moment_map::Proposal;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MomentPrediction {
    pub proposal: Proposal,
    pub score: f64,
}

/// Argmax over valid cells. Scanning row-major with a strict comparison makes
/// ties resolve to the smallest start, then the smallest end.
pub fn decode_best_moment(map: &ScoreMap) -> Result<MomentPrediction> {
    let n = map.n();
    let mut best: Option<(usize, usize, f64)> = None;
    for i in 0..n {
        for j in i..n {
            if !map.mask().get(i, j) {
                continue;
            }
            let s = map.get(i, j);
            if best.is_none_or(|(_, _, b)| s > b) {
                best = Some((i, j, s));
            }
        }
    }
    let (i, j, score) = best.ok_or(Error::EmptyInput("score map has no valid cell"))?;
    Ok(MomentPrediction {
        proposal: Proposal::new(i + 1, j + 1)?,
        score,
    })
}

/// Cell-wise arithmetic mean; all maps must share `N` and mask.
pub fn ensemble_scores(maps: &[ScoreMap]) -> Result<ScoreMap> {
    let first = maps.first().ok_or(Error::EmptyInput("no score maps to ensemble"))?;
    if maps.iter().any(|m| m.mask() != first.mask()) {
        return Err(Error::MaskMismatch);
    }
    let len = first.scores().len();
    let mut sum = vec![0.0f64; len];
    for m in maps {
        for (s, v) in sum.iter_mut().zip(m.scores()) {
            *s += *v;
        }
    }
    let k = maps.len() as f64;
    let scores = sum
        .into_iter()
        .zip(first.mask().cells())
        .map(|(s, valid)| if *valid { s / k } else { 0.0 })
        .collect();
    ScoreMap::new(first.mask().clone(), scores)
}

/// One line of a temporal prediction file.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionRecord {
    pub video_id: String,
    pub query_id: String,
    pub prediction: MomentPrediction,
}

/// Tab-separated `video_id  query_id  pred_start_clip  pred_end_clip  score`.
pub fn render_predictions(records: &[PredictionRecord]) -> String {
    records
        .iter()
        .map(|r| {
            format!(
                "{}\t{}\t{}\t{}\t{}\n",
                r.video_id,
                r.query_id,
                r.prediction.proposal.start(),
                r.prediction.proposal.end(),
                r.prediction.score
            )
        })
        .collect()
}

pub fn parse_predictions(text: &str) -> Result<Vec<PredictionRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, line)| {
            let err = |message: String| Error::Parse { line: i + 1, message };
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 5 {
                return Err(err(format!("expected 5 fields, found {}", f.len())));
            }
            let idx = |s: &str| s.parse::<usize>().map_err(|e| err(format!("{s:?}: {e}")));
            let score: f64 = f[4].parse().map_err(|e| err(format!("score {:?}: {e}", f[4])))?;
            Ok(PredictionRecord {
                video_id: f[0].to_string(),
                query_id: f[1].to_string(),
                prediction: MomentPrediction {
                    proposal: Proposal::new(idx(f[2])?, idx(f[3])?).map_err(|e| err(e.to_string()))?,
                    score,
                },
            })
        })
        .collect()
}

pub fn write_predictions(records: &[PredictionRecord], path: &Path) -> Result<()> {
    fs::write(path, render_predictions(records)).map_err(|e| Error::io(path, e))
}

pub fn load_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_predictions(&text)
}

/// Per-member outcomes of the order-discrimination probe.
#[derive(Clone, Debug, PartialEq)]
pub struct PairDiscrimination {
    /// Fraction of members whose own segment, scored in isolation, beats the
    /// partner segment under the member's query. Ties count one half.
    pub isolated_accuracy: f64,
    /// Same comparison read off the full score map at the two gt cells.
    pub map_accuracy: f64,
    /// `(own, partner)` isolated scores per member.
    pub isolated_scores: Vec<(f64, f64)>,
}

fn gt_segment(s: &GroundingSample) -> Vec<&[f32]> {
    (s.gt_start..=s.gt_end).map(|t| s.features.clip(t)).collect()
}

fn credit(own: f64, partner: f64) -> f64 {
    if own > partner {
        1.0
    } else if own == partner {
        0.5
    } else {
        0.0
    }
}

/// Evaluates a model on paired samples where `2k` and `2k + 1` share a video
/// and each member's gt is the other's distractor.
pub fn pair_discrimination<T: Real>(model: &GroundingModel<T>, samples: &[GroundingSample]) -> Result<PairDiscrimination> {
    if samples.is_empty() || !samples.len().is_multiple_of(2) {
        return Err(Error::InvalidConfig(format!(
            "pair probe needs an even, non-zero number of samples, got {}",
            samples.len()
        )));
    }
    let mut isolated_scores = Vec::with_capacity(samples.len());
    let (mut iso, mut full) = (0.0, 0.0);
    for pair in samples.chunks(2) {
        if pair[0].video_id() != pair[1].video_id() {
            return Err(Error::InvalidConfig(format!(
                "{} and {} are not from the same video",
                pair[0].id(),
                pair[1].id()
            )));
        }
        for (me, other) in [(&pair[0], &pair[1]), (&pair[1], &pair[0])] {
            let q = &me.query.embedding;
            let own = model.score_moment(&gt_segment(me), q)?;
            let partner = model.score_moment(&gt_segment(other), q)?;
            iso += credit(own, partner);
            isolated_scores.push((own, partner));
            let map = model.score(&me.features, q)?;
            full += credit(
                map.get(me.gt_start - 1, me.gt_end - 1),
                map.get(other.gt_start - 1, other.gt_end - 1),
            );
        }
    }
    let m = samples.len() as f64;
    Ok(PairDiscrimination {
        isolated_accuracy: iso / m,
        map_accuracy: full / m,
        isolated_scores,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::moment_map::validity_mask;

    fn map(n: usize, scores: Vec<f64>) -> ScoreMap {
        ScoreMap::new(validity_mask(n).unwrap(), scores).unwrap()
    }

    #[test]
    fn direct_argmax() {
        let p = decode_best_moment(&map(2, vec![0.1, 0.9, 0.0, 0.3])).unwrap();
        assert_eq!(p.proposal.bounds(), (1, 2));
        assert_eq!(p.score, 0.9);
    }

    #[test]
    fn ties_go_to_first_cell() {
        let p = decode_best_moment(&map(3, vec![0.5, 0.5, 0.5, 0.0, 0.5, 0.5, 0.0, 0.0, 0.5])).unwrap();
        assert_eq!(p.proposal.bounds(), (1, 1));
    }

    #[test]
    fn mean_of_maps() {
        let a = map(1, vec![0.2]);
        let b = map(1, vec![0.6]);
        let m = ensemble_scores(&[a.clone(), b]).unwrap();
        assert!((m.get(0, 0) - 0.4).abs() < 1e-15);
        let same = ensemble_scores(&[a.clone(), a.clone(), a.clone()]).unwrap();
        assert!((same.get(0, 0) - 0.2).abs() < 1e-12);
        assert!(matches!(ensemble_scores(&[]), Err(Error::EmptyInput(_))));
        assert!(matches!(
            ensemble_scores(&[a, map(2, vec![0.1, 0.2, 0.0, 0.3])]),
            Err(Error::MaskMismatch)
        ));
    }

    #[test]
    fn prediction_lines_roundtrip() {
        let recs = vec![PredictionRecord {
            video_id: "v1".into(),
            query_id: "q1".into(),
            prediction: MomentPrediction {
                proposal: Proposal::new(2, 5).unwrap(),
                score: 0.123456789012345,
            },
        }];
        let text = render_predictions(&recs);
        assert_eq!(text, "v1\tq1\t2\t5\t0.123456789012345\n");
        assert_eq!(parse_predictions(&text).unwrap(), recs);
        assert!(parse_predictions("v\tq\t3\t2\t0.5\n").is_err());
    }
}
