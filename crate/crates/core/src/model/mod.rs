//! The grounding network: moment map → query fusion → masked conv stack →
//! per-moment matching score, plus its loss, checkpoints and training loop.

mod checkpoint;
mod loss;
mod net;
mod train;

use crate::error::{Error, Result};
use crate::numerics::Mask;

pub use checkpoint::{load_checkpoint, save_checkpoint, sidecar_path};
pub use loss::{bce_loss, bce_loss_and_grad, scaled_iou_targets, BCE_CLAMP};
pub use net::{check_model_gradients, fuse_and_score, ConvLayer, Dense, ForwardPass, GroundingModel, ModelConfig, SampleGradient};
pub use train::{
    train, train_with, PlainSampler, RcaSampler, StepInput, StepRecord, StepSampler, TrainConfig,
    TrainOutcome,
};

/// Matching scores over an `N × N` map: in `(0, 1)` on valid cells, exactly
/// zero elsewhere.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMap {
    mask: Mask,
    scores: Vec<f64>,
}

impl ScoreMap {
    pub fn new(mask: Mask, scores: Vec<f64>) -> Result<Self> {
        if scores.len() != mask.n() * mask.n() {
            return Err(Error::ShapeMismatch(format!(
                "{} scores for a {}x{} map",
                scores.len(),
                mask.n(),
                mask.n()
            )));
        }
        for (k, (s, valid)) in scores.iter().zip(mask.cells()).enumerate() {
            if !s.is_finite() || (!valid && *s != 0.0) {
                return Err(Error::InvariantViolation(format!("score {s} at cell {k}")));
            }
        }
        Ok(ScoreMap { mask, scores })
    }

    pub fn n(&self) -> usize {
        self.mask.n()
    }

    pub fn mask(&self) -> &Mask {
        &self.mask
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    /// 0-based cell lookup.
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.scores[row * self.n() + col]
    }

    /// Multiplies every score by `k`; used to check argmax invariance.
    pub fn scaled(&self, k: f64) -> ScoreMap {
        ScoreMap {
            mask: self.mask.clone(),
            scores: self.scores.iter().map(|s| s * k).collect(),
        }
    }
}
