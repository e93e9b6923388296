//! Pipeline data: clip features, query embeddings, grounding samples, their
//! on-disk formats and the seeded synthetic generators.

mod annotations;
mod features;
mod synth;

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use crate::error::{Error, Result};

pub use annotations::{
    load_annotations, load_dataset, parse_annotations, render_annotations, write_annotations,
    write_dataset, AnnotationRecord,
};
pub use features::{
    decode_features, encode_features, load_features, load_query_embedding, write_features,
    write_query_embedding, FEATURE_HEADER_LEN, FEATURE_MAGIC, FEATURE_VERSION,
};
pub use synth::{
    synth_localization, synth_order_task, synth_tubes, LocalizationConfig, OrderTaskConfig,
    SYNTH_FRAME_RATE,
};

/// Per-video matrix of clip features, one row per clip.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipFeatureSequence {
    video_id: String,
    n_clips: usize,
    dim: usize,
    data: Vec<f32>,
}

impl ClipFeatureSequence {
    pub fn new(video_id: impl Into<String>, n_clips: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if n_clips == 0 || dim == 0 {
            return Err(Error::InvariantViolation(format!(
                "feature sequence needs n_clips >= 1 and dim >= 1, got {n_clips}x{dim}"
            )));
        }
        if data.len() != n_clips * dim {
            return Err(Error::InvariantViolation(format!(
                "{n_clips}x{dim} features need {} values, got {}",
                n_clips * dim,
                data.len()
            )));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvariantViolation(format!("non-finite feature at index {index}")));
        }
        Ok(ClipFeatureSequence {
            video_id: video_id.into(),
            n_clips,
            dim,
            data,
        })
    }

    /// Builds a sequence from rows, checking they all share one dimension.
    pub fn from_rows(video_id: impl Into<String>, rows: &[&[f32]]) -> Result<Self> {
        let dim = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::InvariantViolation("ragged feature rows".into()));
        }
        Self::new(video_id, rows.len(), dim, rows.concat())
    }

    pub fn video_id(&self) -> &str {
        &self.video_id
    }

    pub fn n_clips(&self) -> usize {
        self.n_clips
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Feature row of clip `clip`, 1-based.
    pub fn clip(&self, clip: usize) -> &[f32] {
        assert!(clip >= 1 && clip <= self.n_clips, "clip {clip} out of 1..={}", self.n_clips);
        &self.data[(clip - 1) * self.dim..clip * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.dim)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QueryRecord {
    pub query_id: String,
    pub embedding: Vec<f32>,
    pub text: String,
    pub subject_override: Option<String>,
}

impl QueryRecord {
    pub fn validate(&self) -> Result<()> {
        if self.embedding.is_empty() {
            return Err(Error::InvariantViolation(format!("{}: empty embedding", self.query_id)));
        }
        if self.embedding.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvariantViolation(format!(
                "{}: non-finite embedding",
                self.query_id
            )));
        }
        Ok(())
    }
}

/// One training/evaluation example: a video's clip features, a query and the
/// 1-based inclusive clip interval the query refers to.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundingSample {
    pub features: Arc<ClipFeatureSequence>,
    pub query: QueryRecord,
    pub gt_start: usize,
    pub gt_end: usize,
    pub frame_rate: f64,
}

impl GroundingSample {
    pub fn new(
        features: Arc<ClipFeatureSequence>,
        query: QueryRecord,
        gt_start: usize,
        gt_end: usize,
        frame_rate: f64,
    ) -> Result<Self> {
        let s = GroundingSample {
            features,
            query,
            gt_start,
            gt_end,
            frame_rate,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.features.n_clips();
        if self.gt_start < 1 || self.gt_start > self.gt_end || self.gt_end > n {
            return Err(Error::GtOutOfRange {
                id: self.query.query_id.clone(),
                start: self.gt_start,
                end: self.gt_end,
                n_clips: n,
            });
        }
        if !(self.frame_rate.is_finite() && self.frame_rate > 0.0) {
            return Err(Error::InvariantViolation(format!(
                "{}: frame rate {} is not positive",
                self.query.query_id, self.frame_rate
            )));
        }
        self.query.validate()
    }

    pub fn id(&self) -> &str {
        &self.query.query_id
    }

    pub fn video_id(&self) -> &str {
        self.features.video_id()
    }

    pub fn n_clips(&self) -> usize {
        self.features.n_clips()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidConfig(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub samples: Vec<GroundingSample>,
    pub split: Split,
    pub seed: u64,
}

impl DatasetManifest {
    pub fn new(samples: Vec<GroundingSample>, split: Split, seed: u64) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for s in &samples {
            if !seen.insert(s.id()) {
                return Err(Error::DuplicateId(s.id().to_string()));
            }
        }
        Ok(DatasetManifest { samples, split, seed })
    }
}

/// Ids double as file names, so they are restricted to a portable alphabet.
pub(crate) fn check_id(id: &str) -> Result<()> {
    let ok = !id.is_empty()
        && id != "-"
        && id
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || matches!(b, b'_' | b'-' | b'.'))
        && !id.starts_with('.');
    if ok {
        Ok(())
    } else {
        Err(Error::InvariantViolation(format!("invalid id {id:?}")))
    }
}
