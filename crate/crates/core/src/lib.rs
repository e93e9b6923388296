//! Two-stage spatio-temporal video grounding.
//!
//! Stage one scores every contiguous clip span of a video against a sentence
//! embedding on a 2D moment map and decodes the best span. Stage two picks one
//! referring-detector box per frame inside that span with a small set of
//! token rules. The crate also carries the evaluation metrics (tIoU, vIoU),
//! seeded synthetic datasets and the file formats that tie the stages together.

pub mod aggregators;
pub mod datastore;
pub mod error;
pub mod inference;
pub mod metrics;
pub mod model;
pub mod moment_map;
pub mod numerics;
pub mod rca;
pub mod rng;
pub mod spatial;

pub use error::{Error, Result};
