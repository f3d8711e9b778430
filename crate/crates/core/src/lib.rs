//! Whole-body segmentation by keypoint transfer.
//!
//! Salient scale-space keypoints of a test volume are matched to keypoints of
//! labelled training volumes, each test keypoint votes an organ label from its
//! matches, and whole organ masks are shifted along consistent matches and
//! fused into a labelling.

pub mod config;
pub mod descriptor;
pub mod error;
pub mod eval;
pub mod filter;
pub mod interchange;
pub mod matching;
pub mod nrrd;
pub mod phantom;
pub mod pipeline;
pub mod scalespace;
pub mod transfer;
pub mod volume;
pub mod voting;

pub use config::{parse_config, PipelineConfig};
pub use error::{Error, Result};
