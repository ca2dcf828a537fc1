//! Pinhole-to-panorama semantic segmentation adaptation at desk scale.
//!
//! Panoramas are cut into overlapping square windows that a small
//! memory-conditioned segmenter reads like video frames. A source-trained model
//! is adapted to panoramas with pseudo-labels fused across windows and
//! per-frame class prototypes aligned to running source prototypes.

pub mod error;
pub mod eval;
pub mod experiment;
pub mod geometry;
pub mod losses;
pub mod optim;
pub mod pseudolabel;
pub mod report;
pub mod segnet;
pub mod selftest;
pub mod synth;
pub mod train;

pub use error::{Error, Result};

/// Label value for ignored or uncertain pixels.
pub const IGNORE: u8 = panoseg_numerics::IGNORE_LABEL;
