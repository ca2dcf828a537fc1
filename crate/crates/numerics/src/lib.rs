//! Dense row-major tensors and a tape-based reverse-mode gradient engine for
//! the fixed operator set used by the segmentation network and its losses.
//!
//! Everything is generic over [`Scalar`] so that models train in `f32` and the
//! finite-difference checks can run the same code paths in `f64`.

mod checkpoint;
mod error;
mod gradcheck;
mod graph;
mod params;
mod scalar;
mod tensor;

pub use checkpoint::{
    read_checkpoint, write_checkpoint, CheckpointRecord, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use error::{NumericsError, Result};
pub use gradcheck::{
    check_op, finite_diff_check, primitive_suite, GradCheckReport, GRAD_FLOOR, SUITE_EPS,
    SUITE_SAMPLES,
};
pub use graph::{Graph, Var};
pub use params::{Gradients, ParamId, ParamStore, Parameter};
pub use scalar::Scalar;
pub use tensor::Tensor;

/// Label value that marks a pixel as ignored / uncertain in every
/// label-consuming operator.
pub const IGNORE_LABEL: u8 = 255;
