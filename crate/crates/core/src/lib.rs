//! Bottleneck-residual CNN engine for binary malaria cell classification.
//!
//! The crate is self-contained: a small tensor type with reverse-mode
//! gradients, the ResNet50-style network built from it, and the pipeline
//! pieces around it (dataset ingestion, training, evaluation, checkpoints).

pub mod checkpoint;
pub mod data;
pub mod eval;
pub mod fixtures;
pub mod gradcheck;
pub mod kernels;
pub mod model;
pub mod param;
pub mod scalar;
pub mod tape;
pub mod tensor;
pub mod train;

pub use model::{Architecture, ModelError, ModelGraph, CLASS_NAMES};
pub use param::{ParamId, ParamStore, ParamTensor};
pub use scalar::{DType, Scalar};
pub use tape::{GradTape, Gradients, Var};
pub use tensor::{Mode, Padding, Tensor, TensorError};
