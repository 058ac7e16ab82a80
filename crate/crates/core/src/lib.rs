//! Kolmogorov-Arnold convolutions on CPU.
//!
//! The crate provides a small dense tensor library with hand-written
//! backward passes, the KA convolution layer and its activation functions,
//! the KAConvNet and KAVGG11 model families, and a training loop with
//! AdamW, checkpoints and CSV logging.
//!
//! Kernels run on rayon when the `parallel` feature is on (the default) and
//! sequentially otherwise; both produce bit-identical results.

pub mod ablation;
pub mod activations;
pub mod bench;
pub mod error;
pub mod gradcheck;
pub mod kaconv;
pub mod network;
pub mod ops;
pub mod parallel;
pub mod scalar;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;
