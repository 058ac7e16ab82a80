//! Differentiable tensor kernels.

pub mod conv;
pub mod elementwise;
pub mod linear;
pub mod norm;
pub mod pool;

pub use conv::{conv2d_grouped_bwd, conv2d_grouped_fwd, unfold, ConvCache, ConvGrads, ConvSpec};
pub use elementwise::{mul_bwd, mul_fwd, sigmoid};
pub use linear::{linear_bwd, linear_fwd};
pub use norm::{BatchNorm, BnCache, Mode};
pub use pool::{global_avg_pool_bwd, global_avg_pool_fwd, max_pool2_bwd, max_pool2_fwd};
