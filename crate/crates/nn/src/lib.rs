//! Minimal differentiable tensor substrate.
//!
//! Layers own their parameters and expose explicit `forward` / `backward`
//! pairs: `forward` returns the output together with whatever the backward
//! pass needs, and `backward` accumulates parameter gradients and returns the
//! input gradient. There is no tape; models compose layers by hand.

pub mod activation;
pub mod adam;
pub mod checkpoint;
pub mod conv;
pub mod dense;
pub mod error;
mod gemm;
pub mod gradcheck;
pub mod loss;
pub mod module;
pub mod norm;
pub mod pool;
pub mod probes;
pub mod tensor;

pub use activation::Activation;
pub use adam::AdamState;
pub use checkpoint::Checkpoint;
pub use conv::{Conv2d, ConvCache, Padding};
pub use dense::{Dense, DenseCache};
pub use error::{NnError, Result};
pub use gradcheck::{grad_check, ScalarGraph};
pub use loss::{softmax, softmax_cross_entropy};
pub use module::{scoped, Mode, Module};
pub use norm::{BatchNorm, BnCache};
pub use pool::{channel_pool, channel_pool_backward, global_avg_pool, global_avg_pool_backward};
pub use tensor::Tensor;
