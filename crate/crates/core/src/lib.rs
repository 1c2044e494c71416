//! Differentially private training with group-wise per-example gradient
//! clipping.
//!
//! Per-example gradients of each Linear layer are clipped as soon as
//! backpropagation reaches that layer, using norms computed from the layer's
//! input activations and output gradients, so the `B x d` matrix of
//! per-example gradients is never formed. Thresholds can be fixed or adapted
//! online to a target quantile of the per-layer norm distribution. A
//! deterministic simulator covers per-device clipping under pipeline
//! parallelism.

// `!(x > 0.0)` is used on purpose: it rejects NaN along with the bad range.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod clip;
pub mod error;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod privacy;
pub mod quantile;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
