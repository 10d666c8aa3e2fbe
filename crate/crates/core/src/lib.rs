//! Episodic few-shot learning engine.
//!
//! A from-scratch stack: dense tensors with reverse-mode autodiff, a Conv-64F
//! embedding network, three metric streams (appearance, correlation-matrix
//! relation, local-global mutual information), MSE/CEL objectives with fixed
//! or uncertainty-learned stream weights, and an episodic sampler.

pub mod adam;
pub mod check;
pub mod embedding;
pub mod episodes;
pub mod error;
pub mod gemm;
pub mod graph;
pub mod init;
pub mod model;
pub mod objective;
pub mod param;
pub mod scalar;
pub mod streams;
pub mod synth;
pub mod tensor;

pub use adam::Adam;
pub use error::{Error, Result};
pub use graph::{Graph, VarId};
pub use model::{FewShotModel, ModelConfig};
pub use param::{Param, ParamSet};
pub use scalar::Scalar;
pub use tensor::Tensor;

/// Default-precision aliases. `f64` is the reference precision; `f32` is the
/// fast path for training runs.
pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
