//! Multi-stage cross-lingual distillation of compact sentence encoders.
//!
//! The numeric core is generic over the element type ([`Scalar`]); training
//! runs at 32-bit width and gradient verification at 64-bit. The aliases at
//! the crate root name the two concrete widths.

// `!(x > 0.0)` deliberately rejects NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::should_implement_trait)]

pub mod accountant;
pub mod autodiff;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod losses;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod rng;
pub mod scalar;
pub mod tensor;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use optim::{AdamWConfig, OptimizerState};
pub use params::{BoundParams, ParamId, ParamStore};
pub use rng::Rng;
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
