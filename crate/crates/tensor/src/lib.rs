//! Minimal dense tensor library with reverse-mode automatic differentiation.
//!
//! Everything is CPU, row-major and eager. A [`Graph`] records the forward
//! pass dynamically; [`Graph::backward`] walks the tape in reverse and
//! accumulates gradients into the trainable [`Param`]s that participated.
//! `f32` is the working precision for training and inference, `f64` is used
//! where finite-difference gradient checking needs tight tolerances.

mod error;
mod gradcheck;
mod graph;
mod ops;
mod param;
mod rng;
mod scalar;
mod tensor;

pub use error::TensorError;
pub use gradcheck::{gradcheck, jitter_params, GradCheckConfig, GradCheckReport};
pub use graph::{Graph, ValueId};
pub use ops::BnStats;
pub use param::{Param, ParamRef, ParamStore};
pub use rng::Rng;
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Result<T> = std::result::Result<T, TensorError>;
