//! Hierarchical semi-supervised severity grading on image data.
//!
//! The crate is generic over the floating-point type through [`Real`]. The
//! aliases at the crate root fix it to `f64`, the precision of the gradient
//! and simulator checks; the command-line tool picks `f32` or `f64` from its
//! `precision` setting (default `f32`).

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod him;
pub mod nn;
pub mod mirec;
pub mod qcn;
pub mod qtest;
pub mod rng;
pub mod scalar;
pub mod sirl;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Real;

/// Library default precision.
pub type Scalar = f64;
pub type Tensor = tensor::Tensor<Scalar>;
pub type Tape = nn::Tape<Scalar>;
pub type ParamStore = nn::ParamStore<Scalar>;
