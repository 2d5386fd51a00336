//! LATIS: lightweight single-image super-resolution for thermal imagery.
//!
//! The crate contains a small reverse-mode differentiation engine
//! ([`tensor`]), the network built on it ([`layers`]), the content and
//! patch-wise histogram losses ([`losses`]), resampling and quality metrics
//! ([`metrics`]), image I/O and batch sampling ([`data`]) and the optimizer,
//! training loop and checkpoint format ([`training`]). [`checks`] bundles
//! the finite-difference gradient suite.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below name the two concrete instantiations.

pub mod checks;
pub mod data;
pub mod error;
pub mod layers;
pub mod losses;
pub mod metrics;
pub mod scalar;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use layers::{Latis, ModelConfig, Parameters};
pub use metrics::Image;
pub use tensor::{Graph, Tensor, Var};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;
pub type Image32 = Image<f32>;
pub type Image64 = Image<f64>;
pub type Latis32 = Latis<f32>;
pub type Latis64 = Latis<f64>;
