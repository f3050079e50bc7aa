//! Mean-field laboratory for weight-tied two-layer autoencoders trained on
//! Gaussian (and Gaussian-like) data.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod activations;
pub mod compare;
pub mod config;
pub mod coupling;
pub mod csvout;
pub mod error;
pub mod idx;
pub mod linalg;
pub mod mf_bounded;
pub mod mf_relu;
pub mod ode;
pub mod preprocess;
pub mod quadrature;
pub mod rng;
pub mod runner;
pub mod sgd;
pub mod spectral;
pub mod two_stage;

pub use activations::Activation;
pub use error::{Error, Result};
pub use rng::Stream;
pub use sgd::WeightMatrix;
pub use spectral::{Blocks, Rotation, SpectralModel, TwoBlockModel};
