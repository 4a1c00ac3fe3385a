//! Approximate message passing with Gaussian-mixture denoisers, its unfolded
//! learned variant (LGM-AMP), and a Monte-Carlo evaluation harness.
//!
//! Numerical code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the double-precision types used by the harness and CLI.

// `!(x > 0.0)` is used on purpose: it also rejects NaN. Index loops are kept
// where several per-component arrays advance together.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod amp;
pub mod config;
pub mod error;
pub mod gm_prior;
pub mod harness;
pub mod quadrature;
pub mod scalar;
pub mod unfolded;

pub use config::{ExperimentConfig, PriorSpec};
pub use error::{Error, Result};
pub use gm_prior::GaussianMixture;
pub use scalar::Scalar;
pub use unfolded::{LampModel, TrainConfig};

pub type Gm = GaussianMixture<f64>;
pub type Model = LampModel<f64>;
pub type Exp = harness::Experiment<f64>;
