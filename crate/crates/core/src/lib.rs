//! Measuring and mitigating the per-group accuracy cost of ReLU linearization.
//!
//! The crate is organised bottom-up:
//!
//! - [`autodiff`]: tape-based reverse-mode differentiation, Hessian-vector
//!   products and power iteration.
//! - [`model`]: dense classifiers whose hidden units carry a gate between
//!   rectified and linear behaviour, plus the two linearization schemes.
//! - [`data`]: grouped datasets, synthetic generators, CSV ingestion, splits.
//! - [`trainer`]: base training, distillation fine-tuning and the
//!   multiplier-based fairness fine-tuning loop.
//! - [`audit`]: per-group accuracy, loss, gradient norm, curvature,
//!   boundary distance and the residual-loss bounds.
//! - [`theory`]: piecewise-linear approximation rates and linear-region
//!   counting for scalar ReLU networks.

pub mod audit;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod model;
pub mod theory;
pub mod trainer;

mod rng;

pub use error::{Error, Result};
