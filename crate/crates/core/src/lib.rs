//! Domain-level gradient variance matching for out-of-distribution
//! generalization on small networks.
//!
//! The crate bundles:
//! - [`nn`]: ReLU MLPs with per-sample backpropagation and Adam
//! - [`stats`]: per-domain gradient statistics (mean, variances, covariance, EMA)
//! - [`penalties`]: Fishr, V-REx, IGA, Fish-dot and IRMv1 objectives
//! - [`datasets`]: MNIST IDX parsing, Colored MNIST and synthetic domains
//! - [`hessian`]: Hessian-diagonal checks and invariance reports
//! - [`inconsistency`]: inconsistency scores on quadratic landscapes
//! - [`trainer`]: experiment runners and suites

pub mod datasets;
pub mod error;
pub mod hessian;
pub mod inconsistency;
pub mod linalg;
pub mod nn;
pub mod penalties;
pub mod rng;
pub mod stats;
pub mod trainer;

pub use error::{FishrError, Result};
