//! Ridge-path instrumental variables estimation.
//!
//! The crate is organised around the pieces of the estimator:
//!
//! - [`model`]: the simulated linear IV design, datasets and the train/test split.
//! - [`estimators`]: 2SLS, the ridge path, the test-sample objective and the
//!   two-stage search for the regularization parameter.
//! - [`gmm`]: the stacked, just-identified moment system that contains both
//!   first order conditions, and its parameter layout.
//! - [`asymptotics`]: the expected Jacobian, the CLT covariance and the
//!   cone-projected limit law of the joint estimator.
//! - [`harness`]: the Monte Carlo design, aggregation and table output.

// Negated comparisons are how NaN inputs get rejected alongside bad values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod asymptotics;
pub mod error;
pub mod estimators;
pub mod gmm;
pub mod harness;
pub mod linalg;
pub mod model;
pub mod rng;

pub use error::{Error, Result};
pub use estimators::{
    q_derivatives, ridge_beta, ridge_path_estimate, select_alpha, test_objective, tsls,
    RegularizationClass, RidgeConfig, RidgeFit,
};
pub use model::{generate_dataset, Dataset, DatasetView, ModelSpec};
