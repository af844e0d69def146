//! Black-box variational inference for Bayesian logistic regression with
//! large ensembles of control variates and a regularized weighting rule.
//!
//! The objective is the ELBO divided by the number of examples. Gradients are
//! flat vectors over the mean and the lower triangle of the Cholesky factor
//! (see [`varfam::FlatGradient`]).

pub mod combiner;
pub mod checks;
pub mod cv;
pub mod error;
pub mod engine;
pub mod estimators;
pub mod fd;
pub mod harness;
pub mod linalg;
pub mod model;
pub mod par;
pub mod rng;
pub mod stats;
pub mod synthetic;
pub mod varfam;

pub use cv::{CvId, CvMatrix, CvSet};
pub use error::{Error, LinalgError, Result};
pub use model::Dataset;
pub use varfam::{FlatGradient, Gaussian, VariationalParams};
