//! Differentially private Gaussian-process regression.
//!
//! Two release mechanisms protect the training outputs of a GP regression:
//!
//! * [`rkhs`]: the posterior mean plus a GP-prior sample scaled by the RKHS
//!   sensitivity `d * b(K^-1) * c(delta) / epsilon`.
//! * [`cloaking`]: for test points known in advance, Gaussian noise whose
//!   covariance is optimised to cover exactly the directions a single
//!   training output can move the predictions.
//!
//! [`hyperparam`] selects kernel hyperparameters with the exponential
//! mechanism over cross-validated SSE, [`baselines`] provides the DP
//! binning comparisons, and [`harness`] ties everything to datasets, configs
//! and reports.

pub mod baselines;
pub mod cloaking;
pub mod error;
pub mod gp;
pub mod harness;
pub mod hyperparam;
pub mod kernel;
pub mod linalg;
pub mod release;
pub mod rkhs;

pub use error::{Error, Result};
pub use gp::GpModel;
pub use kernel::{KernelFamily, KernelSpec};
pub use release::{DpParams, Mechanism, PreparedRelease, PrivacyReport, ReleaseResult};
