//! Estimation of parameters of unnormalized statistical models by minimizing
//! kernelized and score-based discrepancies that depend on the model only
//! through its log-density gradient.
//!
//! The crate is organized as a stack:
//!
//! * [`model`] — unnormalized log-densities with analytic derivatives,
//! * [`kernel`] — scalar and matrix-valued reproducing kernels,
//! * [`diffusion`] — the matrix field that weights the score inside the
//!   discrepancy operators,
//! * [`steinkern`] — the pair kernel obtained by applying the weighted score
//!   operator to both kernel slots,
//! * [`estimators`] — empirical losses, gradients, information matrices and
//!   sandwich covariances,
//! * [`expfam`] — closed-form quadratic solvers for natural exponential
//!   families,
//! * [`optim`] — (preconditioned) stochastic gradient descent and grid scans,
//! * [`robust`] — influence functions and boundedness diagnostics,
//! * [`harness`] — samplers, experiment presets, replication studies, and the
//!   configuration types consumed by the CLI.

pub mod diffusion;
pub mod error;
pub mod estimators;
pub mod expfam;
pub mod harness;
pub mod kernel;
pub mod linalg;
pub mod model;
pub mod num;
pub mod optim;
pub mod parallel;
pub mod robust;
pub mod special;
pub mod steinkern;

pub use error::{Error, Result};
