//! Joint modelling of multiple logistic longitudinal markers and competing
//! time-to-event outcomes through a shared latent disease age.
//!
//! Each patient carries three random effects (a log speed factor `xi`, an
//! individual reference time `tau` and a low-dimensional source vector `s`)
//! that remap chronological age onto a common disease timeline and shift both
//! the ordering of the longitudinal outcomes (space shifts `w = A s`) and the
//! cause-specific hazards (survival shifts `u = zeta s`). Outcomes follow
//! logistic curves in latent age; events follow cause-specific Weibull hazards
//! with a proportional effect of the survival shifts.
//!
//! The crate provides:
//!
//! - [`model`]: the model algebra (latent age, geometry, trajectories,
//!   hazard, survival, cumulative incidence),
//! - [`likelihood`]: the joint log-likelihood, its analytic Jacobian with
//!   respect to the random effects, and the sufficient-statistic
//!   decomposition used by the estimator,
//! - [`simulate`]: synthetic-cohort generation, with an optional severed
//!   longitudinal–survival link for diagnostics,
//! - [`saem`]: MCMC-SAEM estimation (block Metropolis–Hastings, stochastic
//!   approximation of sufficient statistics, closed-form maximisation,
//!   averaged final estimate),
//! - [`personalize`]: MAP estimation of random effects for new patients and
//!   conditional event predictions,
//! - [`metrics`]: simulation-study estimator metrics, predictive survival
//!   metrics and an extended BIC for source selection,
//! - [`aft`]: a cause-specific Weibull AFT baseline and the latent-age
//!   diagnostic built on it,
//! - [`params_io`]: flat key-value parameter documents and CSV formats.

// Numeric kernels iterate several parallel arrays by index, probabilities are
// validated with NaN-catching negated comparisons, and special-function
// coefficients keep their published precision.
#![allow(clippy::needless_range_loop)]
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::excessive_precision)]

pub mod aft;
pub mod data;
pub mod error;
pub mod likelihood;
pub mod math;
pub mod metrics;
pub mod model;
pub mod params_io;
pub mod personalize;
pub mod saem;
pub mod simulate;

pub use error::{Error, Result};
pub use model::{FixedEffects, Geometry, Hyperparameters, RandomEffects};
