//! Parameter-update engines: Geodesic Monte Carlo over the projection,
//! Metropolis–Hastings over the hyperparameters, and quasi-Newton maximum
//! likelihood.

mod bfgs;
mod gmc;
mod mh;
mod mle;
mod trace;

pub use bfgs::{bfgs_minimize, BfgsOptions, BfgsResult};
pub use gmc::{
    gmc_sample_until_accept, gmc_step, gmc_step_bounded, gmc_trajectory, metropolis_accept, GmcConfig, GmcOutcome, GmcPoint, GmcStep, StiefelTarget, WPosterior,
};
pub use mh::{
    log_prior_free, mh_phi_run, mh_phi_step, ArgpPhiTarget, MhConfig, MhRun, MhState, PhiPriors, PhiTarget,
};
pub use mle::{mle_optimize_phi, nested_fit_level, MleMode, MleOptions, MleResult};
pub use trace::{ChainTrace, TraceRecord};
