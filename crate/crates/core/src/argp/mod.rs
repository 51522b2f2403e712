//! Autoregressive multi-fidelity Gaussian process: data, hyperparameters,
//! block covariance, likelihood, prediction, and nested-design estimates.

mod covariance;
mod data;
mod likelihood;
mod nested;
mod params;
mod predict;

pub use covariance::{assemble_covariance, cross_covariance, prior_variance};
pub use data::{FidelityDataset, FidelityLevel, Standardization};
pub use likelihood::{evaluate, log_likelihood, log_likelihood_grad_phi, log_likelihood_grad_w, LikelihoodEval, Wants};
pub use nested::{nested_mle_level, NestedLevelEstimate};
pub(crate) use nested::nested_level_eval;
pub use params::{LevelHyperParams, PhiVector, MIN_NOISE2};
pub use predict::{ArgpModel, Prediction};
