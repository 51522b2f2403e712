use log::warn;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::function::beta::ln_beta;
use statrs::function::gamma::ln_gamma;

use crate::argp::{log_likelihood, FidelityDataset, PhiVector};
use crate::error::{arg_err, Error, Result};
use crate::stiefel::ProjectionMatrix;

/// Priors on the hyperparameters. A `None` entry is flat in the free
/// (sampling) coordinate of that parameter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhiPriors {
    /// Beta(a, b) on `θ / (θ + theta_ref)`.
    pub lengthscale_beta: Option<[f64; 2]>,
    pub theta_ref: f64,
    /// InverseGamma(shape, scale) on `σ_t²`.
    pub signal_inv_gamma: Option<[f64; 2]>,
    /// InverseGamma(shape, scale) on `σ²_{ε_t}`.
    pub noise_inv_gamma: Option<[f64; 2]>,
    /// Normal(mean, sd) on `ρ`.
    pub rho_normal: Option<[f64; 2]>,
}

impl Default for PhiPriors {
    fn default() -> Self {
        Self {
            lengthscale_beta: Some([1.0, 0.1]),
            theta_ref: 1.0,
            signal_inv_gamma: Some([5.0, 5.0]),
            noise_inv_gamma: Some([1.0, 1e-4]),
            rho_normal: Some([0.0, 10.0]),
        }
    }
}

impl PhiPriors {
    pub fn flat() -> Self {
        Self { lengthscale_beta: None, theta_ref: 1.0, signal_inv_gamma: None, noise_inv_gamma: None, rho_normal: None }
    }

    pub fn validate(&self) -> Result<()> {
        let pos = |p: &Option<[f64; 2]>| p.is_none_or(|[a, b]| a > 0.0 && b > 0.0 && a.is_finite() && b.is_finite());
        if !(pos(&self.lengthscale_beta) && pos(&self.signal_inv_gamma) && pos(&self.noise_inv_gamma)) {
            return arg_err("prior parameters must be positive");
        }
        if !(self.theta_ref.is_finite() && self.theta_ref > 0.0) {
            return arg_err("theta_ref must be positive");
        }
        if let Some([m, sd]) = self.rho_normal {
            if !(m.is_finite() && sd.is_finite() && sd > 0.0) {
                return arg_err("rho prior needs a finite mean and positive sd");
            }
        }
        Ok(())
    }

    /// Log density of a lengthscale in natural coordinates.
    pub fn ln_theta(&self, theta: f64) -> f64 {
        let Some([a, b]) = self.lengthscale_beta else { return 0.0 };
        let r = self.theta_ref;
        let ln_u = (theta / (theta + r)).ln();
        let ln_1mu = (r / (theta + r)).ln();
        (a - 1.0) * ln_u + (b - 1.0) * ln_1mu - ln_beta(a, b) + r.ln() - 2.0 * (theta + r).ln()
    }

    pub fn ln_sigma2(&self, v: f64) -> f64 {
        self.signal_inv_gamma.map_or(0.0, |p| ln_inv_gamma(v, p))
    }

    pub fn ln_noise2(&self, v: f64) -> f64 {
        self.noise_inv_gamma.map_or(0.0, |p| ln_inv_gamma(v, p))
    }

    pub fn ln_rho(&self, rho: f64) -> f64 {
        self.rho_normal.map_or(0.0, |[m, sd]| {
            -0.5 * ((rho - m) / sd).powi(2) - sd.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
        })
    }
}

fn ln_inv_gamma(x: f64, [a, b]: [f64; 2]) -> f64 {
    a * b.ln() - ln_gamma(a) - (a + 1.0) * x.ln() - b / x
}

/// Log prior density of `phi` expressed in its free coordinates, including
/// the Jacobian of the log transform for parameters that have a prior.
pub fn log_prior_free(phi: &PhiVector, priors: &PhiPriors) -> f64 {
    let mut acc = 0.0;
    for (t, l) in phi.levels.iter().enumerate() {
        if priors.lengthscale_beta.is_some() {
            for &th in l.theta.as_slice() {
                acc += priors.ln_theta(th) + th.ln();
            }
        }
        if let Some(r) = l.rho_prev {
            if !phi.rho_pinned[t] {
                acc += priors.ln_rho(r);
            }
        }
        if priors.signal_inv_gamma.is_some() {
            acc += priors.ln_sigma2(l.sigma2) + l.sigma2.ln();
        }
        if priors.noise_inv_gamma.is_some() {
            acc += priors.ln_noise2(l.noise2) + l.noise2.ln();
        }
    }
    acc
}

/// Log-likelihood of the hyperparameters, up to a constant.
pub trait PhiTarget {
    fn log_likelihood(&self, phi: &PhiVector) -> Result<f64>;
}

impl<F: Fn(&PhiVector) -> Result<f64>> PhiTarget for F {
    fn log_likelihood(&self, phi: &PhiVector) -> Result<f64> {
        self(phi)
    }
}

/// The marginal likelihood at a fixed projection.
#[derive(Clone, Copy, Debug)]
pub struct ArgpPhiTarget<'a> {
    pub w: &'a ProjectionMatrix,
    pub data: &'a FidelityDataset,
}

impl PhiTarget for ArgpPhiTarget<'_> {
    fn log_likelihood(&self, phi: &PhiVector) -> Result<f64> {
        log_likelihood(phi, self.w, self.data)
    }
}

#[derive(Clone, Debug)]
pub struct MhState {
    pub phi: PhiVector,
    /// Log posterior in free coordinates.
    pub log_target: f64,
}

impl MhState {
    pub fn new<T: PhiTarget + ?Sized>(phi: PhiVector, target: &T, priors: &PhiPriors) -> Result<Self> {
        let log_target = target.log_likelihood(&phi)? + log_prior_free(&phi, priors);
        if !log_target.is_finite() {
            return arg_err("log posterior is not finite at the starting hyperparameters");
        }
        Ok(Self { phi, log_target })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MhConfig {
    pub n_accepted_target: usize,
    /// Random-walk standard deviation in every free coordinate.
    pub initial_scale: f64,
    pub jump_probability: f64,
    pub jump_factor: f64,
    pub starvation_window: usize,
    pub min_acceptance: f64,
    pub max_halvings: usize,
}

impl Default for MhConfig {
    fn default() -> Self {
        Self {
            n_accepted_target: 200,
            initial_scale: 0.1,
            jump_probability: 0.1,
            jump_factor: 10.0,
            starvation_window: 10_000,
            min_acceptance: 0.01,
            max_halvings: 3,
        }
    }
}

impl MhConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_accepted_target == 0 || self.starvation_window == 0 {
            return arg_err("n_accepted_target and starvation_window must be positive");
        }
        if !(self.initial_scale.is_finite() && self.initial_scale >= 0.0) {
            return arg_err("initial_scale must be nonnegative");
        }
        if !(0.0..=1.0).contains(&self.jump_probability) || !(self.jump_factor.is_finite() && self.jump_factor > 0.0) {
            return arg_err("jump_probability must lie in [0, 1] and jump_factor be positive");
        }
        Ok(())
    }
}

/// One random-walk Metropolis step in free coordinates. With probability
/// `jump_probability` the proposal scale is multiplied by `jump_factor`.
/// Proposals that leave the support or fail to evaluate are rejected.
pub fn mh_phi_step<T: PhiTarget + ?Sized, R: Rng + ?Sized>(
    state: &MhState,
    target: &T,
    priors: &PhiPriors,
    scales: &[f64],
    cfg: &MhConfig,
    rng: &mut R,
) -> Result<(MhState, bool)> {
    let x = state.phi.to_free();
    if scales.len() != x.len() {
        return arg_err(format!("{} proposal scales for {} free coordinates", scales.len(), x.len()));
    }
    let mult = if rng.random::<f64>() < cfg.jump_probability { cfg.jump_factor } else { 1.0 };
    let prop: Vec<f64> =
        x.iter().zip(scales).map(|(v, s)| v + mult * s * rng.sample::<f64, _>(StandardNormal)).collect();
    let draw: f64 = rng.random();
    let candidate = match state.phi.with_free(&prop) {
        Ok(p) => p,
        Err(_) => return Ok((state.clone(), false)),
    };
    let lt = match target.log_likelihood(&candidate) {
        Ok(ll) => ll + log_prior_free(&candidate, priors),
        Err(e) => {
            warn!("hyperparameter proposal rejected: {e}");
            return Ok((state.clone(), false));
        }
    };
    if lt.is_finite() && draw.ln() < lt - state.log_target {
        Ok((MhState { phi: candidate, log_target: lt }, true))
    } else {
        Ok((state.clone(), false))
    }
}

#[derive(Clone, Debug)]
pub struct MhRun {
    /// Coordinate-wise medians of the accepted states.
    pub phi: PhiVector,
    pub accepted: Vec<MhState>,
    pub steps: usize,
    pub halvings: usize,
    pub final_scale: f64,
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Run the chain until `n_accepted_target` acceptances and return the
/// coordinate-wise medians. When fewer than `min_acceptance` of the steps
/// in a window are accepted, the proposal scale is halved; starvation after
/// `max_halvings` halvings is an error.
pub fn mh_phi_run<T: PhiTarget + ?Sized, R: Rng + ?Sized>(
    phi0: &PhiVector,
    target: &T,
    priors: &PhiPriors,
    cfg: &MhConfig,
    rng: &mut R,
) -> Result<MhRun> {
    cfg.validate()?;
    priors.validate()?;
    let mut state = MhState::new(phi0.clone(), target, priors)?;
    let mut scale = cfg.initial_scale;
    let mut scales = vec![scale; state.phi.num_free()];
    let mut accepted = Vec::with_capacity(cfg.n_accepted_target);
    let (mut steps, mut halvings) = (0, 0);
    let (mut window_steps, mut window_acc) = (0, 0);
    while accepted.len() < cfg.n_accepted_target {
        let (next, ok) = mh_phi_step(&state, target, priors, &scales, cfg, rng)?;
        steps += 1;
        window_steps += 1;
        if ok {
            window_acc += 1;
            accepted.push(next.clone());
        }
        state = next;
        if window_steps == cfg.starvation_window {
            if (window_acc as f64) < cfg.min_acceptance * window_steps as f64 {
                if halvings == cfg.max_halvings {
                    return Err(Error::Convergence { rejections: window_steps - window_acc, eps: scale });
                }
                halvings += 1;
                scale *= 0.5;
                scales.iter_mut().for_each(|s| *s = scale);
            }
            window_steps = 0;
            window_acc = 0;
        }
    }
    let flats: Vec<Vec<f64>> = accepted.iter().map(|s| s.phi.flatten()).collect();
    let med: Vec<f64> = (0..flats[0].len())
        .map(|i| {
            let mut col: Vec<f64> = flats.iter().map(|f| f[i]).collect();
            median(&mut col)
        })
        .collect();
    let phi = phi0.unflatten(&med)?;
    Ok(MhRun { phi, accepted, steps, halvings, final_scale: scale })
}
