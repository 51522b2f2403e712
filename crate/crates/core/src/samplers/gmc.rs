use log::debug;
use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::argp::{evaluate, FidelityDataset, PhiVector, Wants};
use crate::error::{arg_err, Error, Result};
use crate::stiefel::{
    geodesic_flow, ml_log_density_unnorm, sample_tangent, tangent_project, MatrixLangevinParams, ProjectionMatrix,
    TangentVector,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GmcConfig {
    pub leapfrog_steps: usize,
    pub step_size: f64,
    pub shrink_factor: f64,
    pub rejection_threshold: usize,
    pub max_total_rejections: usize,
    /// A trajectory whose energy error exceeds this is stopped early and
    /// rejected.
    pub divergence_threshold: f64,
}

impl Default for GmcConfig {
    fn default() -> Self {
        Self { leapfrog_steps: 10, step_size: 0.05, shrink_factor: 1.2, rejection_threshold: 20, max_total_rejections: 1000, divergence_threshold: 1000.0 }
    }
}

impl GmcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.leapfrog_steps == 0 {
            return arg_err("leapfrog_steps must be positive");
        }
        if !(self.step_size.is_finite() && self.step_size > 0.0) {
            return arg_err("step_size must be positive");
        }
        if !(self.shrink_factor.is_finite() && self.shrink_factor > 1.0) {
            return arg_err("shrink_factor must exceed 1");
        }
        if self.divergence_threshold.is_nan() || self.divergence_threshold <= 0.0 {
            return arg_err("divergence_threshold must be positive");
        }
        if self.rejection_threshold == 0 || self.max_total_rejections == 0 {
            return arg_err("rejection_threshold and max_total_rejections must be positive");
        }
        Ok(())
    }
}

/// A log density on the Stiefel manifold, up to a constant.
pub trait StiefelTarget {
    /// Value and Euclidean gradient at `w`.
    fn log_density_grad(&self, w: &ProjectionMatrix) -> Result<(f64, DMatrix<f64>)>;

    /// Move any prior that tracks the chain to `w`. No-op by default.
    fn recenter(&mut self, _w: &ProjectionMatrix) -> Result<()> {
        Ok(())
    }
}

/// `log p(W | φ, Z) = log p(Z | φ, W) + tr(FᵀW)` up to a constant.
#[derive(Clone, Debug)]
pub struct WPosterior<'a> {
    pub phi: &'a PhiVector,
    pub data: &'a FidelityDataset,
    pub prior: MatrixLangevinParams,
    f: DMatrix<f64>,
}

impl<'a> WPosterior<'a> {
    pub fn new(phi: &'a PhiVector, data: &'a FidelityDataset, prior: MatrixLangevinParams) -> Self {
        let f = prior.f_matrix();
        Self { phi, data, prior, f }
    }

    pub fn log_likelihood_part(&self, w: &ProjectionMatrix) -> Result<f64> {
        Ok(evaluate(self.phi, w, self.data, Wants::VALUE)?.value)
    }
}

impl StiefelTarget for WPosterior<'_> {
    fn log_density_grad(&self, w: &ProjectionMatrix) -> Result<(f64, DMatrix<f64>)> {
        let ev = evaluate(self.phi, w, self.data, Wants::W)?;
        let value = ev.value + ml_log_density_unnorm(w, &self.f)?;
        Ok((value, ev.grad_w.unwrap() + &self.f))
    }

    fn recenter(&mut self, w: &ProjectionMatrix) -> Result<()> {
        self.prior = self.prior.recentered(w)?;
        self.f = self.prior.f_matrix();
        Ok(())
    }
}

/// A point together with its cached log density and gradient.
#[derive(Clone, Debug)]
pub struct GmcPoint {
    pub w: ProjectionMatrix,
    pub log_density: f64,
    pub grad: DMatrix<f64>,
}

impl GmcPoint {
    pub fn new<T: StiefelTarget + ?Sized>(w: ProjectionMatrix, target: &T) -> Result<Self> {
        let (log_density, grad) = target.log_density_grad(&w)?;
        Ok(Self { w, log_density, grad })
    }
}

#[derive(Clone, Debug)]
pub struct GmcStep {
    pub proposal: GmcPoint,
    pub accepted: bool,
    /// `log p(W) − ½|u|²` at the start of the trajectory.
    pub h0: f64,
    /// The same quantity at the end.
    pub h1: f64,
}

fn kick(w: &ProjectionMatrix, u: &TangentVector, grad: &DMatrix<f64>, half_eps: f64) -> Result<TangentVector> {
    tangent_project(w, &(u.as_matrix() + grad * half_eps))
}

/// Integrate `steps` splitting steps of size `eps` from `start` with initial
/// momentum `u`: half kick, geodesic drift, half kick, with the momentum
/// projected onto the tangent space after every kick.
pub fn gmc_trajectory<T: StiefelTarget + ?Sized>(
    start: &GmcPoint,
    u: &TangentVector,
    target: &T,
    steps: usize,
    eps: f64,
) -> Result<(GmcPoint, TangentVector)> {
    Ok(integrate(start, u, target, steps, eps, f64::INFINITY)?.unwrap())
}

/// `None` when `|H − H0|` exceeds `max_error` after some step.
fn integrate<T: StiefelTarget + ?Sized>(
    start: &GmcPoint,
    u: &TangentVector,
    target: &T,
    steps: usize,
    eps: f64,
    max_error: f64,
) -> Result<Option<(GmcPoint, TangentVector)>> {
    let h0 = start.log_density - u.kinetic_energy();
    let mut point = start.clone();
    let mut u = u.clone();
    for _ in 0..steps {
        u = kick(&point.w, &u, &point.grad, 0.5 * eps)?;
        let (w_next, u_next) = geodesic_flow(&point.w, &u, eps)?;
        point = GmcPoint::new(w_next, target)?;
        u = kick(&point.w, &u_next, &point.grad, 0.5 * eps)?;
        let err = (point.log_density - u.kinetic_energy() - h0).abs();
        if !(err <= max_error) {
            return Ok(None);
        }
    }
    Ok(Some((point, u)))
}

/// One accept/reject step: draw a tangent momentum, integrate, and apply the
/// Metropolis test `uniform < exp(H* − H)` with `H = log p − ½|u|²`.
pub fn gmc_step<T: StiefelTarget + ?Sized, R: Rng + ?Sized>(
    current: &GmcPoint,
    target: &T,
    steps: usize,
    eps: f64,
    rng: &mut R,
) -> Result<GmcStep> {
    let u0 = sample_tangent(&current.w, rng);
    let h0 = current.log_density - u0.kinetic_energy();
    let (proposal, u1) = gmc_trajectory(current, &u0, target, steps, eps)?;
    let h1 = proposal.log_density - u1.kinetic_energy();
    let accepted = metropolis_accept(h0, h1, rng);
    Ok(GmcStep { proposal, accepted, h0, h1 })
}

/// As [`gmc_step`], but a trajectory whose energy error passes `max_error`
/// is abandoned and rejected (`None`).
pub fn gmc_step_bounded<T: StiefelTarget + ?Sized, R: Rng + ?Sized>(
    current: &GmcPoint,
    target: &T,
    steps: usize,
    eps: f64,
    max_error: f64,
    rng: &mut R,
) -> Result<Option<GmcStep>> {
    let u0 = sample_tangent(&current.w, rng);
    let h0 = current.log_density - u0.kinetic_energy();
    let Some((proposal, u1)) = integrate(current, &u0, target, steps, eps, max_error)? else {
        return Ok(None);
    };
    let h1 = proposal.log_density - u1.kinetic_energy();
    let accepted = metropolis_accept(h0, h1, rng);
    Ok(Some(GmcStep { proposal, accepted, h0, h1 }))
}

/// `uniform < exp(h1 − h0)`; a non-finite `h1` is always rejected.
pub fn metropolis_accept<R: Rng + ?Sized>(h0: f64, h1: f64, rng: &mut R) -> bool {
    let draw: f64 = rng.random();
    h1.is_finite() && draw < (h1 - h0).exp()
}

#[derive(Clone, Debug)]
pub struct GmcOutcome {
    pub point: GmcPoint,
    pub rejections: usize,
    /// Step size used for the accepted trajectory.
    pub eps: f64,
    /// Step size after each shrink, starting with the configured value.
    pub eps_history: Vec<f64>,
    pub h0: f64,
    pub h1: f64,
}

/// Run [`gmc_step`] until the first acceptance. The target's prior is first
/// recentered at `w`; the step size starts at the configured value and is
/// divided by `shrink_factor` after every `rejection_threshold` consecutive
/// rejections. Trajectories that fail to evaluate count as rejections.
pub fn gmc_sample_until_accept<T: StiefelTarget + ?Sized, R: Rng + ?Sized>(
    w: &ProjectionMatrix,
    target: &mut T,
    cfg: &GmcConfig,
    rng: &mut R,
) -> Result<GmcOutcome> {
    cfg.validate()?;
    target.recenter(w)?;
    let current = GmcPoint::new(w.clone(), &*target)?;
    let mut eps = cfg.step_size;
    let mut eps_history = vec![eps];
    let mut rejections = 0;
    let mut streak = 0;
    loop {
        match gmc_step_bounded(&current, &*target, cfg.leapfrog_steps, eps, cfg.divergence_threshold, rng) {
            Ok(Some(step)) if step.accepted => {
                return Ok(GmcOutcome { point: step.proposal, rejections, eps, eps_history, h0: step.h0, h1: step.h1 });
            }
            Ok(_) => {}
            Err(e) => debug!("trajectory failed, counted as a rejection: {e}"),
        }
        rejections += 1;
        streak += 1;
        if streak == cfg.rejection_threshold {
            streak = 0;
            eps /= cfg.shrink_factor;
            eps_history.push(eps);
        }
        if rejections >= cfg.max_total_rejections {
            return Err(Error::Convergence { rejections, eps });
        }
    }
}
