use log::warn;
use serde::{Deserialize, Serialize};

use super::bfgs::{bfgs_minimize, BfgsOptions, BfgsResult};
use crate::argp::{evaluate, nested_level_eval, FidelityDataset, NestedLevelEstimate, PhiVector, Wants, MIN_NOISE2};
use crate::error::{arg_err, Result};
use crate::kernels::Lengthscales;
use crate::stiefel::ProjectionMatrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MleMode {
    /// Quasi-Newton on the joint likelihood over all free coordinates.
    Joint,
    /// Level by level on nested designs, with `ρ̂` and `σ̂²` in closed form.
    NestedRecursive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MleOptions {
    pub max_iters: usize,
    pub grad_tol: f64,
    pub max_step: f64,
    pub f_tol: f64,
    /// `[lo, hi]` for every lengthscale (standardized inputs); unbounded
    /// when absent.
    pub theta_bounds: Option<[f64; 2]>,
    /// `[lo, hi]` for the relative nugget of the nested criterion.
    pub nugget_bounds: Option<[f64; 2]>,
}

impl Default for MleOptions {
    fn default() -> Self {
        let b = BfgsOptions::default();
        Self { max_iters: b.max_iters, grad_tol: b.grad_tol, max_step: b.max_step, f_tol: b.f_tol, theta_bounds: Some([1e-2, 10.0]), nugget_bounds: Some([1e-10, 1e2]) }
    }
}

impl MleOptions {
    pub fn unbounded() -> Self {
        Self { theta_bounds: None, nugget_bounds: None, ..Self::default() }
    }

    pub fn bfgs(&self) -> BfgsOptions {
        BfgsOptions { max_iters: self.max_iters, grad_tol: self.grad_tol, max_step: self.max_step, f_tol: self.f_tol }
    }

    pub fn validate(&self) -> Result<()> {
        for [lo, hi] in self.theta_bounds.iter().chain(&self.nugget_bounds) {
            if !(*lo > 0.0 && hi > lo && hi.is_finite()) {
                return arg_err("bounds must satisfy 0 < lo < hi < inf");
            }
        }
        if !(self.grad_tol > 0.0 && self.max_step > 0.0 && self.f_tol >= 0.0) {
            return arg_err("grad_tol and max_step must be positive and f_tol nonnegative");
        }
        Ok(())
    }
}

/// Smooth box on selected log-coordinates: `x = c + h tanh(y)`.
struct LogBox {
    /// `(c, h)` per coordinate, `None` for unbounded ones.
    boxes: Vec<Option<(f64, f64)>>,
}

impl LogBox {
    fn new(bounds: Vec<Option<[f64; 2]>>) -> Self {
        let boxes = bounds
            .into_iter()
            .map(|b| b.map(|[lo, hi]| (0.5 * (lo.ln() + hi.ln()), 0.5 * (hi.ln() - lo.ln()))))
            .collect();
        Self { boxes }
    }

    fn masked(mask: &[bool], bounds: Option<[f64; 2]>) -> Self {
        Self::new(mask.iter().map(|m| if *m { bounds } else { None }).collect())
    }

    fn inner(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.boxes)
            .map(|(v, b)| match b {
                Some((c, h)) => ((v - c) / h).clamp(-0.99, 0.99).atanh(),
                None => *v,
            })
            .collect()
    }

    fn outer(&self, y: &[f64]) -> Vec<f64> {
        y.iter().zip(&self.boxes).map(|(v, b)| b.map_or(*v, |(c, h)| c + h * v.tanh())).collect()
    }

    fn chain(&self, y: &[f64], grad: &mut [f64]) {
        for ((g, v), b) in grad.iter_mut().zip(y).zip(&self.boxes) {
            if let Some((_, h)) = b {
                *g *= h * (1.0 - v.tanh().powi(2));
            }
        }
    }
}

/// Free-coordinate positions of the lengthscales.
fn theta_free_mask(phi: &PhiVector) -> Vec<bool> {
    let d = phi.latent_dim();
    let mut flat = Vec::with_capacity(phi.len());
    for t in 0..phi.num_levels() {
        flat.extend(std::iter::repeat_n(true, d));
        flat.extend(std::iter::repeat_n(false, if t == 0 { 2 } else { 3 }));
    }
    flat.into_iter().zip(phi.free_mask()).filter(|(_, f)| *f).map(|(m, _)| m).collect()
}

#[derive(Clone, Debug)]
pub struct MleResult {
    pub phi: PhiVector,
    /// Joint log-likelihood at `phi`.
    pub log_likelihood: f64,
    pub iterations: usize,
    pub converged: bool,
    /// The line search stalled somewhere; the best iterate was kept.
    pub line_search_failed: bool,
}

/// Maximize the likelihood over the hyperparameters at a fixed projection.
pub fn mle_optimize_phi(
    phi0: &PhiVector,
    w: &ProjectionMatrix,
    data: &FidelityDataset,
    mode: MleMode,
    opts: &MleOptions,
) -> Result<MleResult> {
    opts.validate()?;
    match mode {
        MleMode::Joint => joint(phi0, w, data, opts),
        MleMode::NestedRecursive => nested(phi0, w, data, opts),
    }
}

fn joint(phi0: &PhiVector, w: &ProjectionMatrix, data: &FidelityDataset, opts: &MleOptions) -> Result<MleResult> {
    let bx = LogBox::masked(&theta_free_mask(phi0), opts.theta_bounds);
    let objective = |y: &[f64]| -> Result<(f64, Vec<f64>)> {
        let phi = phi0.with_free(&bx.outer(y))?;
        let ev = evaluate(&phi, w, data, Wants::PHI)?;
        let mut g: Vec<f64> = ev.grad_phi.unwrap().iter().map(|g| -g).collect();
        bx.chain(y, &mut g);
        Ok((-ev.value, g))
    };
    let mut r = bfgs_minimize(objective, &bx.inner(&phi0.to_free()), &opts.bfgs())?;
    r.x = bx.outer(&r.x);
    if r.line_search_failed {
        warn!("joint likelihood line search stalled after {} iterations", r.iterations);
    }
    Ok(MleResult {
        phi: phi0.with_free(&r.x)?,
        log_likelihood: -r.value,
        iterations: r.iterations,
        converged: r.converged,
        line_search_failed: r.line_search_failed,
    })
}

/// Fit one level of a nested design: minimize the restricted criterion over
/// `(log θ_t, log noise2)` starting from `theta0` and relative nugget
/// `noise0`, with `ρ̂_{t−1}` and `σ̂_t²` in closed form (or `ρ` fixed).
pub fn nested_fit_level(
    t: usize,
    data: &FidelityDataset,
    w: &ProjectionMatrix,
    theta0: &Lengthscales,
    noise0: f64,
    rho_fixed: Option<f64>,
    opts: &MleOptions,
) -> Result<(Lengthscales, f64, NestedLevelEstimate, BfgsResult)> {
    opts.validate()?;
    let d = theta0.len();
    let mut bounds = vec![opts.theta_bounds; d];
    bounds.push(opts.nugget_bounds);
    let bx = LogBox::new(bounds);
    let unpack = |x: &[f64]| -> Result<(Lengthscales, f64)> {
        Ok((Lengthscales::new(x[..d].iter().map(|v| v.exp()).collect())?, x[d].exp()))
    };
    let objective = |y: &[f64]| -> Result<(f64, Vec<f64>)> {
        let (theta, nugget) = unpack(&bx.outer(y))?;
        let (est, grad) = nested_level_eval(t, data, w, &theta, nugget, rho_fixed, true)?;
        let mut g = grad.unwrap();
        bx.chain(y, &mut g);
        Ok((est.restricted_nll, g))
    };
    let mut x0: Vec<f64> = theta0.as_slice().iter().map(|v| v.ln()).collect();
    x0.push(noise0.max(MIN_NOISE2).ln());
    let mut r = bfgs_minimize(objective, &bx.inner(&x0), &opts.bfgs())?;
    r.x = bx.outer(&r.x);
    let (theta, nugget) = unpack(&r.x)?;
    let (est, _) = nested_level_eval(t, data, w, &theta, nugget, rho_fixed, false)?;
    Ok((theta, nugget, est, r))
}

fn nested(phi0: &PhiVector, w: &ProjectionMatrix, data: &FidelityDataset, opts: &MleOptions) -> Result<MleResult> {
    if phi0.num_levels() != data.num_levels() {
        return arg_err("phi and data have different numbers of levels");
    }
    let mut phi = phi0.clone();
    let mut iterations = 0;
    let mut converged = true;
    let mut line_search_failed = false;
    for t in 0..phi.num_levels() {
        let rho_fixed = if phi.rho_pinned[t] { phi.levels[t].rho_prev } else { None };
        let lv = &phi.levels[t];
        let nugget0 = lv.noise2 / lv.sigma2;
        let (theta, nugget, est, r) = nested_fit_level(t, data, w, &lv.theta, nugget0, rho_fixed, opts)?;
        iterations += r.iterations;
        converged &= r.converged;
        line_search_failed |= r.line_search_failed;
        let sigma2 = est.sigma2_hat.max(MIN_NOISE2);
        let lv = &mut phi.levels[t];
        lv.theta = theta;
        lv.sigma2 = sigma2;
        if t > 0 && rho_fixed.is_none() {
            lv.rho_prev = est.rho_hat;
        }
        // The residual Z_t − ρ Z_{t−1} carries the lower levels' noise twice
        // (once in each block, independently); the rest is this level's own.
        let carried: f64 = (0..t).map(|j| phi.carry(j, t).powi(2) * phi.levels[j].noise2).sum();
        phi.levels[t].noise2 = (sigma2 * nugget - 2.0 * carried).max(MIN_NOISE2);
    }
    if line_search_failed {
        warn!("nested restricted likelihood line search stalled");
    }
    let log_likelihood = evaluate(&phi, w, data, Wants::VALUE)?.value;
    Ok(MleResult { phi, log_likelihood, iterations, converged, line_search_failed })
}
