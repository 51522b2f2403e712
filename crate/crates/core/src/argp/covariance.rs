//! Block covariance of the autoregressive model
//! `z_t(x) = ρ_{t−1} z_{t−1}(x) + δ_t(x) + ε_t(x)` evaluated on projected
//! inputs `Wᵀx`.
//!
//! With `c(j, t)` the product of the `ρ`s carrying level `j` up to level `t`,
//! the block between levels `t` and `t'` is
//!
//! `Σ_{j ≤ min(t,t')} c(j,t) c(j,t') σ_j² R_j(D_t, D_t') + [t = t'] Σ_{j ≤ t} c(j,t)² σ²_{ε_j} I`.

use nalgebra::DMatrix;

use super::data::FidelityDataset;
use super::params::PhiVector;
use crate::error::{arg_err, Result};
use crate::kernels::corr_matrix_unchecked;
use crate::stiefel::ProjectionMatrix;

pub(crate) fn check_shapes(phi: &PhiVector, data: &FidelityDataset, w: &ProjectionMatrix) -> Result<()> {
    if phi.num_levels() != data.num_levels() {
        return arg_err(format!("phi has {} levels, data has {}", phi.num_levels(), data.num_levels()));
    }
    check_phi_w(phi, w)?;
    if data.input_dim() != w.ambient_dim() {
        return arg_err(format!("data dimension {} differs from projection rows {}", data.input_dim(), w.ambient_dim()));
    }
    Ok(())
}

pub(crate) fn check_phi_w(phi: &PhiVector, w: &ProjectionMatrix) -> Result<()> {
    if phi.latent_dim() != w.latent_dim() {
        return arg_err(format!("phi has {} lengthscales per level, projection has {} columns", phi.latent_dim(), w.latent_dim()));
    }
    Ok(())
}

/// Everything needed to evaluate the likelihood and its derivatives.
pub(crate) struct Assembly {
    /// Projected training inputs, `N × d`.
    pub proj: DMatrix<f64>,
    /// Level of every stacked row.
    pub level: Vec<usize>,
    /// First stacked row of every level.
    pub offset: Vec<usize>,
    /// `corr[j]` holds `R_j` on rows/columns `offset[j]..N` (the only ones
    /// level `j` contributes to).
    pub corr: Vec<DMatrix<f64>>,
    /// `coef[j][t] = c(j, t)`.
    pub coef: Vec<Vec<f64>>,
    pub v: DMatrix<f64>,
}

impl Assembly {
    pub fn new(phi: &PhiVector, data: &FidelityDataset, w: &ProjectionMatrix) -> Result<Self> {
        check_shapes(phi, data, w)?;
        let s = data.num_levels();
        let proj = data.stacked_design() * w.as_matrix();
        let level = data.level_of_rows();
        let n = proj.nrows();
        let mut offset = Vec::with_capacity(s);
        let mut acc = 0;
        for sz in data.sizes() {
            offset.push(acc);
            acc += sz;
        }
        let coef: Vec<Vec<f64>> = (0..s).map(|j| (0..s).map(|t| if j <= t { phi.carry(j, t) } else { 0.0 }).collect()).collect();

        let mut corr = Vec::with_capacity(s);
        let mut v = DMatrix::<f64>::zeros(n, n);
        for j in 0..s {
            let off = offset[j];
            let tail = proj.rows(off, n - off).into_owned();
            let r = corr_matrix_unchecked(&tail, &tail, phi.levels[j].theta.as_slice());
            let sig = phi.levels[j].sigma2;
            for b in 0..(n - off) {
                let cb = coef[j][level[off + b]];
                for a in 0..(n - off) {
                    v[(off + a, off + b)] += coef[j][level[off + a]] * cb * sig * r[(a, b)];
                }
            }
            corr.push(r);
        }
        for a in 0..n {
            let t = level[a];
            v[(a, a)] += (0..=t).map(|j| coef[j][t] * coef[j][t] * phi.levels[j].noise2).sum::<f64>();
        }
        Ok(Self { proj, level, offset, corr, coef, v })
    }
}

/// Joint prior covariance of all stacked observations (no jitter added).
pub fn assemble_covariance(phi: &PhiVector, data: &FidelityDataset, w: &ProjectionMatrix) -> Result<DMatrix<f64>> {
    Ok(Assembly::new(phi, data, w)?.v)
}

/// Covariance between the top-level process at test points and every
/// stacked training observation: entry `(x*, x ∈ D_t)` equals
/// `Σ_{j ≤ t} c(j, s) c(j, t) σ_j² r_j(Wᵀx*, Wᵀx)`.
pub fn cross_covariance(
    test: &DMatrix<f64>,
    phi: &PhiVector,
    data: &FidelityDataset,
    w: &ProjectionMatrix,
) -> Result<DMatrix<f64>> {
    check_shapes(phi, data, w)?;
    if test.ncols() != w.ambient_dim() {
        return arg_err(format!("test points have {} columns, expected {}", test.ncols(), w.ambient_dim()));
    }
    let s = phi.num_levels();
    let tp = test * w.as_matrix();
    let xp = data.stacked_design() * w.as_matrix();
    let level = data.level_of_rows();
    let mut out = DMatrix::<f64>::zeros(test.nrows(), xp.nrows());
    for j in 0..s {
        let r = corr_matrix_unchecked(&tp, &xp, phi.levels[j].theta.as_slice());
        let top = phi.carry(j, s - 1) * phi.levels[j].sigma2;
        for b in 0..xp.nrows() {
            let t = level[b];
            if j > t {
                continue;
            }
            let c = top * phi.carry(j, t);
            for a in 0..tp.nrows() {
                out[(a, b)] += c * r[(a, b)];
            }
        }
    }
    Ok(out)
}

/// Noise-free prior covariance of the top level at the test points:
/// `Σ_t c(t, s)² σ_t² R_t(D*, D*)`.
pub fn prior_variance(test: &DMatrix<f64>, phi: &PhiVector, w: &ProjectionMatrix) -> Result<DMatrix<f64>> {
    check_phi_w(phi, w)?;
    if test.ncols() != w.ambient_dim() {
        return arg_err(format!("test points have {} columns, expected {}", test.ncols(), w.ambient_dim()));
    }
    let s = phi.num_levels();
    let tp = test * w.as_matrix();
    let mut out = DMatrix::<f64>::zeros(test.nrows(), test.nrows());
    for t in 0..s {
        let c = phi.carry(t, s - 1);
        let r = corr_matrix_unchecked(&tp, &tp, phi.levels[t].theta.as_slice());
        out += r * (c * c * phi.levels[t].sigma2);
    }
    Ok(out)
}
