//! Gaussian marginal likelihood of the stacked observations and its
//! gradients with respect to the hyperparameters and the projection.
//!
//! Both gradients use `∂ℓ/∂p = ½ tr[(ααᵀ − V⁻¹) ∂V/∂p]` with `α = V⁻¹Z`.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};

use super::covariance::Assembly;
use super::data::FidelityDataset;
use super::params::PhiVector;
use crate::error::Result;
use crate::linalg::JitteredCholesky;
use crate::stiefel::ProjectionMatrix;

/// Which derivatives to compute alongside the value.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct Wants {
    pub grad_phi: bool,
    pub grad_w: bool,
}

impl Wants {
    pub const VALUE: Wants = Wants { grad_phi: false, grad_w: false };
    pub const PHI: Wants = Wants { grad_phi: true, grad_w: false };
    pub const W: Wants = Wants { grad_phi: false, grad_w: true };
    pub const ALL: Wants = Wants { grad_phi: true, grad_w: true };
}

#[derive(Clone, Debug)]
pub struct LikelihoodEval {
    pub value: f64,
    /// Gradient over the free coordinates of `phi` (see [`PhiVector::to_free`]).
    pub grad_phi: Option<Vec<f64>>,
    /// Euclidean (unprojected) gradient over the entries of `W`.
    pub grad_w: Option<DMatrix<f64>>,
}

/// Log-likelihood `−½ ZᵀV⁻¹Z − ½ log|V| − (N/2) log 2π`.
pub fn log_likelihood(phi: &PhiVector, w: &ProjectionMatrix, data: &FidelityDataset) -> Result<f64> {
    Ok(evaluate(phi, w, data, Wants::VALUE)?.value)
}

/// Gradient of the log-likelihood over the free coordinates of `phi`
/// (log lengthscales, log variances, and unpinned `ρ`).
pub fn log_likelihood_grad_phi(phi: &PhiVector, w: &ProjectionMatrix, data: &FidelityDataset) -> Result<Vec<f64>> {
    Ok(evaluate(phi, w, data, Wants::PHI)?.grad_phi.unwrap())
}

/// Euclidean gradient of the log-likelihood over the entries of `W`. It is
/// not projected onto the tangent space; samplers do that.
pub fn log_likelihood_grad_w(phi: &PhiVector, w: &ProjectionMatrix, data: &FidelityDataset) -> Result<DMatrix<f64>> {
    Ok(evaluate(phi, w, data, Wants::W)?.grad_w.unwrap())
}

pub fn evaluate(phi: &PhiVector, w: &ProjectionMatrix, data: &FidelityDataset, wants: Wants) -> Result<LikelihoodEval> {
    let asm = Assembly::new(phi, data, w)?;
    let z = data.stacked_obs();
    let chol = JitteredCholesky::factor(&asm.v)?;
    let alpha = chol.solve(&z);
    let n = z.len() as f64;
    let value = -0.5 * z.dot(&alpha) - 0.5 * chol.log_det() - 0.5 * n * (2.0 * PI).ln();
    if !wants.grad_phi && !wants.grad_w {
        return Ok(LikelihoodEval { value, grad_phi: None, grad_w: None });
    }
    let g = half_trace_weights(&chol, &alpha);
    let mean_diag = asm.v.diagonal().mean();
    let rel_jitter = if mean_diag > 0.0 { chol.jitter() / mean_diag } else { 0.0 };
    let (grad_phi, grad_w) = gradients(phi, data, &asm, &g, rel_jitter, wants);
    Ok(LikelihoodEval { value, grad_phi, grad_w })
}

/// `G = ½(ααᵀ − V⁻¹)`, so that `∂ℓ/∂p = Σ_ab G_ab ∂V_ab/∂p`.
fn half_trace_weights(chol: &JitteredCholesky, alpha: &DVector<f64>) -> DMatrix<f64> {
    let mut g = chol.inverse();
    let n = alpha.len();
    for b in 0..n {
        let ab = alpha[b];
        for a in 0..n {
            g[(a, b)] = 0.5 * (alpha[a] * ab - g[(a, b)]);
        }
    }
    g
}

fn gradients(
    phi: &PhiVector,
    data: &FidelityDataset,
    asm: &Assembly,
    g: &DMatrix<f64>,
    rel_jitter: f64,
    wants: Wants,
) -> (Option<Vec<f64>>, Option<DMatrix<f64>>) {
    let s = phi.num_levels();
    let d = phi.latent_dim();
    let n = asm.proj.nrows();
    let level = &asm.level;

    // Block sums over level pairs (t, t'):
    //   sum_r[j][t][t']      = Σ G_ab R_j(a,b)
    //   sum_rd2[j][k][t][t'] = Σ G_ab R_j(a,b) Δ_k²
    let mut sum_r = vec![vec![vec![0.0; s]; s]; s];
    let mut sum_rd2 = vec![vec![vec![vec![0.0; s]; s]; d]; s];
    // row_m[a][k] = Σ_b G_ab ∂V_ab/∂x̃_{a,k}, antisymmetric in (a, b)
    let mut row_m = DMatrix::<f64>::zeros(n, d);
    let mut diff = vec![0.0; d];
    let mut dv = vec![0.0; d];

    let inv_theta2: Vec<Vec<f64>> = phi.levels.iter().map(|l| l.theta.as_slice().iter().map(|t| 1.0 / (t * t)).collect()).collect();

    for b in 0..n {
        let tb = level[b];
        for a in b..n {
            let ta = level[a];
            let gab = g[(a, b)];
            let weight = if a == b { 1.0 } else { 2.0 };
            for k in 0..d {
                diff[k] = asm.proj[(a, k)] - asm.proj[(b, k)];
            }
            dv.iter_mut().for_each(|x| *x = 0.0);
            for j in 0..=tb.min(ta) {
                let off = asm.offset[j];
                let r = asm.corr[j][(a - off, b - off)];
                let gr = gab * r;
                if wants.grad_phi {
                    sum_r[j][ta][tb] += weight * gr;
                    for k in 0..d {
                        sum_rd2[j][k][ta][tb] += weight * gr * diff[k] * diff[k];
                    }
                }
                if wants.grad_w && a != b {
                    let c = asm.coef[j][ta] * asm.coef[j][tb] * phi.levels[j].sigma2 * gr;
                    for k in 0..d {
                        dv[k] += -2.0 * c * diff[k] * inv_theta2[j][k];
                    }
                }
            }
            if wants.grad_w && a != b {
                for k in 0..d {
                    row_m[(a, k)] += dv[k];
                    row_m[(b, k)] -= dv[k];
                }
            }
        }
    }

    let grad_w = wants.grad_w.then(|| {
        // ∂ℓ/∂W_ik = Σ_ab M^k_ab (x_ai − x_bi) = 2 Σ_a x_ai Σ_b M^k_ab
        let x = data.stacked_design();
        x.tr_mul(&row_m) * 2.0
    });

    let grad_phi = wants.grad_phi.then(|| {
        let mut diag_g = vec![0.0; s];
        let mut count = vec![0.0; s];
        let mut trace_g = 0.0;
        for a in 0..n {
            diag_g[level[a]] += g[(a, a)];
            count[level[a]] += 1.0;
            trace_g += g[(a, a)];
        }
        // The jitter is proportional to the mean diagonal, which moves with
        // the variances and ρ: ∂V/∂p gains (jitter/mean) ∂mean/∂p · I.
        let jit = rel_jitter * trace_g / n as f64;
        // Natural-coordinate gradient in flatten order.
        let mut nat = Vec::with_capacity(phi.len());
        let pair = |j: usize, t: usize, u: usize| asm.coef[j][t] * asm.coef[j][u];
        for (m, lv) in phi.levels.iter().enumerate() {
            let sig = lv.sigma2;
            let th = lv.theta.as_slice();
            for k in 0..d {
                let mut acc = 0.0;
                for t in m..s {
                    for u in m..s {
                        acc += pair(m, t, u) * sum_rd2[m][k][t][u];
                    }
                }
                nat.push(acc * sig * 2.0 / (th[k] * th[k] * th[k]));
            }
            if lv.rho_prev.is_some() {
                let mut acc = 0.0;
                for j in 0..s {
                    let sj = phi.levels[j].sigma2;
                    let nj = phi.levels[j].noise2;
                    for t in j..s {
                        let dct = phi.carry_deriv(j, t, m);
                        for u in j..s {
                            let dcu = phi.carry_deriv(j, u, m);
                            let dpair = dct * asm.coef[j][u] + asm.coef[j][t] * dcu;
                            acc += sj * dpair * sum_r[j][t][u];
                        }
                        acc += (nj * diag_g[t] + (sj + nj) * count[t] * jit) * 2.0 * asm.coef[j][t] * dct;
                    }
                }
                nat.push(acc);
            }
            let carried: f64 = (m..s).map(|t| asm.coef[m][t] * asm.coef[m][t] * count[t]).sum();
            let mut acc = 0.0;
            for t in m..s {
                for u in m..s {
                    acc += pair(m, t, u) * sum_r[m][t][u];
                }
            }
            nat.push(acc + carried * jit);
            let mut acc = 0.0;
            for t in m..s {
                acc += asm.coef[m][t] * asm.coef[m][t] * diag_g[t];
            }
            nat.push(acc + carried * jit);
        }
        phi.natural_to_free_grad(&nat)
    });

    (grad_phi, grad_w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::argp::data::FidelityLevel;
    use crate::argp::params::LevelHyperParams;
    use crate::kernels::Lengthscales;

    fn single(z: f64, sigma2: f64, noise2: f64) -> (PhiVector, FidelityDataset, ProjectionMatrix) {
        let phi = PhiVector::new(vec![LevelHyperParams {
            theta: Lengthscales::new(vec![1.0]).unwrap(),
            sigma2,
            noise2,
            rho_prev: None,
        }])
        .unwrap();
        let data = FidelityDataset::new(vec![FidelityLevel {
            design: DMatrix::from_element(1, 1, 0.3),
            obs: DVector::from_element(1, z),
        }])
        .unwrap();
        (phi, data, ProjectionMatrix::identity(1, 1).unwrap())
    }

    #[test]
    fn standard_normal_values() {
        // V = [[1]] up to the 1e-8 relative jitter
        let (phi, data, w) = single(0.0, 0.5, 0.5);
        let v = log_likelihood(&phi, &w, &data).unwrap();
        assert!((v + 0.918_938_533_204_672_7).abs() < 1e-7);
        let (phi, data, w) = single(1.0, 0.5, 0.5);
        let v = log_likelihood(&phi, &w, &data).unwrap();
        assert!((v - (-0.5 - 0.918_938_533_204_672_7)).abs() < 1e-7);
    }
}
