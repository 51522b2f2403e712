//! Closed-form pieces of level-by-level estimation on nested designs.
//!
//! On a nested design the likelihood factors into the conditionals
//! `Z_t | Z_{t−1}(D_t)`, each Gaussian with mean `ρ_{t−1} Z_{t−1}(D_t)` and
//! covariance `σ_t² (R_t + σ²_{ε_t} I)`. For fixed lengthscales and noise,
//! `ρ` and `σ²` have generalized-least-squares estimates.

use nalgebra::DVector;

use super::data::FidelityDataset;
use crate::error::{arg_err, Error, Result};
use crate::kernels::{corr_matrix_unchecked, Lengthscales};
use crate::linalg::JitteredCholesky;
use crate::stiefel::ProjectionMatrix;

/// Estimates of one level given its lengthscales and relative noise.
#[derive(Clone, Debug, PartialEq)]
pub struct NestedLevelEstimate {
    /// `ρ̂_{t−1}`; `None` on the lowest level.
    pub rho_hat: Option<f64>,
    pub sigma2_hat: f64,
    /// `log|R_t + σ²_{ε_t} I| + c log σ̂_t²` (to be minimized).
    pub restricted_nll: f64,
}

/// Floor applied to `σ̂²` before taking its logarithm.
const SIGMA2_FLOOR: f64 = 1e-300;

/// Closed-form `ρ̂_{t−1}`, `σ̂_t²`, and the restricted criterion for level
/// `t` (0-based). `noise2` is the nugget relative to `σ_t²`.
pub fn nested_mle_level(
    t: usize,
    data: &FidelityDataset,
    w: &ProjectionMatrix,
    theta: &Lengthscales,
    noise2: f64,
) -> Result<NestedLevelEstimate> {
    Ok(nested_level_eval(t, data, w, theta, noise2, None, false)?.0)
}

/// As [`nested_mle_level`], optionally with `ρ_{t−1}` held at a fixed value
/// (then `c = n_t − 1`), and optionally with the gradient of the restricted
/// criterion over `(log θ_t, log noise2)`.
pub(crate) fn nested_level_eval(
    t: usize,
    data: &FidelityDataset,
    w: &ProjectionMatrix,
    theta: &Lengthscales,
    noise2: f64,
    rho_fixed: Option<f64>,
    want_grad: bool,
) -> Result<(NestedLevelEstimate, Option<Vec<f64>>)> {
    if !data.is_nested() {
        return Err(Error::Precondition("level-wise estimation needs a nested design".into()));
    }
    if t >= data.num_levels() {
        return arg_err(format!("level {} out of range", t + 1));
    }
    if theta.len() != w.latent_dim() || data.input_dim() != w.ambient_dim() {
        return arg_err("lengthscale, projection, and data dimensions disagree");
    }
    if !(noise2.is_finite() && noise2 >= 0.0) {
        return arg_err("noise2 must be nonnegative");
    }
    let lvl = data.level(t);
    let n = lvl.obs.len();
    let c = if t == 0 || rho_fixed.is_some() { n as f64 - 1.0 } else { n as f64 - 2.0 };
    if c < 1.0 {
        return arg_err(format!("level {} has too few points ({n}) for the restricted criterion", t + 1));
    }
    let proj = &lvl.design * w.as_matrix();
    let mut k = corr_matrix_unchecked(&proj, &proj, theta.as_slice());
    for i in 0..n {
        k[(i, i)] += noise2;
    }
    let chol = JitteredCholesky::factor(&k)?;
    let z = &lvl.obs;

    let (rho_hat, resid) = if t == 0 {
        (None, z.clone())
    } else {
        let parents = data.parent_rows(t).expect("nested");
        let below = &data.level(t - 1).obs;
        let h = DVector::from_iterator(n, parents.iter().map(|&i| below[i]));
        let rho = match rho_fixed {
            Some(r) => r,
            None => {
                let kh = chol.solve(&h);
                let denom = h.dot(&kh);
                if !(denom.is_finite() && denom > 0.0) {
                    return Err(Error::Numerical {
                        msg: "degenerate regressor in rho estimate".into(),
                        size: n,
                        jitter: chol.jitter(),
                    });
                }
                kh.dot(z) / denom
            }
        };
        (Some(rho), z - h * rho)
    };
    let beta = chol.solve(&resid);
    let sigma2_hat = resid.dot(&beta) / c;
    let s2 = sigma2_hat.max(SIGMA2_FLOOR);
    let restricted_nll = chol.log_det() + c * s2.ln();
    let est = NestedLevelEstimate { rho_hat, sigma2_hat, restricted_nll };
    if !want_grad {
        return Ok((est, None));
    }
    // ∂f/∂p = Σ_ab (K⁻¹ − ββᵀ/σ̂²)_ab ∂K_ab; ρ̂ is stationary so it drops out
    let mut m = chol.inverse();
    for b in 0..n {
        for a in 0..n {
            m[(a, b)] -= beta[a] * beta[b] / s2;
        }
    }
    let th = theta.as_slice();
    let d = th.len();
    let mut grad = vec![0.0; d + 1];
    for b in 0..n {
        for a in (b + 1)..n {
            let r = k[(a, b)];
            let wgt = 2.0 * m[(a, b)] * r;
            for kk in 0..d {
                let diff = proj[(a, kk)] - proj[(b, kk)];
                grad[kk] += wgt * 2.0 * diff * diff / (th[kk] * th[kk]);
            }
        }
    }
    let rel = chol.jitter() / (1.0 + noise2);
    grad[d] = m.trace() * noise2 * (1.0 + rel);
    Ok((est, Some(grad)))
}
