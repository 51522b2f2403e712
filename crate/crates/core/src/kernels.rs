//! Squared-exponential ARD kernel and its analytic derivatives.
//!
//! `r(x, y) = exp(-Σ_i (x_i - y_i)² / θ_i²)`
//!
//! Point sets are stored as matrices with one point per row.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Result};
use crate::stiefel::ProjectionMatrix;

/// Strictly positive per-dimension lengthscales.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Lengthscales(Vec<f64>);

impl Lengthscales {
    pub fn new(theta: Vec<f64>) -> Result<Self> {
        if theta.is_empty() {
            return arg_err("lengthscale vector is empty");
        }
        if let Some(bad) = theta.iter().find(|t| !(t.is_finite() && **t > 0.0)) {
            return arg_err(format!("lengthscales must be finite and positive, got {bad}"));
        }
        Ok(Self(theta))
    }

    /// Same lengthscale in every one of `dim` dimensions.
    pub fn isotropic(value: f64, dim: usize) -> Result<Self> {
        Self::new(vec![value; dim])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl TryFrom<Vec<f64>> for Lengthscales {
    type Error = crate::error::Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<Lengthscales> for Vec<f64> {
    fn from(l: Lengthscales) -> Self {
        l.0
    }
}

fn check_dims(x: &[f64], y: &[f64], theta: &Lengthscales) -> Result<()> {
    if x.len() != y.len() || x.len() != theta.len() {
        return arg_err(format!(
            "dimension mismatch: |x| = {}, |y| = {}, |theta| = {}",
            x.len(),
            y.len(),
            theta.len()
        ));
    }
    if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
        return arg_err("kernel inputs must be finite");
    }
    Ok(())
}

#[inline]
pub(crate) fn se_raw(x: impl Iterator<Item = f64>, y: impl Iterator<Item = f64>, theta: &[f64]) -> f64 {
    let mut s = 0.0;
    for ((a, b), t) in x.zip(y).zip(theta.iter()) {
        let d = a - b;
        s += d * d / (t * t);
    }
    (-s).exp()
}

pub fn se_kernel(x: &[f64], y: &[f64], theta: &Lengthscales) -> Result<f64> {
    check_dims(x, y, theta)?;
    Ok(se_raw(x.iter().copied(), y.iter().copied(), theta.as_slice()))
}

/// Correlation matrix between the rows of `a` and the rows of `b`.
pub fn corr_matrix(a: &DMatrix<f64>, b: &DMatrix<f64>, theta: &Lengthscales) -> Result<DMatrix<f64>> {
    if a.ncols() != theta.len() || b.ncols() != theta.len() {
        return arg_err(format!(
            "dimension mismatch: points have {} and {} columns, theta has {}",
            a.ncols(),
            b.ncols(),
            theta.len()
        ));
    }
    if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
        return arg_err("point sets must be finite");
    }
    Ok(corr_matrix_unchecked(a, b, theta.as_slice()))
}

pub(crate) fn corr_matrix_unchecked(a: &DMatrix<f64>, b: &DMatrix<f64>, theta: &[f64]) -> DMatrix<f64> {
    let inv2: Vec<f64> = theta.iter().map(|t| 1.0 / (t * t)).collect();
    let dim = theta.len();
    DMatrix::from_fn(a.nrows(), b.nrows(), |i, j| {
        let mut s = 0.0;
        for k in 0..dim {
            let d = a[(i, k)] - b[(j, k)];
            s += d * d * inv2[k];
        }
        (-s).exp()
    })
}

/// `∂r/∂θ_i = r · 2 (x_i − y_i)² / θ_i³`
pub fn se_kernel_grad_theta(x: &[f64], y: &[f64], theta: &Lengthscales) -> Result<Vec<f64>> {
    let r = se_kernel(x, y, theta)?;
    Ok(x.iter()
        .zip(y)
        .zip(theta.as_slice())
        .map(|((a, b), t)| {
            let d = a - b;
            r * 2.0 * d * d / (t * t * t)
        })
        .collect())
}

/// `∂r/∂x̃_j = −r · 2 (x̃_j − ỹ_j) / θ_j²`, taken with respect to the first
/// argument. The derivative with respect to the second is its negative.
pub fn se_kernel_grad_input(xt: &[f64], yt: &[f64], theta: &Lengthscales) -> Result<Vec<f64>> {
    let r = se_kernel(xt, yt, theta)?;
    Ok(xt
        .iter()
        .zip(yt)
        .zip(theta.as_slice())
        .map(|((a, b), t)| -r * 2.0 * (a - b) / (t * t))
        .collect())
}

/// Gradient of `r(Wᵀx, Wᵀy)` with respect to every entry of `W` (D×d).
///
/// Entry `(i, j)` is `∂r/∂x̃_j · x_i + ∂r/∂ỹ_j · y_i`; the row index runs over
/// input coordinates and the column index over latent coordinates.
pub fn projected_corr_grad_w(
    x: &[f64],
    y: &[f64],
    w: &ProjectionMatrix,
    theta: &Lengthscales,
) -> Result<DMatrix<f64>> {
    let wm = w.as_matrix();
    let (big_d, d) = wm.shape();
    if x.len() != big_d || y.len() != big_d {
        return arg_err(format!(
            "points have dimension {} and {}, projection expects {}",
            x.len(),
            y.len(),
            big_d
        ));
    }
    if theta.len() != d {
        return arg_err(format!("theta has length {}, latent dimension is {}", theta.len(), d));
    }
    let xt: Vec<f64> = (0..d).map(|j| (0..big_d).map(|i| wm[(i, j)] * x[i]).sum()).collect();
    let yt: Vec<f64> = (0..d).map(|j| (0..big_d).map(|i| wm[(i, j)] * y[i]).sum()).collect();
    let gx = se_kernel_grad_input(&xt, &yt, theta)?;
    // ∂r/∂ỹ_j = −∂r/∂x̃_j
    Ok(DMatrix::from_fn(big_d, d, |i, j| gx[j] * (x[i] - y[i])))
}
