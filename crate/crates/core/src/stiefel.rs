//! Geometry of the Stiefel manifold `V(d, D) = {W ∈ R^{D×d} : WᵀW = I_d}`
//! and the Matrix-Langevin prior on it.
//!
//! Tangent space at `W`: `{U : WᵀU + UᵀW = 0}`, with the embedded
//! (Frobenius) metric. Geodesics are followed in closed form, so only the
//! potential part of a Hamiltonian needs numerical integration.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Error, Result};
use crate::linalg::{orthonormality_error, orthonormalize};

/// Largest tolerated `‖WᵀW − I‖_F` for a manifold point.
pub const ORTHONORMAL_TOL: f64 = 1e-8;
/// Drift above which points are re-orthonormalized after a geodesic step.
pub const RETRACT_TOL: f64 = 1e-10;

/// A `D×d` matrix with orthonormal columns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DMatrix<f64>", into = "DMatrix<f64>")]
pub struct ProjectionMatrix(DMatrix<f64>);

impl ProjectionMatrix {
    pub fn new(w: DMatrix<f64>) -> Result<Self> {
        let (big_d, d) = w.shape();
        if d == 0 || d > big_d {
            return arg_err(format!("projection must satisfy 1 <= d <= D, got {big_d}x{d}"));
        }
        if w.iter().any(|v| !v.is_finite()) {
            return arg_err("projection has non-finite entries");
        }
        let err = orthonormality_error(&w);
        if err >= ORTHONORMAL_TOL {
            return arg_err(format!("columns are not orthonormal: |WᵀW - I|_F = {err:e}"));
        }
        Ok(Self(w))
    }

    /// Map an arbitrary full-column-rank matrix onto the manifold.
    pub fn retract(m: &DMatrix<f64>) -> Result<Self> {
        let (big_d, d) = m.shape();
        if d == 0 || d > big_d || m.iter().any(|v| !v.is_finite()) {
            return arg_err(format!("cannot retract a {big_d}x{d} matrix"));
        }
        Self::new(orthonormalize(m))
    }

    /// First `d` columns of the `D×D` identity.
    pub fn identity(big_d: usize, d: usize) -> Result<Self> {
        Self::new(DMatrix::identity(big_d, d))
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    /// Ambient dimension `D`.
    pub fn ambient_dim(&self) -> usize {
        self.0.nrows()
    }

    /// Latent dimension `d`.
    pub fn latent_dim(&self) -> usize {
        self.0.ncols()
    }

    pub fn orthonormality_error(&self) -> f64 {
        orthonormality_error(&self.0)
    }

    /// Number of free parameters of the manifold, `D·d − d(d+1)/2`.
    pub fn manifold_dim(&self) -> usize {
        let (big_d, d) = self.0.shape();
        big_d * d - d * (d + 1) / 2
    }
}

impl TryFrom<DMatrix<f64>> for ProjectionMatrix {
    type Error = Error;

    fn try_from(m: DMatrix<f64>) -> Result<Self> {
        Self::new(m)
    }
}

impl From<ProjectionMatrix> for DMatrix<f64> {
    fn from(w: ProjectionMatrix) -> Self {
        w.0
    }
}

/// A velocity attached to a base point; `WᵀU` is antisymmetric.
#[derive(Clone, Debug, PartialEq)]
pub struct TangentVector(DMatrix<f64>);

impl TangentVector {
    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    /// `½‖U‖_F²`
    pub fn kinetic_energy(&self) -> f64 {
        0.5 * self.0.norm_squared()
    }

    /// `‖WᵀU + UᵀW‖_F`
    pub fn tangency_error(&self, w: &ProjectionMatrix) -> f64 {
        let a = w.as_matrix().tr_mul(&self.0);
        (&a + a.transpose()).norm()
    }

    /// Wrap a matrix already known to be tangent at `w`.
    pub fn from_tangent(w: &ProjectionMatrix, u: DMatrix<f64>) -> Result<Self> {
        if u.shape() != w.as_matrix().shape() {
            return arg_err("tangent vector shape differs from base point");
        }
        let t = Self(u);
        let err = t.tangency_error(w);
        if err >= ORTHONORMAL_TOL * (1.0 + t.0.norm()) {
            return arg_err(format!("matrix is not tangent: |WᵀU + UᵀW|_F = {err:e}"));
        }
        Ok(t)
    }

    pub fn neg(&self) -> Self {
        Self(-&self.0)
    }
}

/// Orthogonal projection onto the tangent space at `w`:
/// `Π_W(U) = U − ½ W (WᵀU + UᵀW)`.
pub fn tangent_project(w: &ProjectionMatrix, u: &DMatrix<f64>) -> Result<TangentVector> {
    let wm = w.as_matrix();
    if u.shape() != wm.shape() {
        return arg_err(format!("shape mismatch: W is {:?}, U is {:?}", wm.shape(), u.shape()));
    }
    let a = wm.tr_mul(u);
    let sym = (&a + a.transpose()) * 0.5;
    Ok(TangentVector(u - wm * sym))
}

/// Follow the geodesic through `(w, u)` for time `t`:
///
/// `[W(t) U(t)] = [W U] exp(t [[A, −S], [I, A]]) diag(exp(−tA), exp(−tA))`
///
/// with `A = WᵀU` and `S = UᵀU`. Negative `t` runs the flow backwards.
pub fn geodesic_flow(w: &ProjectionMatrix, u: &TangentVector, t: f64) -> Result<(ProjectionMatrix, TangentVector)> {
    let wm = w.as_matrix();
    let um = u.as_matrix();
    if um.shape() != wm.shape() {
        return arg_err("tangent vector shape differs from base point");
    }
    if !t.is_finite() {
        return arg_err("flow time must be finite");
    }
    if t == 0.0 {
        return Ok((w.clone(), u.clone()));
    }
    let (big_d, d) = wm.shape();
    let a = wm.tr_mul(um);
    let s = um.tr_mul(um);
    let mut block = DMatrix::<f64>::zeros(2 * d, 2 * d);
    block.view_mut((0, 0), (d, d)).copy_from(&a);
    block.view_mut((0, d), (d, d)).copy_from(&(-&s));
    block.view_mut((d, 0), (d, d)).fill_with_identity();
    block.view_mut((d, d), (d, d)).copy_from(&a);
    let big = matrix_exp(&(block * t))?;
    let small = matrix_exp(&(a * (-t)))?;

    let mut wu = DMatrix::<f64>::zeros(big_d, 2 * d);
    wu.view_mut((0, 0), (big_d, d)).copy_from(wm);
    wu.view_mut((0, d), (big_d, d)).copy_from(um);
    let moved = wu * big;
    let w_new = moved.columns(0, d) * &small;
    let u_new = moved.columns(d, d) * &small;
    finish_flow(w_new, u_new)
}

/// Closed-form geodesic on the unit sphere (`d = 1`), with `β = ‖u‖`:
/// `w(t) = w cos βt + (u/β) sin βt`, `u(t) = −wβ sin βt + u cos βt`.
pub fn geodesic_flow_sphere(w: &ProjectionMatrix, u: &TangentVector, t: f64) -> Result<(ProjectionMatrix, TangentVector)> {
    let wm = w.as_matrix();
    let um = u.as_matrix();
    if wm.ncols() != 1 || um.shape() != wm.shape() {
        return arg_err("sphere geodesic needs matching D×1 point and velocity");
    }
    if !t.is_finite() {
        return arg_err("flow time must be finite");
    }
    let beta = um.norm();
    if beta == 0.0 || t == 0.0 {
        return Ok((w.clone(), u.clone()));
    }
    let (s, c) = (beta * t).sin_cos();
    let w_new = wm * c + um * (s / beta);
    let u_new = wm * (-beta * s) + um * c;
    finish_flow(w_new, u_new)
}

fn finish_flow(w_new: DMatrix<f64>, u_new: DMatrix<f64>) -> Result<(ProjectionMatrix, TangentVector)> {
    if w_new.iter().chain(u_new.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Numerical {
            msg: "geodesic flow produced non-finite values".into(),
            size: w_new.nrows(),
            jitter: 0.0,
        });
    }
    if orthonormality_error(&w_new) > RETRACT_TOL {
        let w = ProjectionMatrix::retract(&w_new)?;
        let u = tangent_project(&w, &u_new)?;
        Ok((w, u))
    } else {
        let w = ProjectionMatrix(w_new);
        let u = TangentVector(u_new);
        Ok((w, u))
    }
}

const PADE13: [f64; 14] = [
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
];
const THETA13: f64 = 5.371920351148152;

/// Matrix exponential by scaling and squaring with a degree-13 Padé
/// approximant.
pub fn matrix_exp(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = m.nrows();
    if n != m.ncols() {
        return arg_err("matrix exponential needs a square matrix");
    }
    if m.iter().any(|v| !v.is_finite()) {
        return arg_err("matrix exponential input has non-finite entries");
    }
    let norm1 = (0..n).map(|j| m.column(j).iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max);
    let squarings = if norm1 > THETA13 { (norm1 / THETA13).log2().ceil() as i32 } else { 0 };
    if squarings > 1000 {
        return Err(Error::Numerical {
            msg: format!("matrix exponential overflow (1-norm {norm1:e})"),
            size: n,
            jitter: 0.0,
        });
    }
    let a = m * 2f64.powi(-squarings);
    let b = &PADE13;
    let id = DMatrix::<f64>::identity(n, n);
    let a2 = &a * &a;
    let a4 = &a2 * &a2;
    let a6 = &a4 * &a2;
    let u_inner = &a6 * (&a6 * b[13] + &a4 * b[11] + &a2 * b[9]) + &a6 * b[7] + &a4 * b[5] + &a2 * b[3] + &id * b[1];
    let u = &a * u_inner;
    let v = &a6 * (&a6 * b[12] + &a4 * b[10] + &a2 * b[8]) + &a6 * b[6] + &a4 * b[4] + &a2 * b[2] + &id * b[0];
    let p = &v + &u;
    let q = &v - &u;
    let mut r = q.lu().solve(&p).ok_or_else(|| Error::Numerical {
        msg: "singular Padé denominator in matrix exponential".into(),
        size: n,
        jitter: 0.0,
    })?;
    for _ in 0..squarings {
        r = &r * &r;
    }
    if r.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical {
            msg: format!("matrix exponential overflow (1-norm {norm1:e})"),
            size: n,
            jitter: 0.0,
        });
    }
    Ok(r)
}

/// Matrix-Langevin prior `p(W) ∝ exp(tr(FᵀW))` with `F = U diag(σ)`; the
/// right orientation is fixed to the identity, so the mode is `U`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixLangevinParams {
    pub orientation: ProjectionMatrix,
    pub concentration: Vec<f64>,
}

impl MatrixLangevinParams {
    pub fn new(orientation: ProjectionMatrix, concentration: Vec<f64>) -> Result<Self> {
        if concentration.len() != orientation.latent_dim() {
            return arg_err(format!(
                "{} concentrations for latent dimension {}",
                concentration.len(),
                orientation.latent_dim()
            ));
        }
        if concentration.iter().any(|c| !(c.is_finite() && *c >= 0.0)) {
            return arg_err("concentrations must be finite and nonnegative");
        }
        Ok(Self { orientation, concentration })
    }

    /// `F = U Σ`
    pub fn f_matrix(&self) -> DMatrix<f64> {
        let mut f = self.orientation.as_matrix().clone();
        for (j, c) in self.concentration.iter().enumerate() {
            f.column_mut(j).scale_mut(*c);
        }
        f
    }

    /// Same concentrations, new mode.
    pub fn recentered(&self, mode: &ProjectionMatrix) -> Result<Self> {
        Self::new(mode.clone(), self.concentration.clone())
    }
}

/// `tr(FᵀW)`; the normalizing constant is never needed.
pub fn ml_log_density_unnorm(w: &ProjectionMatrix, f: &DMatrix<f64>) -> Result<f64> {
    if f.shape() != w.as_matrix().shape() {
        return arg_err(format!("F is {:?}, W is {:?}", f.shape(), w.as_matrix().shape()));
    }
    Ok(f.iter().zip(w.as_matrix().iter()).map(|(a, b)| a * b).sum())
}

/// Euclidean gradient of `tr(FᵀW)` with respect to `W`, which is `F`.
pub fn ml_log_density_grad(w: &ProjectionMatrix, f: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if f.shape() != w.as_matrix().shape() {
        return arg_err(format!("F is {:?}, W is {:?}", f.shape(), w.as_matrix().shape()));
    }
    Ok(f.clone())
}

/// Haar-uniform draw: sign-fixed QR of a standard Gaussian `D×d` matrix.
pub fn sample_uniform_stiefel<R: Rng + ?Sized>(big_d: usize, d: usize, rng: &mut R) -> Result<ProjectionMatrix> {
    if d == 0 || d > big_d {
        return arg_err(format!("need 1 <= d <= D, got D = {big_d}, d = {d}"));
    }
    let g = DMatrix::<f64>::from_fn(big_d, d, |_, _| rng.sample(StandardNormal));
    ProjectionMatrix::retract(&g)
}

/// Standard Gaussian `D×d` matrix projected onto the tangent space at `w`.
pub fn sample_tangent<R: Rng + ?Sized>(w: &ProjectionMatrix, rng: &mut R) -> TangentVector {
    let (big_d, d) = w.as_matrix().shape();
    let g = DMatrix::<f64>::from_fn(big_d, d, |_, _| rng.sample(StandardNormal));
    tangent_project(w, &g).expect("shapes match by construction")
}
