//! Dense linear-algebra helpers shared by the model and the samplers.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// Relative jitter added to every self-covariance before factorization.
pub const BASE_JITTER: f64 = 1e-8;
/// Largest relative jitter tried before giving up.
pub const MAX_JITTER: f64 = 1e-4;

/// Cholesky factor of a symmetric positive definite matrix together with the
/// diagonal jitter that had to be added to obtain it.
#[derive(Clone, Debug)]
pub struct JitteredCholesky {
    chol: Cholesky<f64, Dyn>,
    jitter: f64,
}

impl JitteredCholesky {
    /// Factor `mat + jitter * I`, starting at `BASE_JITTER * mean(diag)` and
    /// multiplying the jitter by 10 on failure up to `MAX_JITTER * mean(diag)`.
    pub fn factor(mat: &DMatrix<f64>) -> Result<Self> {
        let n = mat.nrows();
        if n == 0 || n != mat.ncols() {
            return Err(Error::Argument(format!(
                "cannot factor a {}x{} matrix",
                mat.nrows(),
                mat.ncols()
            )));
        }
        let mean_diag = mat.diagonal().mean();
        if !mean_diag.is_finite() || mean_diag <= 0.0 {
            return Err(Error::Numerical {
                msg: format!("non-positive or non-finite mean diagonal {mean_diag}"),
                size: n,
                jitter: 0.0,
            });
        }
        let mut rel = BASE_JITTER;
        loop {
            let jitter = rel * mean_diag;
            let mut work = mat.clone();
            for i in 0..n {
                work[(i, i)] += jitter;
            }
            if let Some(chol) = Cholesky::new(work) {
                if chol.l_dirty().diagonal().iter().all(|v| v.is_finite() && *v > 0.0) {
                    return Ok(Self { chol, jitter });
                }
            }
            if rel >= MAX_JITTER * (1.0 - 1e-12) {
                return Err(Error::Numerical {
                    msg: "Cholesky factorization failed after jitter escalation".into(),
                    size: n,
                    jitter,
                });
            }
            rel = (rel * 10.0).min(MAX_JITTER);
        }
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn dim(&self) -> usize {
        self.chol.l_dirty().nrows()
    }

    pub fn l(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }

    pub fn solve_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(b)
    }

    /// Solve `L x = b` for the lower factor only.
    pub fn solve_lower(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = b.clone();
        self.chol.l_dirty().solve_lower_triangular_mut(&mut x);
        x
    }

    pub fn log_det(&self) -> f64 {
        2.0 * self.chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>()
    }

    /// Full inverse of the factored matrix, via a blocked triangular inverse
    /// and one matrix product.
    pub fn inverse(&self) -> DMatrix<f64> {
        let linv = lower_triangular_inverse(&self.chol.l());
        let mut inv = linv.transpose() * &linv;
        symmetrize(&mut inv);
        inv
    }
}

const TRI_BLOCK: usize = 48;

/// Inverse of a lower-triangular matrix. Recursive 2x2 blocking keeps almost
/// all the work inside matrix products.
pub fn lower_triangular_inverse(l: &DMatrix<f64>) -> DMatrix<f64> {
    let n = l.nrows();
    if n <= TRI_BLOCK {
        let mut x = DMatrix::<f64>::zeros(n, n);
        for j in 0..n {
            x[(j, j)] = 1.0 / l[(j, j)];
            for i in (j + 1)..n {
                let mut acc = 0.0;
                for k in j..i {
                    acc += l[(i, k)] * x[(k, j)];
                }
                x[(i, j)] = -acc / l[(i, i)];
            }
        }
        return x;
    }
    let k = n / 2;
    let a_inv = lower_triangular_inverse(&l.view((0, 0), (k, k)).into_owned());
    let c_inv = lower_triangular_inverse(&l.view((k, k), (n - k, n - k)).into_owned());
    let b = l.view((k, 0), (n - k, k)).into_owned();
    let lower_left = -(&c_inv * (b * &a_inv));
    let mut x = DMatrix::<f64>::zeros(n, n);
    x.view_mut((0, 0), (k, k)).copy_from(&a_inv);
    x.view_mut((k, k), (n - k, n - k)).copy_from(&c_inv);
    x.view_mut((k, 0), (n - k, k)).copy_from(&lower_left);
    x
}

/// Replace `m` by `(m + m^T) / 2`.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Orthonormalize the columns of a tall matrix by thin QR, with the signs
/// fixed so that `R` has a nonnegative diagonal.
pub fn orthonormalize(m: &DMatrix<f64>) -> DMatrix<f64> {
    let d = m.ncols();
    let qr = m.clone().qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..d {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// `‖W^T W − I‖_F`
pub fn orthonormality_error(w: &DMatrix<f64>) -> f64 {
    let g = w.tr_mul(w);
    (g - DMatrix::<f64>::identity(w.ncols(), w.ncols())).norm()
}

/// Frobenius inner product.
pub fn frob_dot(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// Principal angles (radians, ascending) between the column spans of two
/// matrices with the same number of rows.
pub fn principal_angles(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<Vec<f64>> {
    if a.nrows() != b.nrows() {
        return Err(Error::Argument(format!(
            "principal angles need equal row counts, got {} and {}",
            a.nrows(),
            b.nrows()
        )));
    }
    let (qa, qb) = if a.ncols() >= b.ncols() {
        (orthonormalize(a), orthonormalize(b))
    } else {
        (orthonormalize(b), orthonormalize(a))
    };
    let m = qa.tr_mul(&qb);
    // Cosines lose resolution near zero angle; take small angles from the
    // sines of the residual instead.
    let mut cosines: Vec<f64> = m.clone().svd(false, false).singular_values.iter().copied().collect();
    cosines.sort_by(|x, y| y.partial_cmp(x).unwrap());
    let residual = &qb - &qa * m;
    let mut sines: Vec<f64> = residual.svd(false, false).singular_values.iter().copied().collect();
    sines.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let angles = cosines
        .iter()
        .zip(sines.iter())
        .map(|(&c, &s)| {
            if c * c >= 0.5 {
                s.clamp(0.0, 1.0).asin()
            } else {
                c.clamp(0.0, 1.0).acos()
            }
        })
        .collect();
    Ok(angles)
}
