use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BfgsOptions {
    pub max_iters: usize,
    /// Stop once the gradient's largest absolute entry falls below this.
    pub grad_tol: f64,
    /// Largest coordinate change tried by a single line search.
    pub max_step: f64,
    /// Also stop once an accepted step lowers the value by less than this
    /// fraction of its magnitude.
    pub f_tol: f64,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        Self { max_iters: 500, grad_tol: 1e-6, max_step: 2.0, f_tol: 1e-10 }
    }
}

#[derive(Clone, Debug)]
pub struct BfgsResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub grad: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Set when the line search could not decrease the objective; `x` is
    /// then the best iterate found.
    pub line_search_failed: bool,
}

const ARMIJO: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 50;

/// Minimize `f` with BFGS on the inverse Hessian and a backtracking Armijo
/// line search. `f` returns the value and gradient; evaluation errors and
/// non-finite values inside the line search are treated as infeasible.
pub fn bfgs_minimize<F>(mut f: F, x0: &[f64], opts: &BfgsOptions) -> Result<BfgsResult>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let n = x0.len();
    let mut x = DVector::from_column_slice(x0);
    let (mut fx, g0) = f(x0)?;
    if !fx.is_finite() || g0.iter().any(|v| !v.is_finite()) {
        return arg_err("objective is not finite at the starting point");
    }
    let mut g = DVector::from_vec(g0);
    let mut h = DMatrix::<f64>::identity(n, n);
    let mut fresh = true;
    let mut iterations = 0;
    let mut line_search_failed = false;
    let mut flat = false;

    while iterations < opts.max_iters {
        if g.amax() < opts.grad_tol {
            break;
        }
        let mut p = -(&h * &g);
        if p.dot(&g) >= 0.0 {
            h.fill_with_identity();
            fresh = true;
            p = -g.clone();
        }
        let big = p.amax();
        let mut alpha = if big > opts.max_step { opts.max_step / big } else { 1.0 };
        let slope = p.dot(&g);
        let mut next = None;
        for _ in 0..MAX_BACKTRACKS {
            let trial = &x + &p * alpha;
            if let Ok((ft, gt)) = f(trial.as_slice()) {
                if ft.is_finite() && gt.iter().all(|v| v.is_finite()) && ft <= fx + ARMIJO * alpha * slope {
                    next = Some((trial, ft, DVector::from_vec(gt)));
                    break;
                }
            }
            alpha *= 0.5;
        }
        let Some((x_new, f_new, g_new)) = next else {
            if fresh {
                line_search_failed = true;
                break;
            }
            h.fill_with_identity();
            fresh = true;
            continue;
        };
        iterations += 1;
        let s = &x_new - &x;
        let y = &g_new - &g;
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            if fresh {
                h *= sy / y.dot(&y);
            }
            let rho = 1.0 / sy;
            let hy = &h * &y;
            let yhy = y.dot(&hy);
            // H ← (I − ρsyᵀ) H (I − ρysᵀ) + ρssᵀ
            h += (&s * s.transpose()) * (rho * rho * yhy + rho) - (&hy * s.transpose() + &s * hy.transpose()) * rho;
            fresh = false;
        }
        flat = fx - f_new <= opts.f_tol * fx.abs().max(f_new.abs());
        x = x_new;
        fx = f_new;
        g = g_new;
        if flat {
            break;
        }
    }
    let converged = flat || g.amax() < opts.grad_tol;
    Ok(BfgsResult {
        x: x.as_slice().to_vec(),
        value: fx,
        grad: g.as_slice().to_vec(),
        iterations,
        converged,
        line_search_failed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_rosenbrock() {
        let r = bfgs_minimize(
            |x| {
                let (a, b) = (x[0], x[1]);
                let v = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
                Ok((v, vec![-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)]))
            },
            &[-1.2, 1.0],
            &BfgsOptions::default(),
        )
        .unwrap();
        assert!(r.converged);
        assert!((r.x[0] - 1.0).abs() < 1e-6 && (r.x[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn quadratic_converges_quickly() {
        let r = bfgs_minimize(
            |x| Ok((x[0] * x[0] + 10.0 * x[1] * x[1], vec![2.0 * x[0], 20.0 * x[1]])),
            &[1.0, 1.0],
            &BfgsOptions::default(),
        )
        .unwrap();
        assert!(r.converged && r.iterations < 20);
    }

    #[test]
    fn inconsistent_gradient_flags_line_search() {
        // gradient points uphill, so no step decreases the value
        let r = bfgs_minimize(|x| Ok((x[0], vec![-1.0])), &[0.0], &BfgsOptions::default()).unwrap();
        assert!(r.line_search_failed && !r.converged);
        assert_eq!(r.x, vec![0.0]);
    }

    #[test]
    fn rejects_nonfinite_start() {
        assert!(bfgs_minimize(|_| Ok((f64::NAN, vec![0.0])), &[0.0], &BfgsOptions::default()).is_err());
    }
}
