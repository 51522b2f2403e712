//! Self-checks: gradient identities, manifold invariants, and a Monte Carlo
//! oracle for the covariance blocks, plus checkpoint integrity.

use std::path::Path;

use mfgp_core::argp::{
    assemble_covariance, cross_covariance, log_likelihood, log_likelihood_grad_phi, log_likelihood_grad_w,
    prior_variance, FidelityDataset, FidelityLevel, LevelHyperParams, PhiVector,
};
use mfgp_core::kernels::{
    corr_matrix, projected_corr_grad_w, se_kernel, se_kernel_grad_input, se_kernel_grad_theta, Lengthscales,
};
use mfgp_core::stiefel::{
    geodesic_flow, geodesic_flow_sphere, sample_uniform_stiefel, tangent_project, TangentVector,
};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::commands::read_checkpoint;

const H: f64 = 1e-6;

pub struct CheckLine {
    pub name: &'static str,
    pub measured: f64,
    pub tol: f64,
}

impl CheckLine {
    pub fn passed(&self) -> bool {
        self.measured <= self.tol
    }

    pub fn render(&self) -> String {
        let verdict = if self.passed() { "PASS" } else { "FAIL" };
        format!("{verdict} {:<28} measured {:.3e}  tolerance {:.1e}", self.name, self.measured, self.tol)
    }
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-3)
}

fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

fn lengthscales(n: usize, rng: &mut ChaCha8Rng) -> Lengthscales {
    Lengthscales::new((0..n).map(|_| rng.random_range(0.5..2.5)).collect()).unwrap()
}

fn kernel_checks(rng: &mut ChaCha8Rng) -> Vec<CheckLine> {
    let (mut e_theta, mut e_input, mut e_w) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..100 {
        let n = rng.random_range(1..5);
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.5..1.5)).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(-1.5..1.5)).collect();
        let theta = lengthscales(n, rng);
        let gt = se_kernel_grad_theta(&x, &y, &theta).unwrap();
        let gi = se_kernel_grad_input(&x, &y, &theta).unwrap();
        for i in 0..n {
            let mut tp = theta.as_slice().to_vec();
            let mut tm = tp.clone();
            tp[i] += H;
            tm[i] -= H;
            let fd = (se_kernel(&x, &y, &Lengthscales::new(tp).unwrap()).unwrap()
                - se_kernel(&x, &y, &Lengthscales::new(tm).unwrap()).unwrap())
                / (2.0 * H);
            e_theta = e_theta.max(rel(gt[i], fd));
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += H;
            xm[i] -= H;
            let fd = (se_kernel(&xp, &y, &theta).unwrap() - se_kernel(&xm, &y, &theta).unwrap()) / (2.0 * H);
            e_input = e_input.max(rel(gi[i], fd));
        }

        let big_d = rng.random_range(2..6);
        let d = rng.random_range(1..=big_d);
        let w = sample_uniform_stiefel(big_d, d, rng).unwrap();
        let xd: Vec<f64> = (0..big_d).map(|_| rng.random_range(-1.5..1.5)).collect();
        let yd: Vec<f64> = (0..big_d).map(|_| rng.random_range(-1.5..1.5)).collect();
        let th = lengthscales(d, rng);
        let g = projected_corr_grad_w(&xd, &yd, &w, &th).unwrap();
        let a = DMatrix::from_row_slice(1, big_d, &xd);
        let b = DMatrix::from_row_slice(1, big_d, &yd);
        let proj = |m: &DMatrix<f64>| corr_matrix(&(&a * m), &(&b * m), &th).unwrap()[(0, 0)];
        for i in 0..big_d {
            for j in 0..d {
                let mut p = w.as_matrix().clone();
                let mut q = p.clone();
                p[(i, j)] += H;
                q[(i, j)] -= H;
                e_w = e_w.max(rel(g[(i, j)], (proj(&p) - proj(&q)) / (2.0 * H)));
            }
        }
    }
    vec![
        CheckLine { name: "kernel.grad_theta", measured: e_theta, tol: 1e-5 },
        CheckLine { name: "kernel.grad_input", measured: e_input, tol: 1e-5 },
        CheckLine { name: "kernel.grad_projection", measured: e_w, tol: 1e-5 },
    ]
}

fn random_phi(s: usize, d: usize, rng: &mut ChaCha8Rng) -> PhiVector {
    let levels = (0..s)
        .map(|t| LevelHyperParams {
            theta: Lengthscales::new((0..d).map(|_| rng.random_range(0.5..2.0)).collect()).unwrap(),
            sigma2: rng.random_range(0.5..2.0),
            noise2: rng.random_range(0.01..0.2),
            rho_prev: (t > 0).then(|| rng.random_range(-1.5..1.5)),
        })
        .collect();
    PhiVector::new(levels).unwrap()
}

fn random_data(sizes: &[usize], big_d: usize, rng: &mut ChaCha8Rng) -> FidelityDataset {
    let levels = sizes
        .iter()
        .map(|&n| FidelityLevel {
            design: gaussian(n, big_d, rng),
            obs: DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal)),
        })
        .collect();
    FidelityDataset::new(levels).unwrap()
}

fn likelihood_checks(rng: &mut ChaCha8Rng) -> Vec<CheckLine> {
    let (mut e_phi, mut e_w) = (0.0f64, 0.0f64);
    for _ in 0..50 {
        let s = rng.random_range(1..4);
        let sizes: Vec<usize> = (0..s).map(|t| 6 - t).collect();
        let data = random_data(&sizes, 4, rng);
        let d = rng.random_range(1..3);
        let w = sample_uniform_stiefel(4, d, rng).unwrap();
        let phi = random_phi(s, d, rng);
        let g = log_likelihood_grad_phi(&phi, &w, &data).unwrap();
        let x0 = phi.to_free();
        for i in 0..x0.len() {
            let mut xp = x0.clone();
            let mut xm = x0.clone();
            xp[i] += H;
            xm[i] -= H;
            let fp = log_likelihood(&phi.with_free(&xp).unwrap(), &w, &data).unwrap();
            let fm = log_likelihood(&phi.with_free(&xm).unwrap(), &w, &data).unwrap();
            e_phi = e_phi.max(rel(g[i], (fp - fm) / (2.0 * H)));
        }
        let gw = log_likelihood_grad_w(&phi, &w, &data).unwrap();
        for i in 0..4 {
            for j in 0..d {
                let mut p = w.as_matrix().clone();
                let mut q = p.clone();
                p[(i, j)] += H;
                q[(i, j)] -= H;
                let fd = (dense_loglik_unchecked(&phi, &p, &data) - dense_loglik_unchecked(&phi, &q, &data)) / (2.0 * H);
                e_w = e_w.max(rel(gw[(i, j)], fd));
            }
        }
    }
    vec![
        CheckLine { name: "likelihood.grad_phi", measured: e_phi, tol: 1e-5 },
        CheckLine { name: "likelihood.grad_w", measured: e_w, tol: 1e-4 },
    ]
}

/// Log-likelihood at a matrix that need not be orthonormal, built from the
/// recursion entry by entry.
fn dense_loglik_unchecked(phi: &PhiVector, w: &DMatrix<f64>, data: &FidelityDataset) -> f64 {
    let pts = projected_points(w, data, &DMatrix::zeros(0, w.nrows()));
    let levels = data.level_of_rows();
    let n = levels.len();
    let mut v = DMatrix::from_fn(n, n, |a, b| {
        let (ta, tb) = (levels[a], levels[b]);
        let mut s = 0.0;
        for j in 0..=ta.min(tb) {
            let l = &phi.levels[j];
            let k = se_kernel(&pts[a], &pts[b], &l.theta).unwrap();
            s += phi.carry(j, ta) * phi.carry(j, tb) * l.sigma2 * k;
            if ta == tb && a == b {
                s += phi.carry(j, ta).powi(2) * l.noise2;
            }
        }
        s
    });
    let jitter = 1e-8 * v.diagonal().mean();
    for i in 0..n {
        v[(i, i)] += jitter;
    }
    let z = data.stacked_obs();
    let chol = v.cholesky().expect("positive definite");
    let alpha = chol.solve(&z);
    let logdet: f64 = 2.0 * chol.l().diagonal().iter().map(|x| x.ln()).sum::<f64>();
    -0.5 * z.dot(&alpha) - 0.5 * logdet - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln()
}

fn projected_points(w: &DMatrix<f64>, data: &FidelityDataset, test: &DMatrix<f64>) -> Vec<Vec<f64>> {
    let mut pts = Vec::new();
    for lvl in data.levels() {
        for i in 0..lvl.design.nrows() {
            pts.push((lvl.design.row(i) * w).iter().copied().collect());
        }
    }
    for i in 0..test.nrows() {
        pts.push((test.row(i) * w).iter().copied().collect());
    }
    pts
}

fn manifold_checks(rng: &mut ChaCha8Rng) -> Vec<CheckLine> {
    let w0 = sample_uniform_stiefel(10, 3, rng).unwrap();
    let u0 = tangent_project(&w0, &gaussian(10, 3, rng)).unwrap();
    let (mut w, mut u) = (w0, u0.clone());
    let mut drift = 0.0f64;
    for _ in 0..1000 {
        (w, u) = geodesic_flow(&w, &u, 0.05).unwrap();
        drift = drift.max(w.orthonormality_error());
    }
    let mut energy = 0.0f64;
    let mut sphere = 0.0f64;
    let mut idem = 0.0f64;
    for _ in 0..200 {
        let big_d = rng.random_range(2..9);
        let d = rng.random_range(1..=big_d);
        let w = sample_uniform_stiefel(big_d, d, rng).unwrap();
        let u = tangent_project(&w, &gaussian(big_d, d, rng)).unwrap();
        let (_, u1) = geodesic_flow(&w, &u, 1.0).unwrap();
        energy = energy.max((u1.kinetic_energy() - u.kinetic_energy()).abs());
        let p = tangent_project(&w, u.as_matrix()).unwrap();
        idem = idem.max((p.as_matrix() - u.as_matrix()).norm());

        let w1 = sample_uniform_stiefel(big_d, 1, rng).unwrap();
        let v1: TangentVector = tangent_project(&w1, &gaussian(big_d, 1, rng)).unwrap();
        let t = rng.random_range(0.0..3.0);
        let (a, _) = geodesic_flow(&w1, &v1, t).unwrap();
        let (b, _) = geodesic_flow_sphere(&w1, &v1, t).unwrap();
        sphere = sphere.max((a.as_matrix() - b.as_matrix()).norm());
    }
    vec![
        CheckLine { name: "manifold.chained_drift", measured: drift, tol: 1e-8 },
        CheckLine { name: "manifold.energy", measured: energy, tol: 1e-8 },
        CheckLine { name: "manifold.sphere_equivalence", measured: sphere, tol: 1e-10 },
        CheckLine { name: "manifold.projection_idempotent", measured: idem, tol: 1e-12 },
    ]
}

/// Fraction of covariance entries farther than three standard errors from
/// 200,000 draws of the generative recursion.
fn monte_carlo_check(rng: &mut ChaCha8Rng) -> CheckLine {
    let data = random_data(&[4, 4, 4], 3, rng);
    let w = sample_uniform_stiefel(3, 2, rng).unwrap();
    let phi = random_phi(3, 2, rng);
    let test = gaussian(2, 3, rng);
    let v = assemble_covariance(&phi, &data, &w).unwrap();
    let cross = cross_covariance(&test, &phi, &data, &w).unwrap();
    let prior = prior_variance(&test, &phi, &w).unwrap();
    let n = v.nrows();
    let m = test.nrows();
    let mut expected = DMatrix::zeros(n + m, n + m);
    expected.view_mut((0, 0), (n, n)).copy_from(&v);
    expected.view_mut((n, 0), (m, n)).copy_from(&cross);
    expected.view_mut((0, n), (n, m)).copy_from(&cross.transpose());
    expected.view_mut((n, n), (m, m)).copy_from(&prior);

    let pts = projected_points(w.as_matrix(), &data, &test);
    let all = pts.len();
    let s = phi.num_levels();
    let factors: Vec<DMatrix<f64>> = phi
        .levels
        .iter()
        .map(|l| {
            let mut k = DMatrix::from_fn(all, all, |a, b| l.sigma2 * se_kernel(&pts[a], &pts[b], &l.theta).unwrap());
            for i in 0..all {
                k[(i, i)] += 1e-10 * l.sigma2;
            }
            k.cholesky().expect("positive definite").l()
        })
        .collect();
    let levels = data.level_of_rows();
    let draws = 200_000;
    let mut sum = DVector::<f64>::zeros(all);
    let mut outer = DMatrix::<f64>::zeros(all, all);
    for _ in 0..draws {
        let deltas: Vec<DVector<f64>> =
            factors.iter().map(|l| l * DVector::from_fn(all, |_, _| rng.sample::<f64, _>(StandardNormal))).collect();
        let mut z = DVector::zeros(all);
        for a in 0..all {
            let t = if a < n { levels[a] } else { s - 1 };
            let mut val = 0.0;
            for j in 0..=t {
                let eps = if a < n { phi.levels[j].noise2.sqrt() * rng.sample::<f64, _>(StandardNormal) } else { 0.0 };
                val += phi.carry(j, t) * (deltas[j][a] + eps);
            }
            z[a] = val;
        }
        sum += &z;
        outer.ger(1.0, &z, &z, 1.0);
    }
    let nd = draws as f64;
    let mean = sum / nd;
    let emp = (outer - &mean * mean.transpose() * nd) / (nd - 1.0);
    let (mut fails, mut total) = (0usize, 0usize);
    for a in 0..all {
        for b in a..all {
            let se = ((expected[(a, a)] * expected[(b, b)] + expected[(a, b)].powi(2)) / nd).sqrt();
            total += 1;
            if (emp[(a, b)] - expected[(a, b)]).abs() > 3.0 * se {
                fails += 1;
            }
        }
    }
    CheckLine { name: "covariance.monte_carlo", measured: fails as f64 / total as f64, tol: 0.05 }
}

fn checkpoint_checks(path: &Path) -> Vec<CheckLine> {
    let ck = match read_checkpoint(path) {
        Ok(c) => c,
        Err(_) => return vec![CheckLine { name: "checkpoint.readable", measured: 1.0, tol: 0.0 }],
    };
    let ortho = mfgp_core::linalg::orthonormality_error(&ck.w);
    let mut out = vec![CheckLine { name: "checkpoint.orthonormality", measured: ortho, tol: 1e-8 }];
    let ll_err = match ck.to_model() {
        Ok(m) => (m.log_likelihood() - ck.log_likelihood).abs() / ck.log_likelihood.abs().max(1.0),
        Err(_) => f64::INFINITY,
    };
    out.push(CheckLine { name: "checkpoint.log_likelihood", measured: ll_err, tol: 1e-8 });
    out
}

/// Run every suite with a generator seeded from `seed`.
pub fn run_checks(seed: u64, checkpoint: Option<&Path>) -> Vec<CheckLine> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut lines = kernel_checks(&mut rng);
    lines.extend(likelihood_checks(&mut rng));
    lines.extend(manifold_checks(&mut rng));
    lines.push(monte_carlo_check(&mut rng));
    if let Some(p) = checkpoint {
        lines.extend(checkpoint_checks(p));
    }
    lines
}
