//! Independent reference implementations used as test oracles. Nothing here
//! calls into the covariance or likelihood code under test.
#![allow(dead_code)]

use mfgp_core::argp::{FidelityDataset, FidelityLevel, LevelHyperParams, PhiVector};
use mfgp_core::kernels::Lengthscales;
use mfgp_core::stiefel::{sample_uniform_stiefel, ProjectionMatrix};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

pub fn rand_normal_matrix<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// Random hyperparameters for `s` levels and latent dimension `d`.
pub fn random_phi<R: Rng>(s: usize, d: usize, rng: &mut R) -> PhiVector {
    let levels = (0..s)
        .map(|t| LevelHyperParams {
            theta: Lengthscales::new((0..d).map(|_| rng.random_range(0.5..2.0)).collect()).unwrap(),
            sigma2: rng.random_range(0.5..2.0),
            noise2: rng.random_range(0.01..0.2),
            rho_prev: if t == 0 { None } else { Some(rng.random_range(-1.5..1.5)) },
        })
        .collect();
    PhiVector::new(levels).unwrap()
}

/// Random dataset with `sizes[t]` points per level in `big_d` dimensions;
/// nested when requested (each level is a prefix of the one below).
pub fn random_data<R: Rng>(sizes: &[usize], big_d: usize, nested: bool, rng: &mut R) -> FidelityDataset {
    let base = rand_normal_matrix(sizes[0], big_d, rng);
    let levels = sizes
        .iter()
        .map(|&n| {
            let design = if nested { base.rows(0, n).into_owned() } else { rand_normal_matrix(n, big_d, rng) };
            let obs = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
            FidelityLevel { design, obs }
        })
        .collect();
    FidelityDataset::new(levels).unwrap()
}

pub fn random_w<R: Rng>(big_d: usize, d: usize, rng: &mut R) -> ProjectionMatrix {
    sample_uniform_stiefel(big_d, d, rng).unwrap()
}

pub fn se(x: &[f64], y: &[f64], theta: &[f64]) -> f64 {
    let s: f64 = x.iter().zip(y).zip(theta).map(|((a, b), t)| (a - b).powi(2) / (t * t)).sum();
    (-s).exp()
}

/// `∏_{i=j+1}^{t} ρ_i` written out directly from the recursion.
pub fn carry(phi: &PhiVector, j: usize, t: usize) -> f64 {
    let mut c = 1.0;
    for i in (j + 1)..=t {
        c *= phi.levels[i].rho_prev.unwrap();
    }
    c
}

/// Covariance of the stacked observations, built entry by entry for an
/// arbitrary (not necessarily orthonormal) projection matrix.
pub fn dense_covariance(phi: &PhiVector, w: &DMatrix<f64>, data: &FidelityDataset) -> DMatrix<f64> {
    let mut pts: Vec<(usize, Vec<f64>)> = Vec::new();
    for (t, lvl) in data.levels().iter().enumerate() {
        for i in 0..lvl.design.nrows() {
            let x = lvl.design.row(i).transpose();
            let xt = w.transpose() * x;
            pts.push((t, xt.iter().copied().collect()));
        }
    }
    let n = pts.len();
    DMatrix::from_fn(n, n, |a, b| {
        let (ta, ref xa) = pts[a];
        let (tb, ref xb) = pts[b];
        let mut v = 0.0;
        for j in 0..=ta.min(tb) {
            let lj = &phi.levels[j];
            v += carry(phi, j, ta) * carry(phi, j, tb) * lj.sigma2 * se(xa, xb, lj.theta.as_slice());
        }
        if a == b {
            for j in 0..=ta {
                v += carry(phi, j, ta).powi(2) * phi.levels[j].noise2;
            }
        }
        v
    })
}

/// Log-likelihood by LU determinant and explicit inverse, with the same
/// relative diagonal jitter policy as the library.
pub fn dense_loglik(phi: &PhiVector, w: &DMatrix<f64>, data: &FidelityDataset) -> f64 {
    let mut v = dense_covariance(phi, w, data);
    let n = v.nrows();
    let jitter = 1e-8 * v.diagonal().mean();
    for i in 0..n {
        v[(i, i)] += jitter;
    }
    let z = data.stacked_obs();
    let det = v.clone().determinant();
    let inv = v.try_inverse().unwrap();
    -0.5 * (z.transpose() * inv * &z)[(0, 0)] - 0.5 * det.ln() - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln()
}

/// Textbook single-output GP regression with kernel `σ² r + noise δ`.
pub fn textbook_gp(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    xs: &DMatrix<f64>,
    theta: &[f64],
    sigma2: f64,
    noise2: f64,
    jitter_rel: f64,
) -> (DVector<f64>, DMatrix<f64>) {
    let n = x.nrows();
    let row = |m: &DMatrix<f64>, i: usize| -> Vec<f64> { m.row(i).iter().copied().collect() };
    let mut k = DMatrix::from_fn(n, n, |a, b| sigma2 * se(&row(x, a), &row(x, b), theta));
    for i in 0..n {
        k[(i, i)] += noise2;
    }
    let jitter = jitter_rel * k.diagonal().mean();
    for i in 0..n {
        k[(i, i)] += jitter;
    }
    let ks = DMatrix::from_fn(xs.nrows(), n, |a, b| sigma2 * se(&row(xs, a), &row(x, b), theta));
    let kss = DMatrix::from_fn(xs.nrows(), xs.nrows(), |a, b| sigma2 * se(&row(xs, a), &row(xs, b), theta));
    let kinv = k.try_inverse().unwrap();
    let mean = &ks * &kinv * y;
    let cov = kss - &ks * &kinv * ks.transpose();
    (mean, cov)
}

/// Relative error with an absolute floor for near-zero references.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-3)
}

/// Independent draws from the generative recursion at the stacked training
/// points of `data` (noisy, one noise copy per level block) and at the test
/// points (noise-free top level). Returns `(train, test)` draws.
pub struct GenerativeSampler {
    /// One Cholesky factor of `σ_j² R_j` over all points, per level `j`.
    factors: Vec<DMatrix<f64>>,
    train_levels: Vec<usize>,
    n_train: usize,
    n_test: usize,
    coef: Vec<Vec<f64>>,
    noise_sd: Vec<f64>,
}

impl GenerativeSampler {
    pub fn new(phi: &PhiVector, w: &DMatrix<f64>, data: &FidelityDataset, test: &DMatrix<f64>) -> Self {
        let s = phi.levels.len();
        let mut pts: Vec<Vec<f64>> = Vec::new();
        let mut train_levels = Vec::new();
        for (t, lvl) in data.levels().iter().enumerate() {
            for i in 0..lvl.design.nrows() {
                pts.push((w.transpose() * lvl.design.row(i).transpose()).iter().copied().collect());
                train_levels.push(t);
            }
        }
        let n_train = pts.len();
        for i in 0..test.nrows() {
            pts.push((w.transpose() * test.row(i).transpose()).iter().copied().collect());
        }
        let n = pts.len();
        let factors = (0..s)
            .map(|j| {
                let lj = &phi.levels[j];
                let mut k = DMatrix::from_fn(n, n, |a, b| lj.sigma2 * se(&pts[a], &pts[b], lj.theta.as_slice()));
                for i in 0..n {
                    k[(i, i)] += 1e-10 * lj.sigma2;
                }
                k.cholesky().unwrap().l()
            })
            .collect();
        let coef = (0..s).map(|j| (0..s).map(|t| if j <= t { carry(phi, j, t) } else { 0.0 }).collect()).collect();
        let noise_sd = phi.levels.iter().map(|l| l.noise2.sqrt()).collect();
        Self { factors, train_levels, n_train, n_test: test.nrows(), coef, noise_sd }
    }

    /// One joint draw: first the stacked training observations, then the
    /// top-level latent values at the test points.
    pub fn draw<R: Rng>(&self, rng: &mut R) -> DVector<f64> {
        let s = self.factors.len();
        let n = self.n_train + self.n_test;
        let deltas: Vec<DVector<f64>> = self
            .factors
            .iter()
            .map(|l| l * DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal)))
            .collect();
        let mut out = DVector::zeros(n);
        for a in 0..self.n_train {
            let t = self.train_levels[a];
            let mut v = 0.0;
            for j in 0..=t {
                let eps: f64 = rng.sample(StandardNormal);
                v += self.coef[j][t] * (deltas[j][a] + self.noise_sd[j] * eps);
            }
            out[a] = v;
        }
        for a in self.n_train..n {
            out[a] = (0..s).map(|j| self.coef[j][s - 1] * deltas[j][a]).sum();
        }
        out
    }

    pub fn n_train(&self) -> usize {
        self.n_train
    }
}

/// Empirical covariance check: returns `(failures, total)` where an entry
/// fails when it is farther than 3 Gaussian standard errors from `expected`.
pub fn covariance_agreement(draws: &[DVector<f64>], expected: &DMatrix<f64>) -> (usize, usize) {
    let n = draws.len() as f64;
    let dim = expected.nrows();
    let mut mean = DVector::<f64>::zeros(dim);
    for d in draws {
        mean += d;
    }
    mean /= n;
    let mut emp = DMatrix::<f64>::zeros(dim, dim);
    for d in draws {
        let c = d - &mean;
        emp.ger(1.0, &c, &c, 1.0);
    }
    emp /= n - 1.0;
    let mut fails = 0;
    let mut total = 0;
    for a in 0..dim {
        for b in a..dim {
            let se = ((expected[(a, a)] * expected[(b, b)] + expected[(a, b)].powi(2)) / n).sqrt();
            total += 1;
            if (emp[(a, b)] - expected[(a, b)]).abs() > 3.0 * se {
                fails += 1;
            }
        }
    }
    (fails, total)
}

pub fn ks_statistic(samples: &mut [f64], cdf: impl Fn(f64) -> f64) -> f64 {
    samples.sort_by(f64::total_cmp);
    let n = samples.len() as f64;
    samples
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

/// Asymptotic Kolmogorov p-value.
pub fn ks_p_value(d: f64, n: usize) -> f64 {
    let en = (n as f64).sqrt();
    let lambda = (en + 0.12 + 0.11 / en) * d;
    let mut p = 0.0;
    for k in 1..100 {
        let kf = k as f64;
        p += 2.0 * (-1f64).powi(k - 1) * (-2.0 * kf * kf * lambda * lambda).exp();
    }
    p.clamp(0.0, 1.0)
}
