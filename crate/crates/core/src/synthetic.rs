//! Synthetic multi-fidelity datasets with known embeddings.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::argp::{FidelityDataset, FidelityLevel};
use crate::error::{arg_err, Result};
use crate::stiefel::sample_uniform_stiefel;

pub const EXAMPLE1_W: [f64; 10] =
    [0.14042, -0.35474, 0.42674, -0.09312, -0.21463, 0.26425, 0.25603, -0.18959, 0.00467, -0.66800];

/// Row-major 10×2.
pub const EXAMPLE2_W: [[f64; 2]; 10] = [
    [0.28490, 0.34201],
    [-0.21608, 0.19310],
    [-0.46249, 0.36223],
    [-0.15187, -0.05088],
    [-0.16601, 0.51910],
    [0.70297, 0.23900],
    [-0.16004, 0.23084],
    [0.06096, -0.48747],
    [0.23763, 0.26276],
    [-0.16620, -0.15930],
];

/// Example 1 evaluates its links at `offset + scale · wᵀx`, which puts the
/// latent coordinate of the `[−1, 1]^10` cube on roughly `[0, 3]`.
pub const EXAMPLE1_LATENT_OFFSET: f64 = 1.5;
pub const EXAMPLE1_LATENT_SCALE: f64 = 0.87;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticKind {
    Example1,
    Example2,
    Highdim,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub which: SyntheticKind,
    /// Points per level, lowest fidelity first.
    pub sizes: Vec<usize>,
    pub noise_sd: Vec<f64>,
    pub seed: u64,
    pub input_dim: usize,
    pub latent_dim: usize,
}

impl SyntheticSpec {
    pub fn example1(seed: u64) -> Self {
        Self {
            which: SyntheticKind::Example1,
            sizes: vec![300, 200, 10],
            noise_sd: vec![0.5, 3.0, 5.0],
            seed,
            input_dim: 10,
            latent_dim: 1,
        }
    }

    pub fn example2(seed: u64) -> Self {
        Self {
            which: SyntheticKind::Example2,
            sizes: vec![200, 100, 25],
            noise_sd: vec![0.1, 0.1, 0.05],
            seed,
            input_dim: 10,
            latent_dim: 2,
        }
    }

    pub fn highdim(seed: u64) -> Self {
        Self {
            which: SyntheticKind::Highdim,
            sizes: vec![160, 75],
            noise_sd: vec![0.01, 0.01],
            seed,
            input_dim: 85,
            latent_dim: 3,
        }
    }

    /// The same spec without observation noise.
    pub fn noise_free(mut self) -> Self {
        self.noise_sd.iter_mut().for_each(|s| *s = 0.0);
        self
    }

    fn validate(&self) -> Result<()> {
        let (levels, big_d, d) = match self.which {
            SyntheticKind::Example1 => (3, 10, 1),
            SyntheticKind::Example2 => (3, 10, 2),
            SyntheticKind::Highdim => (2, self.input_dim, self.latent_dim),
        };
        if self.sizes.len() != levels || self.noise_sd.len() != levels {
            return arg_err(format!("{:?} needs {levels} sizes and noise levels", self.which));
        }
        if self.input_dim != big_d || self.latent_dim != d || d == 0 || d > big_d {
            return arg_err(format!("{:?} has D = {big_d} and d = {d}", self.which));
        }
        if self.sizes.iter().any(|n| *n == 0) || self.sizes.windows(2).any(|w| w[1] > w[0]) {
            return arg_err("level sizes must be positive and nonincreasing for a nested design");
        }
        if self.noise_sd.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return arg_err("noise standard deviations must be nonnegative");
        }
        Ok(())
    }
}

/// A generated dataset with its ground truth.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SyntheticData {
    pub spec: SyntheticSpec,
    pub data: FidelityDataset,
    /// Ground-truth projection in the original input coordinates.
    pub w_true: DMatrix<f64>,
    pub latent_offset: f64,
    pub latent_scale: f64,
}

pub fn example1_links(xt: f64) -> (f64, f64, f64) {
    let f1 = 0.5 * (8.0 * xt - 2.0).powi(2) * (5.0 * xt - 4.0).sin() + 10.0 * (xt - 0.5);
    let f2 = 2.0 * f1 - 20.0 * xt + 20.0;
    let f3 = 1.5 * f2 + 30.0 * xt * xt;
    (f1, f2, f3)
}

pub fn example2_links(x1t: f64, x2t: f64) -> (f64, f64, f64) {
    let f1 = x1t.sin();
    let f2 = f1 - 7.0 * x2t.sin().powi(2);
    let f3 = 1.5 * f2 + 5.0 * x2t * x2t * x1t.sin();
    (f1, f2, f3)
}

/// Smooth random links of the high-dimensional analog: a low-fidelity
/// function of three latent coordinates and a high-fidelity one equal to it
/// plus a smaller discrepancy (`ρ = 1`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HighdimLinks {
    linear: Vec<f64>,
    /// `(amplitude, frequency vector, phase)` per trigonometric term.
    low_terms: Vec<(f64, Vec<f64>, f64)>,
    high_terms: Vec<(f64, Vec<f64>, f64)>,
}

impl HighdimLinks {
    pub fn from_seed(seed: u64, d: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_11a5);
        let terms = |n: usize, amp: f64, freq: f64, rng: &mut ChaCha8Rng| -> Vec<(f64, Vec<f64>, f64)> {
            (0..n)
                .map(|k| {
                    let mut f = vec![0.0; d];
                    // one axis-aligned term per coordinate, then mixed terms
                    if k < d {
                        f[k] = freq * rng.random_range(0.8..1.2);
                    } else {
                        f.iter_mut().for_each(|v| *v = freq * rng.sample::<f64, _>(StandardNormal) / (d as f64).sqrt());
                    }
                    (amp * rng.random_range(0.7..1.3), f, rng.random_range(0.0..std::f64::consts::TAU))
                })
                .collect()
        };
        let low_terms = terms(d + 3, 1.0, 2.0, &mut rng);
        let high_terms = terms(d, 0.3, 2.5, &mut rng);
        let linear = (0..d).map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 } * rng.random_range(0.8..1.2)).collect();
        Self { linear, low_terms, high_terms }
    }

    fn trig(terms: &[(f64, Vec<f64>, f64)], z: &[f64]) -> f64 {
        terms.iter().map(|(a, f, c)| a * (f.iter().zip(z).map(|(u, v)| u * v).sum::<f64>() + c).sin()).sum()
    }

    pub fn eval(&self, z: &[f64]) -> (f64, f64) {
        let lin: f64 = self.linear.iter().zip(z).map(|(a, v)| a * v).sum();
        let lo = lin + Self::trig(&self.low_terms, z);
        (lo, lo + Self::trig(&self.high_terms, z))
    }
}

fn uniform_design(n: usize, big_d: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(n, big_d, |_, _| rng.random_range(-1.0..1.0))
}

fn truth_matrix(spec: &SyntheticSpec) -> Result<DMatrix<f64>> {
    Ok(match spec.which {
        SyntheticKind::Example1 => DMatrix::from_column_slice(10, 1, &EXAMPLE1_W),
        SyntheticKind::Example2 => DMatrix::from_fn(10, 2, |i, j| EXAMPLE2_W[i][j]),
        SyntheticKind::Highdim => {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x0bad_cafe);
            sample_uniform_stiefel(spec.input_dim, spec.latent_dim, &mut rng)?.into_matrix()
        }
    })
}

/// Noise-free outputs of every level at the rows of `x`.
fn link_values(spec: &SyntheticSpec, w: &DMatrix<f64>, x: &DMatrix<f64>) -> Vec<DVector<f64>> {
    let z = x * w;
    let n = x.nrows();
    let s = spec.sizes.len();
    let mut out = vec![DVector::zeros(n); s];
    let links = (spec.which == SyntheticKind::Highdim).then(|| HighdimLinks::from_seed(spec.seed, spec.latent_dim));
    for i in 0..n {
        let vals: Vec<f64> = match spec.which {
            SyntheticKind::Example1 => {
                let (a, b, c) = example1_links(EXAMPLE1_LATENT_OFFSET + EXAMPLE1_LATENT_SCALE * z[(i, 0)]);
                vec![a, b, c]
            }
            SyntheticKind::Example2 => {
                let (a, b, c) = example2_links(z[(i, 0)], z[(i, 1)]);
                vec![a, b, c]
            }
            SyntheticKind::Highdim => {
                let zi: Vec<f64> = z.row(i).iter().copied().collect();
                let (a, b) = links.as_ref().unwrap().eval(&zi);
                vec![a, b]
            }
        };
        for t in 0..s {
            out[t][i] = vals[t];
        }
    }
    out
}

/// Draw the nested training set described by `spec`: inputs uniform on
/// `[−1, 1]^D`, level `t` on the first `n_t` rows of the level-1 design, and
/// independent Gaussian noise per level.
pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let w_true = truth_matrix(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let x = uniform_design(spec.sizes[0], spec.input_dim, &mut rng);
    let clean = link_values(spec, &w_true, &x);
    let levels = spec
        .sizes
        .iter()
        .enumerate()
        .map(|(t, &n)| {
            let obs = DVector::from_fn(n, |i, _| clean[t][i] + spec.noise_sd[t] * rng.sample::<f64, _>(StandardNormal));
            FidelityLevel { design: x.rows(0, n).into_owned(), obs }
        })
        .collect();
    let (latent_offset, latent_scale) = match spec.which {
        SyntheticKind::Example1 => (EXAMPLE1_LATENT_OFFSET, EXAMPLE1_LATENT_SCALE),
        _ => (0.0, 1.0),
    };
    Ok(SyntheticData { spec: spec.clone(), data: FidelityDataset::new(levels)?, w_true, latent_offset, latent_scale })
}

pub fn example1_generate(spec: &SyntheticSpec) -> Result<SyntheticData> {
    if spec.which != SyntheticKind::Example1 {
        return arg_err("spec is not example 1");
    }
    generate(spec)
}

pub fn example2_generate(spec: &SyntheticSpec) -> Result<SyntheticData> {
    if spec.which != SyntheticKind::Example2 {
        return arg_err("spec is not example 2");
    }
    generate(spec)
}

pub fn highdim_generate(spec: &SyntheticSpec) -> Result<SyntheticData> {
    if spec.which != SyntheticKind::Highdim {
        return arg_err("spec is not the high-dimensional analog");
    }
    generate(spec)
}

/// Held-out highest-fidelity observations at `n` fresh uniform inputs, with
/// the top level's noise. Reproducible from the spec's seed.
pub fn test_set(spec: &SyntheticSpec, n: usize) -> Result<(DMatrix<f64>, DVector<f64>)> {
    spec.validate()?;
    let w_true = truth_matrix(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(0x7e57_5e7));
    let x = uniform_design(n, spec.input_dim, &mut rng);
    let top = link_values(spec, &w_true, &x).pop().unwrap();
    let sd = *spec.noise_sd.last().unwrap();
    let y = top.map(|v| v + sd * rng.sample::<f64, _>(StandardNormal));
    Ok((x, y))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn example1_link_values() {
        let (f1, f2, f3) = example1_links(0.25);
        assert!((f1 + 2.5).abs() < 1e-12);
        assert!((f2 - 10.0).abs() < 1e-12);
        assert!((f3 - 16.875).abs() < 1e-12);
        let (f1, _, _) = example1_links(0.5);
        assert!((f1 - 2.0 * (-1.5f64).sin()).abs() < 1e-14);
        assert!((f1 + 1.99499).abs() < 1e-5);
        for i in 0..=100 {
            let x = -1.0 + 0.05 * i as f64;
            let (_, f2, f3) = example1_links(x);
            assert!((f3 - 1.5 * f2 - 30.0 * x * x).abs() < 1e-9);
        }
    }

    #[test]
    fn example2_link_values() {
        assert_eq!(example2_links(0.0, 0.0), (0.0, 0.0, 0.0));
        let (a, b, c) = example2_links(std::f64::consts::FRAC_PI_2, 0.0);
        assert!((a - 1.0).abs() < 1e-15 && (b - 1.0).abs() < 1e-15 && (c - 1.5).abs() < 1e-15);
        let (a, b, c) = example2_links(0.0, std::f64::consts::FRAC_PI_2);
        assert!(a.abs() < 1e-15 && (b + 7.0).abs() < 1e-14 && (c + 10.5).abs() < 1e-14);
    }

    #[test]
    fn printed_projections_are_nearly_orthonormal() {
        let w = DMatrix::from_column_slice(10, 1, &EXAMPLE1_W);
        assert!((w.norm() - 1.0).abs() < 1e-4);
        let w2 = DMatrix::from_fn(10, 2, |i, j| EXAMPLE2_W[i][j]);
        let e = (w2.transpose() * &w2 - DMatrix::identity(2, 2)).norm();
        assert!(e < 5e-3, "{e}");
    }

    #[test]
    fn sizes_nesting_and_noise_free_exactness() {
        for spec in [SyntheticSpec::example1(3), SyntheticSpec::example2(3), SyntheticSpec::highdim(3)] {
            let g = generate(&spec.clone().noise_free()).unwrap();
            assert_eq!(g.data.sizes(), spec.sizes);
            assert!(g.data.is_nested());
            let clean = link_values(&spec, &g.w_true, &g.data.level(0).design);
            for (t, lvl) in g.data.levels().iter().enumerate() {
                for i in 0..lvl.obs.len() {
                    assert_eq!(lvl.obs[i], clean[t][i]);
                }
            }
        }
    }

    #[test]
    fn generation_is_reproducible() {
        let a = generate(&SyntheticSpec::example2(11)).unwrap();
        let b = generate(&SyntheticSpec::example2(11)).unwrap();
        assert_eq!(a.data, b.data);
        let c = generate(&SyntheticSpec::example2(12)).unwrap();
        assert_ne!(a.data, c.data);
        let (x1, y1) = test_set(&SyntheticSpec::example2(11), 250).unwrap();
        let (x2, y2) = test_set(&SyntheticSpec::example2(11), 250).unwrap();
        assert_eq!((x1.nrows(), &x1, &y1), (250, &x2, &y2));
    }

    #[test]
    fn highdim_truth_and_correlation() {
        let g = generate(&SyntheticSpec::highdim(5)).unwrap();
        let w = &g.w_true;
        assert_eq!(w.shape(), (85, 3));
        assert!((w.transpose() * w - DMatrix::identity(3, 3)).norm() < 1e-12);
        let lo = g.data.level(0).obs.rows(0, 75).into_owned();
        let hi = &g.data.level(1).obs;
        let (ml, mh) = (lo.mean(), hi.mean());
        let cov = lo.iter().zip(hi.iter()).map(|(a, b)| (a - ml) * (b - mh)).sum::<f64>();
        let corr = cov / (lo.map(|a| (a - ml).powi(2)).sum() * hi.map(|b| (b - mh).powi(2)).sum()).sqrt();
        assert!(corr > 0.5, "{corr}");
    }

    #[test]
    fn rejects_growing_sizes() {
        let mut spec = SyntheticSpec::example1(0);
        spec.sizes = vec![10, 20, 5];
        assert!(generate(&spec).is_err());
    }
}
