use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Result};
use crate::kernels::Lengthscales;

/// Hyperparameters introduced at one fidelity level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelHyperParams {
    pub theta: Lengthscales,
    /// Signal variance `σ_t²`.
    pub sigma2: f64,
    /// Observation-noise variance `σ²_{ε_t}`.
    pub noise2: f64,
    /// Scaling `ρ_{t−1}` of the level below; `None` on the lowest level.
    pub rho_prev: Option<f64>,
}

impl LevelHyperParams {
    pub fn validate(&self, level: usize) -> Result<()> {
        if !(self.sigma2.is_finite() && self.sigma2 > 0.0) {
            return arg_err(format!("level {}: sigma2 must be positive, got {}", level + 1, self.sigma2));
        }
        if !(self.noise2.is_finite() && self.noise2 >= 0.0) {
            return arg_err(format!("level {}: noise2 must be nonnegative, got {}", level + 1, self.noise2));
        }
        match (level, self.rho_prev) {
            (0, Some(_)) => arg_err("the lowest level has no rho"),
            (t, None) if t > 0 => arg_err(format!("level {} is missing rho", t + 1)),
            (_, Some(r)) if !r.is_finite() => arg_err("rho must be finite"),
            _ => Ok(()),
        }
    }
}

/// Noise variances never drop below this in log coordinates.
pub const MIN_NOISE2: f64 = 1e-12;

/// Stacked hyperparameters of all levels.
///
/// The flattened order is, level by level from the lowest,
/// `(θ_t[0..d], ρ_{t−1}, σ_t², σ²_{ε_t})`, with `ρ` absent on the first level.
/// Free coordinates use the same order with `log` applied to lengthscales
/// and variances and pinned `ρ` entries dropped.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhiVector {
    pub levels: Vec<LevelHyperParams>,
    /// `rho_pinned[t]` excludes `ρ_{t−1}` of level `t` from estimation.
    pub rho_pinned: Vec<bool>,
}

impl PhiVector {
    pub fn new(levels: Vec<LevelHyperParams>) -> Result<Self> {
        let s = levels.len();
        Self::with_pinned(levels, vec![false; s])
    }

    pub fn with_pinned(levels: Vec<LevelHyperParams>, rho_pinned: Vec<bool>) -> Result<Self> {
        if levels.is_empty() {
            return arg_err("phi needs at least one level");
        }
        if rho_pinned.len() != levels.len() || rho_pinned[0] {
            return arg_err("rho_pinned must have one entry per level and be false on level 1");
        }
        let dim = levels[0].theta.len();
        for (t, l) in levels.iter().enumerate() {
            l.validate(t)?;
            if l.theta.len() != dim {
                return arg_err(format!("level {} has {} lengthscales, expected {}", t + 1, l.theta.len(), dim));
            }
        }
        Ok(Self { levels, rho_pinned })
    }

    /// Default starting point: unit lengthscales, `ρ = 1`, and signal and
    /// noise variances taken from the spread of each level's observations.
    pub fn initial(obs_variances: &[f64], latent_dim: usize) -> Result<Self> {
        let levels = obs_variances
            .iter()
            .enumerate()
            .map(|(t, v)| {
                let v = if v.is_finite() && *v > 0.0 { *v } else { 1.0 };
                Ok(LevelHyperParams {
                    theta: Lengthscales::isotropic(1.0, latent_dim)?,
                    sigma2: v,
                    noise2: 1e-2 * v,
                    rho_prev: if t == 0 { None } else { Some(1.0) },
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(levels)
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn latent_dim(&self) -> usize {
        self.levels[0].theta.len()
    }

    /// `ρ` values indexed by level (`rho(0) = 1` by convention, unused).
    pub fn rho(&self, t: usize) -> f64 {
        self.levels[t].rho_prev.unwrap_or(1.0)
    }

    /// `c(j, t) = ∏_{i=j+1}^{t} ρ_{i−1}` (0-based levels, `j ≤ t`): the
    /// factor carrying level `j`'s discrepancy up to level `t`.
    pub fn carry(&self, j: usize, t: usize) -> f64 {
        ((j + 1)..=t).map(|i| self.rho(i)).product()
    }

    /// `∂c(j, t)/∂ρ` of level `m` (the scaling from `m − 1` to `m`).
    pub fn carry_deriv(&self, j: usize, t: usize, m: usize) -> f64 {
        if m <= j || m > t {
            return 0.0;
        }
        ((j + 1)..=t).filter(|&i| i != m).map(|i| self.rho(i)).product()
    }

    pub fn len(&self) -> usize {
        self.levels.iter().map(|l| l.theta.len() + 2 + usize::from(l.rho_prev.is_some())).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of estimated hyperparameters (pinned `ρ` excluded).
    pub fn num_free(&self) -> usize {
        self.len() - self.rho_pinned.iter().filter(|p| **p).count()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        for l in &self.levels {
            out.extend_from_slice(l.theta.as_slice());
            if let Some(r) = l.rho_prev {
                out.push(r);
            }
            out.push(l.sigma2);
            out.push(l.noise2);
        }
        out
    }

    /// Inverse of [`flatten`](Self::flatten), keeping this vector's shape
    /// and pinning pattern.
    pub fn unflatten(&self, values: &[f64]) -> Result<Self> {
        if values.len() != self.len() {
            return arg_err(format!("expected {} values, got {}", self.len(), values.len()));
        }
        let mut it = values.iter().copied();
        let mut levels = Vec::with_capacity(self.levels.len());
        for l in &self.levels {
            let theta = Lengthscales::new(it.by_ref().take(l.theta.len()).collect())?;
            let rho_prev = l.rho_prev.map(|_| it.next().unwrap());
            let sigma2 = it.next().unwrap();
            let noise2 = it.next().unwrap();
            levels.push(LevelHyperParams { theta, sigma2, noise2, rho_prev });
        }
        Self::with_pinned(levels, self.rho_pinned.clone())
    }

    pub fn names(&self) -> Vec<String> {
        let mut out = Vec::with_capacity(self.len());
        for (t, l) in self.levels.iter().enumerate() {
            let lv = t + 1;
            for k in 0..l.theta.len() {
                out.push(format!("theta{lv}_{}", k + 1));
            }
            if l.rho_prev.is_some() {
                out.push(format!("rho{}", lv - 1));
            }
            out.push(format!("sigma2_{lv}"));
            out.push(format!("noise2_{lv}"));
        }
        out
    }

    /// Mask over the flattened order marking estimated entries.
    pub fn free_mask(&self) -> Vec<bool> {
        let mut out = Vec::with_capacity(self.len());
        for (t, l) in self.levels.iter().enumerate() {
            out.extend(std::iter::repeat_n(true, l.theta.len()));
            if l.rho_prev.is_some() {
                out.push(!self.rho_pinned[t]);
            }
            out.push(true);
            out.push(true);
        }
        out
    }

    /// Mask over the flattened order marking entries that live in log space.
    pub fn log_mask(&self) -> Vec<bool> {
        let mut out = Vec::with_capacity(self.len());
        for l in &self.levels {
            out.extend(std::iter::repeat_n(true, l.theta.len()));
            if l.rho_prev.is_some() {
                out.push(false);
            }
            out.push(true);
            out.push(true);
        }
        out
    }

    /// Unconstrained coordinates of the free entries.
    pub fn to_free(&self) -> Vec<f64> {
        let flat = self.flatten();
        let free = self.free_mask();
        let logm = self.log_mask();
        flat.iter()
            .zip(free.iter().zip(&logm))
            .filter(|(_, (f, _))| **f)
            .map(|(v, (_, l))| if *l { v.max(MIN_NOISE2).ln() } else { *v })
            .collect()
    }

    /// Replace the free entries by the given unconstrained coordinates.
    pub fn with_free(&self, x: &[f64]) -> Result<Self> {
        let free = self.free_mask();
        let nfree = free.iter().filter(|f| **f).count();
        if x.len() != nfree {
            return arg_err(format!("expected {nfree} free coordinates, got {}", x.len()));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return arg_err("free coordinates must be finite");
        }
        let logm = self.log_mask();
        let mut flat = self.flatten();
        let mut it = x.iter();
        for i in 0..flat.len() {
            if free[i] {
                let v = *it.next().unwrap();
                flat[i] = if logm[i] { v.exp() } else { v };
            }
        }
        self.unflatten(&flat)
    }

    /// Chain a gradient over the flattened natural entries into free
    /// coordinates.
    pub fn natural_to_free_grad(&self, grad: &[f64]) -> Vec<f64> {
        let flat = self.flatten();
        let free = self.free_mask();
        let logm = self.log_mask();
        (0..flat.len())
            .filter(|i| free[*i])
            .map(|i| if logm[i] { grad[i] * flat[i] } else { grad[i] })
            .collect()
    }

    /// Pin (or unpin) `ρ_{t−1}` of level `t` at `value`.
    pub fn pin_rho(&mut self, t: usize, value: f64) -> Result<()> {
        if t == 0 || t >= self.levels.len() {
            return arg_err(format!("level {} has no rho to pin", t + 1));
        }
        if !value.is_finite() {
            return arg_err("pinned rho must be finite");
        }
        self.levels[t].rho_prev = Some(value);
        self.rho_pinned[t] = true;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn phi3() -> PhiVector {
        let mk = |t: usize, th: f64| LevelHyperParams {
            theta: Lengthscales::new(vec![th, th * 2.0]).unwrap(),
            sigma2: 1.0 + t as f64,
            noise2: 0.01 * (t + 1) as f64,
            rho_prev: if t == 0 { None } else { Some(0.5 + t as f64) },
        };
        PhiVector::new(vec![mk(0, 0.5), mk(1, 1.0), mk(2, 2.0)]).unwrap()
    }

    #[test]
    fn layout_and_names() {
        let phi = phi3();
        assert_eq!(phi.len(), 4 + 5 + 5);
        let names = phi.names();
        assert_eq!(&names[..5], &["theta1_1", "theta1_2", "sigma2_1", "noise2_1", "theta2_1"]);
        assert_eq!(names[6], "rho1");
        assert_eq!(phi.flatten()[6], 1.5);
        assert_eq!(phi.carry(0, 2), 1.5 * 2.5);
        assert_eq!(phi.carry(1, 1), 1.0);
        assert_eq!(phi.carry_deriv(0, 2, 1), 2.5);
        assert_eq!(phi.carry_deriv(1, 2, 1), 0.0);
    }

    #[test]
    fn pinning_removes_free_coordinate() {
        let mut phi = phi3();
        phi.pin_rho(1, 1.0).unwrap();
        assert_eq!(phi.num_free(), phi.len() - 1);
        assert_eq!(phi.to_free().len(), phi.len() - 1);
        assert!(phi.pin_rho(0, 1.0).is_err());
        let back = phi.with_free(&phi.to_free()).unwrap();
        assert_eq!(back.rho(1), 1.0);
    }

    #[test]
    fn invalid_levels_rejected() {
        let bad = LevelHyperParams {
            theta: Lengthscales::new(vec![1.0]).unwrap(),
            sigma2: -1.0,
            noise2: 0.0,
            rho_prev: None,
        };
        assert!(PhiVector::new(vec![bad]).is_err());
        let rho_on_first = LevelHyperParams {
            theta: Lengthscales::new(vec![1.0]).unwrap(),
            sigma2: 1.0,
            noise2: 0.0,
            rho_prev: Some(1.0),
        };
        assert!(PhiVector::new(vec![rho_on_first]).is_err());
    }

    proptest! {
        #[test]
        fn flatten_roundtrips(vals in proptest::collection::vec(0.01f64..50.0, 14)) {
            let phi = phi3();
            let back = phi.unflatten(&vals).unwrap();
            prop_assert_eq!(back.flatten(), vals);
        }

        #[test]
        fn free_coordinates_roundtrip(x in proptest::collection::vec(-5.0f64..5.0, 14)) {
            let phi = phi3();
            let moved = phi.with_free(&x).unwrap();
            let again = moved.to_free();
            for (a, b) in x.iter().zip(&again) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
