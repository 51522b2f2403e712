//! Alternating hyperparameter and projection updates, convergence
//! detection, and latent-dimension selection by BIC.

use std::time::Instant;

use log::{info, warn};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::argp::{evaluate, ArgpModel, FidelityDataset, PhiVector, Standardization, Wants};
use crate::error::{arg_err, Error, Result};
use crate::linalg::principal_angles;
use crate::samplers::{
    gmc_sample_until_accept, mh_phi_run, mle_optimize_phi, ArgpPhiTarget, ChainTrace, GmcConfig,
    MhConfig, MleMode, MleOptions, PhiPriors, TraceRecord, WPosterior,
};
use crate::stiefel::{sample_uniform_stiefel, MatrixLangevinParams, ProjectionMatrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhiUpdate {
    Mcmc,
    MleJoint,
    MleNested,
}

/// `ρ_{level−1}` of `level` (1-based) held fixed at `value`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PinnedRho {
    pub level: usize,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub d: usize,
    pub phi_update: PhiUpdate,
    /// Relative Hamiltonian tolerance; `inf` stops after one iteration.
    #[serde(with = "extended_f64")]
    pub eps_h: f64,
    pub max_outer_iters: usize,
    pub seed: u64,
    /// Concentration of the Matrix-Langevin prior recentered at every
    /// outer iteration.
    pub concentration: f64,
    /// Number of Haar-uniform draws screened for each starting column,
    /// alongside the data-driven directions; `1` skips screening and starts
    /// from a single draw.
    pub init_candidates: usize,
    pub pin_rho: Vec<PinnedRho>,
    pub gmc: GmcConfig,
    pub priors: PhiPriors,
    pub mh: MhConfig,
    pub mle: MleOptions,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            d: 1,
            phi_update: PhiUpdate::MleNested,
            eps_h: 1e-3,
            max_outer_iters: 100,
            seed: 0,
            concentration: 1.0,
            init_candidates: 256,
            pin_rho: Vec::new(),
            gmc: GmcConfig::default(),
            priors: PhiPriors::default(),
            mh: MhConfig::default(),
            mle: MleOptions::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, data: &FidelityDataset) -> Result<()> {
        let big_d = data.input_dim();
        if self.d == 0 || self.d > big_d {
            return arg_err(format!("latent dimension {} outside [1, {big_d}]", self.d));
        }
        if self.eps_h.is_nan() || self.eps_h <= 0.0 {
            return arg_err("eps_h must be positive");
        }
        if self.max_outer_iters == 0 || self.init_candidates == 0 {
            return arg_err("max_outer_iters and init_candidates must be positive");
        }
        if !(self.concentration.is_finite() && self.concentration >= 0.0) {
            return arg_err("concentration must be finite and nonnegative");
        }
        for p in &self.pin_rho {
            if p.level < 2 || p.level > data.num_levels() || !p.value.is_finite() {
                return arg_err(format!("cannot pin rho on level {}", p.level));
            }
        }
        if self.phi_update == PhiUpdate::MleNested && !data.is_nested() {
            return arg_err("mle_nested needs a nested design; use mle_joint or mcmc");
        }
        self.mle.validate()?;
        self.gmc.validate()?;
        self.priors.validate()?;
        self.mh.validate()
    }
}

/// Diagnostics of one outer iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iter: usize,
    /// `−log p(Z | φ, W)` at the accepted projection.
    pub hamiltonian: f64,
    pub log_likelihood: f64,
    pub relative_change: f64,
    pub gmc_rejections: usize,
    pub gmc_eps: f64,
    pub eps_history: Vec<f64>,
    /// Metropolis acceptance rate of the hyperparameter chain, if sampled.
    pub phi_acceptance: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub model: ArgpModel,
    pub config: TrainConfig,
    pub initial_w: ProjectionMatrix,
    pub iterations: Vec<IterationRecord>,
    pub converged: bool,
    /// Set when a sampler gave up; the model holds the last good state.
    pub failure: Option<String>,
    pub wall_time_secs: f64,
    pub trace: ChainTrace,
}

impl TrainReport {
    pub fn log_likelihood(&self) -> f64 {
        self.model.log_likelihood()
    }

    /// The projection expressed in original input coordinates.
    pub fn raw_projection(&self) -> DMatrix<f64> {
        raw_projection(&self.model)
    }
}

fn obs_variances(data: &FidelityDataset) -> Vec<f64> {
    data.levels()
        .iter()
        .map(|l| {
            let n = l.obs.len() as f64;
            let m = l.obs.mean();
            l.obs.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n.max(1.0)
        })
        .collect()
}

fn initial_phi(data: &FidelityDataset, cfg: &TrainConfig) -> Result<PhiVector> {
    let mut phi = PhiVector::initial(&obs_variances(data), cfg.d)?;
    for p in &cfg.pin_rho {
        phi.pin_rho(p.level - 1, p.value)?;
    }
    Ok(phi)
}

/// Maximum-likelihood updates start from both the current hyperparameters
/// and the default starting point and keep the better fit.
fn update_phi(
    phi: &PhiVector,
    w: &ProjectionMatrix,
    data: &FidelityDataset,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(PhiVector, Option<f64>)> {
    let mle = |mode: MleMode| -> Result<(PhiVector, Option<f64>)> {
        let warm = mle_optimize_phi(phi, w, data, mode, &cfg.mle)?;
        let fresh = mle_optimize_phi(&initial_phi(data, cfg)?, w, data, mode, &cfg.mle)?;
        let best = if fresh.log_likelihood > warm.log_likelihood { fresh } else { warm };
        Ok((best.phi, None))
    };
    match cfg.phi_update {
        PhiUpdate::MleJoint => mle(MleMode::Joint),
        PhiUpdate::MleNested => mle(MleMode::NestedRecursive),
        PhiUpdate::Mcmc => {
            let run = mh_phi_run(phi, &ArgpPhiTarget { w, data }, &cfg.priors, &cfg.mh, rng)?;
            let rate = run.accepted.len() as f64 / run.steps.max(1) as f64;
            Ok((run.phi, Some(rate)))
        }
    }
}

/// Leading eigenvectors of the average outer product of the gradient of a
/// quadratic-kernel ridge fit to one level.
fn gradient_directions(design: &DMatrix<f64>, obs: &DVector<f64>, k: usize) -> Option<DMatrix<f64>> {
    let (n, p) = design.shape();
    let y = obs.add_scalar(-obs.mean());
    let gram = design * design.transpose() / p as f64;
    let kern = gram.map(|v| (1.0 + v).powi(2));
    let ridge = 1e-3 * kern.trace() / n as f64;
    let alpha = (kern + DMatrix::identity(n, n) * ridge).cholesky()?.solve(&y);
    let mut outer = DMatrix::zeros(p, p);
    for i in 0..n {
        let coef = DVector::from_fn(n, |j, _| alpha[j] * 2.0 * (1.0 + gram[(j, i)]) / p as f64);
        let grad = design.tr_mul(&coef);
        outer += &grad * grad.transpose();
    }
    let eig = outer.symmetric_eigen();
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    Some(DMatrix::from_fn(p, k.min(p), |r, c| eig.eigenvectors[(r, order[c])]))
}

/// Starting projection and hyperparameters. With several candidates the
/// columns are chosen one at a time: the gradient directions of every level
/// with more points than inputs, then `init_candidates` random unit
/// directions, are each made orthogonal to the columns kept so far and get a
/// short likelihood fit (level by level on nested designs). The best one is
/// appended.
fn initial_state(z: &FidelityDataset, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<(ProjectionMatrix, PhiVector)> {
    let big_d = z.input_dim();
    if cfg.init_candidates == 1 {
        return Ok((sample_uniform_stiefel(big_d, cfg.d, rng)?, initial_phi(z, cfg)?));
    }
    let mode = if z.is_nested() { MleMode::NestedRecursive } else { MleMode::Joint };
    let opts = MleOptions { max_iters: cfg.mle.max_iters.min(50), ..cfg.mle.clone() };
    let guided: Vec<DVector<f64>> = z
        .levels()
        .iter()
        .filter(|l| l.obs.len() > big_d)
        .filter_map(|l| gradient_directions(&l.design, &l.obs, cfg.d + 1))
        .flat_map(|m| m.column_iter().map(|c| c.into_owned()).collect::<Vec<_>>())
        .collect();
    let mut kept = DMatrix::<f64>::zeros(big_d, 0);
    let mut fitted = None;
    for j in 0..cfg.d {
        let phi0 = initial_phi(z, &TrainConfig { d: j + 1, ..cfg.clone() })?;
        let mut best: Option<(f64, ProjectionMatrix, PhiVector)> = None;
        for k in 0..guided.len() + cfg.init_candidates {
            let g = match guided.get(k) {
                Some(v) => DMatrix::from_column_slice(big_d, 1, v.as_slice()),
                None => sample_uniform_stiefel(big_d, 1, rng)?.into_matrix(),
            };
            let v = &g - &kept * kept.tr_mul(&g);
            let norm = v.norm();
            if norm < 1e-8 {
                continue;
            }
            let mut cols = kept.clone().insert_column(j, 0.0);
            cols.set_column(j, &(v.column(0) / norm));
            let w = ProjectionMatrix::retract(&cols)?;
            match mle_optimize_phi(&phi0, &w, z, mode, &opts) {
                Ok(r) if r.log_likelihood.is_finite() && best.as_ref().is_none_or(|b| r.log_likelihood > b.0) => {
                    best = Some((r.log_likelihood, w, r.phi));
                }
                Ok(_) => {}
                Err(e) => warn!("skipping starting candidate {k} for column {}: {e}", j + 1),
            }
        }
        let (ll, w, phi) = best.ok_or_else(|| Error::Precondition("no starting projection could be fitted".into()))?;
        info!("column {} chosen from {} candidates, log-likelihood {ll:.3}", j + 1, guided.len() + cfg.init_candidates);
        kept = w.as_matrix().clone();
        fitted = Some((w, phi));
    }
    Ok(fitted.expect("at least one column"))
}

/// Train with a generator seeded from `cfg.seed`.
pub fn train(data: &FidelityDataset, cfg: &TrainConfig) -> Result<TrainReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    two_step_train(data, cfg, &mut rng)
}

/// Alternate a hyperparameter update at the current projection with one
/// accepted Geodesic Monte Carlo move of the projection, until the relative
/// change of the Hamiltonian drops below `eps_h` or the iteration budget runs
/// out. Inputs are standardized first.
pub fn two_step_train(data: &FidelityDataset, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<TrainReport> {
    cfg.validate(data)?;
    let start = Instant::now();
    let standardization = Standardization::fit(data);
    let z = standardization.apply_dataset(data)?;
    let (w0, mut phi) = initial_state(&z, cfg, rng)?;
    let mut w = w0.clone();
    let mut h_prev = -evaluate(&phi, &w, &z, Wants::VALUE)?.value;
    let mut prior = MatrixLangevinParams::new(w.clone(), vec![cfg.concentration; cfg.d])?;
    let mut trace = ChainTrace::new(Some(cfg.seed));
    let mut iterations = Vec::new();
    let mut converged = false;
    let mut failure = None;

    for iter in 1..=cfg.max_outer_iters {
        let (phi_next, phi_acceptance) = match update_phi(&phi, &w, &z, cfg, rng) {
            Ok(r) => r,
            Err(e) => {
                warn!("hyperparameter update failed at iteration {iter}: {e}");
                failure = Some(format!("iteration {iter}: {e}"));
                break;
            }
        };
        phi = phi_next;
        let mut target = WPosterior::new(&phi, &z, prior.clone());
        let outcome = match gmc_sample_until_accept(&w, &mut target, &cfg.gmc, rng) {
            Ok(o) => o,
            Err(e) => {
                warn!("projection update failed at iteration {iter}: {e}");
                if let Error::Convergence { rejections, .. } = e {
                    trace.proposals += rejections;
                }
                failure = Some(format!("iteration {iter}: {e}"));
                break;
            }
        };
        prior = target.prior.clone();
        w = outcome.point.w;
        trace.proposals += outcome.rejections + 1;
        trace.accepted += 1;
        trace.eps_history.extend_from_slice(&outcome.eps_history);

        let ll = evaluate(&phi, &w, &z, Wants::VALUE)?.value;
        let h = -ll;
        let relative_change = (h - h_prev).abs() / h_prev.abs().max(f64::MIN_POSITIVE);
        info!("iteration {iter}: H = {h:.6}, relative change {relative_change:.3e}, {} rejections", outcome.rejections);
        trace.records.push(TraceRecord {
            iter,
            log_posterior: ll,
            hamiltonian: h,
            eps: outcome.eps,
            accepted_count: trace.accepted,
            phi: phi.clone(),
            w: w.clone(),
        });
        iterations.push(IterationRecord {
            iter,
            hamiltonian: h,
            log_likelihood: ll,
            relative_change,
            gmc_rejections: outcome.rejections,
            gmc_eps: outcome.eps,
            eps_history: outcome.eps_history,
            phi_acceptance,
        });
        h_prev = h;
        if relative_change < cfg.eps_h {
            converged = true;
            break;
        }
    }

    // Maximum-likelihood modes end on the optimum at the final projection.
    if failure.is_none() && cfg.phi_update != PhiUpdate::Mcmc {
        if let Ok((refit, _)) = update_phi(&phi, &w, &z, cfg, rng) {
            phi = refit;
        }
    }
    let model = ArgpModel::new(data.clone(), standardization, phi, w)?;
    Ok(TrainReport {
        model,
        config: cfg.clone(),
        initial_w: w0,
        iterations,
        converged,
        failure,
        wall_time_secs: start.elapsed().as_secs_f64(),
        trace,
    })
}

/// Number of free parameters: hyperparameters (without pinned `ρ`) plus the
/// `Dd − d(d+1)/2` coordinates of the projection.
pub fn parameter_count(model: &ArgpModel) -> usize {
    let w = model.projection();
    model.phi().num_free() + w.manifold_dim()
}

/// `log L − ½ k log N`.
pub fn bic_value(log_likelihood: f64, num_params: usize, n: f64) -> f64 {
    log_likelihood - 0.5 * num_params as f64 * n.ln()
}

pub fn bic(model: &ArgpModel) -> Result<f64> {
    let ll = model.log_likelihood();
    if !ll.is_finite() {
        return Err(Error::Precondition("model log-likelihood is not finite".into()));
    }
    Ok(bic_value(ll, parameter_count(model), model.data().total_size() as f64))
}

/// `diag(1/scale) Ŵ`: the standardized-space projection pulled back to the
/// original inputs (not orthonormal in general).
pub fn raw_projection(model: &ArgpModel) -> DMatrix<f64> {
    let s = model.standardization();
    let mut w = model.projection().as_matrix().clone();
    for (i, mut row) in w.row_iter_mut().enumerate() {
        row /= s.scale[i];
    }
    w
}

/// Principal angles in degrees, ascending.
pub fn principal_angles_deg(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<Vec<f64>> {
    Ok(principal_angles(a, b)?.into_iter().map(f64::to_degrees).collect())
}

/// `|aᵀb| / (‖a‖‖b‖)` for single columns.
pub fn abs_cosine(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    if a.ncols() != 1 || b.ncols() != 1 || a.nrows() != b.nrows() {
        return arg_err("cosine similarity needs two columns of equal length");
    }
    Ok(a.dot(b).abs() / (a.norm() * b.norm()))
}

pub fn rmse(pred: &DVector<f64>, obs: &DVector<f64>) -> Result<f64> {
    if pred.len() != obs.len() || pred.is_empty() {
        return arg_err("rmse needs two nonempty vectors of equal length");
    }
    Ok(((pred - obs).norm_squared() / pred.len() as f64).sqrt())
}

#[derive(Clone, Debug)]
pub struct SweepEntry {
    pub d: usize,
    pub report: Option<TrainReport>,
    pub error: Option<String>,
    pub log_likelihood: f64,
    pub bic: f64,
    pub test_rmse: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct SweepReport {
    pub entries: Vec<SweepEntry>,
    pub selected_d: usize,
}

fn sweep_one(data: &FidelityDataset, d: usize, cfg: &TrainConfig, test: Option<(&DMatrix<f64>, &DVector<f64>)>) -> SweepEntry {
    let cfg = TrainConfig { d, seed: cfg.seed.wrapping_add(d as u64), ..cfg.clone() };
    let scored = train(data, &cfg).and_then(|rep| {
        let b = bic(&rep.model)?;
        let r = match test {
            Some((x, y)) => Some(rmse(&rep.model.predict(x)?.mean, y)?),
            None => None,
        };
        Ok((rep, b, r))
    });
    match scored {
        Ok((rep, b, r)) => SweepEntry { d, log_likelihood: rep.log_likelihood(), bic: b, test_rmse: r, error: None, report: Some(rep) },
        Err(e) => {
            warn!("training at d = {d} failed: {e}");
            SweepEntry { d, report: None, error: Some(e.to_string()), log_likelihood: f64::NAN, bic: f64::NAN, test_rmse: None }
        }
    }
}

/// Train once per latent dimension (seed offset by `d`) and select the one
/// with the largest BIC. Up to `threads` trainings run at once.
pub fn dimension_sweep(
    data: &FidelityDataset,
    d_list: &[usize],
    cfg: &TrainConfig,
    test: Option<(&DMatrix<f64>, &DVector<f64>)>,
    threads: usize,
) -> Result<SweepReport> {
    if d_list.is_empty() {
        return arg_err("d_list is empty");
    }
    if let Some(&d) = d_list.iter().find(|&&d| d == 0 || d > data.input_dim()) {
        return arg_err(format!("latent dimension {d} outside [1, {}]", data.input_dim()));
    }
    let mut entries = Vec::with_capacity(d_list.len());
    for chunk in d_list.chunks(threads.max(1)) {
        if chunk.len() == 1 {
            entries.push(sweep_one(data, chunk[0], cfg, test));
        } else {
            std::thread::scope(|s| {
                let handles: Vec<_> = chunk.iter().map(|&d| s.spawn(move || sweep_one(data, d, cfg, test))).collect();
                entries.extend(handles.into_iter().map(|h| h.join().expect("sweep worker panicked")));
            });
        }
    }
    let selected_d = entries
        .iter()
        .filter(|e| e.bic.is_finite())
        .max_by(|a, b| a.bic.total_cmp(&b.bic))
        .map(|e| e.d)
        .ok_or_else(|| Error::Convergence { rejections: 0, eps: f64::NAN })?;
    Ok(SweepReport { entries, selected_d })
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to rebuild a trained model without retraining.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: u32,
    pub config: TrainConfig,
    pub standardization: Standardization,
    pub phi: PhiVector,
    #[serde(rename = "W")]
    pub w: DMatrix<f64>,
    pub data: FidelityDataset,
    pub converged: bool,
    pub failure: Option<String>,
    pub iterations: usize,
    pub log_likelihood: f64,
    pub bic: f64,
    pub hamiltonians: Vec<f64>,
    pub wall_time_secs: f64,
    #[serde(default)]
    pub metrics: serde_json::Map<String, serde_json::Value>,
}

impl Checkpoint {
    pub fn from_report(rep: &TrainReport) -> Result<Self> {
        let m = &rep.model;
        Ok(Self {
            version: CHECKPOINT_VERSION,
            config: rep.config.clone(),
            standardization: m.standardization().clone(),
            phi: m.phi().clone(),
            w: m.projection().as_matrix().clone(),
            data: m.data().clone(),
            converged: rep.converged,
            failure: rep.failure.clone(),
            iterations: rep.iterations.len(),
            log_likelihood: m.log_likelihood(),
            bic: bic(m)?,
            hamiltonians: rep.iterations.iter().map(|r| r.hamiltonian).collect(),
            wall_time_secs: rep.wall_time_secs,
            metrics: serde_json::Map::new(),
        })
    }

    /// Rebuild the model; fails if the stored projection is off the manifold.
    pub fn to_model(&self) -> Result<ArgpModel> {
        if self.version != CHECKPOINT_VERSION {
            return arg_err(format!("checkpoint version {} is not supported", self.version));
        }
        let w = ProjectionMatrix::new(self.w.clone())?;
        ArgpModel::new(self.data.clone(), self.standardization.clone(), self.phi.clone(), w)
    }
}

/// JSON has no infinity, so non-finite values travel as the strings
/// `"inf"`, `"-inf"` and `"nan"`.
mod extended_f64 {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_str(&v.to_string().to_lowercase())
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => t.parse().map_err(|_| serde::de::Error::custom(format!("not a number: {t:?}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradient_directions_find_a_single_index() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v = DVector::from_vec(vec![0.6, -0.48, 0.0, 0.64, 0.0, 0.0]);
        let x = DMatrix::from_fn(150, 6, |_, _| rng.random_range(-1.0f64..1.0));
        let y = DVector::from_fn(150, |i, _| {
            let t = x.row(i).dot(&v.transpose());
            (3.0 * t).sin() + t * t
        });
        let dirs = gradient_directions(&x, &y, 2).unwrap();
        assert_eq!(dirs.shape(), (6, 2));
        assert!(dirs.column(0).dot(&v).abs() > 0.95);
    }

    #[test]
    fn bic_arithmetic() {
        let e2 = std::f64::consts::E.powi(2);
        assert!((bic_value(0.0, 2, e2) + 2.0).abs() < 1e-12);
        assert_eq!(bic_value(-3.5, 0, 100.0), -3.5);
    }

    #[test]
    fn rmse_and_cosine() {
        let a = DVector::from_vec(vec![1.0, 2.0]);
        let b = DVector::from_vec(vec![1.0, 4.0]);
        assert!((rmse(&a, &b).unwrap() - 2f64.sqrt()).abs() < 1e-15);
        let u = DMatrix::from_column_slice(2, 1, &[1.0, 0.0]);
        let v = DMatrix::from_column_slice(2, 1, &[-2.0, 0.0]);
        assert_eq!(abs_cosine(&u, &v).unwrap(), 1.0);
    }
}
