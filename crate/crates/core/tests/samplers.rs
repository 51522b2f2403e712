mod common;

use common::*;
use mfgp_core::argp::*;
use mfgp_core::kernels::Lengthscales;
use mfgp_core::samplers::*;
use mfgp_core::stiefel::*;
use mfgp_core::{Error, Result};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{Beta, ContinuousCDF, InverseGamma, Normal};

struct Flat;

impl StiefelTarget for Flat {
    fn log_density_grad(&self, w: &ProjectionMatrix) -> Result<(f64, DMatrix<f64>)> {
        Ok((0.0, DMatrix::zeros(w.ambient_dim(), w.latent_dim())))
    }
}

/// Matrix-Langevin density with a fixed mode and an extra quartic term so
/// the gradient is not constant.
struct Langevin {
    f: DMatrix<f64>,
    quartic: f64,
}

impl StiefelTarget for Langevin {
    fn log_density_grad(&self, w: &ProjectionMatrix) -> Result<(f64, DMatrix<f64>)> {
        let m = w.as_matrix();
        let lin: f64 = self.f.dot(m);
        let sq: f64 = m.iter().map(|v| v.powi(4)).sum();
        let grad = &self.f + m.map(|v| 4.0 * self.quartic * v.powi(3));
        Ok((lin + self.quartic * sq, grad))
    }
}

/// Collapses away from the start: every move is a huge drop in density.
struct Pinned {
    at: DMatrix<f64>,
}

impl StiefelTarget for Pinned {
    fn log_density_grad(&self, w: &ProjectionMatrix) -> Result<(f64, DMatrix<f64>)> {
        let diff = w.as_matrix() - &self.at;
        Ok((-1e12 * diff.norm_squared(), diff * -2e12))
    }
}

#[test]
fn flat_target_is_always_accepted() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut point = GmcPoint::new(sample_uniform_stiefel(6, 2, &mut rng).unwrap(), &Flat).unwrap();
    let mut accepted = 0;
    for _ in 0..1000 {
        let step = gmc_step(&point, &Flat, 10, 0.05, &mut rng).unwrap();
        if step.accepted {
            accepted += 1;
            point = step.proposal;
        }
        assert!(point.w.orthonormality_error() < 1e-8);
    }
    assert!(accepted as f64 / 1000.0 >= 0.999, "{accepted}");
}

#[test]
fn metropolis_rule_frequencies() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    assert!((0..1000).all(|_| metropolis_accept(3.0, 3.0, &mut rng)));
    let hits = (0..10_000).filter(|_| metropolis_accept(0.0, 0.5f64.ln(), &mut rng)).count();
    assert!((hits as f64 / 10_000.0 - 0.5).abs() < 0.02, "{hits}");
    assert!(!metropolis_accept(0.0, f64::NAN, &mut rng));
}

#[test]
fn until_accept_on_flat_target_takes_one_step() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let w = sample_uniform_stiefel(5, 1, &mut rng).unwrap();
    let out = gmc_sample_until_accept(&w, &mut Flat, &GmcConfig::default(), &mut rng).unwrap();
    assert_eq!(out.rejections, 0);
    assert_eq!(out.eps, 0.05);
}

#[test]
fn until_accept_shrinks_step_and_gives_up_at_cap() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let w = sample_uniform_stiefel(5, 2, &mut rng).unwrap();
    let mut target = Pinned { at: w.as_matrix().clone() };
    let cfg = GmcConfig { max_total_rejections: 40, ..GmcConfig::default() };
    match gmc_sample_until_accept(&w, &mut target, &cfg, &mut rng) {
        Err(Error::Convergence { rejections, eps }) => {
            assert_eq!(rejections, 40);
            assert!((eps - 0.05 / 1.2 / 1.2).abs() < 1e-15);
        }
        other => panic!("expected a convergence error, got {other:?}"),
    }
}

#[test]
fn trajectory_is_reversible() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let w = sample_uniform_stiefel(6, 2, &mut rng).unwrap();
        let target = Langevin { f: rand_normal_matrix(6, 2, &mut rng), quartic: 0.3 };
        let start = GmcPoint::new(w, &target).unwrap();
        let u = sample_tangent(&start.w, &mut rng);
        let (end, u1) = gmc_trajectory(&start, &u, &target, 10, 0.05).unwrap();
        let (back, u2) = gmc_trajectory(&end, &u1.neg(), &target, 10, 0.05).unwrap();
        assert!((back.w.as_matrix() - start.w.as_matrix()).amax() < 1e-6);
        assert!((u2.as_matrix() + u.as_matrix()).amax() < 1e-6);
    }
}

#[test]
fn energy_error_is_second_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let w = sample_uniform_stiefel(5, 2, &mut rng).unwrap();
    let target = Langevin { f: rand_normal_matrix(5, 2, &mut rng) * 2.0, quartic: 0.5 };
    let start = GmcPoint::new(w, &target).unwrap();
    let momenta: Vec<TangentVector> = (0..20).map(|_| sample_tangent(&start.w, &mut rng)).collect();
    let err = |steps: usize, eps: f64| -> f64 {
        momenta
            .iter()
            .map(|u| {
                let (end, u1) = gmc_trajectory(&start, u, &target, steps, eps).unwrap();
                let h0 = start.log_density - u.kinetic_energy();
                let h1 = end.log_density - u1.kinetic_energy();
                (h1 - h0).abs()
            })
            .sum::<f64>()
            / momenta.len() as f64
    };
    let e1 = err(10, 0.05);
    let e2 = err(20, 0.025);
    let e3 = err(40, 0.0125);
    let order1 = (e1 / e2).log2();
    let order2 = (e2 / e3).log2();
    assert!(order1 > 1.8 && order2 > 1.8, "errors {e1} {e2} {e3}");
}

#[test]
fn chain_mean_direction_finds_langevin_mode() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mode = DVector::from_vec(vec![1.0, 2.0, -2.0]) / 3.0;
    let target = Langevin { f: DMatrix::from_column_slice(3, 1, (mode.clone() * 5.0).as_slice()), quartic: 0.0 };
    let mut point = GmcPoint::new(sample_uniform_stiefel(3, 1, &mut rng).unwrap(), &target).unwrap();
    let mut sum = DVector::<f64>::zeros(3);
    let mut accepted = 0;
    while accepted < 5000 {
        let step = gmc_step(&point, &target, 10, 0.05, &mut rng).unwrap();
        if step.accepted {
            point = step.proposal;
            accepted += 1;
            sum += point.w.as_matrix().column(0);
        }
    }
    let cos = sum.normalize().dot(&mode);
    let angle = cos.clamp(-1.0, 1.0).acos().to_degrees();
    assert!(angle < 5.0, "{angle} degrees");
}

#[test]
fn gmc_is_deterministic_given_seed() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let w = sample_uniform_stiefel(4, 2, &mut rng).unwrap();
        let mut target = Langevin { f: DMatrix::from_element(4, 2, 0.7), quartic: 0.1 };
        gmc_sample_until_accept(&w, &mut target, &GmcConfig::default(), &mut rng).unwrap().point.w
    };
    assert_eq!(run(), run());
}

#[test]
fn posterior_target_adds_prior_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let data = random_data(&[6, 4], 3, true, &mut rng);
    let w = random_w(3, 1, &mut rng);
    let phi = random_phi(2, 1, &mut rng);
    let prior = MatrixLangevinParams::new(random_w(3, 1, &mut rng), vec![2.0]).unwrap();
    let f = prior.f_matrix();
    let target = WPosterior::new(&phi, &data, prior);
    let (v, g) = target.log_density_grad(&w).unwrap();
    let ll = log_likelihood(&phi, &w, &data).unwrap();
    assert!((v - ll - f.dot(w.as_matrix())).abs() < 1e-10);
    let gl = log_likelihood_grad_w(&phi, &w, &data).unwrap();
    assert!((g - gl - f).amax() < 1e-12);
}

#[test]
fn zero_scale_proposal_is_always_accepted() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let data = random_data(&[5, 3], 2, true, &mut rng);
    let w = random_w(2, 1, &mut rng);
    let phi = random_phi(2, 1, &mut rng);
    let target = ArgpPhiTarget { w: &w, data: &data };
    let priors = PhiPriors::default();
    let mut state = MhState::new(phi.clone(), &target, &priors).unwrap();
    let scales = vec![0.0; phi.num_free()];
    for _ in 0..100 {
        let (next, ok) = mh_phi_step(&state, &target, &priors, &scales, &MhConfig::default(), &mut rng).unwrap();
        assert!(ok);
        state = next;
    }
    for (a, b) in state.phi.flatten().iter().zip(phi.flatten()) {
        assert!((a - b).abs() <= 1e-14 * b.abs());
    }
}

#[test]
fn prior_only_chain_reproduces_prior_marginals() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let phi0 = PhiVector::new(vec![
        LevelHyperParams { theta: Lengthscales::new(vec![1.0]).unwrap(), sigma2: 1.0, noise2: 1e-4, rho_prev: None },
        LevelHyperParams { theta: Lengthscales::new(vec![1.0]).unwrap(), sigma2: 1.0, noise2: 1e-4, rho_prev: Some(0.0) },
    ])
    .unwrap();
    let priors = PhiPriors::default();
    let target = |_: &PhiVector| -> Result<f64> { Ok(0.0) };
    // free order: θ1, σ²1, noise1, θ2, ρ1, σ²2, noise2
    let scales = [3.0, 0.6, 1.5, 3.0, 12.0, 0.6, 1.5];
    let cfg = MhConfig::default();
    let mut state = MhState::new(phi0, &target, &priors).unwrap();
    let thin = 500;
    let n = 20_000;
    let mut cols: Vec<Vec<f64>> = vec![Vec::with_capacity(n); 8];
    for _ in 0..2_000 {
        state = mh_phi_step(&state, &target, &priors, &scales, &cfg, &mut rng).unwrap().0;
    }
    for _ in 0..n {
        for _ in 0..thin {
            state = mh_phi_step(&state, &target, &priors, &scales, &cfg, &mut rng).unwrap().0;
        }
        for (c, v) in cols.iter_mut().zip(state.phi.flatten()) {
            c.push(v);
        }
    }
    // 1 − u = 1/(θ + 1) ~ Beta(0.1, 1), which stays accurate where u rounds to 1
    let beta = Beta::new(0.1, 1.0).unwrap();
    let sig = InverseGamma::new(5.0, 5.0).unwrap();
    let noise = InverseGamma::new(1.0, 1e-4).unwrap();
    let rho = Normal::new(0.0, 10.0).unwrap();
    // flattened order: θ1, σ²1, noise1, θ2, ρ1, σ²2, noise2
    let checks: Vec<(usize, Box<dyn Fn(f64) -> f64>)> = vec![
        (0, Box::new(|x: f64| beta.sf(1.0 / (x + 1.0)))),
        (1, Box::new(|x: f64| sig.cdf(x))),
        (2, Box::new(|x: f64| noise.cdf(x))),
        (3, Box::new(|x: f64| beta.sf(1.0 / (x + 1.0)))),
        (4, Box::new(|x: f64| rho.cdf(x))),
        (5, Box::new(|x: f64| sig.cdf(x))),
        (6, Box::new(|x: f64| noise.cdf(x))),
    ];
    for (i, cdf) in checks {
        let d = ks_statistic(&mut cols[i], cdf);
        let p = ks_p_value(d, n);
        assert!(p > 0.01, "coordinate {i}: D = {d}, p = {p}");
    }
}

#[test]
fn always_accepting_run_stops_at_target_and_takes_medians() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let phi0 = random_phi(2, 2, &mut rng);
    let target = |_: &PhiVector| -> Result<f64> { Ok(1.5) };
    let run = mh_phi_run(&phi0, &target, &PhiPriors::flat(), &MhConfig::default(), &mut rng).unwrap();
    assert_eq!(run.steps, 200);
    assert_eq!(run.accepted.len(), 200);
    let flat = run.phi.flatten();
    for i in 0..flat.len() {
        let mut col: Vec<f64> = run.accepted.iter().map(|s| s.phi.flatten()[i]).collect();
        col.sort_by(f64::total_cmp);
        assert_eq!(flat[i], 0.5 * (col[99] + col[100]));
    }
}

#[test]
fn quadratic_target_medians_near_mode() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mode = random_phi(2, 1, &mut rng);
    let m = mode.to_free();
    let target = move |phi: &PhiVector| -> Result<f64> {
        Ok(phi.to_free().iter().zip(&m).map(|(x, c)| -0.5 * ((x - c) / 0.01).powi(2)).sum())
    };
    let cfg = MhConfig { initial_scale: 0.005, ..MhConfig::default() };
    let run = mh_phi_run(&mode, &target, &PhiPriors::flat(), &cfg, &mut rng).unwrap();
    for (a, b) in run.phi.flatten().iter().zip(mode.flatten()) {
        assert!((a - b).abs() < 0.05, "{a} vs {b}");
    }
}

#[test]
fn starvation_halves_scale_then_fails() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let phi0 = random_phi(1, 1, &mut rng);
    let target = |_: &PhiVector| -> Result<f64> { Ok(0.0) };
    let calls = std::cell::Cell::new(0usize);
    let never = |phi: &PhiVector| -> Result<f64> {
        calls.set(calls.get() + 1);
        if calls.get() == 1 {
            target(phi)
        } else {
            Ok(f64::NEG_INFINITY)
        }
    };
    let cfg = MhConfig { starvation_window: 100, ..MhConfig::default() };
    match mh_phi_run(&phi0, &never, &PhiPriors::flat(), &cfg, &mut rng) {
        Err(Error::Convergence { eps, .. }) => assert!((eps - 0.1 / 8.0).abs() < 1e-15),
        other => panic!("expected starvation failure, got {other:?}"),
    }
    assert_eq!(calls.get(), 1 + 400);
}

#[test]
fn mh_stays_in_support() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let data = random_data(&[6, 4], 2, true, &mut rng);
    let w = random_w(2, 1, &mut rng);
    let target = ArgpPhiTarget { w: &w, data: &data };
    let cfg = MhConfig { n_accepted_target: 50, initial_scale: 1.0, ..MhConfig::default() };
    let run = mh_phi_run(&random_phi(2, 1, &mut rng), &target, &PhiPriors::default(), &cfg, &mut rng).unwrap();
    for s in &run.accepted {
        for (t, l) in s.phi.levels.iter().enumerate() {
            l.validate(t).unwrap();
        }
    }
}

#[test]
fn joint_mle_recovers_lengthscale() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let x = DMatrix::from_fn(200, 1, |_, _| rng.random_range(-5.0..5.0));
    let truth = PhiVector::new(vec![LevelHyperParams {
        theta: Lengthscales::new(vec![1.0]).unwrap(),
        sigma2: 1.0,
        noise2: 0.01,
        rho_prev: None,
    }])
    .unwrap();
    let w = ProjectionMatrix::identity(1, 1).unwrap();
    let probe = FidelityDataset::new(vec![FidelityLevel { design: x.clone(), obs: DVector::zeros(200) }]).unwrap();
    let z = GenerativeSampler::new(&truth, w.as_matrix(), &probe, &DMatrix::zeros(0, 1)).draw(&mut rng);
    let data = FidelityDataset::new(vec![FidelityLevel { design: x, obs: z }]).unwrap();
    let phi0 = PhiVector::initial(&[1.0], 1).unwrap();
    let r = mle_optimize_phi(&phi0, &w, &data, MleMode::Joint, &MleOptions { f_tol: 0.0, ..MleOptions::unbounded() }).unwrap();
    let theta = r.phi.levels[0].theta.as_slice()[0];
    assert!((theta - 1.0).abs() < 0.25, "theta = {theta}");
    assert!(r.converged);
    let g = log_likelihood_grad_phi(&r.phi, &w, &data).unwrap();
    assert!(g.iter().all(|v| v.abs() < 1e-6));
    assert!(r.log_likelihood >= log_likelihood(&truth, &w, &data).unwrap());
}

#[test]
fn nested_mle_delegates_exact_linear_case() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let x = rand_normal_matrix(15, 2, &mut rng);
    let z1 = DVector::from_fn(15, |i, _| (x[(i, 0)] * 1.3).sin() + x[(i, 1)]);
    let d2 = x.rows(0, 8).into_owned();
    let z2 = z1.rows(0, 8) * 2.0;
    let data = FidelityDataset::new(vec![
        FidelityLevel { design: x, obs: z1 },
        FidelityLevel { design: d2, obs: z2.into_owned() },
    ])
    .unwrap();
    let w = ProjectionMatrix::identity(2, 2).unwrap();
    let phi0 = PhiVector::initial(&[1.0, 1.0], 2).unwrap();
    let r = mle_optimize_phi(&phi0, &w, &data, MleMode::NestedRecursive, &MleOptions::unbounded()).unwrap();
    assert!((r.phi.levels[1].rho_prev.unwrap() - 2.0).abs() < 1e-6);
}

#[test]
fn nested_restricted_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    for _ in 0..10 {
        let data = random_data(&[12, 8, 5], 3, true, &mut rng);
        let w = random_w(3, 2, &mut rng);
        for t in 0..3 {
            let theta = Lengthscales::new(vec![rng.random_range(0.5..2.0), rng.random_range(0.5..2.0)]).unwrap();
            let nug = rng.random_range(0.01..0.5);
            let opts = MleOptions { max_iters: 0, ..MleOptions::unbounded() };
            let (_, _, _, r) = nested_fit_level(t, &data, &w, &theta, nug, None, &opts).unwrap();
            let f = |th: &[f64], nu: f64| {
                nested_mle_level(t, &data, &w, &Lengthscales::new(th.to_vec()).unwrap(), nu).unwrap().restricted_nll
            };
            let h = 1e-6;
            let th = theta.as_slice();
            for k in 0..2 {
                let mut up = th.to_vec();
                let mut dn = th.to_vec();
                up[k] *= (h as f64).exp();
                dn[k] *= (-h as f64).exp();
                let fd = (f(&up, nug) - f(&dn, nug)) / (2.0 * h);
                assert!(rel_err(r.grad[k], fd) < 1e-5, "theta {k}: {} vs {fd}", r.grad[k]);
            }
            let fd = (f(th, nug * h.exp()) - f(th, nug * (-h).exp())) / (2.0 * h);
            assert!(rel_err(r.grad[2], fd) < 1e-5, "nugget: {} vs {fd}", r.grad[2]);
        }
    }
}

#[test]
fn trace_exports_one_json_line_per_record() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let data = random_data(&[5, 3], 3, true, &mut rng);
    let phi = random_phi(2, 2, &mut rng);
    let mut trace = ChainTrace::new(Some(19));
    for i in 0..3 {
        let w = random_w(3, 2, &mut rng);
        let ll = log_likelihood(&phi, &w, &data).unwrap();
        trace.records.push(TraceRecord {
            iter: i,
            log_posterior: ll,
            hamiltonian: -ll,
            eps: 0.05,
            accepted_count: i + 1,
            phi: phi.clone(),
            w,
        });
    }
    let mut buf = Vec::new();
    trace.write_jsonl(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3);
    for (line, rec) in lines.iter().zip(&trace.records) {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["phi"]["rho1"], serde_json::json!(phi.levels[1].rho_prev.unwrap()));
        let rows = v["W"].as_array().unwrap();
        assert_eq!(rows.len(), 3);
        let w01 = rows[0][1].as_f64().unwrap();
        assert_eq!(w01, rec.w.as_matrix()[(0, 1)]);
        let recomputed = log_likelihood(&rec.phi, &rec.w, &data).unwrap();
        assert!((v["hamiltonian"].as_f64().unwrap() + recomputed).abs() < 1e-8);
    }
}
