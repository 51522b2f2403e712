//! Text and CSV summaries of trained models and sweeps.

use std::fmt::Write as _;
use std::path::Path;

use mfgp_core::argp::PhiVector;
use mfgp_core::trainer::{SweepReport, parameter_count};

use crate::error::CliResult;
use crate::io::{fmt_f64, write_csv};

/// Column names and values in the layout `θ_t, log σ_t², log σ_εt², ρ_t`
/// per level, where `ρ_t` links level `t` to `t + 1`. Multi-dimensional
/// lengthscales get one column per latent coordinate.
pub fn phi_columns(phi: &PhiVector) -> Vec<(String, f64)> {
    let s = phi.num_levels();
    let mut cols = Vec::new();
    for (t, l) in phi.levels.iter().enumerate() {
        let k = t + 1;
        let theta = l.theta.as_slice();
        if theta.len() == 1 {
            cols.push((format!("theta_{k}"), theta[0]));
        } else {
            cols.extend(theta.iter().enumerate().map(|(j, v)| (format!("theta_{k}_{}", j + 1), *v)));
        }
        cols.push((format!("log_sigma2_{k}"), l.sigma2.ln()));
        cols.push((format!("log_noise2_{k}"), l.noise2.ln()));
        if t + 1 < s {
            cols.push((format!("rho_{k}"), phi.levels[t + 1].rho_prev.unwrap_or(f64::NAN)));
        }
    }
    cols
}

pub fn write_summary(dir: &Path, label: &str, phi: &PhiVector, log_likelihood: f64, bic: f64) -> CliResult<()> {
    let cols = phi_columns(phi);
    let mut header = vec!["model".to_string()];
    header.extend(cols.iter().map(|c| c.0.clone()));
    header.push("log_likelihood".into());
    header.push("bic".into());
    let mut row = vec![label.to_string()];
    row.extend(cols.iter().map(|c| fmt_f64(c.1)));
    row.push(fmt_f64(log_likelihood));
    row.push(fmt_f64(bic));
    write_csv(&dir.join("summary.csv"), &header, [row])?;

    let mut text = String::new();
    let width = cols.iter().map(|c| c.0.len()).max().unwrap_or(0).max(14);
    let _ = writeln!(text, "{:<width$}  {label}", "parameter");
    for (name, v) in &cols {
        let _ = writeln!(text, "{name:<width$}  {v:>12.4}");
    }
    let _ = writeln!(text, "{:<width$}  {log_likelihood:>12.4}", "log_likelihood");
    let _ = writeln!(text, "{:<width$}  {bic:>12.4}", "bic");
    std::fs::write(dir.join("summary.txt"), text).map_err(|e| crate::error::CliError::io(&dir.join("summary.txt"), e))
}

pub fn write_sweep_csv(path: &Path, rep: &SweepReport) -> CliResult<()> {
    let header: Vec<String> =
        ["d", "log_likelihood", "bic", "num_params", "test_rmse", "converged", "iterations", "error"].map(String::from).into();
    let rows = rep.entries.iter().map(|e| {
        let (k, conv, iters) = match &e.report {
            Some(r) => (parameter_count(&r.model).to_string(), r.converged.to_string(), r.iterations.len().to_string()),
            None => (String::new(), "false".into(), "0".into()),
        };
        vec![
            e.d.to_string(),
            fmt_f64(e.log_likelihood),
            fmt_f64(e.bic),
            k,
            e.test_rmse.map(fmt_f64).unwrap_or_default(),
            conv,
            iters,
            e.error.clone().unwrap_or_default(),
        ]
    });
    write_csv(path, &header, rows)
}
