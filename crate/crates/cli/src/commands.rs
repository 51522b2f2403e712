use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use log::info;
use mfgp_core::argp::FidelityDataset;
use mfgp_core::synthetic::{generate, test_set, SyntheticKind};
use mfgp_core::trainer::{
    abs_cosine, dimension_sweep, principal_angles_deg, raw_projection, rmse, train, Checkpoint, TrainReport,
};
use nalgebra::{DMatrix, DVector};
use serde_json::{json, Map, Value};

use crate::config::{RunConfig, SyntheticChoice};
use crate::error::{CliError, CliResult};
use crate::io::{
    create_dir, dataset_header, fmt_f64, load_dataset, matrix_rows, read_rows, write_csv, write_json, write_level_rows,
    Manifest, ManifestLevel, ManifestTest, MANIFEST_FORMAT, MANIFEST_VERSION,
};
use crate::report::{write_summary, write_sweep_csv};

pub struct GenArgs {
    pub which: Option<SyntheticKind>,
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub test_points: Option<usize>,
}

pub fn gen(args: GenArgs) -> CliResult<()> {
    let cfg = args.config.as_deref().map(RunConfig::load).transpose()?;
    let mut choice = match (args.which, cfg.as_ref().and_then(|c| c.synthetic.clone())) {
        (Some(w), _) => SyntheticChoice::new(w, 0),
        (None, Some(c)) => c,
        (None, None) => return Err(CliError::usage("name a dataset (example1, example2, highdim) or give a config with [synthetic]")),
    };
    if let Some(s) = args.seed {
        choice.seed = s;
    }
    if let Some(n) = args.test_points {
        choice.test_points = n;
    }
    let out = args.out.or_else(|| cfg.and_then(|c| c.out)).ok_or_else(|| CliError::usage("--out is required"))?;
    let spec = choice.spec();
    let g = generate(&spec)?;
    create_dir(&out)?;
    let s = g.data.num_levels();
    let mut levels = Vec::with_capacity(s);
    for (t, l) in g.data.levels().iter().enumerate() {
        let file = format!("level_{}.csv", t + 1);
        write_level_rows(&out.join(&file), t + 1, &l.design, &l.obs)?;
        levels.push(ManifestLevel { level: t + 1, file, rows: l.obs.len() });
    }
    let test = if choice.test_points > 0 {
        let (x, y) = test_set(&spec, choice.test_points)?;
        write_level_rows(&out.join("test.csv"), s, &x, &y)?;
        Some(ManifestTest { file: "test.csv".into(), rows: y.len() })
    } else {
        None
    };
    let manifest = Manifest {
        format: MANIFEST_FORMAT.into(),
        version: MANIFEST_VERSION,
        input_dim: g.data.input_dim(),
        levels,
        test,
        synthetic: Some(spec),
        w_true: Some(matrix_rows(&g.w_true)),
        latent_offset: Some(g.latent_offset),
        latent_scale: Some(g.latent_scale),
    };
    write_json(&out.join("manifest.json"), &manifest)?;
    println!("wrote {} levels ({:?} rows) to {}", s, g.data.sizes(), out.display());
    Ok(())
}

/// Everything a training run needs, resolved before any compute starts.
struct Prepared {
    cfg: RunConfig,
    data: FidelityDataset,
    w_true: Option<DMatrix<f64>>,
    test: Option<(DMatrix<f64>, DVector<f64>)>,
    out: PathBuf,
}

fn prepare(config: &Path, seed: Option<u64>, out: Option<PathBuf>, test: Option<PathBuf>) -> CliResult<Prepared> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    let (data, w_true, default_test) = match (&cfg.data, &cfg.synthetic) {
        (Some(path), _) => {
            let (data, manifest) = load_dataset(path)?;
            let w = manifest.as_ref().and_then(Manifest::w_true_matrix);
            let t = manifest.as_ref().and_then(|m| m.test_path(path));
            (data, w, t.map(TestSource::File))
        }
        (None, Some(choice)) => {
            let spec = choice.spec();
            let g = generate(&spec)?;
            let t = (choice.test_points > 0).then(|| TestSource::Generated(test_set(&spec, choice.test_points)));
            (g.data, Some(g.w_true), t)
        }
        (None, None) => return Err(CliError::usage(format!("{}: set data or [synthetic]", config.display()))),
    };
    let test_src = test.or(cfg.test.clone()).map(TestSource::File).or(default_test);
    let test = match test_src {
        Some(TestSource::File(p)) => Some(read_test(&p, data.input_dim())?),
        Some(TestSource::Generated(r)) => Some(r?),
        None => None,
    };
    let out = out.or(cfg.out.clone()).ok_or_else(|| CliError::usage("--out is required"))?;
    Ok(Prepared { cfg, data, w_true, test, out })
}

enum TestSource {
    File(PathBuf),
    Generated(mfgp_core::Result<(DMatrix<f64>, DVector<f64>)>),
}

fn read_test(path: &Path, big_d: usize) -> CliResult<(DMatrix<f64>, DVector<f64>)> {
    let rows = read_rows(path)?;
    if rows.x.ncols() != big_d {
        return Err(CliError::usage(format!("{}: {} inputs, dataset has {big_d}", path.display(), rows.x.ncols())));
    }
    let y = rows.y.ok_or_else(|| CliError::usage(format!("{}: test file needs a y column", path.display())))?;
    Ok((rows.x, y))
}

fn metrics(rep: &TrainReport, w_true: Option<&DMatrix<f64>>, test: Option<&(DMatrix<f64>, DVector<f64>)>) -> CliResult<Map<String, Value>> {
    let mut m = Map::new();
    let raw = raw_projection(&rep.model);
    m.insert("W_raw".into(), json!(matrix_rows(&raw)));
    if let Some(wt) = w_true.filter(|wt| wt.nrows() == raw.nrows()) {
        if let Ok(angles) = principal_angles_deg(&raw, wt) {
            m.insert("principal_angles_deg".into(), json!(angles));
        }
        if raw.ncols() == 1 && wt.ncols() == 1 {
            m.insert("abs_cosine".into(), json!(abs_cosine(&raw, wt)?));
        }
    }
    if let Some((x, y)) = test {
        if x.nrows() > 0 {
            m.insert("test_rmse".into(), json!(rmse(&rep.model.predict(x)?.mean, y)?));
        }
    }
    Ok(m)
}

fn write_iterations(path: &Path, rep: &TrainReport) -> CliResult<()> {
    let header: Vec<String> =
        ["iter", "hamiltonian", "log_likelihood", "relative_change", "gmc_rejections", "gmc_eps"].map(String::from).into();
    let rows = rep.iterations.iter().map(|r| {
        vec![
            r.iter.to_string(),
            fmt_f64(r.hamiltonian),
            fmt_f64(r.log_likelihood),
            fmt_f64(r.relative_change),
            r.gmc_rejections.to_string(),
            fmt_f64(r.gmc_eps),
        ]
    });
    write_csv(path, &header, rows)
}

fn write_run(dir: &Path, rep: &TrainReport, metrics: Map<String, Value>) -> CliResult<Checkpoint> {
    create_dir(dir)?;
    let mut ck = Checkpoint::from_report(rep)?;
    ck.metrics = metrics;
    write_json(&dir.join("checkpoint.json"), &ck)?;
    let trace = dir.join("trace.jsonl");
    let f = File::create(&trace).map_err(|e| CliError::io(&trace, e))?;
    rep.trace.write_jsonl(BufWriter::new(f)).map_err(|e| CliError::io(&trace, e))?;
    write_iterations(&dir.join("iterations.csv"), rep)?;
    write_summary(dir, "ARGP", rep.model.phi(), ck.log_likelihood, ck.bic)?;
    Ok(ck)
}

pub fn train_cmd(config: &Path, seed: Option<u64>, out: Option<PathBuf>) -> CliResult<()> {
    let p = prepare(config, seed, out, None)?;
    p.cfg.train.validate(&p.data)?;
    let rep = train(&p.data, &p.cfg.train)?;
    let m = metrics(&rep, p.w_true.as_ref(), p.test.as_ref())?;
    let ck = write_run(&p.out, &rep, m)?;
    println!(
        "{} after {} iterations, log-likelihood {:.4}, BIC {:.4}",
        if rep.converged { "converged" } else { "not converged" },
        ck.iterations,
        ck.log_likelihood,
        ck.bic
    );
    for (k, v) in &ck.metrics {
        if k != "W_raw" {
            println!("{k}: {v}");
        }
    }
    if let Some(f) = &rep.failure {
        return Err(CliError::failure(format!("training stopped early: {f}")));
    }
    if !rep.converged {
        return Err(CliError::failure(format!("no convergence within {} iterations", p.cfg.train.max_outer_iters)));
    }
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> CliResult<Checkpoint> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
}

pub fn predict_cmd(checkpoint: &Path, test: &Path, out: &Path) -> CliResult<()> {
    let ck = read_checkpoint(checkpoint)?;
    let model = ck.to_model().map_err(|e| CliError::usage(format!("{}: {e}", checkpoint.display())))?;
    let big_d = model.data().input_dim();
    let rows = read_rows(test)?;
    let n = rows.x.nrows();
    if n > 0 && rows.x.ncols() != big_d {
        return Err(CliError::usage(format!("{}: {} inputs, model expects {big_d}", test.display(), rows.x.ncols())));
    }
    let mut header = dataset_header(big_d, false, false);
    header.extend(["mean", "sd", "lower95", "upper95"].map(String::from));
    if n == 0 {
        write_csv(out, &header, std::iter::empty())?;
        println!("no test points");
        return Ok(());
    }
    let pred = model.predict(&rows.x)?;
    let sd = pred.sd();
    let out_rows = (0..n).map(|i| {
        let mut r: Vec<String> = rows.x.row(i).iter().map(|v| fmt_f64(*v)).collect();
        let (m, s) = (pred.mean[i], sd[i]);
        r.extend([fmt_f64(m), fmt_f64(s), fmt_f64(m - 1.96 * s), fmt_f64(m + 1.96 * s)]);
        r
    });
    write_csv(out, &header, out_rows)?;
    if let Some(y) = &rows.y {
        let parity = parity_path(out);
        let prows = (0..n).map(|i| vec![fmt_f64(y[i]), fmt_f64(pred.mean[i]), fmt_f64(sd[i])]);
        write_csv(&parity, &["observed", "predicted", "sd"].map(String::from), prows)?;
        println!("rmse: {}", rmse(&pred.mean, y)?);
    }
    info!("wrote {n} predictions to {}", out.display());
    Ok(())
}

/// `pred.csv` → `pred.parity.csv`
pub fn parity_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "predictions".into());
    out.with_file_name(format!("{stem}.parity.csv"))
}

pub fn threads_from_env() -> CliResult<usize> {
    match std::env::var("MFGP_THREADS") {
        Ok(v) => v
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| CliError::usage(format!("MFGP_THREADS must be a positive integer, got {v:?}"))),
        Err(_) => Ok(std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)),
    }
}

pub fn sweep_cmd(
    config: &Path,
    d_list: Option<Vec<usize>>,
    test: Option<PathBuf>,
    seed: Option<u64>,
    out: Option<PathBuf>,
) -> CliResult<()> {
    let p = prepare(config, seed, out, test)?;
    let d_list = d_list.unwrap_or_else(|| p.cfg.d_list.clone());
    if d_list.is_empty() {
        return Err(CliError::usage("no latent dimensions given (--d-list or d_list)"));
    }
    for &d in &d_list {
        let mut c = p.cfg.train.clone();
        c.d = d;
        c.validate(&p.data)?;
    }
    let threads = threads_from_env()?;
    let test = p.test.as_ref().filter(|(x, _)| x.nrows() > 0).map(|(x, y)| (x, y));
    let rep = dimension_sweep(&p.data, &d_list, &p.cfg.train, test, threads).map_err(|e| match e {
        mfgp_core::Error::Convergence { .. } => CliError::failure("training failed for every latent dimension"),
        e => e.into(),
    })?;
    create_dir(&p.out)?;
    write_sweep_csv(&p.out.join("sweep.csv"), &rep)?;
    let mut entries = Vec::new();
    for e in &rep.entries {
        let mut v = json!({
            "d": e.d,
            "log_likelihood": e.log_likelihood,
            "bic": e.bic,
            "test_rmse": e.test_rmse,
            "error": e.error,
        });
        if let Some(r) = &e.report {
            let dir = p.out.join(format!("d{}", e.d));
            let ck = write_run(&dir, r, metrics(r, p.w_true.as_ref(), p.test.as_ref())?)?;
            v["converged"] = json!(ck.converged);
            v["iterations"] = json!(ck.iterations);
            v["metrics"] = Value::Object(ck.metrics);
        }
        entries.push(v);
    }
    write_json(&p.out.join("summary.json"), &json!({ "selected_d": rep.selected_d, "entries": entries }))?;
    for e in &rep.entries {
        match &e.error {
            None => println!("d = {}: log-likelihood {:.4}, BIC {:.4}", e.d, e.log_likelihood, e.bic),
            Some(err) => println!("d = {}: failed ({err})", e.d),
        }
    }
    println!("selected_d: {}", rep.selected_d);
    Ok(())
}
