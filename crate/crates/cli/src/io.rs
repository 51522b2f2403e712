//! Dataset CSV files, the dataset manifest, and small file helpers.

use std::fs;
use std::path::{Path, PathBuf};

use mfgp_core::argp::{FidelityDataset, FidelityLevel};
use mfgp_core::synthetic::SyntheticSpec;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const MANIFEST_FORMAT: &str = "mfgp-dataset";
pub const MANIFEST_VERSION: u32 = 1;

/// Seventeen significant digits: enough for an exact round trip.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Rows of one or more levels in the `level,x1,…,xD,y` layout.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelRows {
    pub level: Vec<usize>,
    pub x: DMatrix<f64>,
    pub y: Option<DVector<f64>>,
}

pub fn dataset_header(big_d: usize, with_level: bool, with_y: bool) -> Vec<String> {
    let mut h = Vec::with_capacity(big_d + 2);
    if with_level {
        h.push("level".to_string());
    }
    h.extend((1..=big_d).map(|i| format!("x{i}")));
    if with_y {
        h.push("y".to_string());
    }
    h
}

pub fn write_csv(path: &Path, header: &[String], rows: impl IntoIterator<Item = Vec<String>>) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::io(path, e))?;
    w.write_record(header).map_err(|e| CliError::io(path, e))?;
    for r in rows {
        w.write_record(&r).map_err(|e| CliError::io(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn write_level_rows(path: &Path, level: usize, x: &DMatrix<f64>, y: &DVector<f64>) -> CliResult<()> {
    let rows = (0..x.nrows()).map(|i| {
        let mut r = vec![level.to_string()];
        r.extend(x.row(i).iter().map(|v| fmt_f64(*v)));
        r.push(fmt_f64(y[i]));
        r
    });
    write_csv(path, &dataset_header(x.ncols(), true, true), rows)
}

/// Read a CSV whose columns are an optional `level`, then `x1..xD`, then an
/// optional `y`. An empty file reads as zero rows of unknown width.
pub fn read_rows(path: &Path) -> CliResult<LevelRows> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    if text.trim().is_empty() {
        return Ok(LevelRows { level: Vec::new(), x: DMatrix::zeros(0, 0), y: None });
    }
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let header: Vec<String> = rdr.headers().map_err(|e| CliError::io(path, e))?.iter().map(str::to_string).collect();
    let has_level = header.first().is_some_and(|h| h == "level");
    let has_y = header.last().is_some_and(|h| h == "y");
    let xs = &header[usize::from(has_level)..header.len() - usize::from(has_y)];
    let big_d = xs.len();
    if big_d == 0 || xs.iter().enumerate().any(|(i, h)| *h != format!("x{}", i + 1)) {
        return Err(CliError::usage(format!("{}: expected header level,x1,...,xD,y", path.display())));
    }
    let mut level = Vec::new();
    let mut flat = Vec::new();
    let mut ys = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| CliError::io(path, e))?;
        let bad = |what: &str| CliError::usage(format!("{}: row {}: {what}", path.display(), line + 2));
        if rec.len() != header.len() {
            return Err(bad("wrong number of fields"));
        }
        let num = |s: &str| s.parse::<f64>().ok().filter(|v| v.is_finite());
        let mut fields = rec.iter();
        if has_level {
            let l = fields.next().unwrap().parse::<usize>().map_err(|_| bad("level must be a positive integer"))?;
            if l == 0 {
                return Err(bad("levels are numbered from 1"));
            }
            level.push(l);
        }
        for _ in 0..big_d {
            flat.push(num(fields.next().unwrap()).ok_or_else(|| bad("non-numeric input"))?);
        }
        if has_y {
            ys.push(num(fields.next().unwrap()).ok_or_else(|| bad("non-numeric output"))?);
        }
    }
    let n = flat.len() / big_d;
    Ok(LevelRows {
        level,
        x: DMatrix::from_row_slice(n, big_d, &flat),
        y: has_y.then(|| DVector::from_vec(ys)),
    })
}

/// Group rows by their level column into a dataset, keeping file order
/// within each level.
pub fn rows_to_dataset(rows: &LevelRows, source: &Path) -> CliResult<FidelityDataset> {
    let y = rows.y.as_ref().ok_or_else(|| CliError::usage(format!("{}: dataset needs a y column", source.display())))?;
    if rows.level.is_empty() {
        return Err(CliError::usage(format!("{}: dataset needs a level column and at least one row", source.display())));
    }
    let s = *rows.level.iter().max().unwrap();
    let mut levels = Vec::with_capacity(s);
    for t in 1..=s {
        let idx: Vec<usize> = (0..rows.level.len()).filter(|&i| rows.level[i] == t).collect();
        if idx.is_empty() {
            return Err(CliError::usage(format!("{}: level {t} has no rows", source.display())));
        }
        levels.push(FidelityLevel { design: rows.x.select_rows(&idx), obs: DVector::from_fn(idx.len(), |i, _| y[idx[i]]) });
    }
    Ok(FidelityDataset::new(levels)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestLevel {
    pub level: usize,
    pub file: String,
    pub rows: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestTest {
    pub file: String,
    pub rows: usize,
}

/// Index of a dataset written as one CSV per level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub input_dim: usize,
    pub levels: Vec<ManifestLevel>,
    #[serde(default)]
    pub test: Option<ManifestTest>,
    #[serde(default)]
    pub synthetic: Option<SyntheticSpec>,
    /// Ground-truth projection, one inner list per input coordinate.
    #[serde(default, rename = "W_true")]
    pub w_true: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub latent_offset: Option<f64>,
    #[serde(default)]
    pub latent_scale: Option<f64>,
}

impl Manifest {
    pub fn read(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let m: Self = serde_json::from_str(&text).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
        if m.format != MANIFEST_FORMAT || m.version != MANIFEST_VERSION {
            return Err(CliError::usage(format!("{}: not a version {MANIFEST_VERSION} dataset manifest", path.display())));
        }
        Ok(m)
    }

    pub fn w_true_matrix(&self) -> Option<DMatrix<f64>> {
        let rows = self.w_true.as_ref()?;
        let cols = rows.first()?.len();
        Some(DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j]))
    }

    pub fn test_path(&self, manifest_path: &Path) -> Option<PathBuf> {
        self.test.as_ref().map(|t| sibling(manifest_path, &t.file))
    }
}

pub fn sibling(path: &Path, file: &str) -> PathBuf {
    path.parent().unwrap_or(Path::new(".")).join(file)
}

pub fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

/// A dataset from either a manifest (`.json`) or a single CSV with a level
/// column. Returns the manifest too when there is one.
pub fn load_dataset(path: &Path) -> CliResult<(FidelityDataset, Option<Manifest>)> {
    if !path.exists() {
        return Err(CliError::usage(format!("dataset file {} does not exist", path.display())));
    }
    if path.extension().is_some_and(|e| e == "json") {
        let m = Manifest::read(path)?;
        let mut levels = Vec::with_capacity(m.levels.len());
        for (t, l) in m.levels.iter().enumerate() {
            let file = sibling(path, &l.file);
            let rows = read_rows(&file)?;
            if l.level != t + 1 || rows.x.nrows() != l.rows || rows.x.ncols() != m.input_dim {
                return Err(CliError::usage(format!("{}: does not match the manifest entry for level {}", file.display(), l.level)));
            }
            if rows.level.iter().any(|&v| v != l.level) {
                return Err(CliError::usage(format!("{}: rows from another level", file.display())));
            }
            let obs = rows.y.ok_or_else(|| CliError::usage(format!("{}: missing y column", file.display())))?;
            levels.push(FidelityLevel { design: rows.x, obs });
        }
        Ok((FidelityDataset::new(levels)?, Some(m)))
    } else {
        let rows = read_rows(path)?;
        Ok((rows_to_dataset(&rows, path)?, None))
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::failure(format!("{}: {e}", path.display())))?;
    fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
}

pub fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}
