use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Result};

/// Design points and noisy observations of one fidelity level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FidelityLevel {
    /// `n_t × D`, one point per row.
    pub design: DMatrix<f64>,
    pub obs: DVector<f64>,
}

/// Observations of `s` codes ordered from lowest to highest fidelity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<FidelityLevel>", into = "Vec<FidelityLevel>")]
pub struct FidelityDataset {
    levels: Vec<FidelityLevel>,
    /// For nested designs, `parents[t][k]` is the row of level `t − 1` that
    /// equals row `k` of level `t` (empty for `t = 0`).
    parents: Option<Vec<Vec<usize>>>,
}

impl FidelityDataset {
    pub fn new(levels: Vec<FidelityLevel>) -> Result<Self> {
        if levels.is_empty() {
            return arg_err("dataset needs at least one fidelity level");
        }
        let dim = levels[0].design.ncols();
        if dim == 0 {
            return arg_err("design points have zero dimension");
        }
        for (t, lvl) in levels.iter().enumerate() {
            if lvl.design.nrows() == 0 {
                return arg_err(format!("level {} has no design points", t + 1));
            }
            if lvl.design.ncols() != dim {
                return arg_err(format!(
                    "level {} has dimension {}, expected {}",
                    t + 1,
                    lvl.design.ncols(),
                    dim
                ));
            }
            if lvl.obs.len() != lvl.design.nrows() {
                return arg_err(format!(
                    "level {} has {} observations for {} design points",
                    t + 1,
                    lvl.obs.len(),
                    lvl.design.nrows()
                ));
            }
            if lvl.design.iter().chain(lvl.obs.iter()).any(|v| !v.is_finite()) {
                return arg_err(format!("level {} contains non-finite values", t + 1));
            }
        }
        let parents = nesting(&levels);
        Ok(Self { levels, parents })
    }

    pub fn levels(&self) -> &[FidelityLevel] {
        &self.levels
    }

    pub fn level(&self, t: usize) -> &FidelityLevel {
        &self.levels[t]
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn input_dim(&self) -> usize {
        self.levels[0].design.ncols()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.levels.iter().map(|l| l.obs.len()).collect()
    }

    pub fn total_size(&self) -> usize {
        self.levels.iter().map(|l| l.obs.len()).sum()
    }

    /// True when every level's design is a row subset of the level below.
    pub fn is_nested(&self) -> bool {
        self.parents.is_some()
    }

    /// Row indices into level `t − 1` of the design points of level `t`.
    pub fn parent_rows(&self, t: usize) -> Option<&[usize]> {
        self.parents.as_ref().map(|p| p[t].as_slice())
    }

    /// All observations stacked from the lowest level up.
    pub fn stacked_obs(&self) -> DVector<f64> {
        let mut z = DVector::zeros(self.total_size());
        let mut off = 0;
        for l in &self.levels {
            z.rows_mut(off, l.obs.len()).copy_from(&l.obs);
            off += l.obs.len();
        }
        z
    }

    /// Level index of every stacked row.
    pub fn level_of_rows(&self) -> Vec<usize> {
        self.levels
            .iter()
            .enumerate()
            .flat_map(|(t, l)| std::iter::repeat_n(t, l.obs.len()))
            .collect()
    }

    /// All design points stacked from the lowest level up.
    pub fn stacked_design(&self) -> DMatrix<f64> {
        let mut x = DMatrix::zeros(self.total_size(), self.input_dim());
        let mut off = 0;
        for l in &self.levels {
            x.rows_mut(off, l.obs.len()).copy_from(&l.design);
            off += l.obs.len();
        }
        x
    }

    /// Same observations with every design matrix transformed by `f`.
    pub fn map_designs(&self, f: impl Fn(&DMatrix<f64>) -> DMatrix<f64>) -> Result<Self> {
        Self::new(
            self.levels
                .iter()
                .map(|l| FidelityLevel { design: f(&l.design), obs: l.obs.clone() })
                .collect(),
        )
    }

    /// Same designs with every observation multiplied by `c`.
    pub fn scale_obs(&self, c: f64) -> Result<Self> {
        Self::new(
            self.levels
                .iter()
                .map(|l| FidelityLevel { design: l.design.clone(), obs: &l.obs * c })
                .collect(),
        )
    }
}

impl TryFrom<Vec<FidelityLevel>> for FidelityDataset {
    type Error = crate::error::Error;

    fn try_from(levels: Vec<FidelityLevel>) -> Result<Self> {
        Self::new(levels)
    }
}

impl From<FidelityDataset> for Vec<FidelityLevel> {
    fn from(d: FidelityDataset) -> Self {
        d.levels
    }
}

fn row_key(m: &DMatrix<f64>, i: usize) -> Vec<u64> {
    m.row(i).iter().map(|v| v.to_bits()).collect()
}

fn nesting(levels: &[FidelityLevel]) -> Option<Vec<Vec<usize>>> {
    let mut parents = vec![Vec::new()];
    for t in 1..levels.len() {
        let below = &levels[t - 1].design;
        let mut index = HashMap::with_capacity(below.nrows());
        for i in 0..below.nrows() {
            index.entry(row_key(below, i)).or_insert(i);
        }
        let here = &levels[t].design;
        let mut rows = Vec::with_capacity(here.nrows());
        for k in 0..here.nrows() {
            rows.push(*index.get(&row_key(here, k))?);
        }
        parents.push(rows);
    }
    Some(parents)
}

/// Per-coordinate affine map to zero mean and unit variance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardization {
    /// Fitted on the stacked design points of every level.
    pub fn fit(data: &FidelityDataset) -> Self {
        let x = data.stacked_design();
        let n = x.nrows() as f64;
        let mut mean = Vec::with_capacity(x.ncols());
        let mut scale = Vec::with_capacity(x.ncols());
        for c in x.column_iter() {
            let m = c.sum() / n;
            let var = c.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
            let sd = var.sqrt();
            mean.push(m);
            scale.push(if sd > 0.0 && sd.is_finite() { sd } else { 1.0 });
        }
        Self { mean, scale }
    }

    pub fn identity(dim: usize) -> Self {
        Self { mean: vec![0.0; dim], scale: vec![1.0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.ncols() != self.dim() {
            return arg_err(format!("points have {} columns, standardization expects {}", x.ncols(), self.dim()));
        }
        Ok(DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| (x[(i, j)] - self.mean[j]) / self.scale[j]))
    }

    pub fn apply_dataset(&self, data: &FidelityDataset) -> Result<FidelityDataset> {
        if data.input_dim() != self.dim() {
            return arg_err("dataset dimension differs from standardization");
        }
        data.map_designs(|x| self.apply(x).expect("dimension checked"))
    }
}
