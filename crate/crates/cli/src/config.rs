//! The run configuration file (TOML).

use std::fs;
use std::path::{Path, PathBuf};

use mfgp_core::synthetic::{SyntheticKind, SyntheticSpec};
use mfgp_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const CONFIG_VERSION: u32 = 1;

/// A synthetic dataset by name, with optional overrides of the stock sizes
/// and noise levels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticChoice {
    pub which: SyntheticKind,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub sizes: Option<Vec<usize>>,
    #[serde(default)]
    pub noise_sd: Option<Vec<f64>>,
    #[serde(default = "default_test_points")]
    pub test_points: usize,
}

fn default_test_points() -> usize {
    250
}

impl SyntheticChoice {
    pub fn new(which: SyntheticKind, seed: u64) -> Self {
        Self { which, seed, sizes: None, noise_sd: None, test_points: default_test_points() }
    }

    pub fn spec(&self) -> SyntheticSpec {
        let mut spec = match self.which {
            SyntheticKind::Example1 => SyntheticSpec::example1(self.seed),
            SyntheticKind::Example2 => SyntheticSpec::example2(self.seed),
            SyntheticKind::Highdim => SyntheticSpec::highdim(self.seed),
        };
        if let Some(s) = &self.sizes {
            spec.sizes = s.clone();
        }
        if let Some(s) = &self.noise_sd {
            spec.noise_sd = s.clone();
        }
        spec
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    /// Dataset manifest (`.json`) or single CSV with a level column.
    #[serde(default)]
    pub data: Option<PathBuf>,
    /// Generate the dataset in memory instead of reading `data`.
    #[serde(default)]
    pub synthetic: Option<SyntheticChoice>,
    /// Held-out points (`x1..xD,y`) for RMSE reporting.
    #[serde(default)]
    pub test: Option<PathBuf>,
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub d_list: Vec<usize>,
    #[serde(default)]
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, String> {
        let cfg: Self = toml::from_str(text).map_err(|e| e.to_string())?;
        if cfg.version != CONFIG_VERSION {
            return Err(format!("config version {} is not supported (expected {CONFIG_VERSION})", cfg.version));
        }
        if cfg.data.is_some() && cfg.synthetic.is_some() {
            return Err("set either data or synthetic, not both".into());
        }
        Ok(cfg)
    }

    /// Load from disk; relative paths are taken relative to the file.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut cfg = Self::parse(&text).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.data, &mut cfg.test, &mut cfg.out].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }
}
