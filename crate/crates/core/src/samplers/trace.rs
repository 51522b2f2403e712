use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::argp::PhiVector;
use crate::stiefel::ProjectionMatrix;

/// One accepted state. `log_posterior` is the marginal log-likelihood
/// `log p(Z | φ, W)` and `hamiltonian` its negative: the Matrix-Langevin
/// prior moves with the chain, so it is left out of both.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iter: usize,
    pub log_posterior: f64,
    pub hamiltonian: f64,
    pub eps: f64,
    pub accepted_count: usize,
    pub phi: PhiVector,
    pub w: ProjectionMatrix,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ChainTrace {
    pub records: Vec<TraceRecord>,
    pub proposals: usize,
    pub accepted: usize,
    pub eps_history: Vec<f64>,
    pub seed: Option<u64>,
}

impl ChainTrace {
    pub fn new(seed: Option<u64>) -> Self {
        Self { seed, ..Self::default() }
    }

    pub fn acceptance_rate(&self) -> f64 {
        if self.proposals == 0 {
            0.0
        } else {
            self.accepted as f64 / self.proposals as f64
        }
    }

    /// Flat JSON object for one record: named hyperparameters and `W` as a
    /// list of rows.
    pub fn record_json(rec: &TraceRecord) -> serde_json::Value {
        let names = rec.phi.names();
        let phi: serde_json::Map<String, serde_json::Value> =
            names.into_iter().zip(rec.phi.flatten()).map(|(k, v)| (k, serde_json::json!(v))).collect();
        let w = rec.w.as_matrix();
        let rows: Vec<Vec<f64>> = (0..w.nrows()).map(|i| w.row(i).iter().copied().collect()).collect();
        serde_json::json!({
            "iter": rec.iter,
            "log_posterior": rec.log_posterior,
            "hamiltonian": rec.hamiltonian,
            "eps": rec.eps,
            "accepted_count": rec.accepted_count,
            "phi": phi,
            "W": rows,
        })
    }

    /// One JSON object per line per accepted state.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for rec in &self.records {
            serde_json::to_writer(&mut out, &Self::record_json(rec))?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}
