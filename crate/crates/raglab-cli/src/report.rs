//! Benchmark result rows and their count-weighted summary.

use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchmarkRow {
    pub name: String,
    pub accuracy: f64,
    pub samples: u64,
}

/// Per-benchmark accuracies plus their sample-count-weighted mean, which is
/// always recomputable from the rows.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub rows: Vec<BenchmarkRow>,
    pub weighted: f64,
    pub config_hash: String,
}

impl BenchmarkReport {
    pub fn new(rows: Vec<BenchmarkRow>, config_hash: u64) -> Result<Self, CliError> {
        let weighted = weighted_accuracy(
            &rows.iter().map(|r| (r.accuracy, r.samples)).collect::<Vec<_>>(),
        )?;
        Ok(BenchmarkReport { rows, weighted, config_hash: format!("{config_hash:016x}") })
    }
}

/// Sample-count-weighted mean accuracy: Σ(acc·C) / ΣC.
pub fn weighted_accuracy(rows: &[(f64, u64)]) -> Result<f64, CliError> {
    if rows.is_empty() {
        return Err(CliError::Runtime("weighted accuracy of zero rows".into()));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for &(acc, c) in rows {
        if c == 0 {
            return Err(CliError::Runtime("benchmark row with zero samples".into()));
        }
        num += acc * c as f64;
        den += c as f64;
    }
    Ok(num / den)
}
