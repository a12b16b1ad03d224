//! Training and evaluation pipeline: stage configurations with their
//! freeze/train policy, the baseline and retrieval-augmented forward passes,
//! the AdamW/cosine training loop, greedy evaluation, checkpointing, and
//! analytic FLOP accounting.

mod checkpoint;
mod flops;
mod forward;
mod train;

pub use checkpoint::{
    checkpoint_file_size, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use flops::{flops_estimate, rag_delta_closed_form, FlopsEstimate};
pub use forward::{
    baseline_forward, check_provenance, connector_output_rows, llm_embed_rows, rag_forward,
    BoundModels, Retrieval, SampleForward, SceneFeats, ValueMode,
};
pub use train::{evaluate, run_stage, EvalOutcome};

use crate::error::{Error, Result};
use crate::hash::fnv1a64;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Every parameterized component, by registry prefix.
pub const COMPONENTS: [&str; 6] =
    ["vit", "llm", "connector", "rag_connector", "perceiver", "key_encoder"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    Finetune,
}

impl Stage {
    pub fn name(&self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
        }
    }
}

/// One training stage. The trainability policy is a function of the stage:
/// stage one trains the two connectors and the compressor against frozen
/// encoder and decoder; stage two unfreezes the decoder and freezes the
/// compressor so stored bank values stay valid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub stage: Stage,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Reference learning rate from the source protocol this run mirrors,
    /// recorded for traceability when `lr` is rescaled for corpus size.
    pub paper_lr: Option<f64>,
    pub warmup_ratio: f64,
    pub weight_decay: f64,
    pub rag_enabled: bool,
    pub k: usize,
    /// Drop the query's own bank entry from its retrieval results. On for
    /// pretraining (the bank is built from the same split), off when the
    /// querying split is disjoint from the bank's.
    pub exclude_self: bool,
    /// Skip bank provenance verification (for the deliberate
    /// mismatched-encoder ablation).
    pub allow_bank_mismatch: bool,
    /// Batch-order seed; model init seeds are chosen by the caller.
    pub seed: u64,
}

impl StageConfig {
    pub fn pretrain(seed: u64) -> Self {
        StageConfig {
            stage: Stage::Pretrain,
            steps: 120,
            batch: 8,
            lr: 1e-3,
            paper_lr: None,
            warmup_ratio: 0.1,
            weight_decay: 0.0,
            rag_enabled: false,
            k: 5,
            exclude_self: true,
            allow_bank_mismatch: false,
            seed,
        }
    }

    pub fn finetune(seed: u64) -> Self {
        StageConfig {
            stage: Stage::Finetune,
            steps: 80,
            batch: 8,
            lr: 1e-4,
            paper_lr: Some(5e-8),
            warmup_ratio: 0.1,
            weight_decay: 0.0,
            rag_enabled: false,
            k: 5,
            exclude_self: false,
            allow_bank_mismatch: false,
            seed,
        }
    }

    pub fn trainable(&self) -> &'static [&'static str] {
        match self.stage {
            Stage::Pretrain => &["connector", "rag_connector", "perceiver"],
            Stage::Finetune => &["connector", "rag_connector", "llm"],
        }
    }

    pub fn frozen(&self) -> &'static [&'static str] {
        match self.stage {
            Stage::Pretrain => &["vit", "llm", "key_encoder"],
            Stage::Finetune => &["vit", "perceiver", "key_encoder"],
        }
    }

    /// How retrieved values are produced in this stage: recomputed through
    /// the live compressor while it trains, or read back from the bank once
    /// it is frozen.
    pub fn value_mode(&self) -> ValueMode {
        match self.stage {
            Stage::Pretrain => ValueMode::Live,
            Stage::Finetune => ValueMode::Stored,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch == 0 {
            return Err(Error::Config("steps and batch must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive and finite, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return Err(Error::Config(format!(
                "warmup_ratio must lie in [0, 1), got {}",
                self.warmup_ratio
            )));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight decay must be non-negative".into()));
        }
        Ok(())
    }

    /// Stable hash of the full configuration, stamped into run records.
    pub fn hash(&self) -> u64 {
        fnv1a64(serde_json::to_string(self).expect("config serializes").as_bytes())
    }
}

// ─── run records ─────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRow {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub stage: Stage,
    pub seed: u64,
    pub config_hash: u64,
    pub rows: Vec<StepRow>,
    /// Forward multiply-accumulates across the whole run, doubled into FLOPs.
    pub total_flops: u64,
    pub wall_secs: f64,
}

impl RunRecord {
    pub fn final_loss(&self) -> f64 {
        self.rows.last().map_or(f64::NAN, |r| r.loss)
    }

    /// Mean loss over the last `n` recorded steps — steadier than a single
    /// final batch for run-to-run comparisons.
    pub fn tail_loss(&self, n: usize) -> f64 {
        let tail = &self.rows[self.rows.len().saturating_sub(n)..];
        tail.iter().map(|r| r.loss).sum::<f64>() / tail.len().max(1) as f64
    }

    /// Structural invariants: steps strictly increasing, all losses finite.
    pub fn validate(&self) -> Result<()> {
        for pair in self.rows.windows(2) {
            if pair[1].step <= pair[0].step {
                return Err(Error::Format(format!(
                    "run record steps not strictly increasing at {}",
                    pair[1].step
                )));
            }
        }
        if let Some(row) = self.rows.iter().find(|r| !r.loss.is_finite()) {
            return Err(Error::NanLoss { step: row.step as u64 });
        }
        Ok(())
    }

    /// Per-step trace as `step,loss,lr` lines. Floats are written in Rust's
    /// shortest round-trip form, so parsing the file recovers exact values.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("step,loss,lr\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{}\n", r.step, r.loss, r.lr));
        }
        Ok(std::fs::write(path, out)?)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, serde_json::to_string_pretty(self)?)?)
    }

    pub fn read_json(path: &Path) -> Result<RunRecord> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}
