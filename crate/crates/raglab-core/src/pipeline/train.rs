//! The stage runner and the evaluator. One stage = one optimizer, one batch
//! stream, one freeze policy; the caller owns bank construction and any
//! checkpointing between stages.

use super::forward::{
    baseline_forward, check_provenance, rag_forward_cached, BoundModels, Retrieval, SceneFeats,
    ValueMode,
};
use super::{RunRecord, Stage, StageConfig, StepRow};
use crate::datagen::{Sample, TaskData};
use crate::error::{Error, Result};
use crate::membank::MemoryBank;
use crate::models::ModelBundle;
use crate::optim::{cosine_lr, AdamW};
use crate::rngs::stream;
use crate::tensor::Tape;
use rand::Rng;
use std::collections::HashMap;
use std::time::Instant;

/// Train one stage in place. Every step builds a fresh tape, binds
/// parameters per the stage policy, averages the loss over an iid batch from
/// the stage's split, and applies AdamW to exactly the parameters that were
/// bound trainable. Frozen parameters are never written, so they stay
/// bit-identical across the stage.
pub fn run_stage(
    bundle: &mut ModelBundle,
    data: &TaskData,
    cfg: &StageConfig,
    bank: Option<&MemoryBank>,
    bank_samples: Option<&[Sample]>,
) -> Result<RunRecord> {
    cfg.validate()?;
    let split: &[Sample] = match cfg.stage {
        Stage::Pretrain => &data.pretrain,
        Stage::Finetune => &data.finetune,
    };
    if split.is_empty() {
        return Err(Error::Config(format!("{} split is empty", cfg.stage.name())));
    }

    if !cfg.rag_enabled && bank.is_some() {
        return Err(Error::Config(
            "a memory bank was given but retrieval is disabled; drop the bank or enable it".into(),
        ));
    }
    if cfg.rag_enabled {
        let bank = bank.ok_or_else(|| {
            Error::Config("retrieval is enabled but no memory bank was given".into())
        })?;
        if !cfg.allow_bank_mismatch {
            check_provenance(bundle, bank, cfg.value_mode())?;
            if bank.provenance.dataset_seed != data.spec.seed {
                return Err(Error::ProvenanceMismatch(format!(
                    "bank was built from dataset seed {}, training on seed {}",
                    bank.provenance.dataset_seed, data.spec.seed
                )));
            }
        }
        if cfg.value_mode() == ValueMode::Live && bank_samples.is_none() {
            return Err(Error::Config(
                "live-value training needs the samples the bank was built from".into(),
            ));
        }
    }

    let mut feats = SceneFeats::new();
    let mut opt = AdamW::new(cfg.weight_decay);
    let mut batch_rng = stream(cfg.seed, &format!("batches/{}", cfg.stage.name()));
    let mut rows = Vec::with_capacity(cfg.steps);
    let mut total_flops: u64 = 0;
    let started = Instant::now();

    for step in 0..cfg.steps {
        let lr = cosine_lr(step as u64, cfg.steps as u64, cfg.lr, cfg.warmup_ratio)?;
        let mut tape = Tape::new();
        let bm = BoundModels::for_stage(bundle, &mut tape, cfg);
        let mut value_cache = HashMap::new();

        let mut losses = Vec::with_capacity(cfg.batch);
        for _ in 0..cfg.batch {
            let idx = batch_rng.random_range(0..split.len());
            let sample = &split[idx];
            let fwd = match (cfg.rag_enabled, bank) {
                (true, Some(bank)) => {
                    let r = Retrieval {
                        bank,
                        bank_samples,
                        k: cfg.k,
                        mode: cfg.value_mode(),
                        exclude: if cfg.exclude_self { Some(idx as u64) } else { None },
                        allow_mismatch: cfg.allow_bank_mismatch,
                    };
                    rag_forward_cached(
                        &mut tape, bundle, &bm, &data.atlas, &mut feats, sample, &r,
                        &mut value_cache,
                    )?
                }
                _ => baseline_forward(&mut tape, bundle, &bm, &data.atlas, &mut feats, sample)?,
            };
            losses.push(fwd.loss);
        }
        let mut total = losses[0];
        for &l in &losses[1..] {
            total = tape.add(total, l)?;
        }
        let mean = tape.scale(total, 1.0 / cfg.batch as f64)?;

        let loss_val = tape.value(mean).data[0];
        if !loss_val.is_finite() {
            return Err(Error::NanLoss { step: step as u64 });
        }
        total_flops += 2 * tape.forward_macs();
        tape.backward(mean)?;

        // Collect gradients by name, then write updates through the bundle's
        // canonical visit order so optimizer slots stay stable across steps.
        let mut grads: HashMap<&str, Vec<f64>> = HashMap::new();
        for (name, var) in &bm.reg {
            if let Some(g) = tape.grad(*var) {
                grads.insert(name.as_str(), g.to_vec());
            }
        }
        opt.begin_step();
        let mut slot = 0usize;
        let mut apply_err = None;
        bundle.visit_mut(&mut |name, tensor| {
            if apply_err.is_none() {
                if let Some(g) = grads.get(name.as_str()) {
                    if let Err(e) = opt.update(slot, lr, &mut tensor.data, Some(g)) {
                        apply_err = Some(e);
                    }
                }
            }
            slot += 1;
        });
        if let Some(e) = apply_err {
            return Err(e);
        }

        rows.push(StepRow { step, loss: loss_val, lr });
    }

    let record = RunRecord {
        stage: cfg.stage,
        seed: cfg.seed,
        config_hash: cfg.hash(),
        rows,
        total_flops,
        wall_secs: started.elapsed().as_secs_f64(),
    };
    record.validate()?;
    Ok(record)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOutcome {
    pub accuracy: f64,
    pub mean_ce: f64,
    pub n: usize,
}

/// Greedy evaluation over a sample set: one frozen forward per sample, the
/// prediction is the argmax over answer tokens at the answer position (ties
/// go to the lowest token id). Pass a retrieval context to evaluate the
/// retrieval-augmented path; values always come from the bank's stored form.
pub fn evaluate(
    bundle: &ModelBundle,
    data: &TaskData,
    samples: &[Sample],
    retrieval: Option<&Retrieval>,
) -> Result<EvalOutcome> {
    if samples.is_empty() {
        return Err(Error::Empty("evaluation sample set".into()));
    }
    if let Some(r) = retrieval {
        if !r.allow_mismatch {
            check_provenance(bundle, r.bank, r.mode)?;
        }
    }
    let mut feats = SceneFeats::new();
    let n_answers = data.spec.n_shapes;
    let mut correct = 0usize;
    let mut ce_sum = 0.0;

    for sample in samples {
        let mut tape = Tape::new();
        let bm = BoundModels::frozen(bundle, &mut tape, retrieval.is_some());
        let fwd = match retrieval {
            Some(r) => {
                let mut cache = HashMap::new();
                rag_forward_cached(
                    &mut tape, bundle, &bm, &data.atlas, &mut feats, sample, r, &mut cache,
                )?
            }
            None => baseline_forward(&mut tape, bundle, &bm, &data.atlas, &mut feats, sample)?,
        };
        let logits = tape.value(fwd.logits);
        let t = logits.shape[0];
        let v = logits.shape[1];
        let last = &logits.data[(t - 1) * v..t * v];
        let mut best = 0usize;
        for tok in 1..n_answers {
            if last[tok] > last[best] {
                best = tok;
            }
        }
        if best as u32 == sample.answer {
            correct += 1;
        }
        ce_sum += tape.value(fwd.loss).data[0];
    }
    Ok(EvalOutcome {
        accuracy: correct as f64 / samples.len() as f64,
        mean_ce: ce_sum / samples.len() as f64,
        n: samples.len(),
    })
}
