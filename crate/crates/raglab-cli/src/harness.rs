//! One function per subcommand. Every run derives its dataset, models, and
//! banks deterministically from the config, so re-running any command with
//! the same config file and seed reproduces its artifacts byte for byte.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use raglab_core::datagen::{generate, Sample, TaskData};
use raglab_core::emi::{build_ledger, DiscreteChannel, Quantizer};
use raglab_core::hash::fnv1a64;
use raglab_core::membank::{build_bank, save_bank, MemoryBank};
use raglab_core::models::{BundleConfig, ModelBundle};
use raglab_core::pipeline::{
    evaluate, flops_estimate, llm_embed_rows, run_stage, save_checkpoint, load_checkpoint,
    rag_delta_closed_form, Retrieval, RunRecord, StageConfig, ValueMode,
};
use raglab_core::rngs::stream;
use rand::seq::SliceRandom;
use serde::Serialize;
use serde_json::json;

use crate::config::RunConfig;
use crate::pca::project_2d;
use crate::report::{BenchmarkReport, BenchmarkRow};
use crate::svg;
use crate::CliError;

// ─── shared plumbing ───────────────────────────────────────────────────────

pub fn make_data(cfg: &RunConfig) -> Result<TaskData, CliError> {
    Ok(generate(&cfg.task)?)
}

pub fn bundle_config(cfg: &RunConfig) -> BundleConfig {
    BundleConfig::standard(
        cfg.task.vocab(),
        cfg.task.cells(),
        raglab_core::datagen::PATCH_DIM,
        cfg.tier,
    )
}

pub fn make_bundle(cfg: &RunConfig, seed: u64) -> ModelBundle {
    ModelBundle::new(&bundle_config(cfg), seed)
}

/// Bank source rows: a prefix of the pretrain split, or all of it.
pub fn bank_slice<'a>(cfg: &RunConfig, data: &'a TaskData) -> &'a [Sample] {
    match cfg.bank_size {
        0 => &data.pretrain,
        n => &data.pretrain[..n.min(data.pretrain.len())],
    }
}

fn stamped_csv(hash: u64, header: &str, body: &str) -> String {
    format!("# config_hash={hash:016x}\n{header}\n{body}")
}

fn write_file(out: &Path, name: &str, content: &str) -> Result<PathBuf, CliError> {
    fs::create_dir_all(out)?;
    let path = out.join(name);
    fs::write(&path, content)?;
    Ok(path)
}

fn write_json<T: Serialize>(out: &Path, name: &str, value: &T) -> Result<PathBuf, CliError> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Runtime(format!("serialize {name}: {e}")))?;
    write_file(out, name, &(text + "\n"))
}

fn stage1(cfg: &RunConfig, seed: u64, rag: bool) -> StageConfig {
    let mut st = cfg.stage1.clone();
    st.seed = seed;
    st.rag_enabled = rag;
    st
}

fn stage2(cfg: &RunConfig, seed: u64, rag: bool) -> StageConfig {
    let mut st = cfg.stage2.clone();
    st.seed = seed;
    st.rag_enabled = rag;
    st
}

/// Run one pretrain arm from a fresh bundle. With retrieval on, the bank is
/// built from the same fresh bundle (live values recompress per step).
pub fn pretrain_arm(
    cfg: &RunConfig,
    data: &TaskData,
    seed: u64,
    rag: bool,
) -> Result<(ModelBundle, RunRecord), CliError> {
    let mut bundle = make_bundle(cfg, seed);
    let st = stage1(cfg, seed, rag);
    let rec = if rag {
        let rows = bank_slice(cfg, data);
        let bank = build_bank(&bundle, &data.atlas, rows, data.spec.seed)?;
        run_stage(&mut bundle, data, &st, Some(&bank), Some(rows))?
    } else {
        run_stage(&mut bundle, data, &st, None, None)?
    };
    Ok((bundle, rec))
}

/// Finetune `bundle` in place on (a fraction of) the finetune split. With
/// retrieval on, values come from a bank rebuilt against the current
/// perceiver, as stored values must match the frozen compressor.
pub fn finetune_arm(
    cfg: &RunConfig,
    data: &TaskData,
    bundle: &mut ModelBundle,
    seed: u64,
    rag: bool,
    fraction: f64,
) -> Result<RunRecord, CliError> {
    let st = stage2(cfg, seed, rag);
    let slice = subsample_finetune(data, seed, fraction)?;
    let mut view = data.clone();
    view.finetune = slice;
    if rag {
        let rows = bank_slice(cfg, &view);
        let bank = build_bank(bundle, &view.atlas, rows, view.spec.seed)?;
        Ok(run_stage(bundle, &view, &st, Some(&bank), Some(rows))?)
    } else {
        Ok(run_stage(bundle, &view, &st, None, None)?)
    }
}

/// Deterministic fraction of the finetune split: a seeded shuffle prefix, so
/// smaller fractions are subsets of larger ones for the same seed.
fn subsample_finetune(data: &TaskData, seed: u64, fraction: f64) -> Result<Vec<Sample>, CliError> {
    if !(0.0..=1.0).contains(&fraction) || fraction == 0.0 {
        return Err(CliError::Usage(format!("data fraction must be in (0, 1], got {fraction}")));
    }
    let n = data.finetune.len();
    let take = ((fraction * n as f64).ceil() as usize).clamp(1, n);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(seed, "finetune-fraction"));
    Ok(order[..take].iter().map(|&i| data.finetune[i].clone()).collect())
}

/// Evaluate on the eval split, one benchmark row per question cell, weighted
/// by per-cell sample counts. The synthetic task has no external benchmark
/// suite, so question cells play the role of member benchmarks.
pub fn eval_report(
    cfg: &RunConfig,
    data: &TaskData,
    bundle: &ModelBundle,
    retrieval: Option<&Retrieval>,
) -> Result<BenchmarkReport, CliError> {
    let mut by_cell: BTreeMap<u8, Vec<Sample>> = BTreeMap::new();
    for s in &data.eval {
        by_cell.entry(s.question_cell).or_default().push(s.clone());
    }
    let mut rows = Vec::new();
    for (cell, samples) in &by_cell {
        let out = evaluate(bundle, data, samples, retrieval)?;
        rows.push(BenchmarkRow {
            name: format!("cell_{cell}"),
            accuracy: out.accuracy,
            samples: out.n as u64,
        });
    }
    BenchmarkReport::new(rows, cfg.hash())
}

/// Stored-value retrieval context over a bank built from `bundle`.
pub struct EvalBank {
    pub bank: MemoryBank,
}

impl EvalBank {
    pub fn build(cfg: &RunConfig, data: &TaskData, bundle: &ModelBundle) -> Result<Self, CliError> {
        let rows = bank_slice(cfg, data);
        Ok(EvalBank { bank: build_bank(bundle, &data.atlas, rows, data.spec.seed)? })
    }

    pub fn retrieval(&self, cfg: &RunConfig) -> Retrieval<'_> {
        Retrieval {
            bank: &self.bank,
            bank_samples: None,
            k: cfg.bank_k,
            mode: ValueMode::Stored,
            exclude: None,
            allow_mismatch: false,
        }
    }
}

// ─── atomic subcommands ────────────────────────────────────────────────────

pub fn cmd_datagen(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let data = make_data(cfg)?;
    fs::create_dir_all(out)?;
    let path = out.join("task.bin");
    data.save(&path)?;
    let summary = json!({
        "config_hash": format!("{:016x}", cfg.hash()),
        "file": path.display().to_string(),
        "vocab": data.spec.vocab(),
        "scenes": data.spec.n_scenes,
        "splits": {
            "pretrain": data.pretrain.len(),
            "finetune": data.finetune.len(),
            "eval": data.eval.len(),
        },
    });
    write_json(out, "datagen.json", &summary)?;
    println!("wrote {} ({} samples)", path.display(), data.pretrain.len() + data.finetune.len() + data.eval.len());
    Ok(())
}

pub fn cmd_build_bank(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let data = make_data(cfg)?;
    let bundle = make_bundle(cfg, cfg.seed);
    let rows = bank_slice(cfg, &data);
    let bank = build_bank(&bundle, &data.atlas, rows, data.spec.seed)?;
    fs::create_dir_all(out)?;
    let path = out.join("memory.bank");
    save_bank(&bank, &path)?;
    let summary = json!({
        "config_hash": format!("{:016x}", cfg.hash()),
        "file": path.display().to_string(),
        "entries": bank.len(),
        "key_dim": bank.d_k,
        "provenance": {
            "key_encoder": format!("{:016x}", bank.provenance.key_encoder),
            "perceiver": format!("{:016x}", bank.provenance.perceiver),
            "dataset_seed": bank.provenance.dataset_seed,
        },
    });
    write_json(out, "bank.json", &summary)?;
    println!("wrote {} ({} entries)", path.display(), bank.len());
    Ok(())
}

pub fn cmd_pretrain(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let data = make_data(cfg)?;
    let (bundle, rec) = pretrain_arm(cfg, &data, cfg.seed, cfg.stage1.rag_enabled)?;
    emit_run(cfg, out, &data, &bundle, rec, "stage1")
}

pub fn cmd_finetune(cfg: &RunConfig, out: &Path, init: &Path) -> Result<(), CliError> {
    let data = make_data(cfg)?;
    let (mut bundle, tag) = load_checkpoint(init)?;
    check_bundle_matches(cfg, &bundle)?;
    if tag != "stage1" {
        return Err(CliError::Usage(format!("expected a stage1 checkpoint, got '{tag}'")));
    }
    let rec = finetune_arm(cfg, &data, &mut bundle, cfg.seed, cfg.stage2.rag_enabled, 1.0)?;
    emit_run(cfg, out, &data, &bundle, rec, "stage2")
}

pub fn cmd_eval(cfg: &RunConfig, out: &Path, ckpt: &Path, rag: bool) -> Result<(), CliError> {
    let data = make_data(cfg)?;
    let (bundle, _tag) = load_checkpoint(ckpt)?;
    check_bundle_matches(cfg, &bundle)?;
    let report = if rag {
        let eb = EvalBank::build(cfg, &data, &bundle)?;
        eval_report(cfg, &data, &bundle, Some(&eb.retrieval(cfg)))?
    } else {
        eval_report(cfg, &data, &bundle, None)?
    };
    write_json(out, "eval.json", &report)?;
    println!("weighted accuracy {:.4} over {} rows", report.weighted, report.rows.len());
    Ok(())
}

fn check_bundle_matches(cfg: &RunConfig, bundle: &ModelBundle) -> Result<(), CliError> {
    let want = bundle_config(cfg);
    if bundle.cfg != want {
        return Err(CliError::Runtime(
            "checkpoint was trained under a different model/task shape than this config".into(),
        ));
    }
    Ok(())
}

fn emit_run(
    cfg: &RunConfig,
    out: &Path,
    data: &TaskData,
    bundle: &ModelBundle,
    rec: RunRecord,
    tag: &str,
) -> Result<(), CliError> {
    fs::create_dir_all(out)?;
    let mut body = String::new();
    for r in &rec.rows {
        let _ = writeln!(body, "{},{},{}", r.step, r.loss, r.lr);
    }
    write_file(out, &format!("{tag}_loss.csv"), &stamped_csv(cfg.hash(), "step,loss,lr", &body))?;
    save_checkpoint(bundle, tag, &out.join(format!("{tag}.ckpt")))?;
    let report = eval_report(cfg, data, bundle, None)?;
    let summary = json!({
        "config_hash": format!("{:016x}", cfg.hash()),
        "stage": tag,
        "seed": rec.seed,
        "final_loss": rec.final_loss(),
        "tail_loss": rec.tail_loss(10),
        "total_flops": rec.total_flops,
        "wall_secs": rec.wall_secs,
        "eval_weighted_accuracy": report.weighted,
    });
    write_json(out, &format!("{tag}.json"), &summary)?;
    println!("{tag}: final loss {:.4}, eval weighted accuracy {:.4}", rec.tail_loss(10), report.weighted);
    Ok(())
}

// ─── experiment-shaped subcommands ─────────────────────────────────────────

#[derive(Debug, Serialize)]
pub struct CompareSeed {
    pub seed: u64,
    pub baseline_loss: f64,
    pub rag_loss: f64,
    pub reduction_pct: f64,
}

#[derive(Debug, Serialize)]
pub struct CompareSummary {
    pub config_hash: String,
    pub per_seed: Vec<CompareSeed>,
    pub mean_reduction_pct: f64,
}

/// Baseline vs retrieval-augmented pretraining on shared seeds. The headline
/// number is the relative final-loss reduction, reported per seed.
pub fn cmd_pretrain_compare(cfg: &RunConfig, out: &Path) -> Result<CompareSummary, CliError> {
    let data = make_data(cfg)?;
    let mut body = String::new();
    let mut per_seed = Vec::new();
    for seed in cfg.seeds() {
        let (_b, base) = pretrain_arm(cfg, &data, seed, false)?;
        let (_b, rag) = pretrain_arm(cfg, &data, seed, true)?;
        for (arm, rec) in [("baseline", &base), ("rag", &rag)] {
            for r in &rec.rows {
                let _ = writeln!(body, "{seed},{arm},{},{},{}", r.step, r.loss, r.lr);
            }
        }
        let (bl, rl) = (base.tail_loss(10), rag.tail_loss(10));
        per_seed.push(CompareSeed {
            seed,
            baseline_loss: bl,
            rag_loss: rl,
            reduction_pct: 100.0 * (bl - rl) / bl,
        });
    }
    let csv = stamped_csv(cfg.hash(), "seed,arm,step,loss,lr", &body);
    write_file(out, "compare_loss.csv", &csv)?;
    write_file(
        out,
        "compare_loss.svg",
        &svg::line_plot(&csv, "pretrain loss by arm", "step", "loss", "arm")?,
    )?;
    let mean = per_seed.iter().map(|s| s.reduction_pct).sum::<f64>() / per_seed.len().max(1) as f64;
    let summary = CompareSummary {
        config_hash: format!("{:016x}", cfg.hash()),
        per_seed,
        mean_reduction_pct: mean,
    };
    write_json(out, "compare.json", &summary)?;
    for s in &summary.per_seed {
        println!(
            "seed {}: baseline {:.4}  rag {:.4}  reduction {:.1}%",
            s.seed, s.baseline_loss, s.rag_loss, s.reduction_pct
        );
    }
    Ok(summary)
}

pub const EFFICIENCY_FRACTIONS: [f64; 5] = [0.2, 0.4, 0.6, 0.8, 1.0];

#[derive(Debug, Serialize)]
pub struct EfficiencySeed {
    pub seed: u64,
    /// (fraction, baseline accuracy, rag accuracy) per grid point.
    pub rows: Vec<(f64, f64, f64)>,
    pub baseline_full: f64,
    /// Smallest fraction whose retrieval-augmented accuracy reaches the
    /// full-data baseline, if any.
    pub min_fraction: Option<f64>,
}

#[derive(Debug, Serialize)]
pub struct EfficiencySummary {
    pub config_hash: String,
    pub per_seed: Vec<EfficiencySeed>,
    pub seeds_reaching_60pct: usize,
}

/// Finetune-data efficiency: both arms start from one shared stage-1
/// checkpoint per seed (pretrained with retrieval so the compressor is
/// trained), then finetune on growing fractions with and without retrieval.
pub fn cmd_data_efficiency(cfg: &RunConfig, out: &Path) -> Result<EfficiencySummary, CliError> {
    let data = make_data(cfg)?;
    let mut body = String::new();
    let mut per_seed = Vec::new();
    for seed in cfg.seeds() {
        let (pretrained, _rec) = pretrain_arm(cfg, &data, seed, true)?;
        let mut rows = Vec::new();
        for &f in &EFFICIENCY_FRACTIONS {
            let mut base = pretrained.clone();
            finetune_arm(cfg, &data, &mut base, seed, false, f)?;
            let acc_base = eval_report(cfg, &data, &base, None)?.weighted;

            let mut rag = pretrained.clone();
            finetune_arm(cfg, &data, &mut rag, seed, true, f)?;
            let eb = EvalBank::build(cfg, &data, &rag)?;
            let acc_rag = eval_report(cfg, &data, &rag, Some(&eb.retrieval(cfg)))?.weighted;

            let _ = writeln!(body, "{seed},{f},baseline,{acc_base}");
            let _ = writeln!(body, "{seed},{f},rag,{acc_rag}");
            rows.push((f, acc_base, acc_rag));
        }
        let baseline_full = rows.last().map(|r| r.1).unwrap_or(f64::NAN);
        let min_fraction = rows.iter().find(|r| r.2 >= baseline_full).map(|r| r.0);
        per_seed.push(EfficiencySeed { seed, rows, baseline_full, min_fraction });
    }
    let csv = stamped_csv(cfg.hash(), "seed,fraction,arm,accuracy", &body);
    write_file(out, "efficiency.csv", &csv)?;
    write_file(
        out,
        "efficiency.svg",
        &svg::line_plot(&csv, "finetune data efficiency", "fraction", "accuracy", "arm")?,
    )?;
    let reached = per_seed.iter().filter(|s| s.min_fraction.is_some_and(|f| f <= 0.6)).count();
    let summary = EfficiencySummary {
        config_hash: format!("{:016x}", cfg.hash()),
        per_seed,
        seeds_reaching_60pct: reached,
    };
    write_json(out, "efficiency.json", &summary)?;
    for s in &summary.per_seed {
        println!(
            "seed {}: baseline@1.0 {:.4}, min fraction {}",
            s.seed,
            s.baseline_full,
            s.min_fraction.map_or("none".into(), |f| format!("{f}")),
        );
    }
    Ok(summary)
}

#[derive(Debug, Serialize)]
pub struct AblateRow {
    pub setting: String,
    pub seed: u64,
    pub accuracy: f64,
}

#[derive(Debug, Serialize)]
pub struct AblateSummary {
    pub config_hash: String,
    pub axis: String,
    pub rows: Vec<AblateRow>,
    /// Mean accuracy per setting, in first-seen setting order.
    pub means: Vec<(String, f64)>,
}

pub const KB_SIZES: [usize; 3] = [1000, 3000, 5000];
pub const TOP_KS: [usize; 3] = [1, 5, 10];

/// Sweep one axis of the retrieval design and report eval accuracy per
/// setting. Each seed trains its own stage-1(+retrieval) model, finetunes
/// with retrieval, and is then evaluated under the swept setting.
pub fn cmd_ablate(cfg: &RunConfig, out: &Path, axis: &str) -> Result<AblateSummary, CliError> {
    match axis {
        "kb_size" | "top_k" | "encoder_mismatch" => {}
        _ => {
            return Err(CliError::Usage(format!(
                "unknown ablation axis '{axis}' (expected kb_size, top_k, or encoder_mismatch)"
            )))
        }
    }
    let data = make_data(cfg)?;
    if axis == "kb_size" && data.pretrain.len() < *KB_SIZES.last().unwrap() {
        return Err(CliError::Usage(format!(
            "kb_size sweep needs task.pretrain >= {}, config has {}",
            KB_SIZES.last().unwrap(),
            data.pretrain.len()
        )));
    }

    let mut rows = Vec::new();
    for seed in cfg.seeds() {
        let (pretrained, _) = pretrain_arm(cfg, &data, seed, true)?;
        let mut tuned = pretrained.clone();
        finetune_arm(cfg, &data, &mut tuned, seed, true, 1.0)?;

        match axis {
            "kb_size" => {
                for &n in &KB_SIZES {
                    let mut sub = cfg.clone();
                    sub.bank_size = n;
                    let eb = EvalBank::build(&sub, &data, &tuned)?;
                    let acc = eval_report(cfg, &data, &tuned, Some(&eb.retrieval(&sub)))?.weighted;
                    rows.push(AblateRow { setting: format!("kb={n}"), seed, accuracy: acc });
                }
            }
            "top_k" => {
                let eb = EvalBank::build(cfg, &data, &tuned)?;
                for &k in &TOP_KS {
                    let mut r = eb.retrieval(cfg);
                    r.k = k;
                    let acc = eval_report(cfg, &data, &tuned, Some(&r))?.weighted;
                    rows.push(AblateRow { setting: format!("k={k}"), seed, accuracy: acc });
                }
            }
            "encoder_mismatch" => {
                let eb = EvalBank::build(cfg, &data, &tuned)?;
                let acc = eval_report(cfg, &data, &tuned, Some(&eb.retrieval(cfg)))?.weighted;
                rows.push(AblateRow { setting: "matched".into(), seed, accuracy: acc });

                let foreign = mismatched_bank(cfg, &data, &tuned, seed)?;
                let mut r = Retrieval {
                    bank: &foreign,
                    bank_samples: None,
                    k: cfg.bank_k,
                    mode: ValueMode::Stored,
                    exclude: None,
                    allow_mismatch: true,
                };
                r.k = cfg.bank_k;
                let acc = eval_report(cfg, &data, &tuned, Some(&r))?.weighted;
                rows.push(AblateRow { setting: "mismatched".into(), seed, accuracy: acc });
            }
            _ => unreachable!(),
        }
    }

    let mut body = String::new();
    for r in &rows {
        let _ = writeln!(body, "{},{},{}", r.setting, r.seed, r.accuracy);
    }
    write_file(out, &format!("ablate_{axis}.csv"), &stamped_csv(cfg.hash(), "setting,seed,accuracy", &body))?;

    let mut means: Vec<(String, f64)> = Vec::new();
    for r in &rows {
        if !means.iter().any(|(s, _)| s == &r.setting) {
            let vals: Vec<f64> =
                rows.iter().filter(|x| x.setting == r.setting).map(|x| x.accuracy).collect();
            means.push((r.setting.clone(), vals.iter().sum::<f64>() / vals.len() as f64));
        }
    }
    let summary = AblateSummary {
        config_hash: format!("{:016x}", cfg.hash()),
        axis: axis.into(),
        rows,
        means,
    };
    write_json(out, &format!("ablate_{axis}.json"), &summary)?;
    for (s, m) in &summary.means {
        println!("{s}: mean accuracy {m:.4}");
    }
    Ok(summary)
}

/// A bank whose keys come from a *different* encoder (a foreign-seed bundle)
/// while values stay aligned with the evaluated model's compressor. Isolates
/// key-space mismatch from value corruption.
pub fn mismatched_bank(
    cfg: &RunConfig,
    data: &TaskData,
    bundle: &ModelBundle,
    seed: u64,
) -> Result<MemoryBank, CliError> {
    let foreign = make_bundle(cfg, seed ^ 0x5eed_0ff5_e7);
    let rows = bank_slice(cfg, data);
    let own = build_bank(bundle, &data.atlas, rows, data.spec.seed)?;
    let other = build_bank(&foreign, &data.atlas, rows, data.spec.seed)?;
    let mut bank = own;
    for (mine, theirs) in bank.entries.iter_mut().zip(&other.entries) {
        mine.key = theirs.key.clone();
    }
    bank.provenance.key_encoder = other.provenance.key_encoder;
    Ok(bank)
}

// ─── analysis subcommands ──────────────────────────────────────────────────

pub fn cmd_flops(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let bc = bundle_config(cfg);
    let instr_len = 2;
    let caption_len = cfg.task.question_cells;
    let base = flops_estimate(&bc, instr_len, false, 0, ValueMode::Stored, caption_len);
    let live = flops_estimate(&bc, instr_len, true, cfg.stage1.k, ValueMode::Live, caption_len);
    let stored = flops_estimate(&bc, instr_len, true, cfg.bank_k, ValueMode::Stored, caption_len);
    let summary = json!({
        "config_hash": format!("{:016x}", cfg.hash()),
        "per_forward": {
            "baseline": base,
            "rag_live_train": live,
            "rag_stored_eval": stored,
        },
        "rag_delta_closed_form": {
            "train_k": rag_delta_closed_form(&bc, instr_len, cfg.stage1.k),
            "eval_k": rag_delta_closed_form(&bc, instr_len, cfg.bank_k),
        },
    });
    write_json(out, "flops.json", &summary)?;
    println!(
        "baseline {} FLOPs/forward, retrieval delta {} (k={})",
        base.total_flops, stored.rag_delta_flops, cfg.bank_k
    );
    Ok(())
}

pub fn cmd_emi(channel_path: &Path, quantizer_path: &Path, out: &Path) -> Result<(), CliError> {
    let channel_text = fs::read_to_string(channel_path)
        .map_err(|e| CliError::Runtime(format!("read {}: {e}", channel_path.display())))?;
    let quant_text = fs::read_to_string(quantizer_path)
        .map_err(|e| CliError::Runtime(format!("read {}: {e}", quantizer_path.display())))?;
    let ch = DiscreteChannel::from_json(&channel_text)?;

    #[derive(serde::Deserialize)]
    struct QuantSpec {
        without: Vec<usize>,
        with_retrieval: Vec<usize>,
    }
    let qs: QuantSpec = serde_json::from_str(&quant_text)
        .map_err(|e| CliError::Runtime(format!("quantizer spec: {e}")))?;
    let q_without = Quantizer::new(qs.without)?;
    let q_with = Quantizer::new(qs.with_retrieval)?;

    let ledger = build_ledger(&ch, &q_without, &q_with)?;
    let mut value = serde_json::to_value(&ledger)
        .map_err(|e| CliError::Runtime(format!("serialize ledger: {e}")))?;
    let input_hash = fnv1a64([channel_text.as_bytes(), quant_text.as_bytes()].concat().as_slice());
    value["config_hash"] = json!(format!("{input_hash:016x}"));
    write_json(out, "emi.json", &value)?;
    println!(
        "delta I_eff {:.6} = delta I_true {:.6} + delta eps {:.6}",
        ledger.delta_ieff, ledger.delta_itrue, ledger.delta_eps
    );
    Ok(())
}

/// Project connector outputs and the LLM's token embeddings into a shared
/// 2-D principal component basis and emit one labeled point per row.
pub fn cmd_export_embeddings(cfg: &RunConfig, out: &Path, ckpt: Option<&Path>) -> Result<(), CliError> {
    let data = make_data(cfg)?;
    if data.eval.is_empty() {
        return Err(CliError::Runtime("empty dataset: nothing to embed".into()));
    }
    let bundle = match ckpt {
        Some(p) => {
            let (b, _tag) = load_checkpoint(p)?;
            check_bundle_matches(cfg, &b)?;
            b
        }
        None => make_bundle(cfg, cfg.seed),
    };

    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut labels: Vec<&'static str> = Vec::new();
    let n_samples = data.eval.len().min(12);
    for s in &data.eval[..n_samples] {
        for row in connector_rows(&bundle, &data, s)? {
            rows.push(row);
            labels.push("connector");
        }
    }
    for row in llm_embed_rows(&bundle)? {
        rows.push(row);
        labels.push("text");
    }

    let proj = project_2d(&rows, bundle.cfg.d_llm())?;
    let mut body = String::new();
    for (p, l) in proj.points.iter().zip(&labels) {
        let _ = writeln!(body, "{},{},{l}", p[0], p[1]);
    }
    let csv = stamped_csv(cfg.hash(), "x,y,population", &body);
    write_file(out, "embeddings.csv", &csv)?;
    write_file(
        out,
        "embeddings.svg",
        &svg::scatter_plot(&csv, "connector outputs vs token embeddings", "x", "y", "population")?,
    )?;
    let summary = json!({
        "config_hash": format!("{:016x}", cfg.hash()),
        "points": proj.points.len(),
        "connector_rows": labels.iter().filter(|l| **l == "connector").count(),
        "text_rows": labels.iter().filter(|l| **l == "text").count(),
        "variance_fraction_top2": proj.variance_fraction,
    });
    write_json(out, "embeddings.json", &summary)?;
    println!(
        "{} points, top-2 variance fraction {:.4}",
        proj.points.len(),
        proj.variance_fraction
    );
    Ok(())
}

/// Connector outputs for one sample as plain rows (off the training tape).
fn connector_rows(
    bundle: &ModelBundle,
    data: &TaskData,
    sample: &Sample,
) -> Result<Vec<Vec<f64>>, CliError> {
    Ok(raglab_core::pipeline::connector_output_rows(bundle, &data.atlas, sample)?)
}
