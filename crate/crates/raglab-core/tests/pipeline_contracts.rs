//! Contracts for the training pipeline: stage policies, forward-pass
//! equivalences, freeze integrity, determinism, evaluation behavior,
//! checkpoint persistence, and FLOP accounting against the tape's own
//! multiply-accumulate counter.

use raglab_core::datagen::{generate, Sample, TaskData, TaskSpec, PATCH_DIM};
use raglab_core::error::Error;
use raglab_core::membank::{build_bank, MemoryBank};
use raglab_core::models::{vit_forward, BundleConfig, ModelBundle, ParamReg, Tier};
use raglab_core::pipeline::{
    baseline_forward, checkpoint_file_size, evaluate, flops_estimate, load_checkpoint,
    rag_delta_closed_form, rag_forward, run_stage, save_checkpoint, BoundModels, Retrieval,
    RunRecord, SceneFeats, Stage, StageConfig, StepRow, ValueMode, COMPONENTS,
};
use raglab_core::tensor::Tape;
use std::collections::HashSet;
use std::sync::OnceLock;

// ─── shared fixture ──────────────────────────────────────────────────────────

fn small_spec(seed: u64) -> TaskSpec {
    let mut s = TaskSpec::standard(seed);
    s.n_pretrain = 240;
    s.n_finetune = 96;
    s.n_eval = 48;
    s
}

fn small_bundle(vocab: usize, seed: u64) -> ModelBundle {
    ModelBundle::new(&BundleConfig::standard(vocab, 16, PATCH_DIM, Tier::Small), seed)
}

/// One dataset, one untrained bundle, and a bank built from the full
/// pretraining split with that bundle. Read-only; tests clone what they train.
fn fixture() -> &'static (TaskData, ModelBundle, MemoryBank) {
    static FIX: OnceLock<(TaskData, ModelBundle, MemoryBank)> = OnceLock::new();
    FIX.get_or_init(|| {
        let data = generate(&small_spec(41)).unwrap();
        let bundle = small_bundle(data.spec.vocab(), 4100);
        let bank = build_bank(&bundle, &data.atlas, &data.pretrain, data.spec.seed).unwrap();
        (data, bundle, bank)
    })
}

fn short(mut cfg: StageConfig, steps: usize, batch: usize) -> StageConfig {
    cfg.steps = steps;
    cfg.batch = batch;
    cfg
}

// ─── stage policy ────────────────────────────────────────────────────────────

#[test]
fn stage_policies_partition_the_components() {
    for cfg in [StageConfig::pretrain(1), StageConfig::finetune(1)] {
        let trainable: HashSet<&str> = cfg.trainable().iter().copied().collect();
        let frozen: HashSet<&str> = cfg.frozen().iter().copied().collect();
        assert!(trainable.is_disjoint(&frozen), "{:?}", cfg.stage);
        let all: HashSet<&str> = trainable.union(&frozen).copied().collect();
        assert_eq!(all, COMPONENTS.iter().copied().collect::<HashSet<_>>());
    }
    assert_eq!(StageConfig::pretrain(1).value_mode(), ValueMode::Live);
    assert_eq!(StageConfig::finetune(1).value_mode(), ValueMode::Stored);
}

#[test]
fn config_hash_tracks_content() {
    let a = StageConfig::pretrain(7);
    let b = a.clone();
    assert_eq!(a.hash(), b.hash());
    let mut c = a.clone();
    c.k = a.k + 1;
    assert_ne!(a.hash(), c.hash());
    let mut d = a.clone();
    d.seed = 8;
    assert_ne!(a.hash(), d.hash());
}

#[test]
fn invalid_stage_configs_are_rejected() {
    let (data, bundle, _) = fixture();
    for bad in [
        short(StageConfig::pretrain(1), 0, 8),
        short(StageConfig::pretrain(1), 10, 0),
        {
            let mut c = StageConfig::pretrain(1);
            c.lr = 0.0;
            c
        },
        {
            let mut c = StageConfig::pretrain(1);
            c.warmup_ratio = 1.0;
            c
        },
        {
            let mut c = StageConfig::pretrain(1);
            c.weight_decay = -0.1;
            c
        },
    ] {
        assert!(bad.validate().is_err(), "{bad:?} should not validate");
        let mut b = bundle.clone();
        assert!(run_stage(&mut b, data, &bad, None, None).is_err());
    }
}

// ─── forward-pass behavior ───────────────────────────────────────────────────

#[test]
fn untrained_loss_sits_near_the_uniform_ceiling() {
    let (data, _, _) = fixture();
    let uniform = (data.spec.vocab() as f64).ln();
    let mut mean = 0.0;
    let mut count = 0;
    for seed in [11, 12, 13] {
        let bundle = small_bundle(data.spec.vocab(), seed);
        let mut feats = SceneFeats::new();
        for sample in &data.eval[..15] {
            let mut tape = Tape::new();
            let bm = BoundModels::frozen(&bundle, &mut tape, false);
            let fwd =
                baseline_forward(&mut tape, &bundle, &bm, &data.atlas, &mut feats, sample).unwrap();
            mean += tape.value(fwd.loss).data[0];
            count += 1;
        }
    }
    mean /= count as f64;
    assert!(
        (mean - uniform).abs() / uniform < 0.2,
        "untrained mean loss {mean} strays from ln(vocab) = {uniform}"
    );
}

#[test]
fn identical_inputs_give_identical_losses() {
    let (data, bundle, _) = fixture();
    let sample = &data.eval[0];
    let run = || {
        let mut tape = Tape::new();
        let bm = BoundModels::frozen(bundle, &mut tape, false);
        let mut feats = SceneFeats::new();
        let fwd =
            baseline_forward(&mut tape, bundle, &bm, &data.atlas, &mut feats, sample).unwrap();
        tape.value(fwd.loss).data[0]
    };
    assert_eq!(run().to_bits(), run().to_bits());
}

#[test]
fn disabled_retrieval_is_bitwise_the_baseline() {
    let (data, bundle, bank) = fixture();
    let base_cfg = short(StageConfig::pretrain(909), 8, 4);
    let mut rag_cfg = base_cfg.clone();
    rag_cfg.rag_enabled = true;
    rag_cfg.k = 0;

    let mut b1 = bundle.clone();
    let rec1 = run_stage(&mut b1, data, &base_cfg, None, None).unwrap();
    let mut b2 = bundle.clone();
    let rec2 = run_stage(&mut b2, data, &rag_cfg, Some(bank), Some(&data.pretrain)).unwrap();

    for (a, b) in rec1.rows.iter().zip(&rec2.rows) {
        assert_eq!(a.loss.to_bits(), b.loss.to_bits(), "step {}", a.step);
    }
    // and the weights that trained in both runs end up identical
    assert_eq!(b1.fingerprint("connector"), b2.fingerprint("connector"));
}

#[test]
fn self_exclusion_keeps_own_entry_out_of_results() {
    let (data, bundle, bank) = fixture();
    let mut feats = SceneFeats::new();
    for (idx, sample) in data.pretrain.iter().take(40).enumerate() {
        let mut tape = Tape::new();
        let bm = BoundModels::frozen(bundle, &mut tape, true);
        let r = Retrieval {
            bank,
            bank_samples: None,
            k: 3,
            mode: ValueMode::Stored,
            exclude: Some(idx as u64),
            allow_mismatch: false,
        };
        let fwd =
            rag_forward(&mut tape, bundle, &bm, &data.atlas, &mut feats, sample, &r).unwrap();
        assert_eq!(fwd.retrieved.len(), 3);
        assert!(!fwd.retrieved.contains(&(idx as u64)), "sample {idx} retrieved itself");
    }
}

// ─── training loop ───────────────────────────────────────────────────────────

#[test]
fn pretraining_reduces_the_loss() {
    let (data, bundle, _) = fixture();
    let mut b = bundle.clone();
    let cfg = short(StageConfig::pretrain(5), 60, 4);
    let rec = run_stage(&mut b, data, &cfg, None, None).unwrap();

    assert_eq!(rec.rows.len(), 60);
    assert!(rec.total_flops > 0);
    assert!(rec.wall_secs > 0.0);
    rec.validate().unwrap();
    let first: f64 = rec.rows[..10].iter().map(|r| r.loss).sum::<f64>() / 10.0;
    let last = rec.tail_loss(10);
    assert!(last < first - 0.05, "loss did not decrease: first10 {first}, last10 {last}");
}

#[test]
fn training_is_deterministic_for_a_seed_and_config() {
    let (data, bundle, bank) = fixture();
    let mut cfg = short(StageConfig::pretrain(77), 10, 3);
    cfg.rag_enabled = true;
    cfg.k = 2;
    let run = || {
        let mut b = bundle.clone();
        run_stage(&mut b, data, &cfg, Some(bank), Some(&data.pretrain)).unwrap()
    };
    let (r1, r2) = (run(), run());
    assert_eq!(r1.config_hash, r2.config_hash);
    for (a, b) in r1.rows.iter().zip(&r2.rows) {
        assert_eq!(a.loss.to_bits(), b.loss.to_bits(), "step {}", a.step);
        assert_eq!(a.lr.to_bits(), b.lr.to_bits());
    }
}

#[test]
fn pretraining_freezes_encoder_and_decoder_bitwise() {
    let (data, bundle, bank) = fixture();
    let mut b = bundle.clone();
    let before: Vec<u64> = COMPONENTS.iter().map(|c| b.fingerprint(c)).collect();
    let mut cfg = short(StageConfig::pretrain(31), 12, 4);
    cfg.rag_enabled = true;
    cfg.k = 2;
    run_stage(&mut b, data, &cfg, Some(bank), Some(&data.pretrain)).unwrap();
    let after: Vec<u64> = COMPONENTS.iter().map(|c| b.fingerprint(c)).collect();

    for (i, c) in COMPONENTS.iter().enumerate() {
        let changed = before[i] != after[i];
        let expect_change = cfg.trainable().contains(c);
        assert_eq!(changed, expect_change, "{c}: changed={changed}");
    }
}

#[test]
fn finetuning_freezes_the_compressor_bitwise() {
    let (data, bundle, bank) = fixture();
    let mut b = bundle.clone();
    let before: Vec<u64> = COMPONENTS.iter().map(|c| b.fingerprint(c)).collect();
    let mut cfg = short(StageConfig::finetune(32), 12, 4);
    cfg.rag_enabled = true;
    cfg.k = 2;
    run_stage(&mut b, data, &cfg, Some(bank), None).unwrap();
    let after: Vec<u64> = COMPONENTS.iter().map(|c| b.fingerprint(c)).collect();

    for (i, c) in COMPONENTS.iter().enumerate() {
        let changed = before[i] != after[i];
        let expect_change = cfg.trainable().contains(c);
        assert_eq!(changed, expect_change, "{c}: changed={changed}");
    }
}

#[test]
fn diverging_training_aborts_with_the_failing_step() {
    let (data, bundle, _) = fixture();
    let mut b = bundle.clone();
    let mut cfg = short(StageConfig::pretrain(3), 6, 2);
    cfg.lr = 1e300;
    match run_stage(&mut b, data, &cfg, None, None) {
        Err(Error::NanLoss { .. }) | Err(Error::NonFinite { .. }) => {}
        other => panic!("expected divergence abort, got {other:?}"),
    }
}

#[test]
fn retrieval_requires_a_bank_and_live_values_need_sources() {
    let (data, bundle, bank) = fixture();
    let mut cfg = short(StageConfig::pretrain(4), 4, 2);
    cfg.rag_enabled = true;
    cfg.k = 1;

    let mut b = bundle.clone();
    assert!(matches!(run_stage(&mut b, data, &cfg, None, None), Err(Error::Config(_))));
    let mut b = bundle.clone();
    assert!(matches!(
        run_stage(&mut b, data, &cfg, Some(bank), None),
        Err(Error::Config(_))
    ));
}

#[test]
fn foreign_banks_are_rejected_unless_explicitly_allowed() {
    let (data, bundle, bank) = fixture();
    // a bank whose keys came from a differently-initialized encoder
    let stranger = small_bundle(data.spec.vocab(), 9999);
    let foreign = build_bank(&stranger, &data.atlas, &data.pretrain[..8], data.spec.seed).unwrap();

    let mut cfg = short(StageConfig::pretrain(6), 4, 2);
    cfg.rag_enabled = true;
    cfg.k = 1;
    let mut b = bundle.clone();
    assert!(matches!(
        run_stage(&mut b, data, &cfg, Some(&foreign), Some(&data.pretrain[..8])),
        Err(Error::ProvenanceMismatch(_))
    ));

    // same bundle, wrong dataset seed
    let wrong_seed = build_bank(bundle, &data.atlas, &data.pretrain[..8], 999).unwrap();
    let mut b = bundle.clone();
    assert!(matches!(
        run_stage(&mut b, data, &cfg, Some(&wrong_seed), Some(&data.pretrain[..8])),
        Err(Error::ProvenanceMismatch(_))
    ));

    // the mismatch ablation opts out and runs
    cfg.allow_bank_mismatch = true;
    let mut b = bundle.clone();
    run_stage(&mut b, data, &cfg, Some(&foreign), Some(&data.pretrain[..8])).unwrap();

    let _ = bank;
}

// ─── evaluation ──────────────────────────────────────────────────────────────

#[test]
fn a_memorized_sample_set_scores_perfectly() {
    let (data, bundle, _) = fixture();
    let mut b = bundle.clone();
    let mut cfg = short(StageConfig::finetune(88), 150, 8);
    cfg.lr = 2e-3;
    let train_set: Vec<Sample> = data.finetune[..10].to_vec();
    let mut slim = data.clone();
    slim.finetune = train_set.clone();
    let rec = run_stage(&mut b, &slim, &cfg, None, None).unwrap();
    assert!(rec.final_loss() < 0.5, "memorization stalled at {}", rec.final_loss());

    let out = evaluate(&b, data, &train_set, None).unwrap();
    assert_eq!(out.n, 10);
    assert_eq!(out.accuracy, 1.0, "memorized set not reproduced: {out:?}");
}

#[test]
fn random_init_on_balanced_binary_answers_is_near_chance() {
    let mut spec = small_spec(53);
    spec.n_shapes = 2;
    spec.n_scenes = 24;
    let data = generate(&spec).unwrap();
    let mut acc = 0.0;
    for seed in [21, 22, 23] {
        let bundle = small_bundle(data.spec.vocab(), seed);
        acc += evaluate(&bundle, &data, &data.eval, None).unwrap().accuracy;
    }
    acc /= 3.0;
    assert!((acc - 0.5).abs() <= 0.1, "binary chance level violated: {acc}");
}

#[test]
fn evaluating_twice_gives_identical_numbers() {
    let (data, bundle, bank) = fixture();
    let r = Retrieval {
        bank,
        bank_samples: None,
        k: 2,
        mode: ValueMode::Stored,
        exclude: None,
        allow_mismatch: false,
    };
    let a = evaluate(bundle, data, &data.eval[..12], Some(&r)).unwrap();
    let b = evaluate(bundle, data, &data.eval[..12], Some(&r)).unwrap();
    assert_eq!(a.accuracy.to_bits(), b.accuracy.to_bits());
    assert_eq!(a.mean_ce.to_bits(), b.mean_ce.to_bits());
}

// ─── run records ─────────────────────────────────────────────────────────────

#[test]
fn run_records_roundtrip_through_csv_and_json() {
    let rec = RunRecord {
        stage: Stage::Pretrain,
        seed: 5,
        config_hash: 0xabcdef,
        rows: vec![
            StepRow { step: 0, loss: 3.0944982757, lr: 1e-4 },
            StepRow { step: 1, loss: 2.5, lr: 0.1 + 0.2 },
        ],
        total_flops: 123456,
        wall_secs: 0.25,
    };
    let dir = std::env::temp_dir().join(format!("runrec-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let csv_path = dir.join("trace.csv");
    let json_path = dir.join("run.json");
    rec.write_csv(&csv_path).unwrap();
    rec.write_json(&json_path).unwrap();

    let csv = std::fs::read_to_string(&csv_path).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("step,loss,lr"));
    let first: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(first[0].parse::<usize>().unwrap(), 0);
    assert_eq!(first[1].parse::<f64>().unwrap(), 3.0944982757);
    assert_eq!(first[2].parse::<f64>().unwrap(), 1e-4);

    let back = RunRecord::read_json(&json_path).unwrap();
    assert_eq!(back, rec);
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn run_record_validation_catches_bad_traces() {
    let good = RunRecord {
        stage: Stage::Finetune,
        seed: 1,
        config_hash: 2,
        rows: vec![StepRow { step: 0, loss: 1.0, lr: 0.1 }, StepRow { step: 1, loss: 0.9, lr: 0.1 }],
        total_flops: 10,
        wall_secs: 1.0,
    };
    good.validate().unwrap();

    let mut shuffled = good.clone();
    shuffled.rows.swap(0, 1);
    assert!(shuffled.validate().is_err());

    let mut poisoned = good.clone();
    poisoned.rows[1].loss = f64::NAN;
    assert!(matches!(poisoned.validate(), Err(Error::NanLoss { step: 1 })));
}

// ─── checkpoints ─────────────────────────────────────────────────────────────

#[test]
fn checkpoints_roundtrip_bit_exact_and_reject_corruption() {
    let (data, bundle, _) = fixture();
    let dir = std::env::temp_dir().join(format!("ckpt-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("model.ckpt");

    save_checkpoint(bundle, "pretrain", &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(bytes.len() as u64, checkpoint_file_size(bundle, "pretrain").unwrap());

    let (back, tag) = load_checkpoint(&path).unwrap();
    assert_eq!(tag, "pretrain");
    assert_eq!(back.cfg, bundle.cfg);
    for c in COMPONENTS {
        assert_eq!(back.fingerprint(c), bundle.fingerprint(c), "{c} differs after reload");
    }
    // bit-exactness in use, not just by fingerprint
    let e = evaluate(bundle, data, &data.eval[..4], None).unwrap();
    let e2 = evaluate(&back, data, &data.eval[..4], None).unwrap();
    assert_eq!(e.mean_ce.to_bits(), e2.mean_ce.to_bits());

    let mut flipped = bytes.clone();
    let mid = flipped.len() / 2;
    flipped[mid] ^= 0x40;
    let bad = dir.join("flipped.ckpt");
    std::fs::write(&bad, &flipped).unwrap();
    assert!(load_checkpoint(&bad).is_err());

    let short_file = dir.join("short.ckpt");
    std::fs::write(&short_file, &bytes[..bytes.len() - 9]).unwrap();
    assert!(load_checkpoint(&short_file).is_err());

    std::fs::remove_dir_all(&dir).ok();
}

// ─── flop accounting ─────────────────────────────────────────────────────────

/// Count the forward MACs of a full composite pass by running the frozen
/// patch encoder and the rest of the graph on instrumented tapes.
fn measured_flops(rag_k: usize, mode: ValueMode) -> u64 {
    let (data, bundle, bank) = fixture();
    let sample = &data.eval[0];

    let mut vit_tape = Tape::new();
    let mut reg = ParamReg::new();
    let vars = bundle.vit.bind(&mut vit_tape, false, &mut reg);
    vit_forward(&mut vit_tape, &bundle.vit.cfg, &vars, &data.atlas.render(sample)).unwrap();
    let vit_macs = vit_tape.forward_macs();

    let mut tape = Tape::new();
    let bm = BoundModels::frozen(bundle, &mut tape, rag_k > 0);
    let mut feats = SceneFeats::new();
    if rag_k == 0 {
        baseline_forward(&mut tape, bundle, &bm, &data.atlas, &mut feats, sample).unwrap();
    } else {
        let r = Retrieval {
            bank,
            bank_samples: Some(&data.pretrain),
            k: rag_k,
            mode,
            exclude: None,
            allow_mismatch: false,
        };
        rag_forward(&mut tape, bundle, &bm, &data.atlas, &mut feats, sample, &r).unwrap();
    }
    2 * (vit_macs + tape.forward_macs())
}

#[test]
fn flop_estimate_matches_the_tape_counter_exactly() {
    let (data, bundle, _) = fixture();
    let cfg = &bundle.cfg;
    let instr = data.eval[0].instruction.len();
    let caption = data.eval[0].caption.len();

    let base = flops_estimate(cfg, instr, false, 0, ValueMode::Stored, caption);
    assert_eq!(base.rag_delta_flops, 0);
    assert_eq!(base.total_flops, base.baseline_flops);
    assert_eq!(
        base.baseline_flops,
        base.vit_flops + base.connector_flops + base.llm_flops
    );
    assert_eq!(measured_flops(0, ValueMode::Stored), base.baseline_flops);

    let stored = flops_estimate(cfg, instr, true, 3, ValueMode::Stored, caption);
    assert_eq!(stored.compression_flops, 0);
    assert_eq!(measured_flops(3, ValueMode::Stored), stored.total_flops);

    let live = flops_estimate(cfg, instr, true, 2, ValueMode::Live, caption);
    assert!(live.compression_flops > 0);
    assert_eq!(measured_flops(2, ValueMode::Live), live.total_flops);
}

#[test]
fn retrieval_increment_closed_form_matches_the_walked_sum() {
    for tier in [Tier::Small, Tier::Large] {
        let cfg = BundleConfig::standard(23, 16, PATCH_DIM, tier);
        for k in [0usize, 1, 2, 4, 8, 16] {
            let walked = flops_estimate(&cfg, 2, true, k, ValueMode::Stored, 16).rag_delta_flops;
            let closed = rag_delta_closed_form(&cfg, 2, k);
            assert_eq!(walked, closed, "tier {tier:?} k={k}");
        }
    }
}

#[test]
fn retrieval_increment_is_marginal_for_long_sequences() {
    // Every retrieved pair adds 32 rows, so the relative cost is governed by
    // the base sequence length. On the 18-token toy composite the increment
    // is comparable to the whole pass; at representative sequence lengths it
    // drops under 10%, and it shrinks monotonically as the base grows.
    let cfg = BundleConfig::standard(23, 16, PATCH_DIM, Tier::Large);
    let ratio = |instr: usize| {
        let est = flops_estimate(&cfg, instr, true, 1, ValueMode::Stored, 16);
        est.rag_delta_flops as f64 / est.baseline_flops as f64
    };
    assert!(ratio(600) < 0.10, "k=1 increment at a 616-row base: {}", ratio(600));
    assert!(ratio(64) > ratio(128));
    assert!(ratio(128) > ratio(600));
}
