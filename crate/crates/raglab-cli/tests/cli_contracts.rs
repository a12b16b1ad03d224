//! Front-end contracts: exit codes, artifact stamps, plot purity, and the
//! projection math behind the embedding export.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use raglab_cli::config::RunConfig;
use raglab_cli::pca::project_2d;
use raglab_cli::svg;
use raglab_core::rngs::stream;
use rand::Rng;

fn raglab(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_raglab"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

/// Small-but-real task so end-to-end commands finish in seconds.
const TINY: &str = "\
[task]
seed = 7
scenes = 48
pretrain = 60
finetune = 30
eval = 24

[stage1]
steps = 4
batch = 4

[stage2]
steps = 4
batch = 4

[run]
seed = 1
seeds = 2
";

fn write_tiny(dir: &Path) -> String {
    let p = dir.join("tiny.cfg");
    fs::write(&p, TINY).unwrap();
    p.display().to_string()
}

// ─── exit codes ────────────────────────────────────────────────────────────

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    // no subcommand
    assert_eq!(code(&raglab(&[], dir.path())), 1);
    // unknown subcommand
    assert_eq!(code(&raglab(&["frobnicate"], dir.path())), 1);
    // malformed override
    assert_eq!(code(&raglab(&["flops", "--override", "rho=0.5"], dir.path())), 1);
    // unknown config key
    assert_eq!(code(&raglab(&["flops", "--override", "task.bogus=1"], dir.path())), 1);
    // unknown ablation axis
    assert_eq!(code(&raglab(&["ablate", "--axis", "nonsense"], dir.path())), 1);
    // help is a success, not an error
    assert_eq!(code(&raglab(&["--help"], dir.path())), 0);
}

#[test]
fn runtime_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    // missing checkpoint file
    let out = raglab(&["eval", "--ckpt", "nope.ckpt"], dir.path());
    assert_eq!(code(&out), 2);
    // missing channel file
    let out = raglab(
        &["emi", "--channel", "missing.json", "--quantizers", "missing.json"],
        dir.path(),
    );
    assert_eq!(code(&out), 2);
}

#[test]
fn flops_succeeds_and_stamps_the_config_hash() {
    let dir = tempfile::tempdir().unwrap();
    let out = raglab(&["flops", "--out", "o"], dir.path());
    assert_eq!(code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(dir.path().join("o/flops.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    let expect = format!("{:016x}", RunConfig::default().hash());
    assert_eq!(v["config_hash"], serde_json::Value::String(expect));
}

#[test]
fn equivalent_configs_stamp_identical_hashes() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("a.cfg"), "[task]\nrho = 0.5\n[run]\nseed = 3\n").unwrap();
    fs::write(
        dir.path().join("b.cfg"),
        "# same settings, different text\n[run]\nseed=3\n\n[task]\n  rho   =    0.50\n",
    )
    .unwrap();
    for (cfg, out) in [("a.cfg", "oa"), ("b.cfg", "ob")] {
        let r = raglab(&["flops", "--config", cfg, "--out", out], dir.path());
        assert_eq!(code(&r), 0);
    }
    let a = fs::read_to_string(dir.path().join("oa/flops.json")).unwrap();
    let b = fs::read_to_string(dir.path().join("ob/flops.json")).unwrap();
    assert_eq!(a, b);
}

// ─── end-to-end artifact chain ─────────────────────────────────────────────

#[test]
fn train_chain_produces_loadable_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny(dir.path());

    let out = raglab(&["datagen", "--config", &cfg, "--out", "o"], dir.path());
    assert_eq!(code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("o/task.bin").exists());

    let out = raglab(&["build-bank", "--config", &cfg, "--out", "o"], dir.path());
    assert_eq!(code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("o/memory.bank").exists());

    let out = raglab(&["pretrain", "--config", &cfg, "--out", "o"], dir.path());
    assert_eq!(code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let loss_csv = fs::read_to_string(dir.path().join("o/stage1_loss.csv")).unwrap();
    assert!(loss_csv.starts_with("# config_hash="));
    assert_eq!(loss_csv.lines().nth(1), Some("step,loss,lr"));
    assert_eq!(loss_csv.lines().count(), 2 + 4, "one row per step");

    let out = raglab(
        &["finetune", "--config", &cfg, "--out", "o", "--init", "o/stage1.ckpt"],
        dir.path(),
    );
    assert_eq!(code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));

    let out = raglab(
        &["eval", "--config", &cfg, "--out", "o", "--ckpt", "o/stage2.ckpt"],
        dir.path(),
    );
    assert_eq!(code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let eval: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("o/eval.json")).unwrap()).unwrap();
    assert!(eval["weighted"].as_f64().unwrap() >= 0.0);

    // a finetune checkpoint cannot seed another finetune
    let out = raglab(
        &["finetune", "--config", &cfg, "--out", "o2", "--init", "o/stage2.ckpt"],
        dir.path(),
    );
    assert_eq!(code(&out), 1);

    // a checkpoint from a different task shape is rejected
    let out = raglab(
        &[
            "eval",
            "--config",
            &cfg,
            "--override",
            "task.shapes=3",
            "--out",
            "o3",
            "--ckpt",
            "o/stage2.ckpt",
        ],
        dir.path(),
    );
    assert_eq!(code(&out), 2);
}

#[test]
fn emi_ledger_balances_and_is_stamped() {
    let dir = tempfile::tempdir().unwrap();
    // two binary inputs, a binary retrieval column, binary labels; uniform-ish
    // joint with a slight tilt so nothing degenerates
    let mut pmf = vec![1.0f64; 16];
    pmf[3] = 2.0;
    pmf[12] = 3.0;
    let total: f64 = pmf.iter().sum();
    for p in &mut pmf {
        *p /= total;
    }
    let channel = serde_json::json!({
        "n_xv": 2, "n_xi": 2, "n_er": 2, "n_l": 2, "pmf": pmf,
    });
    fs::write(dir.path().join("ch.json"), channel.to_string()).unwrap();
    // joint visual-instruction alphabet has 4 states; coarse model merges
    // them in pairs, fine model separates all four
    let quant = serde_json::json!({
        "without": [0, 0, 1, 1],
        "with_retrieval": [0, 1, 2, 3, 4, 5, 6, 7],
    });
    fs::write(dir.path().join("q.json"), quant.to_string()).unwrap();

    let out = raglab(
        &["emi", "--channel", "ch.json", "--quantizers", "q.json", "--out", "o"],
        dir.path(),
    );
    assert_eq!(code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("o/emi.json")).unwrap()).unwrap();
    let delta_ieff = v["delta_ieff"].as_f64().unwrap();
    let delta_itrue = v["delta_itrue"].as_f64().unwrap();
    let delta_eps = v["delta_eps"].as_f64().unwrap();
    assert!((delta_ieff - (delta_itrue + delta_eps)).abs() < 1e-12);
    assert!(v["config_hash"].is_string());
}

#[test]
fn export_embeddings_row_count_and_populations() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny(dir.path());
    let out = raglab(&["export-embeddings", "--config", &cfg, "--out", "o"], dir.path());
    assert_eq!(code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(dir.path().join("o/embeddings.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(2).collect();
    // 12 eval samples × 16 connector rows each, plus one point per vocab id
    let spec = tiny_spec();
    let expect = 12 * spec.cells() + spec.vocab();
    assert_eq!(rows.len(), expect);
    let connectors = rows.iter().filter(|r| r.ends_with(",connector")).count();
    let texts = rows.iter().filter(|r| r.ends_with(",text")).count();
    assert_eq!(connectors, 12 * spec.cells());
    assert_eq!(texts, spec.vocab());
    assert!(dir.path().join("o/embeddings.svg").exists());
}

fn tiny_spec() -> raglab_core::datagen::TaskSpec {
    let mut s = raglab_core::datagen::TaskSpec::standard(7);
    s.n_scenes = 48;
    s.n_pretrain = 60;
    s.n_finetune = 30;
    s.n_eval = 24;
    s
}

// ─── plot purity ───────────────────────────────────────────────────────────

#[test]
fn svg_is_a_pure_function_of_the_csv() {
    let csv = "# config_hash=00ff\nseed,arm,step,loss\n1,base,0,3.0\n1,base,1,2.5\n1,rag,0,3.0\n1,rag,1,2.0\n";
    let a = svg::line_plot(csv, "t", "step", "loss", "arm").unwrap();
    let b = svg::line_plot(csv, "t", "step", "loss", "arm").unwrap();
    assert_eq!(a, b);
    let other = csv.replace("2.0", "1.9");
    let c = svg::line_plot(&other, "t", "step", "loss", "arm").unwrap();
    assert_ne!(a, c);
    // row order does not matter: series are grouped and sorted internally
    let shuffled = "# config_hash=00ff\nseed,arm,step,loss\n1,rag,1,2.0\n1,base,1,2.5\n1,rag,0,3.0\n1,base,0,3.0\n";
    let d = svg::line_plot(shuffled, "t", "step", "loss", "arm").unwrap();
    assert_eq!(a, d);
}

#[test]
fn svg_rejects_malformed_tables() {
    assert!(svg::line_plot("", "t", "x", "y", "g").is_err());
    assert!(svg::line_plot("x,y,g\n", "t", "x", "y", "missing").is_err());
    assert!(svg::line_plot("x,y,g\n1,2\n", "t", "x", "y", "g").is_err());
    assert!(svg::line_plot("x,y,g\noops,2,a\n", "t", "x", "y", "g").is_err());
}

// ─── projection math ───────────────────────────────────────────────────────

/// Independent oracle: eigenvalues of the sample covariance via power
/// iteration with deflation, nothing shared with the Jacobi path.
fn power_iteration_eigs(rows: &[Vec<f64>], dim: usize, top: usize) -> Vec<f64> {
    let n = rows.len() as f64;
    let mut mean = vec![0.0; dim];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v / n;
        }
    }
    let mut cov = vec![0.0; dim * dim];
    for r in rows {
        for i in 0..dim {
            for j in 0..dim {
                cov[i * dim + j] += (r[i] - mean[i]) * (r[j] - mean[j]) / n;
            }
        }
    }
    let mut eigs = Vec::new();
    let mut rng = stream(99, "power-iteration");
    for _ in 0..top {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.random::<f64>() - 0.5).collect();
        let mut lambda = 0.0;
        for _ in 0..10_000 {
            let mut w = vec![0.0; dim];
            for i in 0..dim {
                for j in 0..dim {
                    w[i] += cov[i * dim + j] * v[j];
                }
            }
            let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-300 {
                break;
            }
            let next: Vec<f64> = w.iter().map(|x| x / norm).collect();
            let delta: f64 = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).sum();
            v = next;
            lambda = norm;
            if delta < 1e-14 {
                break;
            }
        }
        eigs.push(lambda);
        for i in 0..dim {
            for j in 0..dim {
                cov[i * dim + j] -= lambda * v[i] * v[j];
            }
        }
    }
    eigs
}

#[test]
fn pca_variance_fraction_matches_an_independent_eigen_oracle() {
    let dim = 7;
    let mut rng = stream(4, "pca-points");
    // anisotropic cloud: two strong directions plus noise
    let rows: Vec<Vec<f64>> = (0..80)
        .map(|_| {
            let a: f64 = rng.random::<f64>() * 6.0 - 3.0;
            let b: f64 = rng.random::<f64>() * 2.0 - 1.0;
            (0..dim)
                .map(|i| {
                    a * ((i + 1) as f64 / dim as f64)
                        + b * if i % 2 == 0 { 1.0 } else { -1.0 }
                        + 0.05 * (rng.random::<f64>() - 0.5)
                })
                .collect()
        })
        .collect();
    let proj = project_2d(&rows, dim).unwrap();
    let oracle = power_iteration_eigs(&rows, dim, dim);
    let oracle_total: f64 = oracle.iter().sum();
    let oracle_frac = (oracle[0] + oracle[1]) / oracle_total;
    assert!(
        (proj.variance_fraction - oracle_frac).abs() < 1e-9,
        "jacobi {} vs power-iteration {}",
        proj.variance_fraction,
        oracle_frac
    );
    // eigenvalue-by-eigenvalue agreement for the informative directions
    for (a, b) in proj.eigenvalues.iter().zip(&oracle).take(2) {
        assert!((a - b).abs() < 1e-9 * (1.0 + b.abs()));
    }
    // projected variance along each axis equals its eigenvalue
    for axis in 0..2 {
        let m: f64 = proj.points.iter().map(|p| p[axis]).sum::<f64>() / rows.len() as f64;
        let var: f64 =
            proj.points.iter().map(|p| (p[axis] - m).powi(2)).sum::<f64>() / rows.len() as f64;
        assert!((var - proj.eigenvalues[axis]).abs() < 1e-9 * (1.0 + proj.eigenvalues[axis]));
    }
}

#[test]
fn duplicated_points_project_to_identical_coordinates() {
    let mut rng = stream(5, "pca-dup");
    let mut rows: Vec<Vec<f64>> = (0..20)
        .map(|_| (0..4).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect())
        .collect();
    rows.push(rows[3].clone());
    rows.push(rows[3].clone());
    let proj = project_2d(&rows, 4).unwrap();
    assert_eq!(proj.points[3], proj.points[20]);
    assert_eq!(proj.points[3], proj.points[21]);
}

#[test]
fn pca_rejects_degenerate_inputs() {
    assert!(project_2d(&[], 4).is_err());
    assert!(project_2d(&[vec![1.0]], 1).is_err());
    assert!(project_2d(&[vec![1.0, 2.0], vec![1.0]], 2).is_err());
}
