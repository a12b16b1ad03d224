//! Value-level oracles for tensor ops, the optimizer, and the LR schedule.
//! Expected values are recomputed here with independent scalar arithmetic,
//! never by calling back into the engine.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use raglab_core::optim::{cosine_lr, AdamW};
use raglab_core::{Error, Tape};

fn uniform(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect()
}

#[test]
fn matmul_small_example() {
    let mut tape = Tape::new();
    let a = tape.constant(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let ones = tape.constant(vec![2, 1], vec![1.0, 1.0]).unwrap();
    let out = tape.matmul(a, ones).unwrap();
    assert_eq!(tape.value(out).shape, vec![2, 1]);
    assert_eq!(tape.value(out).data, vec![3.0, 7.0]);
}

#[test]
fn matmul_against_scalar_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (m, k, n) = (4, 6, 3);
    let a = uniform(&mut rng, m * k);
    let b = uniform(&mut rng, k * n);
    let mut expect = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for p in 0..k {
                acc += a[i * k + p] * b[p * n + j];
            }
            expect[i * n + j] = acc;
        }
    }
    let mut tape = Tape::new();
    let av = tape.constant(vec![m, k], a).unwrap();
    let bv = tape.constant(vec![k, n], b).unwrap();
    let out = tape.matmul(av, bv).unwrap();
    for (got, want) in tape.value(out).data.iter().zip(&expect) {
        assert!((got - want).abs() < 1e-12);
    }
}

#[test]
fn gelu_fixed_points() {
    let mut tape = Tape::new();
    let x = tape.constant(vec![1, 3], vec![0.0, 10.0, -10.0]).unwrap();
    let y = tape.gelu(x).unwrap();
    let d = &tape.value(y).data;
    assert_eq!(d[0], 0.0);
    assert!((d[1] - 10.0).abs() < 1e-6);
    assert!(d[2].abs() < 1e-6);
}

#[test]
fn gelu_at_one_matches_tanh_formula() {
    // independent recomputation with its own constants
    let c0 = (2.0 / std::f64::consts::PI).sqrt();
    let u = c0 * (1.0 + 0.044715);
    let expect = 0.5 * (1.0 + u.tanh());
    let mut tape = Tape::new();
    let x = tape.constant(vec![1, 1], vec![1.0]).unwrap();
    let y = tape.gelu(x).unwrap();
    assert!((tape.value(y).data[0] - expect).abs() < 1e-12);
}

#[test]
fn softmax_uniform_row() {
    let mut tape = Tape::new();
    let x = tape.constant(vec![1, 4], vec![3.7; 4]).unwrap();
    let y = tape.softmax(x, 1).unwrap();
    for &p in &tape.value(y).data {
        assert!((p - 0.25).abs() < 1e-15);
    }
}

#[test]
fn softmax_two_logit_closed_form() {
    let (a, b) = (0.3_f64, -1.1_f64);
    let expect = 1.0 / (1.0 + (b - a).exp());
    let mut tape = Tape::new();
    let x = tape.constant(vec![1, 2], vec![a, b]).unwrap();
    let y = tape.softmax(x, 1).unwrap();
    assert!((tape.value(y).data[0] - expect).abs() < 1e-15);
    assert!((tape.value(y).data.iter().sum::<f64>() - 1.0).abs() < 1e-15);
}

#[test]
fn softmax_axis0_normalizes_columns() {
    let mut tape = Tape::new();
    let x = tape.constant(vec![3, 2], vec![0.1, -0.5, 1.2, 0.0, -2.0, 3.3]).unwrap();
    let y = tape.softmax(x, 0).unwrap();
    let d = &tape.value(y).data;
    for j in 0..2 {
        let col_sum: f64 = (0..3).map(|i| d[i * 2 + j]).sum();
        assert!((col_sum - 1.0).abs() < 1e-14);
    }
}

#[test]
fn layer_norm_standardizes_rows() {
    let mut tape = Tape::new();
    let x = tape.constant(vec![1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let gain = tape.constant(vec![4], vec![1.0; 4]).unwrap();
    let bias = tape.constant(vec![4], vec![0.0; 4]).unwrap();
    let y = tape.layer_norm(x, gain, bias).unwrap();
    // scalar recomputation: mu = 2.5, population var = 1.25
    let mu = 2.5;
    let inv = 1.0 / (1.25_f64 + 1e-12).sqrt();
    for (j, &got) in tape.value(y).data.iter().enumerate() {
        let want = ((j + 1) as f64 - mu) * inv;
        assert!((got - want).abs() < 1e-12);
    }
}

#[test]
fn layer_norm_affine_applies_gain_and_bias() {
    let mut tape = Tape::new();
    let x = tape.constant(vec![1, 2], vec![0.0, 2.0]).unwrap();
    let gain = tape.constant(vec![2], vec![3.0, 0.5]).unwrap();
    let bias = tape.constant(vec![2], vec![-1.0, 10.0]).unwrap();
    let y = tape.layer_norm(x, gain, bias).unwrap();
    // xhat = [-1, 1] (mu=1, sd=1), so y = [-1*3-1, 1*0.5+10]
    let d = &tape.value(y).data;
    assert!((d[0] - (-4.0)).abs() < 1e-9);
    assert!((d[1] - 10.5).abs() < 1e-9);
}

#[test]
fn cross_entropy_uniform_logits_is_log_vocab() {
    let mut tape = Tape::new();
    let logits = tape.constant(vec![3, 5], vec![0.0; 15]).unwrap();
    let loss = tape.cross_entropy(logits, &[0, 3, 4], &[true, true, true]).unwrap();
    assert!((tape.value(loss).data[0] - (5.0_f64).ln()).abs() < 1e-12);
}

#[test]
fn cross_entropy_random_5x7_scalar_recomputation() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let (t, v) = (5, 7);
    let logits = uniform(&mut rng, t * v);
    let targets: Vec<u32> = (0..t).map(|_| rng.random_range(0..v as u32)).collect();
    let mask = [true, false, true, true, false];

    // independent scalar oracle
    let mut total = 0.0;
    let mut count = 0;
    for i in 0..t {
        if !mask[i] {
            continue;
        }
        let row = &logits[i * v..(i + 1) * v];
        let sum_exp: f64 = row.iter().map(|z| z.exp()).sum();
        total += sum_exp.ln() - row[targets[i] as usize];
        count += 1;
    }
    let expect = total / count as f64;

    let mut tape = Tape::new();
    let lv = tape.constant(vec![t, v], logits).unwrap();
    let loss = tape.cross_entropy(lv, &targets, &mask).unwrap();
    assert!((tape.value(loss).data[0] - expect).abs() < 1e-12);
}

#[test]
fn cross_entropy_ignores_masked_positions() {
    let mut tape = Tape::new();
    let mut data = vec![0.0; 2 * 3];
    data[3] = 1000.0; // huge logit on a masked row must not matter
    let logits = tape.constant(vec![2, 3], data).unwrap();
    let loss = tape.cross_entropy(logits, &[1, 0], &[true, false]).unwrap();
    assert!((tape.value(loss).data[0] - (3.0_f64).ln()).abs() < 1e-12);
}

#[test]
fn embedding_lookup_gathers_rows() {
    let mut tape = Tape::new();
    let table = tape.constant(vec![3, 2], vec![0.0, 0.1, 1.0, 1.1, 2.0, 2.1]).unwrap();
    let out = tape.embedding_lookup(table, &[2, 0, 2]).unwrap();
    assert_eq!(tape.value(out).data, vec![2.0, 2.1, 0.0, 0.1, 2.0, 2.1]);
}

#[test]
fn concat_and_slice_roundtrip() {
    let mut tape = Tape::new();
    let a = tape.constant(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let b = tape.constant(vec![2, 1], vec![9.0, 8.0]).unwrap();
    let wide = tape.concat(&[a, b], 1).unwrap();
    assert_eq!(tape.value(wide).data, vec![1.0, 2.0, 9.0, 3.0, 4.0, 8.0]);
    let back = tape.slice_cols(wide, 0, 2).unwrap();
    assert_eq!(tape.value(back).data, vec![1.0, 2.0, 3.0, 4.0]);

    let tall = tape.concat(&[a, a], 0).unwrap();
    assert_eq!(tape.value(tall).shape, vec![4, 2]);
    assert_eq!(tape.value(tall).data[4..], [1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn mean_reductions() {
    let mut tape = Tape::new();
    let x = tape.constant(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
    let col_means = tape.mean(x, 0).unwrap();
    assert_eq!(tape.value(col_means).data, vec![2.5, 3.5, 4.5]);
    let row_means = tape.mean(x, 1).unwrap();
    assert_eq!(tape.value(row_means).data, vec![2.0, 5.0]);
}

#[test]
fn transpose_values() {
    let mut tape = Tape::new();
    let x = tape.constant(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
    let xt = tape.transpose(x).unwrap();
    assert_eq!(tape.value(xt).shape, vec![3, 2]);
    assert_eq!(tape.value(xt).data, vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
}

// ─── optimizer ───────────────────────────────────────────────────────────────

#[test]
fn adamw_first_step_scalar_oracle() {
    let mut opt = AdamW::new(0.01);
    let mut p = [1.0_f64];
    opt.begin_step();
    opt.update(0, 0.1, &mut p, Some(&[0.5])).unwrap();

    // longhand single-step recomputation
    let (b1, b2, eps, wd, lr, g) = (0.9, 0.999, 1e-8, 0.01, 0.1, 0.5_f64);
    let m = (1.0 - b1) * g;
    let v = (1.0 - b2) * g * g;
    let mhat = m / (1.0 - b1);
    let vhat = v / (1.0 - b2);
    let expect = 1.0 - lr * (mhat / (vhat.sqrt() + eps) + wd * 1.0);
    assert!((p[0] - expect).abs() < 1e-12);
}

#[test]
fn adamw_two_steps_scalar_oracle() {
    let mut opt = AdamW::new(0.0);
    let mut p = [0.3_f64];
    let grads = [0.2, -0.7];
    for g in grads {
        opt.begin_step();
        opt.update(0, 0.05, &mut p, Some(&[g])).unwrap();
    }

    let (b1, b2, eps, lr) = (0.9, 0.999, 1e-8, 0.05);
    let mut q = 0.3_f64;
    let (mut m, mut v) = (0.0, 0.0);
    for (t, g) in grads.iter().enumerate() {
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mhat = m / (1.0 - b1.powi(t as i32 + 1));
        let vhat = v / (1.0 - b2.powi(t as i32 + 1));
        q -= lr * mhat / (vhat.sqrt() + eps);
    }
    assert!((p[0] - q).abs() < 1e-12);
}

#[test]
fn adamw_pure_decay_shrinks_weight() {
    let mut opt = AdamW::new(0.1);
    let mut p = [2.0_f64];
    opt.begin_step();
    opt.update(0, 0.1, &mut p, None).unwrap();
    assert!((p[0] - 2.0 * (1.0 - 0.1 * 0.1)).abs() < 1e-12);
}

#[test]
fn adamw_rejects_non_finite_grad() {
    let mut opt = AdamW::new(0.0);
    let mut p = [1.0_f64];
    opt.begin_step();
    assert!(matches!(
        opt.update(0, 0.1, &mut p, Some(&[f64::NAN])),
        Err(Error::NonFinite(_))
    ));
}

#[test]
fn adamw_rejects_shape_change() {
    let mut opt = AdamW::new(0.0);
    let mut p = [1.0_f64, 2.0];
    opt.begin_step();
    opt.update(0, 0.1, &mut p, Some(&[0.1, 0.1])).unwrap();
    let mut shorter = [1.0_f64];
    opt.begin_step();
    assert!(opt.update(0, 0.1, &mut shorter, Some(&[0.1])).is_err());
}

// ─── schedule ────────────────────────────────────────────────────────────────

#[test]
fn cosine_lr_warmup_ramp() {
    // total 100, ratio 0.03: warmup covers steps 0..2
    let base = 2.0;
    assert!((cosine_lr(0, 100, base, 0.03).unwrap() - base / 3.0).abs() < 1e-15);
    assert!((cosine_lr(1, 100, base, 0.03).unwrap() - 2.0 * base / 3.0).abs() < 1e-15);
    assert!((cosine_lr(2, 100, base, 0.03).unwrap() - base).abs() < 1e-15);
}

#[test]
fn cosine_lr_midpoint_and_tail() {
    // no warmup: midpoint of the cosine is half the base rate
    let mid = cosine_lr(10, 20, 1.0, 0.0).unwrap();
    assert!((mid - 0.5).abs() < 1e-12);
    // final step is near but above zero, and the schedule decays monotonically
    let mut prev = f64::INFINITY;
    for s in 0..20 {
        let lr = cosine_lr(s, 20, 1.0, 0.0).unwrap();
        assert!(lr > 0.0 && lr <= 1.0);
        assert!(lr < prev);
        prev = lr;
    }
    assert!(cosine_lr(19, 20, 1.0, 0.0).unwrap() < 0.01);
}

#[test]
fn cosine_lr_rejects_overrun() {
    assert!(matches!(
        cosine_lr(20, 20, 1.0, 0.03),
        Err(Error::ScheduleStep { step: 20, total: 20 })
    ));
    assert!(matches!(cosine_lr(0, 0, 1.0, 0.03), Err(Error::ScheduleStep { .. })));
}
