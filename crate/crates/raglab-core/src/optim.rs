//! AdamW optimizer and cosine learning-rate schedule.

use crate::error::{Error, Result};

/// AdamW with decoupled weight decay. Moment buffers are keyed by slot index,
/// so the caller must present parameters in a stable order across steps.
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        AdamW { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Begin an update step. Call `update` once per parameter slot, then the
    /// next `begin_step` advances the bias-correction counter.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// In-place AdamW update of one parameter slot. A `None` gradient still
    /// applies weight decay (the parameter took part in the step but received
    /// no signal, e.g. an unused embedding row would pass zeros instead).
    pub fn update(&mut self, slot: usize, lr: f64, data: &mut [f64], grad: Option<&[f64]>) -> Result<()> {
        if self.step == 0 {
            return Err(Error::Config("AdamW::update before begin_step".into()));
        }
        while self.m.len() <= slot {
            self.m.push(Vec::new());
            self.v.push(Vec::new());
        }
        if self.m[slot].is_empty() {
            self.m[slot] = vec![0.0; data.len()];
            self.v[slot] = vec![0.0; data.len()];
        }
        if self.m[slot].len() != data.len() {
            return Err(Error::Shape(format!(
                "optimizer slot {slot} holds {} elements, parameter has {}",
                self.m[slot].len(),
                data.len()
            )));
        }
        if let Some(g) = grad {
            if g.len() != data.len() {
                return Err(Error::Shape(format!(
                    "gradient length {} does not match parameter length {}",
                    g.len(),
                    data.len()
                )));
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("gradient for slot {slot}")));
            }
        }
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let m = &mut self.m[slot];
        let v = &mut self.v[slot];
        for i in 0..data.len() {
            let g = grad.map_or(0.0, |g| g[i]);
            m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
            v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            data[i] -= lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * data[i]);
        }
        Ok(())
    }
}

/// Cosine decay with linear warmup. Returns the learning rate for `step`
/// (0-based) out of `total` steps; steps at or past `total` are a bug in the
/// caller's loop bounds and error rather than extrapolate.
pub fn cosine_lr(step: u64, total: u64, base_lr: f64, warmup_ratio: f64) -> Result<f64> {
    if total == 0 {
        return Err(Error::ScheduleStep { step, total });
    }
    if step >= total {
        return Err(Error::ScheduleStep { step, total });
    }
    let warmup = ((total as f64) * warmup_ratio).floor() as u64;
    if step < warmup {
        // ramp 1/warmup .. warmup/warmup so the first step is not a zero no-op
        return Ok(base_lr * (step + 1) as f64 / warmup as f64);
    }
    let span = (total - warmup).max(1) as f64;
    let progress = (step - warmup) as f64 / span;
    Ok(base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}
