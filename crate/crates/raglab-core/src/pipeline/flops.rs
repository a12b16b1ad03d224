//! Analytic per-forward FLOP accounting: 2·m·n·k per matmul, summed over
//! exactly the matmuls the forward graphs execute (projections, per-head
//! score and context products, output projections, MLPs, the readout head).
//! Normalizations, lookups, masks, and softmax are not multiply-accumulate
//! work and are not counted, matching the tape's counter.

use super::forward::ValueMode;
use crate::membank::VALUE_ROWS;
use crate::models::BundleConfig;

/// MACs of one pre-norm transformer block on `t` tokens of width `d` with an
/// MLP hidden width `hid`: qkv + output projections, per-head score and
/// context products, two MLP matmuls.
fn block_macs(t: u64, d: u64, hid: u64) -> u64 {
    4 * t * d * d + 2 * t * t * d + 2 * t * d * hid
}

fn connector_macs(rows: u64, d_in: u64, d_hid: u64, d_out: u64) -> u64 {
    rows * d_hid * (d_in + d_out)
}

fn vit_macs(cfg: &BundleConfig) -> u64 {
    let (t, p, d) = (cfg.patch_count as u64, cfg.patch_dim as u64, cfg.d_v as u64);
    let mut m = t * p * d;
    for _ in 0..cfg.vit_layers {
        m += block_macs(t, d, 4 * d);
    }
    m
}

fn llm_macs(cfg: &BundleConfig, t: u64) -> u64 {
    let d = cfg.d_llm() as u64;
    let layers = cfg.tier.layers() as u64;
    layers * block_macs(t, d, 4 * d) + t * d * cfg.vocab as u64
}

fn perceiver_macs(cfg: &BundleConfig, caption_len: u64) -> u64 {
    let p = &cfg.perceiver;
    let (n, dl, dm) = (p.num_latents as u64, p.d_latents as u64, p.d_model as u64);
    let (qk, vch) = (p.qk_channels as u64, p.v_channels as u64);
    let t_in = cfg.patch_count as u64 + caption_len;
    // input projection of the visual rows
    let mut m = cfg.patch_count as u64 * dm * dm;
    // cross-attention: latent queries against the inputs, then the latent MLP
    m += n * dl * qk + t_in * dm * qk + t_in * dm * vch; // q, k, v
    m += n * t_in * qk + n * t_in * vch; // scores + context over all heads
    m += n * vch * dl; // output projection
    m += 2 * n * dl * dl; // MLP (widening 1)
    // self-attention tower
    m += p.num_blocks as u64
        * p.num_self_attends_per_block as u64
        * block_macs(n, dl, dl);
    m
}

/// Per-forward FLOP estimate for one composite pass, split into the
/// always-present path and the retrieval increment. The retrieval increment
/// covers the retrieved rows' traversal of the decoder (attention, MLPs,
/// head) plus the retrieval connector; key encoding and, in stored-value
/// mode, compression happen outside the per-forward graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub struct FlopsEstimate {
    pub vit_flops: u64,
    pub connector_flops: u64,
    pub llm_flops: u64,
    /// Live-mode only: compressing each retrieved pair on the graph.
    pub compression_flops: u64,
    pub baseline_flops: u64,
    pub rag_delta_flops: u64,
    pub total_flops: u64,
}

/// Analytic per-forward FLOPs for the composite pass on `instr_len`
/// instruction tokens, with `k` retrieved pairs when retrieval is enabled.
/// `caption_len` and the value mode matter only for live-mode compression
/// accounting; pass `ValueMode::Stored` for inference-style estimates.
pub fn flops_estimate(
    cfg: &BundleConfig,
    instr_len: usize,
    rag_enabled: bool,
    k: usize,
    mode: ValueMode,
    caption_len: usize,
) -> FlopsEstimate {
    let d = cfg.d_llm() as u64;
    let t0 = (cfg.patch_count + instr_len) as u64;

    let vit = 2 * vit_macs(cfg);
    let conn = 2 * connector_macs(cfg.patch_count as u64, cfg.d_v as u64, 2 * d, d);
    let llm = 2 * llm_macs(cfg, t0);
    let baseline = vit + conn + llm;

    let (delta, compression) = if rag_enabled && k > 0 {
        let r = (VALUE_ROWS * k) as u64;
        let ragc = connector_macs(r, cfg.perceiver.d_latents as u64, 2 * d, d);
        let ext = llm_macs(cfg, t0 + r) - llm_macs(cfg, t0);
        let comp = match mode {
            ValueMode::Live => 2 * k as u64 * perceiver_macs(cfg, caption_len as u64),
            ValueMode::Stored => 0,
        };
        (2 * (ragc + ext), comp)
    } else {
        (0, 0)
    };

    FlopsEstimate {
        vit_flops: vit,
        connector_flops: conn,
        llm_flops: llm,
        compression_flops: compression,
        baseline_flops: baseline,
        rag_delta_flops: delta,
        total_flops: baseline + delta + compression,
    }
}

/// The retrieval increment in closed form. Extending the decoder by
/// r = 32k rows adds, per layer, 12rd² + 4d·t₀·r + 2dr² MACs (projections,
/// cross terms, MLP), plus r·d·V at the head and the retrieval connector's
/// 2rd·(96 + d); collecting powers of k gives a·k + b·k² MACs with
///   a = 32·(layers·(12d² + 4d·t₀) + d·V + 2d·(96 + d)),
///   b = 2048·layers·d,
/// doubled for FLOPs. Equal, term for term, to what `flops_estimate` sums.
pub fn rag_delta_closed_form(cfg: &BundleConfig, instr_len: usize, k: usize) -> u64 {
    let d = cfg.d_llm() as u64;
    let layers = cfg.tier.layers() as u64;
    let t0 = (cfg.patch_count + instr_len) as u64;
    let v = cfg.vocab as u64;
    let dl = cfg.perceiver.d_latents as u64;

    let a = 32 * (layers * (12 * d * d + 4 * d * t0) + d * v + 2 * d * (dl + d));
    let b = 2048 * layers * d;
    let k = k as u64;
    2 * (a * k + b * k * k)
}
