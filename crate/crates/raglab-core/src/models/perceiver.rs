//! Latent compressor. A fixed set of learned latents cross-attends once over
//! the projected visual features concatenated with caption token embeddings,
//! then refines through a stack of latent self-attention blocks. Whatever the
//! input length, the output is always `[num_latents, d_latents]` - this fixed
//! bottleneck is what makes stored values cheap.

use super::{bind_fields, block_forward, init_weight, init_zeros, multi_head_attention};
use super::{visit_fields, visit_fields_mut, Block, BlockVars, ParamReg, WEIGHT_STD};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerceiverConfig {
    pub num_latents: usize,
    pub d_latents: usize,
    pub d_model: usize,
    pub num_blocks: usize,
    pub num_self_attends_per_block: usize,
    pub cross_heads: usize,
    pub self_heads: usize,
    pub qk_channels: usize,
    pub v_channels: usize,
    pub max_positions: usize,
    pub vocab: usize,
    pub d_v: usize,
}

impl PerceiverConfig {
    pub fn standard(vocab: usize, d_v: usize) -> Self {
        PerceiverConfig {
            num_latents: 32,
            d_latents: 96,
            d_model: 128,
            num_blocks: 1,
            num_self_attends_per_block: 8,
            cross_heads: 8,
            self_heads: 8,
            qk_channels: 96,
            v_channels: 96,
            max_positions: 256,
            vocab,
            d_v,
        }
    }

    /// Rows x columns of every compressed value.
    pub fn value_shape(&self) -> (usize, usize) {
        (self.num_latents, self.d_latents)
    }
}

/// Cross-attention block: latents query the input sequence, with its own
/// pre-norms on both sides and a GELU MLP on the latent side.
#[derive(Debug, Clone)]
struct CrossBlock {
    ln_q_g: Tensor,
    ln_q_b: Tensor,
    ln_kv_g: Tensor,
    ln_kv_b: Tensor,
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
    wo: Tensor,
    bo: Tensor,
    ln2g: Tensor,
    ln2b: Tensor,
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
}

struct CrossVars {
    ln_q_g: Var,
    ln_q_b: Var,
    ln_kv_g: Var,
    ln_kv_b: Var,
    wq: Var,
    wk: Var,
    wv: Var,
    wo: Var,
    bo: Var,
    ln2g: Var,
    ln2b: Var,
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
}

impl CrossBlock {
    fn new(cfg: &PerceiverConfig, rng: &mut impl Rng) -> Self {
        let dl = cfg.d_latents;
        CrossBlock {
            ln_q_g: super::init_ones(dl),
            ln_q_b: init_zeros(dl),
            ln_kv_g: super::init_ones(cfg.d_model),
            ln_kv_b: init_zeros(cfg.d_model),
            wq: init_weight(rng, dl, cfg.qk_channels, super::signal_std(dl)),
            wk: init_weight(rng, cfg.d_model, cfg.qk_channels, super::signal_std(cfg.d_model)),
            wv: init_weight(rng, cfg.d_model, cfg.v_channels, super::signal_std(cfg.d_model)),
            wo: init_weight(rng, cfg.v_channels, dl, WEIGHT_STD),
            bo: init_zeros(dl),
            ln2g: super::init_ones(dl),
            ln2b: init_zeros(dl),
            w1: init_weight(rng, dl, dl, super::signal_std(dl)),
            b1: init_zeros(dl),
            w2: init_weight(rng, dl, dl, WEIGHT_STD),
            b2: init_zeros(dl),
        }
    }

    fn bind(&self, tape: &mut Tape, trainable: bool, prefix: &str, reg: &mut ParamReg) -> CrossVars {
        bind_fields!(self, tape, trainable, prefix, reg, CrossVars,
            [ln_q_g, ln_q_b, ln_kv_g, ln_kv_b, wq, wk, wv, wo, bo, ln2g, ln2b, w1, b1, w2, b2])
    }

    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        visit_fields!(self, prefix, f,
            [ln_q_g, ln_q_b, ln_kv_g, ln_kv_b, wq, wk, wv, wo, bo, ln2g, ln2b, w1, b1, w2, b2]);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        visit_fields_mut!(self, prefix, f,
            [ln_q_g, ln_q_b, ln_kv_g, ln_kv_b, wq, wk, wv, wo, bo, ln2g, ln2b, w1, b1, w2, b2]);
    }
}

#[derive(Debug, Clone)]
pub struct PerceiverCompressor {
    pub cfg: PerceiverConfig,
    latents: Tensor,
    img_w: Tensor,
    img_b: Tensor,
    cap_table: Tensor,
    pos: Tensor,
    cross: CrossBlock,
    selfs: Vec<Block>,
    lnf_g: Tensor,
    lnf_b: Tensor,
}

pub struct PerceiverVars {
    pub latents: Var,
    pub img_w: Var,
    pub img_b: Var,
    pub cap_table: Var,
    pub pos: Var,
    cross: CrossVars,
    selfs: Vec<BlockVars>,
    pub lnf_g: Var,
    pub lnf_b: Var,
}

impl PerceiverCompressor {
    pub fn new(cfg: &PerceiverConfig, rng: &mut impl Rng) -> Self {
        assert!(cfg.qk_channels % cfg.cross_heads == 0);
        assert!(cfg.v_channels % cfg.cross_heads == 0);
        assert!(cfg.d_latents % cfg.self_heads == 0);
        let n_self = cfg.num_blocks * cfg.num_self_attends_per_block;
        PerceiverCompressor {
            cfg: cfg.clone(),
            latents: init_weight(rng, cfg.num_latents, cfg.d_latents, WEIGHT_STD),
            img_w: init_weight(rng, cfg.d_v, cfg.d_model, super::signal_std(cfg.d_v)),
            img_b: init_zeros(cfg.d_model),
            cap_table: init_weight(rng, cfg.vocab, cfg.d_model, WEIGHT_STD),
            pos: init_weight(rng, cfg.max_positions, cfg.d_model, WEIGHT_STD),
            cross: CrossBlock::new(cfg, rng),
            selfs: (0..n_self).map(|_| Block::new(rng, cfg.d_latents, 1)).collect(),
            lnf_g: super::init_ones(cfg.d_latents),
            lnf_b: init_zeros(cfg.d_latents),
        }
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool, reg: &mut ParamReg) -> PerceiverVars {
        let prefix = "perceiver";
        let cross = self.cross.bind(tape, trainable, &format!("{prefix}/cross"), reg);
        let selfs = self
            .selfs
            .iter()
            .enumerate()
            .map(|(i, b)| b.bind(tape, trainable, &format!("{prefix}/self{i}"), reg))
            .collect();
        let head = bind_fields!(self, tape, trainable, prefix, reg, PerceiverHeadVars,
            [latents, img_w, img_b, cap_table, pos, lnf_g, lnf_b]);
        PerceiverVars {
            latents: head.latents,
            img_w: head.img_w,
            img_b: head.img_b,
            cap_table: head.cap_table,
            pos: head.pos,
            cross,
            selfs,
            lnf_g: head.lnf_g,
            lnf_b: head.lnf_b,
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.cross.visit(&format!("{prefix}/cross"), f);
        for (i, b) in self.selfs.iter().enumerate() {
            b.visit(&format!("{prefix}/self{i}"), f);
        }
        visit_fields!(self, prefix, f, [latents, img_w, img_b, cap_table, pos, lnf_g, lnf_b]);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.cross.visit_mut(&format!("{prefix}/cross"), f);
        for (i, b) in self.selfs.iter_mut().enumerate() {
            b.visit_mut(&format!("{prefix}/self{i}"), f);
        }
        visit_fields_mut!(self, prefix, f, [latents, img_w, img_b, cap_table, pos, lnf_g, lnf_b]);
    }
}

struct PerceiverHeadVars {
    latents: Var,
    img_w: Var,
    img_b: Var,
    cap_table: Var,
    pos: Var,
    lnf_g: Var,
    lnf_b: Var,
}

/// Compress one (visual features, caption) pair into `[num_latents,
/// d_latents]`. `image_feats` may be `None` for a caption-only entry; at
/// least one side must be present.
pub fn perceiver_compress(
    tape: &mut Tape,
    cfg: &PerceiverConfig,
    vars: &PerceiverVars,
    image_feats: Option<Var>,
    caption: &[u32],
) -> Result<Var> {
    if image_feats.is_none() && caption.is_empty() {
        return Err(Error::Empty("compressor input: no image features and no caption".into()));
    }

    let mut parts = Vec::new();
    if let Some(img) = image_feats {
        let got = tape.value(img).shape[1];
        if got != cfg.d_v {
            return Err(Error::Shape(format!(
                "image features have width {got}, expected {}",
                cfg.d_v
            )));
        }
        let proj = tape.matmul(img, vars.img_w)?;
        parts.push(tape.add_row(proj, vars.img_b)?);
    }
    if !caption.is_empty() {
        parts.push(tape.embedding_lookup(vars.cap_table, caption)?);
    }
    let inputs = if parts.len() == 1 { parts[0] } else { tape.concat(&parts, 0)? };

    let t = tape.value(inputs).shape[0];
    if t > cfg.max_positions {
        return Err(Error::SequenceTooLong { len: t, max: cfg.max_positions });
    }
    let pos_ids: Vec<u32> = (0..t as u32).collect();
    let pos = tape.embedding_lookup(vars.pos, &pos_ids)?;
    let inputs = tape.add(inputs, pos)?;

    // one cross-attention read of the inputs
    let c = &vars.cross;
    let q_n = tape.layer_norm(vars.latents, c.ln_q_g, c.ln_q_b)?;
    let kv_n = tape.layer_norm(inputs, c.ln_kv_g, c.ln_kv_b)?;
    let read = multi_head_attention(
        tape, q_n, kv_n, c.wq, c.wk, c.wv, c.wo, c.bo, cfg.cross_heads, false,
    )?;
    let x = tape.add(vars.latents, read)?;
    let n = tape.layer_norm(x, c.ln2g, c.ln2b)?;
    let h = tape.matmul(n, c.w1)?;
    let h = tape.add_row(h, c.b1)?;
    let h = tape.gelu(h)?;
    let h = tape.matmul(h, c.w2)?;
    let h = tape.add_row(h, c.b2)?;
    let mut x = tape.add(x, h)?;

    for b in &vars.selfs {
        x = block_forward(tape, b, x, cfg.self_heads, false)?;
    }
    tape.layer_norm(x, vars.lnf_g, vars.lnf_b)
}
