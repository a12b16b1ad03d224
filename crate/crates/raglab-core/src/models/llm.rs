//! Causal decoder over the task vocabulary, in two capacity tiers. The
//! forward pass takes an already-assembled row matrix of input embeddings
//! (visual rows, retrieved rows, instruction rows), adds learned absolute
//! positions, and decodes with a strict causal mask.

use super::{bind_fields, block_forward, init_weight, init_zeros, visit_fields, visit_fields_mut};
use super::{Block, BlockVars, ParamReg, WEIGHT_STD};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Decoder capacity tier. The smaller tier is the better-aligned one at this
/// scale; the larger tier exists to show the ordering, not to win.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    Small,
    Large,
}

impl Tier {
    pub fn d_llm(&self) -> usize {
        match self {
            Tier::Small => 64,
            Tier::Large => 128,
        }
    }

    pub fn layers(&self) -> usize {
        match self {
            Tier::Small => 2,
            Tier::Large => 4,
        }
    }

    pub fn heads(&self) -> usize {
        match self {
            Tier::Small => 2,
            Tier::Large => 4,
        }
    }
}

impl std::str::FromStr for Tier {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "small" => Ok(Tier::Small),
            "large" => Ok(Tier::Large),
            other => Err(Error::Config(format!("unknown tier '{other}', expected small|large"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LLMConfig {
    pub vocab: usize,
    pub tier: Tier,
    pub max_seq: usize,
}

impl LLMConfig {
    pub fn d(&self) -> usize {
        self.tier.d_llm()
    }
}

#[derive(Debug, Clone)]
pub struct ToyLLM {
    pub cfg: LLMConfig,
    embed: Tensor,
    pos: Tensor,
    blocks: Vec<Block>,
    lnf_g: Tensor,
    lnf_b: Tensor,
    head_w: Tensor,
    head_b: Tensor,
}

pub struct LLMVars {
    pub embed: Var,
    pub pos: Var,
    pub blocks: Vec<BlockVars>,
    pub lnf_g: Var,
    pub lnf_b: Var,
    pub head_w: Var,
    pub head_b: Var,
}

impl ToyLLM {
    pub fn new(cfg: &LLMConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.d();
        ToyLLM {
            cfg: cfg.clone(),
            embed: init_weight(rng, cfg.vocab, d, WEIGHT_STD),
            pos: init_weight(rng, cfg.max_seq, d, WEIGHT_STD),
            blocks: (0..cfg.tier.layers()).map(|_| Block::new(rng, d, 4)).collect(),
            lnf_g: super::init_ones(d),
            lnf_b: init_zeros(d),
            head_w: init_weight(rng, d, cfg.vocab, WEIGHT_STD),
            head_b: init_zeros(cfg.vocab),
        }
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool, reg: &mut ParamReg) -> LLMVars {
        let prefix = "llm";
        let blocks = self
            .blocks
            .iter()
            .enumerate()
            .map(|(i, b)| b.bind(tape, trainable, &format!("{prefix}/block{i}"), reg))
            .collect();
        let head = bind_fields!(self, tape, trainable, prefix, reg, LLMHeadVars,
            [embed, pos, lnf_g, lnf_b, head_w, head_b]);
        LLMVars {
            embed: head.embed,
            pos: head.pos,
            blocks,
            lnf_g: head.lnf_g,
            lnf_b: head.lnf_b,
            head_w: head.head_w,
            head_b: head.head_b,
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&format!("{prefix}/block{i}"), f);
        }
        visit_fields!(self, prefix, f, [embed, pos, lnf_g, lnf_b, head_w, head_b]);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("{prefix}/block{i}"), f);
        }
        visit_fields_mut!(self, prefix, f, [embed, pos, lnf_g, lnf_b, head_w, head_b]);
    }
}

struct LLMHeadVars {
    embed: Var,
    pos: Var,
    lnf_g: Var,
    lnf_b: Var,
    head_w: Var,
    head_b: Var,
}

/// Look up token embeddings, `[len, d_llm]`. Gradients flow into the table
/// only when the decoder is bound trainable.
pub fn llm_embed(tape: &mut Tape, vars: &LLMVars, ids: &[u32]) -> Result<Var> {
    if ids.is_empty() {
        return Err(Error::Empty("token sequence".into()));
    }
    tape.embedding_lookup(vars.embed, ids)
}

/// Decode a composite input row matrix `[t, d_llm]` into logits `[t, vocab]`.
pub fn llm_forward(tape: &mut Tape, cfg: &LLMConfig, vars: &LLMVars, h_in: Var) -> Result<Var> {
    let t = tape.value(h_in).shape[0];
    if t == 0 {
        return Err(Error::Empty("decoder input".into()));
    }
    if t > cfg.max_seq {
        return Err(Error::SequenceTooLong { len: t, max: cfg.max_seq });
    }
    let pos_ids: Vec<u32> = (0..t as u32).collect();
    let pos = tape.embedding_lookup(vars.pos, &pos_ids)?;
    let mut x = tape.add(h_in, pos)?;
    for b in &vars.blocks {
        x = block_forward(tape, b, x, cfg.tier.heads(), true)?;
    }
    let x = tape.layer_norm(x, vars.lnf_g, vars.lnf_b)?;
    let logits = tape.matmul(x, vars.head_w)?;
    tape.add_row(logits, vars.head_b)
}
