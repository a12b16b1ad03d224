//! Patch encoder. A rendered scene arrives as a flat pixel buffer, is cut
//! into per-cell patches, linearly embedded, tagged with learned positions,
//! and run through a small pre-norm transformer. Frozen in every stage.

use super::{bind_fields, block_forward, init_weight, init_zeros, visit_fields, visit_fields_mut};
use super::{Block, BlockVars, ParamReg, WEIGHT_STD};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViTConfig {
    pub patch_count: usize,
    pub patch_dim: usize,
    pub d_v: usize,
    pub layers: usize,
    pub heads: usize,
}

#[derive(Debug, Clone)]
pub struct ToyViT {
    pub cfg: ViTConfig,
    patch_w: Tensor,
    patch_b: Tensor,
    pos: Tensor,
    blocks: Vec<Block>,
    lnf_g: Tensor,
    lnf_b: Tensor,
}

pub struct ViTVars {
    pub patch_w: Var,
    pub patch_b: Var,
    pub pos: Var,
    pub blocks: Vec<BlockVars>,
    pub lnf_g: Var,
    pub lnf_b: Var,
}

impl ToyViT {
    pub fn new(cfg: &ViTConfig, rng: &mut impl Rng) -> Self {
        assert!(cfg.d_v % cfg.heads == 0, "d_v must split across heads");
        ToyViT {
            cfg: cfg.clone(),
            patch_w: init_weight(rng, cfg.patch_dim, cfg.d_v, super::signal_std(cfg.patch_dim)),
            patch_b: init_zeros(cfg.d_v),
            pos: init_weight(rng, cfg.patch_count, cfg.d_v, WEIGHT_STD),
            blocks: (0..cfg.layers).map(|_| Block::new(rng, cfg.d_v, 4)).collect(),
            lnf_g: super::init_ones(cfg.d_v),
            lnf_b: init_zeros(cfg.d_v),
        }
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool, reg: &mut ParamReg) -> ViTVars {
        let prefix = "vit";
        let blocks = self
            .blocks
            .iter()
            .enumerate()
            .map(|(i, b)| b.bind(tape, trainable, &format!("{prefix}/block{i}"), reg))
            .collect();
        let head = bind_fields!(self, tape, trainable, prefix, reg, ViTHeadVars,
            [patch_w, patch_b, pos, lnf_g, lnf_b]);
        ViTVars {
            patch_w: head.patch_w,
            patch_b: head.patch_b,
            pos: head.pos,
            blocks,
            lnf_g: head.lnf_g,
            lnf_b: head.lnf_b,
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&format!("{prefix}/block{i}"), f);
        }
        visit_fields!(self, prefix, f, [patch_w, patch_b, pos, lnf_g, lnf_b]);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("{prefix}/block{i}"), f);
        }
        visit_fields_mut!(self, prefix, f, [patch_w, patch_b, pos, lnf_g, lnf_b]);
    }
}

struct ViTHeadVars {
    patch_w: Var,
    patch_b: Var,
    pos: Var,
    lnf_g: Var,
    lnf_b: Var,
}

/// Encode one rendered scene (`patch_count * patch_dim` pixels, row-major by
/// patch) into `[patch_count, d_v]` features.
pub fn vit_forward(tape: &mut Tape, cfg: &ViTConfig, vars: &ViTVars, image: &[f64]) -> Result<Var> {
    let want = cfg.patch_count * cfg.patch_dim;
    if image.len() != want {
        return Err(Error::Shape(format!(
            "image has {} pixels, expected {} ({} patches of {})",
            image.len(),
            want,
            cfg.patch_count,
            cfg.patch_dim
        )));
    }
    let patches = tape.constant(vec![cfg.patch_count, cfg.patch_dim], image.to_vec())?;
    let x = tape.matmul(patches, vars.patch_w)?;
    let x = tape.add_row(x, vars.patch_b)?;
    let mut x = tape.add(x, vars.pos)?;
    for b in &vars.blocks {
        x = block_forward(tape, b, x, cfg.heads, false)?;
    }
    tape.layer_norm(x, vars.lnf_g, vars.lnf_b)
}
