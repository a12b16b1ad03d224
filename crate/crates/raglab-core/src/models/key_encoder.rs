//! Retrieval key encoder. Projects visual features and caption tokens into a
//! shared width-d space and carries the attention weights used to aggregate
//! them into a single unit-norm key. Keys are never differentiated through,
//! so everything here is plain f64 arithmetic off the tape. Frozen in every
//! stage; its fingerprint is stamped into each bank for provenance.

use super::{init_weight, init_zeros, visit_fields, visit_fields_mut, WEIGHT_STD};
use crate::error::{Error, Result};
use crate::tensor::{matmul_nn, Tensor};
use rand::Rng;

#[derive(Debug, Clone)]
pub struct KeyEncoder {
    pub d_v: usize,
    pub d: usize,
    pub vocab: usize,
    vis_w: Tensor,
    vis_b: Tensor,
    text_table: Tensor,
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
}

impl KeyEncoder {
    pub fn new(d_v: usize, vocab: usize, d: usize, rng: &mut impl Rng) -> Self {
        KeyEncoder {
            d_v,
            d,
            vocab,
            vis_w: init_weight(rng, d_v, d, WEIGHT_STD),
            vis_b: init_zeros(d),
            text_table: init_weight(rng, vocab, d, WEIGHT_STD),
            wq: init_weight(rng, d, d, WEIGHT_STD),
            wk: init_weight(rng, d, d, WEIGHT_STD),
            wv: init_weight(rng, d, d, WEIGHT_STD),
        }
    }

    /// Project `[rows, d_v]` visual features to `[rows, d]`.
    pub fn project_visual(&self, feats: &[f64], rows: usize) -> Result<Vec<f64>> {
        if feats.len() != rows * self.d_v {
            return Err(Error::Shape(format!(
                "visual features: {} values for {} rows of width {}",
                feats.len(),
                rows,
                self.d_v
            )));
        }
        let mut out = vec![0.0; rows * self.d];
        matmul_nn(feats, &self.vis_w.data, rows, self.d_v, self.d, &mut out);
        for r in 0..rows {
            for c in 0..self.d {
                out[r * self.d + c] += self.vis_b.data[c];
            }
        }
        Ok(out)
    }

    /// Embed caption tokens to `[len, d]`.
    pub fn embed_text(&self, ids: &[u32]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(ids.len() * self.d);
        for &id in ids {
            let i = id as usize;
            if i >= self.vocab {
                return Err(Error::OutOfVocab { id, vocab: self.vocab });
            }
            out.extend_from_slice(&self.text_table.data[i * self.d..(i + 1) * self.d]);
        }
        Ok(out)
    }

    pub fn wq(&self) -> &[f64] {
        &self.wq.data
    }

    pub fn wk(&self) -> &[f64] {
        &self.wk.data
    }

    pub fn wv(&self) -> &[f64] {
        &self.wv.data
    }

    pub fn fingerprint(&self) -> u64 {
        let mut items: Vec<(String, Vec<usize>, Vec<f64>)> = Vec::new();
        self.visit("key_encoder", &mut |name, t| {
            items.push((name, t.shape.clone(), t.data.clone()));
        });
        crate::hash::fingerprint_params(
            items.iter().map(|(n, s, d)| (n.as_str(), s.as_slice(), d.as_slice())),
        )
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        visit_fields!(self, prefix, f, [vis_w, vis_b, text_table, wq, wk, wv]);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        visit_fields_mut!(self, prefix, f, [vis_w, vis_b, text_table, wq, wk, wv]);
    }
}
