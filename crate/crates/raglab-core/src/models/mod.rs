//! Toy-scale neural components: a frozen patch encoder, a frozen-or-tunable
//! causal decoder in two capacity tiers, two GELU MLP connectors, a latent
//! compressor, and the retrieval key encoder. Parameters live in plain
//! tensors on each module; a forward pass binds them onto a tape (marking the
//! trainable ones) and builds the graph with the shared ops below.

use crate::error::Result;
use crate::rngs::normal;
use crate::tensor::{Tape, Tensor, Var};
use rand::Rng;

pub mod connector;
pub mod key_encoder;
pub mod llm;
pub mod perceiver;
pub mod vit;

pub use connector::{connector_forward, Connector, ConnectorVars};
pub use key_encoder::KeyEncoder;
pub use llm::{llm_embed, llm_forward, LLMConfig, LLMVars, Tier, ToyLLM};
pub use perceiver::{perceiver_compress, PerceiverCompressor, PerceiverConfig, PerceiverVars};
pub use vit::{vit_forward, ToyViT, ViTConfig, ViTVars};

/// Registry of bound parameters: (qualified name, tape var), pushed in
/// binding order. Gradients are read back from the tape through this list.
pub type ParamReg = Vec<(String, Var)>;

// ─── initialization ──────────────────────────────────────────────────────────

pub(crate) fn init_weight(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| normal(rng) * std).collect();
    Tensor::new(vec![rows, cols], data).unwrap()
}

pub(crate) fn init_zeros(n: usize) -> Tensor {
    Tensor::new(vec![n], vec![0.0; n]).unwrap()
}

pub(crate) fn init_ones(n: usize) -> Tensor {
    Tensor::new(vec![n], vec![1.0; n]).unwrap()
}

/// Output-side scale: output projections, embedding tables, and the readout
/// head start small so every block begins near the identity and an untrained
/// model's logits sit near-uniform.
pub(crate) const WEIGHT_STD: f64 = 0.02;

/// Signal-side scale for query/key/value projections and first MLP layers:
/// sigma = 1/sqrt(fan_in) keeps projected components near unit variance, so a
/// frozen block's attention logits span an O(1) range (it can focus, and the
/// trainable inputs feeding it can steer that focus) and its GELU sits in the
/// nonlinear region. With sigma = WEIGHT_STD instead, score spread collapses
/// to ~sigma^2*d and frozen attention is pinned near uniform no matter what
/// the trained modules feed it.
pub(crate) fn signal_std(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}

// ─── field plumbing ──────────────────────────────────────────────────────────

/// Enumerate module fields as (qualified name, &Tensor).
macro_rules! visit_fields {
    ($self:ident, $prefix:expr, $f:ident, [$($name:ident),+ $(,)?]) => {
        $( $f(format!("{}/{}", $prefix, stringify!($name)), &$self.$name); )+
    };
}

/// Enumerate module fields as (qualified name, &mut Tensor).
macro_rules! visit_fields_mut {
    ($self:ident, $prefix:expr, $f:ident, [$($name:ident),+ $(,)?]) => {
        $( $f(format!("{}/{}", $prefix, stringify!($name)), &mut $self.$name); )+
    };
}

/// Put module fields on a tape and record them in the registry.
macro_rules! bind_fields {
    ($self:ident, $tape:ident, $trainable:ident, $prefix:expr, $reg:ident, $Out:ident, [$($name:ident),+ $(,)?]) => {
        $Out {
            $( $name: {
                let v = $tape.leaf($self.$name.clone().with_grad($trainable));
                $reg.push((format!("{}/{}", $prefix, stringify!($name)), v));
                v
            } ),+
        }
    };
}

pub(crate) use bind_fields;
pub(crate) use visit_fields;
pub(crate) use visit_fields_mut;

// ─── shared transformer block ────────────────────────────────────────────────

/// Pre-norm transformer block: LN → multi-head self-attention → residual,
/// LN → GELU MLP → residual.
#[derive(Debug, Clone)]
pub struct Block {
    pub ln1g: Tensor,
    pub ln1b: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln2g: Tensor,
    pub ln2b: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct BlockVars {
    pub ln1g: Var,
    pub ln1b: Var,
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub bo: Var,
    pub ln2g: Var,
    pub ln2b: Var,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl Block {
    pub(crate) fn new(rng: &mut impl Rng, d: usize, widening: usize) -> Self {
        let hid = d * widening;
        Block {
            ln1g: init_ones(d),
            ln1b: init_zeros(d),
            wq: init_weight(rng, d, d, signal_std(d)),
            wk: init_weight(rng, d, d, signal_std(d)),
            wv: init_weight(rng, d, d, signal_std(d)),
            wo: init_weight(rng, d, d, WEIGHT_STD),
            bo: init_zeros(d),
            ln2g: init_ones(d),
            ln2b: init_zeros(d),
            w1: init_weight(rng, d, hid, signal_std(d)),
            b1: init_zeros(hid),
            w2: init_weight(rng, hid, d, WEIGHT_STD),
            b2: init_zeros(d),
        }
    }

    pub(crate) fn bind(&self, tape: &mut Tape, trainable: bool, prefix: &str, reg: &mut ParamReg) -> BlockVars {
        bind_fields!(self, tape, trainable, prefix, reg, BlockVars,
            [ln1g, ln1b, wq, wk, wv, wo, bo, ln2g, ln2b, w1, b1, w2, b2])
    }

    pub(crate) fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        visit_fields!(self, prefix, f, [ln1g, ln1b, wq, wk, wv, wo, bo, ln2g, ln2b, w1, b1, w2, b2]);
    }

    pub(crate) fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        visit_fields_mut!(self, prefix, f, [ln1g, ln1b, wq, wk, wv, wo, bo, ln2g, ln2b, w1, b1, w2, b2]);
    }
}

/// Multi-head scaled-dot attention. Queries come from `q_src`, keys and
/// values from `kv_src`; `causal` adds a strictly-upper-triangular mask and
/// requires q_src and kv_src to have equal length.
#[allow(clippy::too_many_arguments)]
pub(crate) fn multi_head_attention(
    tape: &mut Tape,
    q_src: Var,
    kv_src: Var,
    wq: Var,
    wk: Var,
    wv: Var,
    wo: Var,
    bo: Var,
    heads: usize,
    causal: bool,
) -> Result<Var> {
    let q = tape.matmul(q_src, wq)?;
    let k = tape.matmul(kv_src, wk)?;
    let v = tape.matmul(kv_src, wv)?;
    let (t, qk_width) = (tape.value(q).shape[0], tape.value(q).shape[1]);
    let s = tape.value(k).shape[0];
    let v_width = tape.value(v).shape[1];
    let (dh_qk, dh_v) = (qk_width / heads, v_width / heads);

    let mask = if causal {
        debug_assert_eq!(t, s);
        let mut m = vec![0.0; t * s];
        for i in 0..t {
            for j in (i + 1)..s {
                m[i * s + j] = -1e9;
            }
        }
        Some(tape.constant(vec![t, s], m)?)
    } else {
        None
    };

    let mut ctx = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dh_qk, (h + 1) * dh_qk)?;
        let kh = tape.slice_cols(k, h * dh_qk, (h + 1) * dh_qk)?;
        let vh = tape.slice_cols(v, h * dh_v, (h + 1) * dh_v)?;
        let kt = tape.transpose(kh)?;
        let mut scores = tape.matmul(qh, kt)?;
        scores = tape.scale(scores, 1.0 / (dh_qk as f64).sqrt())?;
        if let Some(m) = mask {
            scores = tape.add(scores, m)?;
        }
        let attn = tape.softmax(scores, 1)?;
        ctx.push(tape.matmul(attn, vh)?);
    }
    let joined = tape.concat(&ctx, 1)?;
    let out = tape.matmul(joined, wo)?;
    tape.add_row(out, bo)
}

pub(crate) fn block_forward(tape: &mut Tape, b: &BlockVars, x: Var, heads: usize, causal: bool) -> Result<Var> {
    let n = tape.layer_norm(x, b.ln1g, b.ln1b)?;
    let a = multi_head_attention(tape, n, n, b.wq, b.wk, b.wv, b.wo, b.bo, heads, causal)?;
    let x = tape.add(x, a)?;
    let n = tape.layer_norm(x, b.ln2g, b.ln2b)?;
    let h = tape.matmul(n, b.w1)?;
    let h = tape.add_row(h, b.b1)?;
    let h = tape.gelu(h)?;
    let h = tape.matmul(h, b.w2)?;
    let h = tape.add_row(h, b.b2)?;
    tape.add(x, h)
}

// ─── the full model family ───────────────────────────────────────────────────

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleConfig {
    pub vocab: usize,
    pub patch_count: usize,
    pub patch_dim: usize,
    pub d_v: usize,
    pub vit_layers: usize,
    pub vit_heads: usize,
    pub tier: Tier,
    pub max_seq: usize,
    pub d_key: usize,
    pub perceiver: PerceiverConfig,
}

impl BundleConfig {
    pub fn standard(vocab: usize, patch_count: usize, patch_dim: usize, tier: Tier) -> Self {
        let d_v = 128;
        BundleConfig {
            vocab,
            patch_count,
            patch_dim,
            d_v,
            vit_layers: 2,
            vit_heads: 2,
            tier,
            max_seq: 384,
            d_key: 64,
            perceiver: PerceiverConfig::standard(vocab, d_v),
        }
    }

    pub fn d_llm(&self) -> usize {
        self.tier.d_llm()
    }
}

/// Every parameterized component of one experiment, created together from one
/// seed so paired runs differ only where intended.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub cfg: BundleConfig,
    pub vit: ToyViT,
    pub llm: ToyLLM,
    pub connector: Connector,
    pub rag_connector: Connector,
    pub perceiver: PerceiverCompressor,
    pub key_encoder: KeyEncoder,
}

impl ModelBundle {
    pub fn new(cfg: &BundleConfig, seed: u64) -> Self {
        use crate::rngs::stream;
        let d_llm = cfg.d_llm();
        ModelBundle {
            cfg: cfg.clone(),
            vit: ToyViT::new(
                &ViTConfig {
                    patch_count: cfg.patch_count,
                    patch_dim: cfg.patch_dim,
                    d_v: cfg.d_v,
                    layers: cfg.vit_layers,
                    heads: cfg.vit_heads,
                },
                &mut stream(seed, "init/vit"),
            ),
            llm: ToyLLM::new(
                &LLMConfig { vocab: cfg.vocab, tier: cfg.tier, max_seq: cfg.max_seq },
                &mut stream(seed, "init/llm"),
            ),
            connector: Connector::new(cfg.d_v, 2 * d_llm, d_llm, &mut stream(seed, "init/connector")),
            rag_connector: Connector::new(
                cfg.perceiver.d_latents,
                2 * d_llm,
                d_llm,
                &mut stream(seed, "init/rag_connector"),
            ),
            perceiver: PerceiverCompressor::new(&cfg.perceiver, &mut stream(seed, "init/perceiver")),
            key_encoder: KeyEncoder::new(cfg.d_v, cfg.vocab, cfg.d_key, &mut stream(seed, "init/key_encoder")),
        }
    }

    /// Enumerate every parameter as (qualified name, tensor), stable order.
    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.vit.visit("vit", f);
        self.llm.visit("llm", f);
        self.connector.visit("connector", f);
        self.rag_connector.visit("rag_connector", f);
        self.perceiver.visit("perceiver", f);
        self.key_encoder.visit("key_encoder", f);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.vit.visit_mut("vit", f);
        self.llm.visit_mut("llm", f);
        self.connector.visit_mut("connector", f);
        self.rag_connector.visit_mut("rag_connector", f);
        self.perceiver.visit_mut("perceiver", f);
        self.key_encoder.visit_mut("key_encoder", f);
    }

    /// FNV fingerprint of one component's parameters ("vit", "perceiver", …).
    pub fn fingerprint(&self, component: &str) -> u64 {
        let want = format!("{component}/");
        let mut items: Vec<(String, Vec<usize>, Vec<f64>)> = Vec::new();
        self.visit(&mut |name, t| {
            if name.starts_with(&want) {
                items.push((name, t.shape.clone(), t.data.clone()));
            }
        });
        crate::hash::fingerprint_params(
            items.iter().map(|(n, s, d)| (n.as_str(), s.as_slice(), d.as_slice())),
        )
    }
}
