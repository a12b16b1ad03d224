//! Forward-pass assembly. The decoder always reads a composite row matrix:
//! connector-mapped visual features, then (when retrieval is on) the
//! retrieval connector's view of the top-k compressed values in rank order,
//! then the embedded instruction. Loss is supervised only at the answer
//! position. With k = 0 the retrieval path contributes nothing and the graph
//! is the baseline graph.

use super::StageConfig;
use crate::datagen::{Atlas, Sample};
use crate::error::{Error, Result};
use crate::membank::{retrieve, sample_key, MemoryBank, VALUE_COLS, VALUE_ROWS};
use crate::models::{
    connector_forward, llm_embed, llm_forward, perceiver_compress, ConnectorVars, LLMVars,
    ModelBundle, ParamReg, PerceiverVars, ViTVars,
};
use crate::tensor::{Tape, Var};
use std::collections::HashMap;

/// Per-scene visual features, computed once with the frozen patch encoder
/// and re-entered on training tapes as constants.
#[derive(Default)]
pub struct SceneFeats {
    cache: HashMap<u32, Vec<f64>>,
}

impl SceneFeats {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&mut self, bundle: &ModelBundle, atlas: &Atlas, sample: &Sample) -> Result<Vec<f64>> {
        if let Some(f) = self.cache.get(&sample.scene_id) {
            return Ok(f.clone());
        }
        let f = crate::membank::encode_image(bundle, atlas, sample)?;
        self.cache.insert(sample.scene_id, f.clone());
        Ok(f)
    }
}

/// One tape's bound parameters for a stage. Retrieval modules are bound only
/// when the stage uses them, so an optimizer driven by the registry can never
/// touch parameters that took no part in the graph.
pub struct BoundModels {
    pub vit: ViTVars,
    pub llm: LLMVars,
    pub conn: ConnectorVars,
    pub ragc: Option<ConnectorVars>,
    pub perc: Option<PerceiverVars>,
    pub reg: ParamReg,
}

impl BoundModels {
    /// Bind per the stage's freeze/train policy.
    pub fn for_stage(bundle: &ModelBundle, tape: &mut Tape, cfg: &StageConfig) -> Self {
        let t = |c: &str| cfg.trainable().contains(&c);
        Self::bind(bundle, tape, t("vit"), t("llm"), t("connector"), t("rag_connector"), t("perceiver"), cfg.rag_enabled)
    }

    /// Bind everything frozen (evaluation, probing).
    pub fn frozen(bundle: &ModelBundle, tape: &mut Tape, rag: bool) -> Self {
        Self::bind(bundle, tape, false, false, false, false, false, rag)
    }

    fn bind(
        bundle: &ModelBundle,
        tape: &mut Tape,
        vit_t: bool,
        llm_t: bool,
        conn_t: bool,
        ragc_t: bool,
        perc_t: bool,
        rag: bool,
    ) -> Self {
        let mut reg = ParamReg::new();
        let vit = bundle.vit.bind(tape, vit_t, &mut reg);
        let llm = bundle.llm.bind(tape, llm_t, &mut reg);
        let conn = bundle.connector.bind(tape, conn_t, "connector", &mut reg);
        let (ragc, perc) = if rag {
            (
                Some(bundle.rag_connector.bind(tape, ragc_t, "rag_connector", &mut reg)),
                Some(bundle.perceiver.bind(tape, perc_t, &mut reg)),
            )
        } else {
            (None, None)
        };
        BoundModels { vit, llm, conn, ragc, perc, reg }
    }
}

/// How retrieved values enter the graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ValueMode {
    /// Recompute each retrieved pair through the bound compressor, so its
    /// parameters receive gradients. Requires the bank's source samples.
    Live,
    /// Read the f32 values stored in the bank, as constants.
    Stored,
}

/// Retrieval context for one forward pass.
pub struct Retrieval<'a> {
    pub bank: &'a MemoryBank,
    /// Source samples the bank was built from, indexed by entry id.
    /// Required in `Live` mode.
    pub bank_samples: Option<&'a [Sample]>,
    pub k: usize,
    pub mode: ValueMode,
    /// Bank id to drop from results (self-exclusion during pretraining).
    pub exclude: Option<u64>,
    /// Skip provenance fingerprint checks (mismatch ablation only).
    pub allow_mismatch: bool,
}

pub struct SampleForward {
    pub logits: Var,
    pub loss: Var,
    pub retrieved: Vec<u64>,
}

/// Verify the bank belongs with this bundle: the key space must match
/// always; the stored value space matters only when stored values are used.
pub fn check_provenance(bundle: &ModelBundle, bank: &MemoryBank, mode: ValueMode) -> Result<()> {
    let key_fp = bundle.key_encoder.fingerprint();
    if bank.provenance.key_encoder != key_fp {
        return Err(Error::ProvenanceMismatch(format!(
            "bank keys were built by encoder {:016x}, this bundle's is {:016x}",
            bank.provenance.key_encoder, key_fp
        )));
    }
    if mode == ValueMode::Stored {
        let perc_fp = bundle.fingerprint("perceiver");
        if bank.provenance.perceiver != perc_fp {
            return Err(Error::ProvenanceMismatch(format!(
                "bank values were compressed by {:016x}, this bundle's compressor is {:016x}; rebuild the bank",
                bank.provenance.perceiver, perc_fp
            )));
        }
    }
    Ok(())
}

/// Assemble the composite sequence and the answer-masked loss given the
/// (possibly absent) retrieval rows.
fn assemble(
    tape: &mut Tape,
    bundle: &ModelBundle,
    bm: &BoundModels,
    feats: &[f64],
    h_r: Option<Var>,
    sample: &Sample,
) -> Result<(Var, Var)> {
    let rows = feats.len() / bundle.cfg.d_v;
    let x = tape.constant(vec![rows, bundle.cfg.d_v], feats.to_vec())?;
    let h_v = connector_forward(tape, &bundle.connector, &bm.conn, x)?;
    let h_i = llm_embed(tape, &bm.llm, &sample.instruction)?;
    let h_in = match h_r {
        Some(r) => tape.concat(&[h_v, r, h_i], 0)?,
        None => tape.concat(&[h_v, h_i], 0)?,
    };
    let logits = llm_forward(tape, &bundle.llm.cfg, &bm.llm, h_in)?;

    let t = tape.value(logits).shape[0];
    let mut targets = vec![0u32; t];
    let mut mask = vec![false; t];
    targets[t - 1] = sample.answer;
    mask[t - 1] = true;
    let loss = tape.cross_entropy(logits, &targets, &mask)?;
    Ok((logits, loss))
}

/// Retrieval rows for one query: top-k values in rank order, mapped by the
/// retrieval connector into decoder space. Returns `None` when nothing was
/// retrieved (k = 0 or an empty bank). `value_cache` deduplicates live
/// recompressions of the same entry within one tape.
#[allow(clippy::too_many_arguments)]
fn retrieval_rows(
    tape: &mut Tape,
    bundle: &ModelBundle,
    bm: &BoundModels,
    feats: &[f64],
    sample: &Sample,
    r: &Retrieval,
    scene_feats: &mut SceneFeats,
    value_cache: &mut HashMap<u64, Var>,
    atlas: &Atlas,
) -> Result<(Option<Var>, Vec<u64>)> {
    if r.k == 0 || r.bank.is_empty() {
        return Ok((None, Vec::new()));
    }
    let key = sample_key(bundle, feats, &sample.instruction)?;
    let hits = retrieve(r.bank, &key, r.k, r.exclude)?;
    if hits.hits.is_empty() {
        return Ok((None, Vec::new()));
    }
    let ids: Vec<u64> = hits.hits.iter().map(|h| h.id).collect();

    let value_vars: Vec<Var> = match r.mode {
        ValueMode::Stored => {
            let mut rows = Vec::with_capacity(ids.len() * VALUE_ROWS * VALUE_COLS);
            for &id in &ids {
                let e = r.bank.entry(id).ok_or_else(|| {
                    Error::Format(format!("retrieved id {id} missing from bank"))
                })?;
                rows.extend(e.value.iter().map(|&x| x as f64));
            }
            vec![tape.constant(vec![ids.len() * VALUE_ROWS, VALUE_COLS], rows)?]
        }
        ValueMode::Live => {
            let samples = r.bank_samples.ok_or_else(|| {
                Error::Config("live retrieval needs the bank's source samples".into())
            })?;
            let perc = bm.perc.as_ref().ok_or_else(|| {
                Error::Config("live retrieval needs the compressor bound on this tape".into())
            })?;
            let mut vars = Vec::with_capacity(ids.len());
            for &id in &ids {
                if let Some(&v) = value_cache.get(&id) {
                    vars.push(v);
                    continue;
                }
                let src = samples.get(id as usize).ok_or_else(|| {
                    Error::Format(format!("bank id {id} out of range of source samples"))
                })?;
                let src_feats = scene_feats.get(bundle, atlas, src)?;
                let rows = src_feats.len() / bundle.cfg.d_v;
                let img = tape.constant(vec![rows, bundle.cfg.d_v], src_feats)?;
                let z = perceiver_compress(
                    tape,
                    &bundle.cfg.perceiver,
                    perc,
                    Some(img),
                    &src.caption,
                )?;
                value_cache.insert(id, z);
                vars.push(z);
            }
            vars
        }
    };
    let stacked = if value_vars.len() == 1 { value_vars[0] } else { tape.concat(&value_vars, 0)? };
    let ragc = bm.ragc.as_ref().ok_or_else(|| {
        Error::Config("retrieval rows need the retrieval connector bound on this tape".into())
    })?;
    let h_r = connector_forward(tape, &bundle.rag_connector, ragc, stacked)?;
    Ok((Some(h_r), ids))
}

/// Composite forward with retrieval disabled: `[H_V, H_I]`.
pub fn baseline_forward(
    tape: &mut Tape,
    bundle: &ModelBundle,
    bm: &BoundModels,
    atlas: &Atlas,
    scene_feats: &mut SceneFeats,
    sample: &Sample,
) -> Result<SampleForward> {
    let feats = scene_feats.get(bundle, atlas, sample)?;
    let (logits, loss) = assemble(tape, bundle, bm, &feats, None, sample)?;
    Ok(SampleForward { logits, loss, retrieved: Vec::new() })
}

/// Composite forward with retrieval: `[H_V, H_R, H_I]`. Checks bank
/// provenance unless the retrieval context opts out.
pub fn rag_forward(
    tape: &mut Tape,
    bundle: &ModelBundle,
    bm: &BoundModels,
    atlas: &Atlas,
    scene_feats: &mut SceneFeats,
    sample: &Sample,
    r: &Retrieval,
) -> Result<SampleForward> {
    if !r.allow_mismatch {
        check_provenance(bundle, r.bank, r.mode)?;
    }
    let mut cache = HashMap::new();
    rag_forward_cached(tape, bundle, bm, atlas, scene_feats, sample, r, &mut cache)
}

/// Like `rag_forward` but with a caller-owned live-value cache and no
/// per-call provenance check; the training loop verifies provenance once and
/// shares the cache across a batch.
#[allow(clippy::too_many_arguments)]
pub(crate) fn rag_forward_cached(
    tape: &mut Tape,
    bundle: &ModelBundle,
    bm: &BoundModels,
    atlas: &Atlas,
    scene_feats: &mut SceneFeats,
    sample: &Sample,
    r: &Retrieval,
    value_cache: &mut HashMap<u64, Var>,
) -> Result<SampleForward> {
    let feats = scene_feats.get(bundle, atlas, sample)?;
    let (h_r, retrieved) =
        retrieval_rows(tape, bundle, bm, &feats, sample, r, scene_feats, value_cache, atlas)?;
    let (logits, loss) = assemble(tape, bundle, bm, &feats, h_r, sample)?;
    Ok(SampleForward { logits, loss, retrieved })
}

/// Connector-mapped visual rows for one sample, off any training tape.
/// Analysis-side view of what the decoder sees as H_V.
pub fn connector_output_rows(
    bundle: &ModelBundle,
    atlas: &Atlas,
    sample: &Sample,
) -> Result<Vec<Vec<f64>>> {
    let feats = crate::membank::encode_image(bundle, atlas, sample)?;
    let mut tape = Tape::new();
    let bm = BoundModels::frozen(bundle, &mut tape, false);
    let rows = feats.len() / bundle.cfg.d_v;
    let x = tape.constant(vec![rows, bundle.cfg.d_v], feats)?;
    let h_v = connector_forward(&mut tape, &bundle.connector, &bm.conn, x)?;
    let t = tape.value(h_v);
    let d = t.shape[1];
    Ok(t.data.chunks(d).map(|c| c.to_vec()).collect())
}

/// The decoder's token embedding table as plain rows, one per vocab id.
pub fn llm_embed_rows(bundle: &ModelBundle) -> Result<Vec<Vec<f64>>> {
    let mut tape = Tape::new();
    let bm = BoundModels::frozen(bundle, &mut tape, false);
    let ids: Vec<u32> = (0..bundle.cfg.vocab as u32).collect();
    let e = llm_embed(&mut tape, &bm.llm, &ids)?;
    let t = tape.value(e);
    let d = t.shape[1];
    Ok(t.data.chunks(d).map(|c| c.to_vec()).collect())
}
