//! The retrieval memory bank: attention-pooled unit keys over each stored
//! pair's visual and caption features, compressed latent values, exact top-k
//! cosine lookup, and a checksummed on-disk format. Banks are immutable once
//! built or loaded; retrieval takes `&self` and is safe to call from many
//! threads.

use crate::container::{read_file, ByteReader, ByteWriter};
use crate::datagen::{Atlas, Sample};
use crate::error::{Error, Result};
use crate::models::{perceiver_compress, vit_forward, KeyEncoder, ModelBundle};
use crate::tensor::{matmul_nn, matmul_nt, Tape};
use std::collections::HashMap;
use std::path::Path;

pub const BANK_MAGIC: &str = "RLBK";
pub const BANK_VERSION: u32 = 1;

/// Every stored value is one compressed latent grid, row-major.
pub const VALUE_ROWS: usize = 32;
pub const VALUE_COLS: usize = 96;
pub const VALUE_LEN: usize = VALUE_ROWS * VALUE_COLS;

/// Keys are computed in f64 and stored f32; the norm drift introduced by
/// rounding is on the order of d_k · f32-epsilon, well under this bound.
pub const KEY_NORM_TOL: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryEntry {
    pub id: u64,
    pub key: Vec<f32>,
    pub value: Vec<f32>,
}

/// What produced a bank: fingerprints of the two encoders whose feature
/// spaces the keys and values live in, plus the dataset seed. Retrieval
/// consumers check these before trusting the stored vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Provenance {
    pub key_encoder: u64,
    pub perceiver: u64,
    pub dataset_seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    pub d_k: usize,
    pub provenance: Provenance,
    pub entries: Vec<MemoryEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub id: u64,
    pub score: f64,
}

/// Ranked retrieval output: scores non-increasing, ties by ascending id.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryResult {
    pub hits: Vec<Hit>,
}

impl MemoryBank {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, id: u64) -> Option<&MemoryEntry> {
        self.entries.iter().find(|e| e.id == id)
    }

    /// Enforce the structural invariants: unique ids, uniform key width,
    /// unit-norm keys (within f32 rounding), fixed value size.
    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::with_capacity(self.entries.len());
        for e in &self.entries {
            if !seen.insert(e.id) {
                return Err(Error::Format(format!("duplicate bank id {}", e.id)));
            }
            if e.key.len() != self.d_k {
                return Err(Error::Shape(format!(
                    "bank key width {} does not match d_k {}",
                    e.key.len(),
                    self.d_k
                )));
            }
            let norm = e.key.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > KEY_NORM_TOL {
                return Err(Error::Format(format!("bank key {} has norm {norm}", e.id)));
            }
            if e.value.len() != VALUE_LEN {
                return Err(Error::Shape(format!(
                    "bank value has {} elements, expected {VALUE_LEN}",
                    e.value.len()
                )));
            }
        }
        Ok(())
    }
}

// ─── key construction ────────────────────────────────────────────────────────

/// Pool already-projected visual and text features (both `[*, d]`, row-major)
/// into one unit-norm key. The token rows are concatenated, self-attended
/// with the encoder's weights, the attention output modulates the input
/// elementwise, and the mean over tokens is L2-normalized.
pub fn make_key(enc: &KeyEncoder, visual_feats: &[f64], text_feats: &[f64]) -> Result<Vec<f64>> {
    let d = enc.d;
    if visual_feats.len() % d != 0 || text_feats.len() % d != 0 {
        return Err(Error::Shape(format!(
            "key inputs must be rows of width {d}: got {} and {} values",
            visual_feats.len(),
            text_feats.len()
        )));
    }
    let t = (visual_feats.len() + text_feats.len()) / d;
    if t == 0 {
        return Err(Error::Empty("key aggregation input (zero tokens)".into()));
    }

    let mut x = Vec::with_capacity(t * d);
    x.extend_from_slice(visual_feats);
    x.extend_from_slice(text_feats);

    let mut q = vec![0.0; t * d];
    let mut k = vec![0.0; t * d];
    let mut v = vec![0.0; t * d];
    matmul_nn(&x, enc.wq(), t, d, d, &mut q);
    matmul_nn(&x, enc.wk(), t, d, d, &mut k);
    matmul_nn(&x, enc.wv(), t, d, d, &mut v);

    let mut scores = vec![0.0; t * t];
    matmul_nt(&q, &k, t, d, t, &mut scores);
    let scale = 1.0 / (d as f64).sqrt();
    for row in scores.chunks_exact_mut(t) {
        let mut max = f64::NEG_INFINITY;
        for s in row.iter_mut() {
            *s *= scale;
            max = max.max(*s);
        }
        let mut sum = 0.0;
        for s in row.iter_mut() {
            *s = (*s - max).exp();
            sum += *s;
        }
        for s in row.iter_mut() {
            *s /= sum;
        }
    }

    let mut m = vec![0.0; t * d];
    matmul_nn(&scores, &v, t, t, d, &mut m);

    // elementwise modulation, then mean over tokens
    let mut pooled = vec![0.0; d];
    for i in 0..t {
        for j in 0..d {
            pooled[j] += m[i * d + j] * x[i * d + j];
        }
    }
    let inv_t = 1.0 / t as f64;
    let mut norm_sq = 0.0;
    for p in pooled.iter_mut() {
        *p *= inv_t;
        norm_sq += *p * *p;
    }
    let norm = norm_sq.sqrt();
    if !norm.is_finite() {
        return Err(Error::NonFinite("key aggregation".into()));
    }
    if norm < 1e-12 {
        return Err(Error::Format("pooled key has zero norm, cannot normalize".into()));
    }
    for p in pooled.iter_mut() {
        *p /= norm;
    }
    Ok(pooled)
}

pub(crate) fn round_key(key: &[f64]) -> Vec<f32> {
    key.iter().map(|&x| x as f32).collect()
}

// ─── bank construction ───────────────────────────────────────────────────────

/// Visual feature rows for one sample, computed with the frozen patch
/// encoder on a throwaway tape.
pub fn encode_image(bundle: &ModelBundle, atlas: &Atlas, sample: &Sample) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let mut reg = Vec::new();
    let vars = bundle.vit.bind(&mut tape, false, &mut reg);
    let out = vit_forward(&mut tape, &bundle.vit.cfg, &vars, &atlas.render(sample))?;
    Ok(tape.value(out).data.clone())
}

/// Key for one sample: the key encoder's projections of the sample's visual
/// features and caption tokens, aggregated by `make_key`. f64, unit norm.
pub fn sample_key(bundle: &ModelBundle, image_feats: &[f64], caption: &[u32]) -> Result<Vec<f64>> {
    let enc = &bundle.key_encoder;
    let rows = image_feats.len() / enc.d_v;
    let vis = enc.project_visual(image_feats, rows)?;
    let txt = enc.embed_text(caption)?;
    make_key(enc, &vis, &txt)
}

/// Compressed value for one sample, `[VALUE_ROWS, VALUE_COLS]` flattened.
pub fn sample_value(bundle: &ModelBundle, image_feats: &[f64], caption: &[u32]) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let mut reg = Vec::new();
    let vars = bundle.perceiver.bind(&mut tape, false, &mut reg);
    let rows = image_feats.len() / bundle.cfg.d_v;
    let img = tape.constant(vec![rows, bundle.cfg.d_v], image_feats.to_vec())?;
    let out = perceiver_compress(&mut tape, &bundle.cfg.perceiver, &vars, Some(img), caption)?;
    Ok(tape.value(out).data.clone())
}

/// Build a bank with one entry per sample; entry id = sample position. An
/// empty sample list yields a valid empty bank. Visual features are cached
/// per scene, since many samples ask about the same rendered image.
pub fn build_bank(
    bundle: &ModelBundle,
    atlas: &Atlas,
    samples: &[Sample],
    dataset_seed: u64,
) -> Result<MemoryBank> {
    let mut feat_cache: HashMap<u32, Vec<f64>> = HashMap::new();
    let mut entries = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let feats = match feat_cache.get(&s.scene_id) {
            Some(f) => f.clone(),
            None => {
                let f = encode_image(bundle, atlas, s)?;
                feat_cache.insert(s.scene_id, f.clone());
                f
            }
        };
        let key = sample_key(bundle, &feats, &s.caption)?;
        let value = sample_value(bundle, &feats, &s.caption)?;
        entries.push(MemoryEntry {
            id: i as u64,
            key: round_key(&key),
            value: value.iter().map(|&x| x as f32).collect(),
        });
    }
    let bank = MemoryBank {
        d_k: bundle.key_encoder.d,
        provenance: Provenance {
            key_encoder: bundle.key_encoder.fingerprint(),
            perceiver: bundle.fingerprint("perceiver"),
            dataset_seed,
        },
        entries,
    };
    bank.validate()?;
    Ok(bank)
}

// ─── retrieval ───────────────────────────────────────────────────────────────

/// Exact top-k cosine retrieval. Keys are unit vectors, so cosine is a dot
/// product; every entry is scored and ranked (score descending, id
/// ascending). Returns fewer than k hits only when the bank, minus the
/// excluded id, is smaller than k.
pub fn retrieve(bank: &MemoryBank, query_key: &[f64], k: usize, exclude_id: Option<u64>) -> Result<QueryResult> {
    if query_key.len() != bank.d_k {
        return Err(Error::Shape(format!(
            "query key width {} does not match bank d_k {}",
            query_key.len(),
            bank.d_k
        )));
    }
    let norm = query_key.iter().map(|x| x * x).sum::<f64>().sqrt();
    if (norm - 1.0).abs() > 1e-3 {
        return Err(Error::Format(format!("query key has norm {norm}, expected unit")));
    }

    let mut scored: Vec<Hit> = bank
        .entries
        .iter()
        .filter(|e| Some(e.id) != exclude_id)
        .map(|e| {
            let score = e.key.iter().zip(query_key).map(|(&a, &b)| a as f64 * b).sum();
            Hit { id: e.id, score }
        })
        .collect();
    scored.sort_unstable_by(|a, b| {
        b.score.partial_cmp(&a.score).unwrap().then(a.id.cmp(&b.id))
    });
    scored.truncate(k);
    Ok(QueryResult { hits: scored })
}

// ─── persistence ─────────────────────────────────────────────────────────────

/// Exact size in bytes of a saved bank: framing and provenance header, then
/// per entry an 8-byte id, d_k f32 key values, and the fixed f32 value grid,
/// then the trailing checksum.
pub fn bank_file_size(d_k: usize, n: usize) -> usize {
    let header = 4 + 4 + 8 + 8 + 8 + 4 + 8;
    header + n * (8 + 4 * d_k + 4 * VALUE_LEN) + 8
}

pub fn save_bank(bank: &MemoryBank, path: &Path) -> Result<()> {
    bank.validate()?;
    let mut w = ByteWriter::new(BANK_MAGIC, BANK_VERSION);
    w.put_u64(bank.provenance.key_encoder);
    w.put_u64(bank.provenance.perceiver);
    w.put_u64(bank.provenance.dataset_seed);
    w.put_u32(bank.d_k as u32);
    w.put_u64(bank.entries.len() as u64);
    for e in &bank.entries {
        w.put_u64(e.id);
        w.put_f32s(&e.key);
        w.put_f32s(&e.value);
    }
    w.write_file(path)
}

pub fn load_bank(path: &Path) -> Result<MemoryBank> {
    let bytes = read_file(path)?;
    let mut r = ByteReader::open(&bytes, BANK_MAGIC, BANK_VERSION)?;
    let provenance = Provenance {
        key_encoder: r.u64()?,
        perceiver: r.u64()?,
        dataset_seed: r.u64()?,
    };
    let d_k = r.u32()? as usize;
    let n = r.u64()? as usize;
    let mut entries = Vec::with_capacity(n);
    for _ in 0..n {
        entries.push(MemoryEntry {
            id: r.u64()?,
            key: r.f32s(d_k)?,
            value: r.f32s(VALUE_LEN)?,
        });
    }
    r.expect_end()?;
    let bank = MemoryBank { d_k, provenance, entries };
    bank.validate()?;
    Ok(bank)
}
