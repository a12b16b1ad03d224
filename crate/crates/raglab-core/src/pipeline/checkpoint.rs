//! Whole-bundle checkpoints. A checkpoint is self-describing: it carries the
//! bundle config (JSON), a free-form stage tag, and every parameter by
//! qualified name with shape and full-precision data, in the shared
//! checksummed container framing.

use crate::container::{read_file, ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::models::{BundleConfig, ModelBundle};
use std::collections::HashMap;
use std::path::Path;

pub const CHECKPOINT_MAGIC: &str = "RLCK";
pub const CHECKPOINT_VERSION: u32 = 1;

fn config_json(cfg: &BundleConfig) -> Result<String> {
    serde_json::to_string(cfg).map_err(|e| Error::Format(format!("config to JSON: {e}")))
}

/// Serialize every parameter of the bundle, tagged with the stage that
/// produced it ("pretrain", "finetune", ...).
pub fn save_checkpoint(bundle: &ModelBundle, stage_tag: &str, path: &Path) -> Result<()> {
    let mut w = ByteWriter::new(CHECKPOINT_MAGIC, CHECKPOINT_VERSION);
    w.put_blob(config_json(&bundle.cfg)?.as_bytes());
    w.put_blob(stage_tag.as_bytes());

    let mut count = 0u64;
    bundle.visit(&mut |_, _| count += 1);
    w.put_u64(count);

    bundle.visit(&mut |name, t| {
        w.put_blob(name.as_bytes());
        w.put_u8(t.shape.len() as u8);
        for &d in &t.shape {
            w.put_u64(d as u64);
        }
        w.put_f64s(&t.data);
    });
    w.write_file(path)
}

/// Rebuild a bundle from a checkpoint. The config is reconstructed first so
/// shapes are known, then every stored parameter overwrites its counterpart;
/// a name, shape, or coverage mismatch is an error, not a partial load.
pub fn load_checkpoint(path: &Path) -> Result<(ModelBundle, String)> {
    let bytes = read_file(path)?;
    let mut r = ByteReader::open(&bytes, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
    let cfg: BundleConfig = serde_json::from_slice(r.blob()?)
        .map_err(|e| Error::Format(format!("checkpoint config JSON: {e}")))?;
    let stage_tag = String::from_utf8(r.blob()?.to_vec())
        .map_err(|_| Error::Format("checkpoint stage tag is not UTF-8".into()))?;
    let count = r.u64()? as usize;

    let mut stored: HashMap<String, (Vec<usize>, Vec<f64>)> = HashMap::with_capacity(count);
    for _ in 0..count {
        let name = String::from_utf8(r.blob()?.to_vec())
            .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        let data = r.f64s(numel)?;
        if stored.insert(name.clone(), (shape, data)).is_some() {
            return Err(Error::Format(format!("duplicate parameter {name} in checkpoint")));
        }
    }
    r.expect_end()?;

    // Seed value is irrelevant: every tensor is overwritten below.
    let mut bundle = ModelBundle::new(&cfg, 0);
    let mut missing = Vec::new();
    let mut bad = None;
    bundle.visit_mut(&mut |name, t| {
        match stored.remove(&name) {
            Some((shape, data)) => {
                if shape != t.shape {
                    bad = Some(format!(
                        "parameter {name}: checkpoint shape {shape:?}, model shape {:?}",
                        t.shape
                    ));
                } else {
                    t.data = data;
                }
            }
            None => missing.push(name),
        }
    });
    if let Some(msg) = bad {
        return Err(Error::Format(msg));
    }
    if !missing.is_empty() {
        return Err(Error::Format(format!(
            "checkpoint is missing {} parameters (first: {})",
            missing.len(),
            missing[0]
        )));
    }
    if !stored.is_empty() {
        let mut extra: Vec<&String> = stored.keys().collect();
        extra.sort();
        return Err(Error::Format(format!(
            "checkpoint has {} parameters the model does not ({}, ...)",
            stored.len(),
            extra[0]
        )));
    }
    Ok((bundle, stage_tag))
}

/// Exact on-disk size of a checkpoint of this bundle, in bytes:
/// 8-byte header, two length-prefixed blobs, the parameter count, one
/// (name, rank, dims, data) record per parameter, and the 8-byte checksum.
pub fn checkpoint_file_size(bundle: &ModelBundle, stage_tag: &str) -> Result<u64> {
    let mut size = 4u64 + 4;
    size += 8 + config_json(&bundle.cfg)?.len() as u64;
    size += 8 + stage_tag.len() as u64;
    size += 8;
    bundle.visit(&mut |name, t| {
        size += 8 + name.len() as u64;
        size += 1 + 8 * t.shape.len() as u64;
        size += 8 * t.numel() as u64;
    });
    size += 8;
    Ok(size)
}
