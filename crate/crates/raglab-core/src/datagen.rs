//! Synthetic grid-world caption task.
//!
//! A scene is a small grid of cells; each cell has a visible color (rendered
//! into the image as a fixed random patch vector) and a hidden shape that is
//! never rendered. A sample asks for the shape of one askable cell. The
//! paired caption claims a shape for each askable cell and tells the truth
//! per cell with probability ρ, so ρ dials how much answer-relevant
//! information captions — and therefore retrieved memory entries — carry.
//! Answers are recoverable from the image alone only through scene identity,
//! which makes the caption clue genuinely valuable.
//!
//! Splits partition (scene, question-cell) combinations, so no sample content
//! repeats across splits while every split shares the scene pool — retrieval
//! from a bank built on one split stays meaningful on the others.

use crate::container::{read_file, ByteReader, ByteWriter};
use crate::emi::DiscreteChannel;
use crate::error::{Error, Result};
use crate::rngs::{normal, stream};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Width of one rendered patch vector.
pub const PATCH_DIM: usize = 16;

const MAGIC: &str = "RLDS";
const VERSION: u32 = 1;
const MAX_VOCAB: usize = 4096;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    /// Grid side length; the image has grid² patches.
    pub grid: usize,
    /// Visible per-cell attribute vocabulary (rendered).
    pub n_colors: usize,
    /// Hidden per-cell attribute vocabulary (asked about, never rendered).
    pub n_shapes: usize,
    /// Size of the scene pool shared by all splits.
    pub n_scenes: usize,
    /// How many distinct cells can be asked about (instruction templates).
    pub question_cells: usize,
    /// Probability that the caption tells the truth about a cell.
    pub rho: f64,
    pub n_pretrain: usize,
    pub n_finetune: usize,
    pub n_eval: usize,
    pub seed: u64,
}

impl TaskSpec {
    /// Desk-scale defaults; override fields as needed.
    pub fn standard(seed: u64) -> Self {
        TaskSpec {
            grid: 4,
            n_colors: 6,
            n_shapes: 6,
            n_scenes: 64,
            question_cells: 4,
            rho: 1.0,
            n_pretrain: 2000,
            n_finetune: 800,
            n_eval: 300,
            seed,
        }
    }

    pub fn cells(&self) -> usize {
        self.grid * self.grid
    }

    // token layout: shapes, then cell names, then the question marker
    pub fn shape_token(&self, shape: usize) -> u32 {
        shape as u32
    }

    pub fn cell_token(&self, cell: usize) -> u32 {
        (self.n_shapes + cell) as u32
    }

    pub fn ask_token(&self) -> u32 {
        (self.n_shapes + self.cells()) as u32
    }

    pub fn vocab(&self) -> usize {
        self.n_shapes + self.cells() + 1
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::TaskSpec(format!("rho must lie in [0, 1], got {}", self.rho)));
        }
        if self.vocab() > MAX_VOCAB {
            return Err(Error::OutOfVocab { id: self.vocab() as u32, vocab: MAX_VOCAB });
        }
        if self.grid == 0 || self.cells() > 256 {
            return Err(Error::TaskSpec(format!("grid side {} out of range", self.grid)));
        }
        if !(2..=16).contains(&self.n_colors) || !(2..=16).contains(&self.n_shapes) {
            return Err(Error::TaskSpec("color/shape vocabularies must have 2..=16 entries".into()));
        }
        if self.question_cells < 3 || self.question_cells > self.cells() || self.question_cells > 16 {
            return Err(Error::TaskSpec(format!(
                "question_cells must lie in 3..=min(grid², 16), got {}",
                self.question_cells
            )));
        }
        if self.n_scenes < 8 * self.n_shapes {
            return Err(Error::TaskSpec(format!(
                "scene pool of {} cannot cover {} answer classes evenly; need at least {}",
                self.n_scenes,
                self.n_shapes,
                8 * self.n_shapes
            )));
        }
        if self.n_pretrain == 0 || self.n_finetune == 0 || self.n_eval == 0 {
            return Err(Error::TaskSpec("all split sizes must be positive".into()));
        }
        Ok(())
    }
}

/// One question about one scene, with everything needed to re-derive its
/// answer and to render its image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub scene_id: u32,
    pub question_cell: u8,
    pub cell_colors: Vec<u8>,
    pub cell_shapes: Vec<u8>,
    pub instruction: Vec<u32>,
    pub answer: u32,
    pub caption: Vec<u32>,
}

/// The ground-truth answer implied by a sample's stored attributes.
pub fn derive_answer(spec: &TaskSpec, sample: &Sample) -> u32 {
    spec.shape_token(sample.cell_shapes[sample.question_cell as usize] as usize)
}

/// Frozen random patch vectors, one per (cell, color) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Atlas {
    pub cells: usize,
    pub n_colors: usize,
    patch: Vec<f64>,
}

impl Atlas {
    pub(crate) fn generate(spec: &TaskSpec) -> Self {
        let mut rng = stream(spec.seed, "atlas");
        let n = spec.cells() * spec.n_colors * PATCH_DIM;
        Atlas {
            cells: spec.cells(),
            n_colors: spec.n_colors,
            patch: (0..n).map(|_| normal(&mut rng)).collect(),
        }
    }

    /// Patch-vector image of a sample: row-major [cells × PATCH_DIM].
    pub fn render(&self, sample: &Sample) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.cells * PATCH_DIM);
        for (cell, &color) in sample.cell_colors.iter().enumerate() {
            let base = (cell * self.n_colors + color as usize) * PATCH_DIM;
            out.extend_from_slice(&self.patch[base..base + PATCH_DIM]);
        }
        out
    }
}

/// A full generated task: spec, frozen atlas, three sample splits.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    pub spec: TaskSpec,
    pub atlas: Atlas,
    pub pretrain: Vec<Sample>,
    pub finetune: Vec<Sample>,
    pub eval: Vec<Sample>,
}

struct Scene {
    colors: Vec<u8>,
    shapes: Vec<u8>,
}

/// Generate all three splits. Pure in (spec): the same spec always yields
/// bit-identical data, and specs differing only in ρ share scenes, split
/// assignments, and sample skeletons.
pub fn generate(spec: &TaskSpec) -> Result<TaskData> {
    spec.validate()?;
    let cells = spec.cells();
    let atlas = Atlas::generate(spec);

    // scene pool; question-cell shapes use balanced shuffled sequences so
    // every answer class is equally common in every askable position
    let mut scene_rng = stream(spec.seed, "scenes");
    let mut scenes: Vec<Scene> = (0..spec.n_scenes)
        .map(|_| Scene {
            colors: (0..cells).map(|_| scene_rng.random_range(0..spec.n_colors) as u8).collect(),
            shapes: (0..cells).map(|_| scene_rng.random_range(0..spec.n_shapes) as u8).collect(),
        })
        .collect();
    for q in 0..spec.question_cells {
        let mut seq: Vec<u8> = (0..spec.n_scenes).map(|i| (i % spec.n_shapes) as u8).collect();
        seq.shuffle(&mut scene_rng);
        for (s, scene) in scenes.iter_mut().enumerate() {
            scene.shapes[q] = seq[s];
        }
    }

    // partition (scene, question-cell) combos across the three splits
    let mut split_rng = stream(spec.seed, "splits");
    let mut combos: [Vec<(u32, u8)>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for s in 0..spec.n_scenes {
        let mut qs: Vec<u8> = (0..spec.question_cells as u8).collect();
        qs.shuffle(&mut split_rng);
        combos[2].push((s as u32, qs[0])); // eval
        combos[1].push((s as u32, qs[1])); // finetune
        for &q in &qs[2..] {
            combos[0].push((s as u32, q)); // pretrain
        }
    }

    let split_names = ["pretrain", "finetune", "eval"];
    let sizes = [spec.n_pretrain, spec.n_finetune, spec.n_eval];
    let mut splits: Vec<Vec<Sample>> = Vec::with_capacity(3);
    for (i, name) in split_names.iter().enumerate() {
        let mut buckets: Vec<Vec<(u32, u8)>> = vec![Vec::new(); spec.n_shapes];
        for &(s, q) in &combos[i] {
            buckets[scenes[s as usize].shapes[q as usize] as usize].push((s, q));
        }
        if let Some(class) = buckets.iter().position(|b| b.is_empty()) {
            return Err(Error::TaskSpec(format!(
                "answer class {class} has no (scene, cell) combination in the {name} split; enlarge the scene pool"
            )));
        }

        let mut draw_rng = stream(spec.seed, &format!("samples/{name}"));
        let mut caption_rng = stream(spec.seed, &format!("captions/{name}"));
        let mut samples = Vec::with_capacity(sizes[i]);
        for j in 0..sizes[i] {
            let class = j % spec.n_shapes;
            let &(scene_id, q) = &buckets[class][draw_rng.random_range(0..buckets[class].len())];
            let scene = &scenes[scene_id as usize];
            // both draws always consumed, so caption streams stay aligned
            // across specs that differ only in rho
            let caption: Vec<u32> = (0..spec.question_cells)
                .map(|c| {
                    let coin: f64 = caption_rng.random();
                    let distractor = caption_rng.random_range(0..spec.n_shapes);
                    let shape =
                        if coin < spec.rho { scene.shapes[c] as usize } else { distractor };
                    spec.shape_token(shape)
                })
                .collect();
            let sample = Sample {
                scene_id,
                question_cell: q,
                cell_colors: scene.colors.clone(),
                cell_shapes: scene.shapes.clone(),
                instruction: vec![spec.ask_token(), spec.cell_token(q as usize)],
                answer: spec.shape_token(scene.shapes[q as usize] as usize),
                caption,
            };
            check_tokens(spec, &sample)?;
            samples.push(sample);
        }
        samples.shuffle(&mut draw_rng);
        splits.push(samples);
    }

    let eval = splits.pop().unwrap();
    let finetune = splits.pop().unwrap();
    let pretrain = splits.pop().unwrap();
    Ok(TaskData { spec: spec.clone(), atlas, pretrain, finetune, eval })
}

fn check_tokens(spec: &TaskSpec, sample: &Sample) -> Result<()> {
    let v = spec.vocab();
    for &tok in sample.instruction.iter().chain(&sample.caption).chain(std::iter::once(&sample.answer)) {
        if tok as usize >= v {
            return Err(Error::OutOfVocab { id: tok, vocab: v });
        }
    }
    Ok(())
}

/// Uniform subsample without replacement, preserving original order.
/// Fractions share a nested prefix structure under one seed:
/// subsample(0.2) ⊂ subsample(0.4) ⊂ … ⊂ subsample(1.0) = the input.
pub fn subsample(samples: &[Sample], fraction: f64, seed: u64) -> Result<Vec<Sample>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::TaskSpec(format!("fraction must lie in (0, 1], got {fraction}")));
    }
    if samples.is_empty() {
        return Err(Error::Empty("subsample of an empty dataset".into()));
    }
    let exact = fraction * samples.len() as f64;
    // absorb float dust so e.g. 0.2 × 1500 counts as 300, not ⌈300.00000000000006⌉
    let k = if (exact - exact.round()).abs() < 1e-9 { exact.round() } else { exact.ceil() } as usize;
    let k = k.clamp(1, samples.len());

    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut rng = stream(seed, "subsample");
    order.shuffle(&mut rng);
    let mut keep: Vec<usize> = order[..k].to_vec();
    keep.sort_unstable();
    Ok(keep.into_iter().map(|i| samples[i].clone()).collect())
}

/// Plug-in discrete channel over (queried color, question cell, caption's
/// claim about the queried cell, answer), estimated from sample counts.
pub fn induced_channel(spec: &TaskSpec, samples: &[Sample]) -> Result<DiscreteChannel> {
    if samples.is_empty() {
        return Err(Error::Empty("induced channel from no samples".into()));
    }
    let (n_xv, n_xi, n_er, n_l) = (spec.n_colors, spec.question_cells, spec.n_shapes, spec.n_shapes);
    let mut counts = vec![0u64; n_xv * n_xi * n_er * n_l];
    for s in samples {
        let q = s.question_cell as usize;
        let xv = s.cell_colors[q] as usize;
        let er = s.caption[q] as usize; // shape tokens are 0-based
        let l = s.answer as usize;
        if q >= n_xi || xv >= n_xv || er >= n_er || l >= n_l {
            return Err(Error::TaskSpec("sample does not fit the spec's alphabets".into()));
        }
        counts[((xv * n_xi + q) * n_er + er) * n_l + l] += 1;
    }
    DiscreteChannel::from_counts(n_xv, n_xi, n_er, n_l, &counts)
}

// ─── on-disk format ──────────────────────────────────────────────────────────

impl TaskData {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = ByteWriter::new(MAGIC, VERSION);
        w.put_blob(serde_json::to_string(&self.spec)?.as_bytes());
        w.put_u64(self.atlas.patch.len() as u64);
        w.put_f64s(&self.atlas.patch);
        for split in [&self.pretrain, &self.finetune, &self.eval] {
            w.put_u64(split.len() as u64);
            for s in split {
                w.put_u32(s.scene_id);
                w.put_u8(s.question_cell);
                for &c in &s.cell_colors {
                    w.put_u8(c);
                }
                for &c in &s.cell_shapes {
                    w.put_u8(c);
                }
                w.put_u16(s.instruction.len() as u16);
                for &t in &s.instruction {
                    w.put_u32(t);
                }
                w.put_u32(s.answer);
                w.put_u16(s.caption.len() as u16);
                for &t in &s.caption {
                    w.put_u32(t);
                }
            }
        }
        w.write_file(path)
    }

    pub fn load(path: &Path) -> Result<TaskData> {
        let bytes = read_file(path)?;
        let mut r = ByteReader::open(&bytes, MAGIC, VERSION)?;
        let spec: TaskSpec = serde_json::from_slice(r.blob()?)?;
        spec.validate()?;
        let atlas_len = r.u64()? as usize;
        if atlas_len != spec.cells() * spec.n_colors * PATCH_DIM {
            return Err(Error::Format(format!("atlas holds {atlas_len} values, spec disagrees")));
        }
        let atlas = Atlas {
            cells: spec.cells(),
            n_colors: spec.n_colors,
            patch: r.f64s(atlas_len)?,
        };
        let mut splits = Vec::with_capacity(3);
        for _ in 0..3 {
            let n = r.u64()? as usize;
            let mut samples = Vec::with_capacity(n);
            for _ in 0..n {
                let scene_id = r.u32()?;
                let question_cell = r.u8()?;
                let cell_colors: Vec<u8> = (0..spec.cells()).map(|_| r.u8()).collect::<Result<_>>()?;
                let cell_shapes: Vec<u8> = (0..spec.cells()).map(|_| r.u8()).collect::<Result<_>>()?;
                let ni = r.u16()? as usize;
                let instruction: Vec<u32> = (0..ni).map(|_| r.u32()).collect::<Result<_>>()?;
                let answer = r.u32()?;
                let nc = r.u16()? as usize;
                let caption: Vec<u32> = (0..nc).map(|_| r.u32()).collect::<Result<_>>()?;
                let sample = Sample {
                    scene_id,
                    question_cell,
                    cell_colors,
                    cell_shapes,
                    instruction,
                    answer,
                    caption,
                };
                check_tokens(&spec, &sample)?;
                samples.push(sample);
            }
            splits.push(samples);
        }
        r.expect_end()?;
        let eval = splits.pop().unwrap();
        let finetune = splits.pop().unwrap();
        let pretrain = splits.pop().unwrap();
        Ok(TaskData { spec, atlas, pretrain, finetune, eval })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validate_rejects_bad_specs() {
        let mut s = TaskSpec::standard(1);
        s.rho = 1.5;
        assert!(s.validate().is_err());
        let mut s = TaskSpec::standard(1);
        s.question_cells = 2;
        assert!(s.validate().is_err());
        let mut s = TaskSpec::standard(1);
        s.n_scenes = 10;
        assert!(s.validate().is_err());
        let mut s = TaskSpec::standard(1);
        s.grid = 64; // vocab = 6 + 4096 + 1
        assert!(matches!(s.validate(), Err(Error::OutOfVocab { .. })));
        assert!(TaskSpec::standard(1).validate().is_ok());
    }

    #[test]
    fn token_layout_is_dense() {
        let s = TaskSpec::standard(0);
        assert_eq!(s.shape_token(5), 5);
        assert_eq!(s.cell_token(0), 6);
        assert_eq!(s.ask_token(), 22);
        assert_eq!(s.vocab(), 23);
    }
}
