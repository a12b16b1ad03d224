//! Flat `key = value` config files with `[section]` headers.
//!
//! The format is deliberately primitive: diff-able in review, trivially
//! hashable, no structured-format dependency. Every run artifact is stamped
//! with the FNV-1a hash of the *canonical* serialization, so two files that
//! parse to the same settings stamp the same hash regardless of formatting.

use raglab_core::datagen::TaskSpec;
use raglab_core::hash::fnv1a64;
use raglab_core::models::Tier;
use raglab_core::pipeline::StageConfig;
use std::fmt::Write as _;
use std::path::Path;

use crate::CliError;

/// Everything one experiment needs, as parsed from a config file.
///
/// `stage1`/`stage2` are templates: harness code stamps per-run seeds and
/// flips `rag_enabled` per arm before use.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub task: TaskSpec,
    pub tier: Tier,
    pub stage1: StageConfig,
    pub stage2: StageConfig,
    /// Bank entry budget; 0 means the whole pretrain split.
    pub bank_size: usize,
    /// Retrieval breadth at evaluation time.
    pub bank_k: usize,
    /// Base experiment seed (model init, batch order, subsampling).
    pub seed: u64,
    /// How many consecutive seeds multi-seed sweeps cover.
    pub n_seeds: usize,
}

/// Single source of truth for defaults; `RunConfig::default()` parses this.
pub const DEFAULT_CONFIG: &str = "\
# Desk-scale defaults. Values here parse into RunConfig::default().

[task]
seed = 41
grid = 4
colors = 6
shapes = 6
scenes = 64
question_cells = 4
rho = 1.0
pretrain = 2000
finetune = 800
eval = 300

[model]
tier = small

[stage1]
steps = 120
batch = 8
lr = 0.001
warmup = 0.1
weight_decay = 0.0
k = 5
rag = false

[stage2]
steps = 80
batch = 8
lr = 0.0001
warmup = 0.1
weight_decay = 0.0
k = 5
rag = false

[bank]
size = 0
k = 5

[run]
seed = 1
seeds = 5
";

impl Default for RunConfig {
    fn default() -> Self {
        parse_str(DEFAULT_CONFIG).expect("builtin default config must parse")
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Runtime(format!("read {}: {e}", path.display())))?;
        parse_str(&text)
    }

    /// Apply one `section.key=value` override on top of the parsed config.
    pub fn apply_override(&mut self, spec: &str) -> Result<(), CliError> {
        let (key, value) = spec
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("override '{spec}' is not key=value")))?;
        let (section, name) = key
            .trim()
            .split_once('.')
            .ok_or_else(|| CliError::Usage(format!("override key '{key}' is not section.key")))?;
        apply(self, section, name, value.trim())
    }

    /// Canonical serialization: every field, fixed order, typed re-print.
    /// Formatting differences in the source file cannot change this.
    pub fn canonical(&self) -> String {
        let mut s = String::new();
        let t = &self.task;
        let _ = write!(
            s,
            "task.seed={}\ntask.grid={}\ntask.colors={}\ntask.shapes={}\ntask.scenes={}\n\
             task.question_cells={}\ntask.rho={}\ntask.pretrain={}\ntask.finetune={}\ntask.eval={}\n",
            t.seed,
            t.grid,
            t.n_colors,
            t.n_shapes,
            t.n_scenes,
            t.question_cells,
            t.rho,
            t.n_pretrain,
            t.n_finetune,
            t.n_eval
        );
        let _ = write!(s, "model.tier={}\n", tier_name(self.tier));
        for (tag, st) in [("stage1", &self.stage1), ("stage2", &self.stage2)] {
            let _ = write!(
                s,
                "{tag}.steps={}\n{tag}.batch={}\n{tag}.lr={}\n{tag}.warmup={}\n\
                 {tag}.weight_decay={}\n{tag}.k={}\n{tag}.rag={}\n",
                st.steps, st.batch, st.lr, st.warmup_ratio, st.weight_decay, st.k, st.rag_enabled
            );
        }
        let _ = write!(s, "bank.size={}\nbank.k={}\n", self.bank_size, self.bank_k);
        let _ = write!(s, "run.seed={}\nrun.seeds={}\n", self.seed, self.n_seeds);
        s
    }

    /// Hash stamped into every artifact this config produces.
    pub fn hash(&self) -> u64 {
        fnv1a64(self.canonical().as_bytes())
    }

    /// Seeds a multi-seed sweep covers.
    pub fn seeds(&self) -> Vec<u64> {
        (0..self.n_seeds as u64).map(|i| self.seed + i).collect()
    }
}

fn tier_name(t: Tier) -> &'static str {
    match t {
        Tier::Small => "small",
        Tier::Large => "large",
    }
}

fn parse_str(text: &str) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig {
        task: TaskSpec::standard(41),
        tier: Tier::Small,
        stage1: StageConfig::pretrain(1),
        stage2: StageConfig::finetune(1),
        bank_size: 0,
        bank_k: 5,
        seed: 1,
        n_seeds: 5,
    };
    let mut section = String::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(name) = line.strip_prefix('[') {
            let name = name
                .strip_suffix(']')
                .ok_or_else(|| CliError::Usage(format!("line {}: unterminated section", lineno + 1)))?;
            section = name.trim().to_string();
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("line {}: expected key = value", lineno + 1)))?;
        if section.is_empty() {
            return Err(CliError::Usage(format!("line {}: key before any [section]", lineno + 1)));
        }
        apply(&mut cfg, &section, key.trim(), value.trim())?;
    }
    Ok(cfg)
}

fn apply(cfg: &mut RunConfig, section: &str, key: &str, value: &str) -> Result<(), CliError> {
    let bad = || CliError::Usage(format!("unknown config key '{section}.{key}'"));
    let usize_v = || -> Result<usize, CliError> {
        value
            .parse()
            .map_err(|_| CliError::Usage(format!("{section}.{key}: '{value}' is not an integer")))
    };
    let u64_v = || -> Result<u64, CliError> {
        value
            .parse()
            .map_err(|_| CliError::Usage(format!("{section}.{key}: '{value}' is not an integer")))
    };
    let f64_v = || -> Result<f64, CliError> {
        value
            .parse()
            .map_err(|_| CliError::Usage(format!("{section}.{key}: '{value}' is not a number")))
    };
    match section {
        "task" => match key {
            "seed" => cfg.task.seed = u64_v()?,
            "grid" => cfg.task.grid = usize_v()?,
            "colors" => cfg.task.n_colors = usize_v()?,
            "shapes" => cfg.task.n_shapes = usize_v()?,
            "scenes" => cfg.task.n_scenes = usize_v()?,
            "question_cells" => cfg.task.question_cells = usize_v()?,
            "rho" => cfg.task.rho = f64_v()?,
            "pretrain" => cfg.task.n_pretrain = usize_v()?,
            "finetune" => cfg.task.n_finetune = usize_v()?,
            "eval" => cfg.task.n_eval = usize_v()?,
            _ => return Err(bad()),
        },
        "model" => match key {
            "tier" => {
                cfg.tier = match value {
                    "small" => Tier::Small,
                    "large" => Tier::Large,
                    _ => {
                        return Err(CliError::Usage(format!(
                            "model.tier must be 'small' or 'large', got '{value}'"
                        )))
                    }
                }
            }
            _ => return Err(bad()),
        },
        "stage1" | "stage2" => {
            let st = if section == "stage1" { &mut cfg.stage1 } else { &mut cfg.stage2 };
            match key {
                "steps" => st.steps = usize_v()?,
                "batch" => st.batch = usize_v()?,
                "lr" => st.lr = f64_v()?,
                "warmup" => st.warmup_ratio = f64_v()?,
                "weight_decay" => st.weight_decay = f64_v()?,
                "k" => st.k = usize_v()?,
                "rag" => {
                    st.rag_enabled = match value {
                        "true" | "1" => true,
                        "false" | "0" => false,
                        _ => {
                            return Err(CliError::Usage(format!(
                                "{section}.{key}: '{value}' is not a bool"
                            )))
                        }
                    }
                }
                _ => return Err(bad()),
            }
        }
        "bank" => match key {
            "size" => cfg.bank_size = usize_v()?,
            "k" => cfg.bank_k = usize_v()?,
            _ => return Err(bad()),
        },
        "run" => match key {
            "seed" => cfg.seed = u64_v()?,
            "seeds" => cfg.n_seeds = usize_v()?,
            _ => return Err(bad()),
        },
        _ => Err(bad())?,
    }
    Ok(())
}
