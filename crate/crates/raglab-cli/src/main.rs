use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use raglab_cli::config::RunConfig;
use raglab_cli::{harness, CliError};

#[derive(Parser)]
#[command(
    name = "raglab",
    about = "Desk-scale retrieval-augmented alignment experiments",
    disable_help_subcommand = true
)]
struct Cli {
    /// Config file (flat key=value with [section] headers); defaults built in
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the base experiment seed from the config
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory for artifacts
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Config overrides as section.key=value; repeatable
    #[arg(long = "override", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic task dataset and write it to disk
    Datagen,
    /// Build the retrieval memory bank and write it to disk
    BuildBank,
    /// Stage-1 training (connectors + compressor; decoder frozen)
    Pretrain,
    /// Stage-2 training from a stage-1 checkpoint (connectors + decoder)
    Finetune {
        /// Stage-1 checkpoint to start from
        #[arg(long)]
        init: PathBuf,
    },
    /// Evaluate a checkpoint on the eval split
    Eval {
        /// Checkpoint to evaluate
        #[arg(long)]
        ckpt: PathBuf,
        /// Evaluate the retrieval-augmented path
        #[arg(long)]
        rag: bool,
    },
    /// Baseline vs retrieval-augmented pretraining on shared seeds
    PretrainCompare,
    /// Finetune-data efficiency sweep from shared pretrain checkpoints
    DataEfficiency,
    /// Sweep one retrieval design axis
    Ablate {
        /// kb_size, top_k, or encoder_mismatch
        #[arg(long)]
        axis: String,
    },
    /// Exact information ledger for a discrete channel and quantizer pair
    Emi {
        /// Channel JSON file
        #[arg(long)]
        channel: PathBuf,
        /// Quantizer spec JSON file ({"without": [...], "with_retrieval": [...]})
        #[arg(long)]
        quantizers: PathBuf,
    },
    /// Analytic per-forward FLOPs for the configured models
    Flops,
    /// Project connector outputs and token embeddings to 2-D
    ExportEmbeddings {
        /// Checkpoint to read models from (default: fresh init from the seed)
        #[arg(long)]
        ckpt: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // clap's default exit codes don't match ours: help/version are a
            // success, everything else is a usage error
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    for o in &cli.overrides {
        cfg.apply_override(o)?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let out = &cli.out;

    match &cli.cmd {
        Cmd::Datagen => harness::cmd_datagen(&cfg, out),
        Cmd::BuildBank => harness::cmd_build_bank(&cfg, out),
        Cmd::Pretrain => harness::cmd_pretrain(&cfg, out),
        Cmd::Finetune { init } => harness::cmd_finetune(&cfg, out, init),
        Cmd::Eval { ckpt, rag } => harness::cmd_eval(&cfg, out, ckpt, *rag),
        Cmd::PretrainCompare => harness::cmd_pretrain_compare(&cfg, out).map(|_| ()),
        Cmd::DataEfficiency => harness::cmd_data_efficiency(&cfg, out).map(|_| ()),
        Cmd::Ablate { axis } => harness::cmd_ablate(&cfg, out, axis).map(|_| ()),
        Cmd::Emi { channel, quantizers } => harness::cmd_emi(channel, quantizers, out),
        Cmd::Flops => harness::cmd_flops(&cfg, out),
        Cmd::ExportEmbeddings { ckpt } => {
            harness::cmd_export_embeddings(&cfg, out, ckpt.as_deref())
        }
    }
}
