//! `cmn`: train, run, and analyze the cross-modal memory model.

use std::path::PathBuf;
use std::process::exit;

use clap::{Args, Parser, Subcommand};

use cmn_cli::{commands, exit_code, RunConfig, SweepAxis};
use cmn_core::data::{GenerateOptions, Split};
use cmn_core::Result;

#[derive(Parser)]
#[command(
    name = "cmn",
    about = "Cross-modal memory network for image-to-text generation",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Config file + overrides shared by most subcommands.
#[derive(Args)]
struct ConfigArgs {
    /// Key=value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Model preset applied before file/overrides: desk|full.
    #[arg(long)]
    preset: Option<String>,
    /// Override single keys, e.g. --set epochs=3 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(p) = &self.preset {
            cfg.apply_preset(p)?;
        }
        if let Some(path) = &self.config {
            cfg.merge_file(path)?;
        }
        cfg.apply_overrides(&self.sets)?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic glyph-grid corpus.
    GenCorpus {
        /// Output directory for images and manifest.json.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 256)]
        train: usize,
        #[arg(long, default_value_t = 32)]
        val: usize,
        #[arg(long, default_value_t = 64)]
        test: usize,
        #[arg(long, default_value_t = 4)]
        grid: usize,
        #[arg(long, default_value_t = 0.3)]
        abnormal_rate: f64,
        /// Emit patch-vector feature files instead of PGM images.
        #[arg(long)]
        features: bool,
    },
    /// Train a model; writes checkpoints, loss CSV, and a summary.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Generate reports for a split from a checkpoint.
    Generate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Output JSONL path (defaults into the output directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score generations against a manifest's references and labels.
    Evaluate {
        #[arg(long)]
        generations: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Metrics JSON output path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one model per axis value and tabulate BLEU-4 and parameters.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        /// memory_size | queried_k
        #[arg(long)]
        axis: String,
        /// Comma-separated values, e.g. 16,64,256.
        #[arg(long)]
        values: String,
    },
    /// Export per-position memory query traces for one record.
    ExportAttn {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        record: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Report parameter totals and the memory overhead share.
    ParamCount {
        #[command(flatten)]
        config: ConfigArgs,
        /// Compute the share against this total instead of the model's own.
        #[arg(long)]
        total: Option<usize>,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenCorpus {
            out,
            seed,
            train,
            val,
            test,
            grid,
            abnormal_rate,
            features,
        } => {
            let opts = GenerateOptions {
                seed,
                n_train: train,
                n_val: val,
                n_test: test,
                grid,
                abnormal_rate,
                emit_features: features,
            };
            commands::cmd_gen_corpus(&out, &opts)
        }
        Command::Train { config } => {
            let cfg = config.resolve()?;
            commands::cmd_train(&cfg).map(|_| ())
        }
        Command::Generate {
            config,
            checkpoint,
            split,
            out,
        } => {
            let cfg = config.resolve()?;
            let split = Split::parse(&split)?;
            commands::cmd_generate(&cfg, &checkpoint, split, out.as_deref()).map(|_| ())
        }
        Command::Evaluate {
            generations,
            manifest,
            out,
        } => commands::cmd_evaluate(&generations, &manifest, out.as_deref()).map(|_| ()),
        Command::Sweep {
            config,
            axis,
            values,
        } => {
            let cfg = config.resolve()?;
            let axis = SweepAxis::parse(&axis)?;
            let values: Vec<usize> = values
                .split(',')
                .map(|v| {
                    v.trim().parse().map_err(|_| {
                        cmn_core::Error::Argument(format!("bad sweep value `{v}`"))
                    })
                })
                .collect::<Result<_>>()?;
            commands::cmd_sweep(&cfg, axis, &values).map(|_| ())
        }
        Command::ExportAttn {
            config,
            checkpoint,
            record,
            out,
        } => {
            let cfg = config.resolve()?;
            commands::cmd_export_attn(&cfg, &checkpoint, &record, out.as_deref()).map(|_| ())
        }
        Command::ParamCount { config, total } => {
            let cfg = config.resolve()?;
            commands::cmd_param_count(&cfg, total)
        }
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        exit(exit_code(&e));
    }
}
