//! `mmvl`: generate toy data, train, evaluate, sample and self-check.

mod artifacts;
mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::parse_override;

#[derive(Parser)]
#[command(name = "mmvl", version, about = "Mixture-of-experts multimodal VAE laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every command.
#[derive(Args, Clone, Debug)]
pub struct Common {
    /// Configuration file: `key=value` lines or a JSON object.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the `seed` key.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads; 1 keeps every result bit-reproducible.
    #[arg(long, env = "MMVL_THREADS", default_value_t = 1)]
    pub threads: usize,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overwrite existing artifacts.
    #[arg(long)]
    pub force: bool,
    /// Extra `key=value` override, applied after the file; repeatable.
    #[arg(long = "set", value_parser = parse_override)]
    pub set: Vec<(String, String)>,
}

impl Common {
    /// File overrides, then `--set`, then the dedicated flags.
    pub fn overrides(&self, flags: Vec<(&str, Option<String>)>) -> Vec<(String, String)> {
        let mut out = self.set.clone();
        if let Some(s) = self.seed {
            out.push(("seed".into(), s.to_string()));
        }
        for (k, v) in flags {
            if let Some(v) = v {
                out.push((k.to_string(), v));
            }
        }
        out
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the paired toy dataset, its splits and oracle classifiers.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train a model on a generated dataset.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset directory written by gen-data.
        #[arg(long)]
        data: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        objective: Option<String>,
        #[arg(long)]
        estimator: Option<String>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Sample from a checkpoint: joint, cross-modal or latent traversal.
    Generate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        gen: GenerateArgs,
    },
    /// Latent traversal; same as `generate --mode traverse`.
    Traverse {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        gen: GenerateArgs,
    },
    /// Run the gradient, bound-ordering and estimator-identity checks.
    Verify {
        #[command(flatten)]
        common: Common,
        /// Corrupt one backward rule (negative control).
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
}

#[derive(Args, Clone, Debug)]
pub struct GenerateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset directory; needed for cross and traverse inputs.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// joint, cross or traverse.
    #[arg(long)]
    pub mode: Option<String>,
    /// Prior draws (joint).
    #[arg(long = "r", short = 'R')]
    pub r: Option<usize>,
    /// Likelihood samples per draw (joint).
    #[arg(long = "n", short = 'N')]
    pub n: Option<usize>,
    #[arg(long)]
    pub source: Option<usize>,
    #[arg(long)]
    pub target: Option<usize>,
    /// Latent coordinate to traverse.
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Test rows to cross-generate from.
    #[arg(long)]
    pub rows: Option<usize>,
    /// Test row whose posterior mean anchors a traversal.
    #[arg(long)]
    pub index: Option<usize>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData { common } => commands::gen_data(&common),
        Command::Train {
            common,
            data,
            resume,
            objective,
            estimator,
            k,
            epochs,
        } => commands::train(&common, &data, resume.as_deref(), objective, estimator, k, epochs),
        Command::Eval { common, checkpoint, data } => commands::eval(&common, &checkpoint, &data),
        Command::Generate { common, gen } => commands::generate(&common, &gen, None),
        Command::Traverse { common, gen } => commands::generate(&common, &gen, Some("traverse")),
        Command::Verify { common, inject_fault } => commands::verify(&common, inject_fault.as_deref()),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code as u8)
        }
    }
}
