//! `steervec`: generate data, train, extract and sweep bias vectors, evaluate.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use commands::Split;
use config::CommonArgs;

#[derive(Parser)]
#[command(
    name = "steervec",
    version,
    about = "Bias-vector steering for transformer classifiers"
)]
struct Cli {
    #[command(flatten)]
    common: CommonArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write train/val/test files and a manifest.
    GenData,
    /// Train the ERM baseline on a generated dataset.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Difference-in-means candidates and the full field.
    Extract {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Also write the activations behind the means as an STVD dump.
        #[arg(long)]
        export_dump: Option<PathBuf>,
    },
    /// Pick the candidate with the best validation worst-group accuracy.
    Sweep {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Candidate vector file.
        #[arg(long, alias = "candidates")]
        vector: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Group accuracies with or without steering.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        vector: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
        /// Candidate layer, when the vector file holds several.
        #[arg(long)]
        layer: Option<usize>,
    },
    /// Worst- and average-group accuracy for every candidate layer.
    Profile {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, alias = "candidates")]
        vector: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
    },
    /// Build vector files from an STVD activation dump.
    ImportDump {
        #[arg(long)]
        dump: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::Train { .. } => "train",
            Command::Extract { .. } => "extract",
            Command::Sweep { .. } => "sweep",
            Command::Eval { .. } => "eval",
            Command::Profile { .. } => "profile",
            Command::ImportDump { .. } => "import-dump",
        }
    }
}

fn run(cli: &Cli) -> anyhow::Result<PathBuf> {
    let cfg = cli.common.resolve().context("loading configuration")?;
    let out = match &cli.command {
        Command::GenData => commands::gen_data(&cfg),
        Command::Train { data } => commands::train(&cfg, data),
        Command::Extract {
            checkpoint,
            data,
            export_dump,
        } => commands::extract_vectors(&cfg, checkpoint, data, export_dump),
        Command::Sweep {
            checkpoint,
            vector,
            data,
        } => commands::sweep(&cfg, checkpoint, vector, data),
        Command::Eval {
            checkpoint,
            vector,
            data,
            split,
            layer,
        } => commands::eval(
            &cfg,
            checkpoint,
            vector,
            data,
            *split,
            *layer,
            cli.common.mode.is_some(),
        ),
        Command::Profile {
            checkpoint,
            vector,
            data,
            split,
        } => commands::profile(&cfg, checkpoint, vector, data, *split),
        Command::ImportDump { dump, checkpoint } => commands::import(&cfg, dump, checkpoint),
    };
    out.with_context(|| format!("{} failed", cli.command.name()))
}

/// Exit code of the underlying toolkit error; 1 for anything else.
fn exit_code(e: &anyhow::Error) -> u8 {
    e.downcast_ref::<steervec_core::Error>()
        .map_or(1, |e| e.exit_code() as u8)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(out) => {
            println!("wrote {}", out.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
