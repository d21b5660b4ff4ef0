//! `dtal`: prepare entity-resolution datasets, train and transfer matchers,
//! and run partition-sampling active learning with an oracle or a human.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Invalid flags or configuration; exit code 2.
    #[error("config: {0}")]
    Config(String),
    /// Anything that fails after the configuration was accepted; exit code 1.
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "dtal", version, about = "Low-resource deep entity resolution with transfer and active learning")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Flags every run command shares.
#[derive(Clone, Debug, Args)]
pub struct Common {
    /// JSON run configuration; omitted fields take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory; defaults to runs/<command>-<unix time>-seed<seed>.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum AnnotatorKind {
    /// Answers from the dataset's gold train labels.
    Oracle,
    /// Starts the labeling service and waits for a human.
    Serve,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Algo {
    Logreg,
    Gnb,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitName {
    Train,
    Dev,
    Test,
}

#[derive(Clone, Debug, Subcommand)]
pub enum Command {
    /// Generate a seeded synthetic dataset and prepare it.
    Synth {
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Three-attribute, lightly perturbed tables for use as a source.
        #[arg(long)]
        source: bool,
        #[arg(long)]
        entities: Option<usize>,
        /// Split seed; defaults to --seed.
        #[arg(long)]
        split_seed: Option<u64>,
        /// Dataset name; defaults to the output directory name.
        #[arg(long)]
        name: Option<String>,
    },
    /// Block two tables (or ingest a candidate set) and split it 3:1:1.
    Prepare {
        /// CSV with header `id,<attr>,...`.
        #[arg(long)]
        left: PathBuf,
        #[arg(long)]
        right: PathBuf,
        /// CSV of gold `left_id,right_id` matches.
        #[arg(long)]
        matches: Option<PathBuf>,
        /// JSON list of blocking rules.
        #[arg(long, conflicts_with = "candidates")]
        block: Option<PathBuf>,
        /// Published candidate pairs `left_id,right_id[,label]`, used unchanged.
        #[arg(long)]
        candidates: Option<PathBuf>,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
        /// Split seed; overrides the configuration.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        name: Option<String>,
        /// Allow Cartesian products above the safety limit.
        #[arg(long)]
        allow_large: bool,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Supervised training on a prepared dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// `random` or a checkpoint path.
        #[arg(long, default_value = "random")]
        init: String,
        #[command(flatten)]
        common: Common,
    },
    /// Train on labeled sources for use on an unlabeled target.
    Transfer {
        /// Prepared source dataset; repeat for several.
        #[arg(long = "source", required = true)]
        sources: Vec<PathBuf>,
        #[arg(long)]
        target: PathBuf,
        /// Adversarial dataset adaptation through gradient reversal.
        #[arg(long)]
        adapt: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Active learning over the target's train split.
    Active {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = AnnotatorKind::Oracle)]
        annotator: AnnotatorKind,
        /// Sampling size per iteration (even).
        #[arg(long = "K")]
        k: Option<usize>,
        /// Number of iterations.
        #[arg(long = "T")]
        t: Option<usize>,
        /// `random` or a checkpoint path.
        #[arg(long, default_value = "random")]
        init: String,
        /// Port for `--annotator serve`.
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long)]
        token: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Score a checkpoint on one split.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitName::Test)]
        split: SplitName,
        #[command(flatten)]
        common: Common,
    },
    /// Write similarity-feature dumps for every split.
    Features {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Classical matcher on similarity features.
    Baseline {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        algo: Algo,
        /// Existing train feature dump; computed from --data when omitted.
        #[arg(long, requires = "test_features")]
        train_features: Option<PathBuf>,
        #[arg(long, requires = "train_features")]
        test_features: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Run a command once per seed and report mean ± sample std.
    Repeat {
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',', default_values_t = [1u64, 2, 3, 4, 5])]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
        /// The wrapped command and its flags, after `--`.
        #[arg(last = true, required = true)]
        command: Vec<String>,
    },
    /// Synthetic comparison of DTAL, random sampling and Top-K entropy.
    Experiment {
        /// JSON experiment configuration.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve labeling sessions over HTTP.
    Serve {
        /// Directory of prepared datasets, one per subdirectory.
        #[arg(long)]
        data_root: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long)]
        token: Option<String>,
        /// Session journals; unfinished sessions resume on restart.
        #[arg(long)]
        journal_dir: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let argv: Vec<String> = std::env::args().collect();
    match commands::run(cli.command, &argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
