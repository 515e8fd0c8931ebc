//! The `impact-gate` command line: corpus import, classification through the
//! gate, offline evaluation, report verification, fixture synthesis and the
//! annotation server.

use std::fmt;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use impact_core::import::Adapter;
use impact_core::prompt::Strategy;

pub mod commands;
pub mod manifest;

pub const EXIT_USAGE: u8 = 1;
pub const EXIT_DATA: u8 = 2;
pub const EXIT_BACKEND: u8 = 3;

/// A failed command and the exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Failure { code: EXIT_USAGE, message: message.into() }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Failure { code: EXIT_DATA, message: message.into() }
    }

    pub fn backend(message: impl Into<String>) -> Self {
        Failure { code: EXIT_BACKEND, message: message.into() }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for Failure {}

#[derive(Debug, Parser)]
#[command(name = "impact-gate", version, about = "Classify the impact of UI actions and gate their execution")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by every subcommand; each overrides the manifest.
#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    /// Run manifest (JSON); relative paths inside resolve against its directory.
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,
    /// Corpus file (JSON Lines); repeatable.
    #[arg(long, global = true)]
    pub corpus: Vec<PathBuf>,
    /// Gold export (JSON Lines).
    #[arg(long, global = true)]
    pub gold: Option<PathBuf>,
    /// Backend name from the backends file; repeatable.
    #[arg(long, global = true)]
    pub backend: Vec<String>,
    /// zero_shot, kap, icl or cot; repeatable.
    #[arg(long, global = true)]
    pub strategy: Vec<Strategy>,
    /// Gate policy file.
    #[arg(long, global = true)]
    pub policy: Option<PathBuf>,
    /// Jaccard threshold for category accuracy.
    #[arg(long, global = true)]
    pub theta: Option<f64>,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Backends file, overriding the manifest's.
    #[arg(long, global = true)]
    pub backends_file: Option<PathBuf>,
    /// Exemplar bank for icl and cot.
    #[arg(long, global = true)]
    pub exemplars: Option<PathBuf>,
    #[arg(long, global = true)]
    pub taxonomy: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Convert trace files into a normalized corpus and print its statistics.
    Import {
        #[command(flatten)]
        common: Common,
        /// Input files.
        paths: Vec<PathBuf>,
        #[arg(long, default_value = "native")]
        adapter: Adapter,
        /// Fold runs of near-identical consecutive screens.
        #[arg(long)]
        dedup: bool,
        #[arg(long, default_value_t = impact_core::trace::DEFAULT_DEDUP_THRESHOLD)]
        dedup_threshold: f64,
    },
    /// Classify traces and emit one gate decision per trace.
    Classify {
        #[command(flatten)]
        common: Common,
        /// Only this trace.
        #[arg(long)]
        trace_id: Option<String>,
    },
    /// Score backends and strategies against gold labels.
    Evaluate {
        #[command(flatten)]
        common: Common,
    },
    /// Re-derive report tables from per-item records and flag inconsistencies.
    Report {
        #[command(flatten)]
        common: Common,
        /// Run directories, or evaluation output directories containing them.
        dirs: Vec<PathBuf>,
    },
    /// Write the deterministic replay fixture (corpus, gold, backends, replay store, manifest).
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Run the annotation service and the gate endpoint.
    Serve {
        #[command(flatten)]
        common: Common,
        /// Listen address, e.g. 127.0.0.1:8080.
        #[arg(long)]
        addr: Option<String>,
        /// Directory holding the event log.
        #[arg(long)]
        data_dir: Option<PathBuf>,
    },
}

pub fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Import { common, paths, adapter, dedup, dedup_threshold } => {
            commands::import(&common, &paths, adapter, dedup.then_some(dedup_threshold))
        }
        Command::Classify { common, trace_id } => commands::classify(&common, trace_id.as_deref()),
        Command::Evaluate { common } => commands::evaluate(&common),
        Command::Report { common, dirs } => commands::report(&common, &dirs),
        Command::Synth { common } => commands::synth(&common),
        Command::Serve { common, addr, data_dir } => commands::serve(&common, addr, data_dir),
    }
}
