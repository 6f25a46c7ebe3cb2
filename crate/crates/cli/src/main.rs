//! `kipg`: batch commands for program generation, scoring, preference data
//! and inference over a calculation corpus.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use kipg::gateway::GatewayError;
use kipg::pipeline::{PipelineError, RetrievalMode};
use kipg::preference::PreferenceError;
use kipg::retrieval::RetrievalError;

#[derive(Parser)]
#[command(name = "kipg", version, about = "Knowledge-intensive program generation")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
pub struct Common {
    /// TOML run configuration.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    documents: Option<PathBuf>,
    #[arg(long, global = true)]
    instances: Option<PathBuf>,
    #[arg(long, global = true)]
    programs: Option<PathBuf>,
    #[arg(long, global = true)]
    scores: Option<PathBuf>,
    #[arg(long = "out", global = true)]
    output_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    iteration: Option<u32>,
    #[arg(long, global = true)]
    parallelism: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Validate the corpus and print counts per case type.
    Ingest {
        /// Mark this fraction of the training pool as small_train.
        #[arg(long)]
        small_fraction: Option<f64>,
        /// Where to write the re-split instances (with --small-fraction).
        #[arg(long, requires = "small_fraction")]
        write_instances: Option<PathBuf>,
    },
    /// Sample, parse and lint candidate programs for every document.
    Gen {
        #[arg(long)]
        n_samples: Option<usize>,
    },
    /// Score candidates on the training queries of their documents.
    Score {
        /// Pre-screen on small_train with this threshold.
        #[arg(long)]
        small_set_threshold: Option<f64>,
    },
    /// Turn scores into preference pairs and a training manifest.
    BuildDpo,
    /// Answer instances with the deployed programs.
    Infer {
        #[arg(long)]
        mode: Option<RetrievalMode>,
        /// train, small_train, test or all.
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Score traces against reference answers.
    Eval {
        #[arg(long)]
        traces: Option<PathBuf>,
        /// Also write the line-count/accuracy distribution from scores.json.
        #[arg(long)]
        complexity: bool,
    },
    /// One full generate, score and pair iteration.
    Loop,
}

/// Exit status 2 for failures of a model backend, 1 for everything else.
fn exit_code(err: &anyhow::Error) -> u8 {
    let backend = err.chain().any(|e| {
        let gateway = e
            .downcast_ref::<GatewayError>()
            .or_else(|| match e.downcast_ref::<PipelineError>() {
                Some(PipelineError::Gateway(g)) => Some(g),
                _ => None,
            })
            .or_else(|| match e.downcast_ref::<PreferenceError>() {
                Some(PreferenceError::Gateway(g)) => Some(g),
                Some(PreferenceError::Pipeline(PipelineError::Gateway(g))) => Some(g),
                _ => None,
            })
            .or_else(|| match e.downcast_ref::<RetrievalError>() {
                Some(RetrievalError::Gateway(g)) => Some(g),
                _ => None,
            });
        matches!(gateway, Some(GatewayError::BackendUnavailable { .. }))
    });
    if backend {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Ingest {
            small_fraction,
            write_instances,
        } => commands::ingest(&cli.common, small_fraction, write_instances.as_deref()),
        Command::Gen { n_samples } => commands::gen(&cli.common, n_samples),
        Command::Score {
            small_set_threshold,
        } => commands::score(&cli.common, small_set_threshold),
        Command::BuildDpo => commands::build_dpo(&cli.common),
        Command::Infer { mode, split } => commands::infer(&cli.common, mode, &split),
        Command::Eval { traces, complexity } => commands::eval(&cli.common, traces, complexity),
        Command::Loop => commands::run_loop(&cli.common),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
