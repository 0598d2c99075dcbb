//! `miuk`: knowledge-graph ingestion, synthetic data, training, evaluation,
//! prediction and gradient verification for the MIUK relation extractor.

mod commands;
mod config;
mod failure;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::Value;

use crate::failure::Failure;

#[derive(Parser, Debug)]
#[command(name = "miuk", version, about = "Document-level relation extraction with knowledge-graph priors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Index an uncertain KG (entity, concept, count) plus descriptions.
    IngestKg {
        /// Tab-separated `entity<TAB>concept<TAB>count` lines.
        #[arg(long)]
        triples: PathBuf,
        /// JSON Lines of `{"name", "text"}` descriptions.
        #[arg(long)]
        desp: PathBuf,
        /// Optional `entity<TAB>type` lines used as fallback descriptions.
        #[arg(long)]
        types: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic corpus with a matching KG.
    Synth {
        /// Generator settings (JSON).
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Train, dev and test fractions.
        #[arg(long, default_value = "0.8,0.1,0.1")]
        split: String,
    },
    /// Train a model; writes checkpoint, history and the effective config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Override a config key, e.g. `--set train.mode.K=5`. Repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Shorthand for `--set train.seed=N`.
        #[arg(long)]
        seed: Option<u64>,
        /// Shorthand for `--set train.epochs=N`.
        #[arg(long)]
        epochs: Option<usize>,
        /// Shorthand for `--set output_dir=DIR`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a checkpoint on a data split.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Inclusive range of K values, e.g. `1..5`; one result row each.
        #[arg(long)]
        k_sweep: Option<String>,
        /// One of: nwi, awi, no-crossview, no-mixedatt, no-entity-desp, no-concept-desp.
        #[arg(long)]
        ablation: Option<String>,
        #[arg(long, value_enum)]
        split: Option<Split>,
        /// Decision threshold; defaults to the one stored with the checkpoint.
        #[arg(long)]
        threshold: Option<f64>,
        /// Also write the result JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Gradient checks, forward oracle and invariant battery.
    Verify {
        #[arg(long, value_enum, default_value = "all")]
        level: Level,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Relations above threshold for every entity pair of a dataset.
    Predict {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        threshold: Option<f64>,
        /// Write predictions here instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Split {
    Train,
    Dev,
    Test,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Level {
    Ops,
    Model,
    All,
}

fn parse_overrides(raw: &[String]) -> Result<Vec<(Vec<String>, Value)>, Failure> {
    raw.iter()
        .map(|s| config::parse_override(s).map_err(|e| Failure::config(format!("--set: {e}"))))
        .collect()
}

fn configure_threads() -> Result<(), Failure> {
    let Ok(raw) = std::env::var("MIUK_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::config(format!("MIUK_THREADS must be a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::config(format!("thread pool: {e}")))
}

fn run(cli: Cli) -> Result<(), Failure> {
    configure_threads()?;
    match cli.command {
        Command::IngestKg {
            triples,
            desp,
            types,
            out,
        } => commands::ingest_kg(&triples, &desp, types.as_deref(), &out),
        Command::Synth {
            config,
            seed,
            out,
            split,
        } => commands::synth(&config, seed, &out, &split),
        Command::Train {
            config,
            overrides,
            seed,
            epochs,
            out,
        } => {
            let mut sets = parse_overrides(&overrides)?;
            if let Some(s) = seed {
                sets.push((vec!["train".into(), "seed".into()], Value::from(s)));
            }
            if let Some(e) = epochs {
                sets.push((vec!["train".into(), "epochs".into()], Value::from(e)));
            }
            if let Some(o) = out {
                sets.push((vec!["output_dir".into()], Value::from(o.to_string_lossy().into_owned())));
            }
            commands::train(&config, &sets)
        }
        Command::Eval {
            config,
            checkpoint,
            overrides,
            k_sweep,
            ablation,
            split,
            threshold,
            out,
        } => commands::eval(
            &config,
            &parse_overrides(&overrides)?,
            &checkpoint,
            commands::EvalOptions {
                k_sweep: k_sweep.as_deref(),
                ablation: ablation.as_deref(),
                split,
                threshold,
                out: out.as_deref(),
            },
        ),
        Command::Verify { level, seed } => commands::verify(
            match level {
                Level::Ops => miuk_core::verify::Level::Ops,
                Level::Model => miuk_core::verify::Level::Model,
                Level::All => miuk_core::verify::Level::All,
            },
            seed,
        ),
        Command::Predict {
            config,
            checkpoint,
            input,
            overrides,
            threshold,
            out,
        } => commands::predict(
            &config,
            &parse_overrides(&overrides)?,
            &checkpoint,
            &input,
            threshold,
            out.as_deref(),
        ),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code.clamp(1, 255) as u8)
        }
    }
}
