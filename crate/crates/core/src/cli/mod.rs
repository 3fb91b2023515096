//! Command-line front end.
//!
//! Exit codes: 0 success, 1 verification or runtime failure, 2 config or
//! usage error, 3 missing inputs, 4 corrupt artifact.

mod commands;
mod config;

pub use commands::{
    adapt, gen_data, load_pretrained, pretrain, truth_table, verify_theorem, AdaptSummary, Checkpoint, PretrainSummary,
    SeedSummary, SourceDump, StreamDump, TheoremOutput, MODES, TRUTH_TABLE_COLUMNS,
};
pub use config::{ExperimentConfig, SCHEMA_VERSION};

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use crate::engine::Ablation;
use crate::stream::StreamMode;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Verification(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("missing input: {0}")]
    Missing(String),
    #[error("corrupt artifact: {0}")]
    Corrupt(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Verification(_) | CliError::Runtime(_) => 1,
            CliError::Config(_) => 2,
            CliError::Missing(_) => 3,
            CliError::Corrupt(_) => 4,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "syco", version, about = "Masked SVD-adapter test-time adaptation on synthetic open-set streams")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Experiment config (TOML, schema version 1); built-in defaults if omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides `output_dir`.
    #[arg(long, global = true)]
    pub output_dir: Option<PathBuf>,
    /// Overrides `run_name`.
    #[arg(long, global = true)]
    pub run_name: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate source datasets and target streams.
    GenData {
        /// Comma-separated stream seeds; overrides `seeds`.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Multi-source pretraining; writes checkpoint, library and guardrail set.
    Pretrain,
    /// Adapt on the generated streams and write per-step records.
    Adapt {
        #[arg(long, default_value = "unseen-data")]
        mode: String,
        #[arg(long, default_value = "none")]
        ablation: String,
        /// Comma-separated seeds; overrides `seeds`.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Check the projected-gradient stationarity bound on certified test problems.
    VerifyTheorem {
        /// Comma-separated mask ratios.
        #[arg(long, value_delimiter = ',')]
        alpha: Option<Vec<f64>>,
        /// Number of seeds.
        #[arg(long)]
        seeds: Option<usize>,
        /// Scales the certified smoothness constant (negative control).
        #[arg(long, hide = true)]
        beta_scale: Option<f64>,
    },
    /// Print the gating truth table as CSV.
    TruthTable {
        /// Also write the table to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(common: &Common) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(d) = &common.output_dir {
        cfg.output_dir = d.clone();
    }
    if let Some(n) = &common.run_name {
        cfg.run_name = n.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn parse_mode(s: &str) -> Result<StreamMode, CliError> {
    StreamMode::parse(s).ok_or_else(|| CliError::Config(format!("unknown mode {s:?}; valid modes: unseen-task, unseen-data")))
}

fn parse_ablation(s: &str) -> Result<Ablation, CliError> {
    Ablation::parse(s)
        .ok_or_else(|| CliError::Config(format!("unknown ablation {s:?}; valid names: {}", Ablation::names().join(", "))))
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = load_config(&cli.common)?;
    match cli.command {
        Command::GenData { seeds } => {
            if let Some(s) = seeds {
                cfg.seeds = s;
            }
            cfg.validate()?;
            for p in gen_data(&cfg)? {
                println!("wrote {}", p.display());
            }
        }
        Command::Pretrain => {
            let s = pretrain(&cfg)?;
            for (task, acc) in &s.accuracies {
                println!("{task}: validation accuracy {acc:.4}");
            }
            println!("wrote {}", cfg.pretrain_dir().display());
        }
        Command::Adapt { mode, ablation, seeds } => {
            let mode = parse_mode(&mode)?;
            let ablation = parse_ablation(&ablation)?;
            if let Some(s) = seeds {
                cfg.seeds = s;
            }
            cfg.validate()?;
            let s = adapt(&cfg, mode, ablation)?;
            for r in &s.seeds {
                println!(
                    "seed {}: accuracy {:.4}, retention delta {:+.4}",
                    r.seed, r.summary.accuracy, r.summary.retention_delta
                );
            }
            println!("mean accuracy {:.4}", s.mean_accuracy);
        }
        Command::VerifyTheorem { alpha, seeds, beta_scale } => {
            if let Some(a) = alpha {
                cfg.theorem.alphas = a;
            }
            if let Some(n) = seeds {
                cfg.theorem.seeds = n;
            }
            if let Some(b) = beta_scale {
                cfg.theorem.beta_scale = b;
            }
            cfg.validate()?;
            let report = verify_theorem(&cfg)?;
            let worst = report
                .rows
                .iter()
                .flat_map(|r| &r.cases)
                .map(|c| c.max_prefix_ratio)
                .fold(0.0, f64::max);
            println!(
                "{} seeds, alphas {:?}: worst prefix ratio {worst:.6}, identity tightness {:.12}",
                report.rows.len(),
                cfg.theorem.alphas,
                report.identity_tightness
            );
            if !report.pass {
                return Err(CliError::Verification("bound verification failed; see report.json".into()));
            }
            println!("all bounds hold");
        }
        Command::TruthTable { out } => {
            let table = truth_table(&cfg);
            print!("{table}");
            if let Some(p) = out {
                crate::persist::write_bytes(&p, table.as_bytes()).map_err(|e| CliError::Runtime(e.to_string()))?;
            }
        }
    }
    Ok(())
}

/// Parses arguments, runs, and maps errors to exit codes.
pub fn main_entry() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
