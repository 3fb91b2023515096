use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{CliError, ExperimentConfig};
use crate::adapters::{TaLoraAdapter, ToyBackbone};
use crate::engine::{evaluate_stream, mtl_pretrain, tta_run, Ablation, Pretrained, PretrainReport, RunSummary, TtaConfig};
use crate::mapk::{activation_events, signal_trace_csv};
use crate::objectives::GuardrailSet;
use crate::persist;
use crate::rac1::{SourceLibrary, SourceEntry};
use crate::stream::{gen_source_tasks, gen_target_stream, FormatAligner, SourceTask, StreamMode, TargetStream, TaskId};
use crate::theory::{run_harness, VerificationReport};

pub const MODES: [StreamMode; 2] = [StreamMode::UnseenTask, StreamMode::UnseenData];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceDump {
    pub schema_version: u32,
    pub config: ExperimentConfig,
    pub sources: Vec<SourceTask>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamDump {
    pub schema_version: u32,
    pub config: ExperimentConfig,
    pub mode: StreamMode,
    pub seed: u64,
    pub stream: TargetStream,
}

/// Frozen model plus the alignment it was trained under.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: ExperimentConfig,
    pub backbone: ToyBackbone,
    pub talora: Vec<Vec<TaLoraAdapter>>,
    pub aligner: FormatAligner,
    pub report: PretrainReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainSummary {
    pub config: ExperimentConfig,
    pub accuracies: Vec<(TaskId, f64)>,
    pub report: PretrainReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub retrieved_task: TaskId,
    pub summary: RunSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptSummary {
    pub config: ExperimentConfig,
    pub mode: StreamMode,
    pub ablation: Ablation,
    pub effective_tta: TtaConfig,
    pub mean_accuracy: f64,
    pub mean_retention_delta: f64,
    pub seeds: Vec<SeedSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoremOutput {
    pub config: ExperimentConfig,
    pub report: VerificationReport,
}

fn persist_err(e: persist::PersistError) -> CliError {
    match e {
        persist::PersistError::Missing(p) => CliError::Missing(format!("{}: not found (run the earlier stage first)", p.display())),
        persist::PersistError::Corrupt { path, reason } => CliError::Corrupt(format!("{}: {reason}", path.display())),
        other => CliError::Runtime(other.to_string()),
    }
}

fn runtime<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Runtime(e.to_string())
}

fn write_text(path: &PathBuf, text: &str) -> Result<(), CliError> {
    persist::write_bytes(path, text.as_bytes()).map_err(persist_err)
}

/// Writes source datasets and one stream per mode and seed; returns the written paths.
pub fn gen_data(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>, CliError> {
    let sources = gen_source_tasks(&cfg.world, cfg.data_seed).map_err(runtime)?;
    let aligner = FormatAligner::from_sources(&sources).map_err(runtime)?;
    let mut written = Vec::new();
    let dump = SourceDump {
        schema_version: super::SCHEMA_VERSION,
        config: cfg.clone(),
        sources: sources.clone(),
    };
    let path = cfg.sources_path();
    persist::write_bytes(&path, &serde_json::to_vec(&dump).map_err(runtime)?).map_err(persist_err)?;
    written.push(path);
    for mode in MODES {
        for &seed in &cfg.seeds {
            let stream = gen_target_stream(&sources, &aligner, mode, &cfg.world, seed).map_err(runtime)?;
            let path = cfg.stream_path(mode.name(), seed);
            let csv = path.with_extension("segments.csv");
            write_text(&csv, &stream.segments_csv())?;
            let dump = StreamDump {
                schema_version: super::SCHEMA_VERSION,
                config: cfg.clone(),
                mode,
                seed,
                stream,
            };
            persist::write_bytes(&path, &serde_json::to_vec(&dump).map_err(runtime)?).map_err(persist_err)?;
            written.push(path);
        }
    }
    Ok(written)
}

fn load_sources(cfg: &ExperimentConfig) -> Result<Vec<SourceTask>, CliError> {
    let dump: SourceDump = persist::load_json(&cfg.sources_path()).map_err(persist_err)?;
    Ok(dump.sources)
}

pub fn pretrain(cfg: &ExperimentConfig) -> Result<PretrainSummary, CliError> {
    let sources = load_sources(cfg)?;
    let pre = mtl_pretrain(&sources, &cfg.tta, &cfg.pretrain).map_err(runtime)?;
    for w in &pre.report.warnings {
        log::warn!("{w}");
    }
    let dir = cfg.pretrain_dir();
    let ckpt = Checkpoint {
        config: cfg.clone(),
        backbone: pre.backbone.clone(),
        talora: pre.talora.clone(),
        aligner: pre.aligner.clone(),
        report: pre.report.clone(),
    };
    persist::save(&dir.join("checkpoint.syco"), &ckpt).map_err(persist_err)?;
    persist::save(&dir.join("library.syco"), &pre.library).map_err(persist_err)?;
    persist::save(&dir.join("guardrail.syco"), &pre.guardrail).map_err(persist_err)?;
    let summary = PretrainSummary {
        config: cfg.clone(),
        accuracies: pre.report.tasks.iter().map(|t| (t.task_id, t.joint_accuracy)).collect(),
        report: pre.report,
    };
    persist::save_json(&dir.join("summary.json"), &summary).map_err(persist_err)?;
    Ok(summary)
}

/// Reloads and verifies the pretraining artifacts.
pub fn load_pretrained(cfg: &ExperimentConfig) -> Result<Pretrained, CliError> {
    let dir = cfg.pretrain_dir();
    let ckpt: Checkpoint = persist::load(&dir.join("checkpoint.syco")).map_err(persist_err)?;
    let library: SourceLibrary = persist::load(&dir.join("library.syco")).map_err(persist_err)?;
    let guardrail: GuardrailSet = persist::load(&dir.join("guardrail.syco")).map_err(persist_err)?;
    // Re-run the constructor checks on the decoded entries.
    let entries: Vec<SourceEntry> = library.entries().to_vec();
    let library = SourceLibrary::new(entries).map_err(|e| CliError::Corrupt(format!("library: {e}")))?;
    Ok(Pretrained {
        backbone: ckpt.backbone,
        talora: ckpt.talora,
        library,
        guardrail,
        aligner: ckpt.aligner,
        report: ckpt.report,
    })
}

pub fn adapt(cfg: &ExperimentConfig, mode: StreamMode, ablation: Ablation) -> Result<AdaptSummary, CliError> {
    let pre = load_pretrained(cfg)?;
    let sources = load_sources(cfg)?;
    let val = pre.canonical_validation(&sources);
    let tta = ablation.apply(&cfg.tta);
    let dir = cfg.run_dir(mode.name(), ablation.name());
    let streams = cfg
        .seeds
        .iter()
        .map(|&seed| {
            let dump: StreamDump = persist::load_json(&cfg.stream_path(mode.name(), seed)).map_err(persist_err)?;
            Ok((seed, dump.stream))
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let results = streams
        .par_iter()
        .map(|(seed, stream)| {
            let run_cfg = TtaConfig { seed: *seed, ..tta.clone() };
            let record = tta_run(&pre.backbone, &pre.library, &pre.guardrail, stream.unlabeled(), &run_cfg).map_err(runtime)?;
            let summary = evaluate_stream(&record, stream.hidden_labels(), &pre.backbone, &val).map_err(runtime)?;
            Ok((*seed, record, summary))
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let mut seeds = Vec::with_capacity(results.len());
    for (seed, record, summary) in results {
        let seed_dir = dir.join(format!("seed{seed}"));
        write_text(&seed_dir.join("steps.csv"), &record.steps_csv(&summary))?;
        write_text(&seed_dir.join("signals.csv"), &signal_trace_csv(&record.controller_steps()))?;
        let s = SeedSummary {
            seed,
            retrieved_task: record.retrieved_task,
            summary,
        };
        persist::save_json(&seed_dir.join("summary.json"), &s).map_err(persist_err)?;
        seeds.push(s);
    }
    let n = seeds.len() as f64;
    let out = AdaptSummary {
        config: cfg.clone(),
        mode,
        ablation,
        effective_tta: tta,
        mean_accuracy: seeds.iter().map(|s| s.summary.accuracy).sum::<f64>() / n,
        mean_retention_delta: seeds.iter().map(|s| s.summary.retention_delta).sum::<f64>() / n,
        seeds,
    };
    persist::save_json(&dir.join("summary.json"), &out).map_err(persist_err)?;
    Ok(out)
}

pub fn verify_theorem(cfg: &ExperimentConfig) -> Result<VerificationReport, CliError> {
    let (report, csv) = run_harness(&cfg.theorem).map_err(runtime)?;
    let dir = cfg.theory_dir();
    let out = TheoremOutput {
        config: cfg.clone(),
        report,
    };
    persist::save_json(&dir.join("report.json"), &out).map_err(persist_err)?;
    write_text(&dir.join("trajectories.csv"), &csv)?;
    Ok(out.report)
}

pub const TRUTH_TABLE_COLUMNS: [&str; 6] = ["E_H", "E_P", "E_C", "A_p", "A_f", "multiplier"];

pub fn truth_table(cfg: &ExperimentConfig) -> String {
    let gate = cfg.tta.gate();
    let mut out = TRUTH_TABLE_COLUMNS.join(",") + "\n";
    for bits in 0..8u8 {
        let (h, p, c) = (bits & 4 != 0, bits & 2 != 0, bits & 1 != 0);
        let a = activation_events(h, p, c);
        out += &format!(
            "{},{},{},{},{},{}\n",
            u8::from(h),
            u8::from(p),
            u8::from(c),
            u8::from(a.a_p),
            u8::from(a.a_f),
            gate.multiplier(a)
        );
    }
    out
}
