//! Multi-source pretraining, the test-time adaptation loop and evaluation.

mod config;
mod evaluate;
mod optim;
mod pretrain;
mod record;
mod tta;

pub use config::{Ablation, Objective, PretrainConfig, TtaConfig};
pub use evaluate::{accuracy, evaluate_stream, source_accuracy, RunSummary, SegmentSummary};
pub use optim::{Adam, Momentum};
pub use pretrain::{linear_probe_accuracy, mtl_pretrain, Pretrained, PretrainReport, TaskReport};
pub use record::{RunRecord, StepRow, RUN_CSV_COLUMNS};
pub use tta::{adapter_set, tta_run};

use thiserror::Error;

use crate::adapters::AdapterError;
use crate::mapk::MapkError;
use crate::numerics::NumericsError;
use crate::objectives::ObjectiveError;
use crate::rac1::Rac1Error;
use crate::stream::StreamError;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("config field `{field}`: {msg}")]
    Config { field: &'static str, msg: String },
    #[error("need at least 2 source tasks, got {0}")]
    TooFewSources(usize),
    #[error("empty stream")]
    EmptyStream,
    #[error("non-finite loss at step {step} after lowering the candidate noise")]
    NonFinite { step: usize },
    #[error("record and labels disagree: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Adapter(#[from] AdapterError),
    #[error(transparent)]
    Rac1(#[from] Rac1Error),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Mapk(#[from] MapkError),
    #[error(transparent)]
    Stream(#[from] StreamError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

pub type Result<T> = std::result::Result<T, EngineError>;
