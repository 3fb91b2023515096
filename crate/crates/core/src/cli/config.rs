use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::CliError;
use crate::engine::{EngineError, PretrainConfig, TtaConfig};
use crate::stream::WorldConfig;
use crate::theory::HarnessConfig;

pub const SCHEMA_VERSION: u32 = 1;

/// Everything one experiment needs, loaded from a TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub run_name: String,
    pub output_dir: PathBuf,
    /// Seeds for target streams and adaptation runs.
    pub seeds: Vec<u64>,
    /// Seed of the source tasks.
    pub data_seed: u64,
    pub world: WorldConfig,
    pub pretrain: PretrainConfig,
    pub tta: TtaConfig,
    pub theorem: HarnessConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            run_name: "default".into(),
            output_dir: PathBuf::from("out"),
            seeds: vec![0],
            data_seed: 0,
            world: WorldConfig::default(),
            pretrain: PretrainConfig::default(),
            tta: TtaConfig::default(),
            theorem: HarnessConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => CliError::Config(format!("{}: config file not found", path.display())),
            _ => CliError::Config(format!("{}: {e}", path.display())),
        })?;
        Self::from_toml(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config types serialize to TOML")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let field = |name: &str, msg: String| Err(CliError::Config(format!("field `{name}`: {msg}")));
        if self.schema_version != SCHEMA_VERSION {
            return field(
                "schema_version",
                format!("unsupported version {} (expected {SCHEMA_VERSION})", self.schema_version),
            );
        }
        if self.run_name.is_empty() || self.run_name.contains(['/', '\\']) {
            return field("run_name", format!("must be a non-empty plain name, got {:?}", self.run_name));
        }
        if self.seeds.is_empty() {
            return field("seeds", "need at least one seed".into());
        }
        if let Err(e) = self.world.validate() {
            return field("world", e.to_string());
        }
        let nested = |section: &str, e: EngineError| match e {
            EngineError::Config { field: f, msg } => CliError::Config(format!("field `{section}.{f}`: {msg}")),
            other => CliError::Config(format!("section `{section}`: {other}")),
        };
        self.tta.validate().map_err(|e| nested("tta", e))?;
        self.pretrain.validate().map_err(|e| nested("pretrain", e))?;
        let t = &self.theorem;
        if t.seeds == 0 || t.d == 0 || t.n_steps == 0 {
            return field("theorem", "seeds, d and n_steps must be positive".into());
        }
        if let Some(a) = t.alphas.iter().find(|a| !(0.0..1.0).contains(*a)) {
            return field("theorem.alphas", format!("each alpha must lie in [0, 1), got {a}"));
        }
        Ok(())
    }

    pub fn data_dir(&self) -> PathBuf {
        self.output_dir.join("data")
    }

    pub fn sources_path(&self) -> PathBuf {
        self.data_dir().join("sources.json")
    }

    pub fn stream_path(&self, mode: &str, seed: u64) -> PathBuf {
        self.data_dir().join(format!("stream-{mode}-seed{seed}.json"))
    }

    pub fn pretrain_dir(&self) -> PathBuf {
        self.output_dir.join("pretrain")
    }

    pub fn run_dir(&self, mode: &str, ablation: &str) -> PathBuf {
        self.output_dir.join("runs").join(&self.run_name).join(mode).join(ablation)
    }

    pub fn theory_dir(&self) -> PathBuf {
        self.output_dir.join("theory")
    }
}
