//! Synthetic multi-source world: Gaussian-mixture source tasks, shifted and
//! open-set target streams, format alignment, surface-form perturbation and
//! task embeddings.

mod align;
mod perturb;
mod target;
mod task;

pub use align::{task_embedding, FormatAligner, Query, Template, CANONICAL_MARKER};
pub use perturb::{perturb, SurfaceForm};
pub use target::{
    gen_target_stream, HiddenLabels, Segment, StreamBatch, StreamMode, StreamSchedule, TargetStream, UnlabeledBatch,
};
pub use task::{gen_source_tasks, LabeledDataset, ShiftParams, SourceTask, TaskFlavor, TaskSpec};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::NumericsError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TaskId(pub u32);

impl std::fmt::Display for TaskId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "task{}", self.0)
    }
}

#[derive(Debug, Error)]
pub enum StreamError {
    #[error("need at least {min} source tasks, got {got}")]
    TooFewSources { min: usize, got: usize },
    #[error("invalid stream parameter: {0}")]
    BadParam(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("could not place {classes} class means at separation {margin} after {tries} tries")]
    Separation { classes: usize, margin: f64, tries: usize },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, StreamError>;

/// Shape and difficulty of the generated world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub dims: usize,
    pub n_sources: usize,
    pub classes_per_task: usize,
    /// Norm of each latent class mean.
    pub mean_radius: f64,
    /// Minimum pairwise distance between a task's latent class means.
    pub min_separation: f64,
    pub cov_scale: f64,
    /// Norm of each task's raw-space offset.
    pub offset_norm: f64,
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub batch_size: usize,
    pub batches_per_segment: usize,
    pub n_segments: usize,
    /// Covariate-shift magnitude for unseen-data streams.
    pub shift: f64,
    /// Translation length per unit of `shift`.
    pub shift_scale: f64,
    /// Extra noise std factor per unit of `shift`.
    pub noise_inflation: f64,
    /// Fraction of an unseen task's classes shared with its base source.
    pub overlap: f64,
    /// Latent displacement of an unseen task's novel class means.
    pub novel_displacement: f64,
    /// Strength of the small extra rotation given to unseen tasks.
    pub novel_rotation: f64,
    pub perturb_strength: f64,
    /// Strength of the per-run orthogonal feature mixing.
    pub mixing_strength: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            dims: 32,
            n_sources: 4,
            classes_per_task: 4,
            mean_radius: 4.0,
            min_separation: 4.0,
            cov_scale: 1.0,
            offset_norm: 8.0,
            train_per_class: 150,
            val_per_class: 50,
            batch_size: 32,
            batches_per_segment: 25,
            n_segments: 8,
            shift: 1.0,
            shift_scale: 1.5,
            noise_inflation: 0.25,
            overlap: 0.5,
            novel_displacement: 2.0,
            novel_rotation: 0.15,
            perturb_strength: 0.1,
            mixing_strength: 0.1,
        }
    }
}

impl WorldConfig {
    /// Global label count: source label spaces are disjoint.
    pub fn n_labels(&self) -> usize {
        self.n_sources * self.classes_per_task
    }

    /// Width of a canonical query (features plus the marker channel).
    pub fn input_dim(&self) -> usize {
        self.dims + 1
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(StreamError::BadParam(m.to_string()));
        if self.dims < 2 {
            return bad("dims must be at least 2");
        }
        if self.n_sources < 2 {
            return Err(StreamError::TooFewSources {
                min: 2,
                got: self.n_sources,
            });
        }
        if self.classes_per_task < 2 {
            return bad("classes_per_task must be at least 2");
        }
        if self.n_sources * self.classes_per_task > 4096 {
            return bad("label space too large");
        }
        for (name, v) in [
            ("mean_radius", self.mean_radius),
            ("cov_scale", self.cov_scale),
            ("offset_norm", self.offset_norm),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return bad(&format!("{name} must be positive"));
            }
        }
        for (name, v) in [
            ("min_separation", self.min_separation),
            ("shift", self.shift),
            ("shift_scale", self.shift_scale),
            ("noise_inflation", self.noise_inflation),
            ("novel_displacement", self.novel_displacement),
            ("novel_rotation", self.novel_rotation),
            ("perturb_strength", self.perturb_strength),
            ("mixing_strength", self.mixing_strength),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(&format!("{name} must be nonnegative"));
            }
        }
        if !(0.0..=1.0).contains(&self.overlap) {
            return bad("overlap must lie in [0, 1]");
        }
        if self.train_per_class == 0 || self.val_per_class == 0 {
            return bad("per-class sample counts must be positive");
        }
        if self.batch_size == 0 || self.batches_per_segment == 0 || self.n_segments == 0 {
            return bad("batch_size, batches_per_segment and n_segments must be positive");
        }
        if self.n_sources > self.dims {
            return bad("need dims ≥ n_sources for orthogonal task offsets");
        }
        Ok(())
    }
}
