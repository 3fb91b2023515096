use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{Result, StreamError, TaskId, WorldConfig};
use crate::numerics::{l2_norm, RngState, Tensor2D};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskFlavor {
    Seen,
    SeenShifted,
    Unseen,
}

/// Covariate shift applied on top of a task's own distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftParams {
    /// Raw-space translation.
    pub translation: Vec<f64>,
    /// Multiplier on the within-class noise std is `1 + noise_inflation`.
    pub noise_inflation: f64,
}

impl ShiftParams {
    pub fn none(dims: usize) -> Self {
        Self {
            translation: vec![0.0; dims],
            noise_inflation: 0.0,
        }
    }

    pub fn is_none(&self) -> bool {
        self.noise_inflation == 0.0 && self.translation.iter().all(|&v| v == 0.0)
    }
}

/// Gaussian-mixture classification task.
///
/// A sample of class `c` is `offset + translation + R (μ_c + s z)` with
/// `z ~ N(0, I)` and `s = cov_scale · (1 + noise_inflation)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: TaskId,
    /// Latent class means, one per class.
    pub means: Vec<Vec<f64>>,
    pub cov_scale: f64,
    pub rotation: Tensor2D,
    pub offset: Vec<f64>,
    /// Global label of each class.
    pub labels: Vec<usize>,
    pub flavor: TaskFlavor,
    pub shift: ShiftParams,
    /// Source task this one was derived from, if any.
    pub base: Option<TaskId>,
}

impl TaskSpec {
    pub fn dims(&self) -> usize {
        self.offset.len()
    }

    pub fn n_classes(&self) -> usize {
        self.means.len()
    }

    /// Noise-free raw-space center of class `c`.
    pub fn class_center(&self, c: usize) -> Vec<f64> {
        let rotated = self.rotation.matvec(&self.means[c]).expect("rotation matches dims");
        rotated
            .iter()
            .zip(&self.offset)
            .zip(&self.shift.translation)
            .map(|((r, o), t)| r + o + t)
            .collect()
    }

    /// One raw sample of class `c`, returned with its global label.
    pub fn sample_class(&self, c: usize, rng: &mut RngState) -> (Vec<f64>, usize) {
        let s = self.cov_scale * (1.0 + self.shift.noise_inflation);
        let latent: Vec<f64> = self.means[c].iter().map(|m| m + s * rng.normal()).collect();
        let rotated = self.rotation.matvec(&latent).expect("rotation matches dims");
        let x = rotated
            .iter()
            .zip(&self.offset)
            .zip(&self.shift.translation)
            .map(|((r, o), t)| r + o + t)
            .collect();
        (x, self.labels[c])
    }

    pub fn sample(&self, rng: &mut RngState) -> (Vec<f64>, usize) {
        let c = rng.below(self.n_classes());
        self.sample_class(c, rng)
    }

    /// Balanced labeled set with `per_class` samples per class, shuffled.
    pub fn dataset(&self, per_class: usize, rng: &mut RngState) -> LabeledDataset {
        let mut items = Vec::with_capacity(per_class * self.n_classes());
        for c in 0..self.n_classes() {
            for _ in 0..per_class {
                items.push(self.sample_class(c, rng));
            }
        }
        rng.shuffle(&mut items);
        let (inputs, labels) = items.into_iter().unzip();
        LabeledDataset { inputs, labels }
    }

    /// Nearest-class-center label of a raw input (the planted-class oracle).
    pub fn oracle_label(&self, x: &[f64]) -> usize {
        let mut best = (0, f64::INFINITY);
        for c in 0..self.n_classes() {
            let d: f64 = self.class_center(c).iter().zip(x).map(|(a, b)| (a - b).powi(2)).sum();
            if d < best.1 {
                best = (c, d);
            }
        }
        self.labels[best.0]
    }

    /// Same task under a different covariate shift.
    pub fn shifted(&self, shift: ShiftParams) -> Self {
        let flavor = if shift.is_none() { self.flavor } else { TaskFlavor::SeenShifted };
        Self {
            shift,
            flavor,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LabeledDataset {
    pub inputs: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceTask {
    pub spec: TaskSpec,
    pub train: LabeledDataset,
    pub val: LabeledDataset,
}

/// Haar-distributed orthogonal matrix via QR with sign correction.
pub(crate) fn random_orthogonal(n: usize, rng: &mut RngState) -> Tensor2D {
    let g = DMatrix::from_fn(n, n, |_, _| rng.normal());
    let qr = g.qr();
    let (q, r) = (qr.q(), qr.r());
    let mut out = Tensor2D::zeros(n, n);
    for j in 0..n {
        let s = if r[(j, j)] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..n {
            out.set(i, j, s * q[(i, j)]);
        }
    }
    out
}

/// `n` random unit-norm directions made mutually orthogonal.
pub(crate) fn orthonormal_directions(n: usize, dims: usize, rng: &mut RngState) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(n);
    while out.len() < n {
        let mut v = rng.normal_vec(dims, 1.0);
        for u in &out {
            let p: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= p * b);
        }
        let norm = l2_norm(&v);
        if norm > 1e-6 {
            out.push(v.into_iter().map(|a| a / norm).collect());
        }
    }
    out
}

pub(crate) fn class_means(cfg: &WorldConfig, rng: &mut RngState) -> Result<Vec<Vec<f64>>> {
    const TRIES: usize = 1000;
    for _ in 0..TRIES {
        let means: Vec<Vec<f64>> = (0..cfg.classes_per_task)
            .map(|_| {
                let v = rng.normal_vec(cfg.dims, 1.0);
                let n = l2_norm(&v);
                v.into_iter().map(|a| a * cfg.mean_radius / n).collect()
            })
            .collect();
        let separated = means.iter().enumerate().all(|(i, a)| {
            means[..i]
                .iter()
                .all(|b| l2_norm(&a.iter().zip(b).map(|(x, y)| x - y).collect::<Vec<_>>()) >= cfg.min_separation)
        });
        if separated {
            return Ok(means);
        }
    }
    Err(StreamError::Separation {
        classes: cfg.classes_per_task,
        margin: cfg.min_separation,
        tries: TRIES,
    })
}

/// `K` seen source tasks with disjoint label ranges, orthogonal offsets and
/// independent random rotations, plus train/validation splits.
pub fn gen_source_tasks(cfg: &WorldConfig, seed: u64) -> Result<Vec<SourceTask>> {
    cfg.validate()?;
    let root = RngState::new(seed);
    let mut offsets_rng = root.fork(0);
    let offsets = orthonormal_directions(cfg.n_sources, cfg.dims, &mut offsets_rng);
    let mut out = Vec::with_capacity(cfg.n_sources);
    for (k, dir) in offsets.iter().enumerate() {
        let mut rng = root.fork(1 + k as u64);
        let n = cfg.classes_per_task;
        let means = class_means(cfg, &mut rng)?;
        let rotation = random_orthogonal(cfg.dims, &mut rng);
        let mut labels: Vec<usize> = (k * n..(k + 1) * n).collect();
        rng.shuffle(&mut labels);
        let spec = TaskSpec {
            task_id: TaskId(k as u32),
            means,
            cov_scale: cfg.cov_scale,
            rotation,
            offset: dir.iter().map(|d| d * cfg.offset_norm).collect(),
            labels,
            flavor: TaskFlavor::Seen,
            shift: ShiftParams::none(cfg.dims),
            base: None,
        };
        let train = spec.dataset(cfg.train_per_class, &mut rng);
        let val = spec.dataset(cfg.val_per_class, &mut rng);
        out.push(SourceTask { spec, train, val });
    }
    Ok(out)
}
