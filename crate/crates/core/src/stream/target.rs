use serde::{Deserialize, Serialize};

use super::perturb::small_rotation;
use super::task::orthonormal_directions;
use super::{perturb, FormatAligner, Result, ShiftParams, SourceTask, StreamError, SurfaceForm, TaskFlavor, TaskId, TaskSpec, WorldConfig};
use crate::numerics::{l2_norm, RngState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StreamMode {
    UnseenTask,
    UnseenData,
}

impl StreamMode {
    pub fn name(self) -> &'static str {
        match self {
            StreamMode::UnseenTask => "unseen-task",
            StreamMode::UnseenData => "unseen-data",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "unseen-task" => Some(StreamMode::UnseenTask),
            "unseen-data" => Some(StreamMode::UnseenData),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub segment_id: usize,
    pub task: TaskSpec,
    pub n_batches: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamSchedule {
    pub mode: StreamMode,
    pub segments: Vec<Segment>,
}

impl StreamSchedule {
    pub fn n_batches(&self) -> usize {
        self.segments.iter().map(|s| s.n_batches).sum()
    }
}

/// Everything the adaptation loop may see about one batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnlabeledBatch {
    pub inputs: Vec<Vec<f64>>,
    pub canonical_inputs: Vec<Vec<f64>>,
    pub perturbed_inputs: Vec<Vec<f64>>,
    pub templates: Vec<TaskId>,
    pub segment_id: usize,
    pub t: usize,
}

impl UnlabeledBatch {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

/// Ground truth of one batch; only the evaluator reads it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HiddenLabels {
    labels: Vec<usize>,
}

impl HiddenLabels {
    pub fn new(labels: Vec<usize>) -> Self {
        Self { labels }
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }
}

/// Borrowed view pairing a batch with its hidden labels.
#[derive(Debug, Clone, Copy)]
pub struct StreamBatch<'a> {
    pub unlabeled: &'a UnlabeledBatch,
    pub hidden: &'a HiddenLabels,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetStream {
    pub schedule: StreamSchedule,
    pub surface: SurfaceForm,
    batches: Vec<UnlabeledBatch>,
    labels: Vec<HiddenLabels>,
}

impl TargetStream {
    pub fn new(
        schedule: StreamSchedule,
        surface: SurfaceForm,
        batches: Vec<UnlabeledBatch>,
        labels: Vec<HiddenLabels>,
    ) -> Result<Self> {
        if batches.len() != labels.len() || batches.iter().zip(&labels).any(|(b, l)| b.len() != l.labels.len()) {
            return Err(StreamError::BadParam("batches and labels disagree in length".into()));
        }
        Ok(Self {
            schedule,
            surface,
            batches,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.batches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.batches.is_empty()
    }

    /// The label-free view handed to adaptation.
    pub fn unlabeled(&self) -> &[UnlabeledBatch] {
        &self.batches
    }

    pub fn hidden_labels(&self) -> &[HiddenLabels] {
        &self.labels
    }

    pub fn batch(&self, i: usize) -> StreamBatch<'_> {
        StreamBatch {
            unlabeled: &self.batches[i],
            hidden: &self.labels[i],
        }
    }

    pub fn task_ids(&self) -> Vec<TaskId> {
        self.schedule.segments.iter().map(|s| s.task.task_id).collect()
    }

    /// Per-segment metadata as CSV.
    pub fn segments_csv(&self) -> String {
        let mut out = String::from("segment_id,task_id,flavor,base,n_batches,first_t,translation_norm,noise_inflation\n");
        let mut t = 0;
        for s in &self.schedule.segments {
            let flavor = match s.task.flavor {
                TaskFlavor::Seen => "seen",
                TaskFlavor::SeenShifted => "seen-shifted",
                TaskFlavor::Unseen => "unseen",
            };
            let base = s.task.base.map(|b| b.0.to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                s.segment_id,
                s.task.task_id.0,
                flavor,
                base,
                s.n_batches,
                t,
                l2_norm(&s.task.shift.translation),
                s.task.shift.noise_inflation
            ));
            t += s.n_batches;
        }
        out
    }
}

/// Unit direction inside the span of the task's rotated class means.
fn in_class_span(spec: &TaskSpec, rng: &mut RngState) -> Vec<f64> {
    let mut v = vec![0.0; spec.dims()];
    for m in &spec.means {
        let w = rng.normal();
        let r = spec.rotation.matvec(m).expect("rotation matches dims");
        v.iter_mut().zip(&r).for_each(|(a, b)| *a += w * b);
    }
    let n = l2_norm(&v);
    if n < 1e-12 {
        return v;
    }
    v.into_iter().map(|a| a / n).collect()
}

fn data_shift(spec: &TaskSpec, cfg: &WorldConfig, rng: &mut RngState) -> ShiftParams {
    if cfg.shift == 0.0 {
        return ShiftParams::none(spec.dims());
    }
    let dir = in_class_span(spec, rng);
    ShiftParams {
        translation: dir.iter().map(|d| d * cfg.shift * cfg.shift_scale).collect(),
        noise_inflation: cfg.shift * cfg.noise_inflation,
    }
}

/// Open-set variant of `base`: a shared prefix of classes, displaced novel
/// classes carrying the remaining base labels, and a slightly rotated frame.
fn unseen_task(base: &TaskSpec, id: TaskId, cfg: &WorldConfig, rng: &mut RngState) -> TaskSpec {
    let n = base.n_classes();
    let n_shared = ((cfg.overlap * n as f64) - 1e-9).ceil().max(0.0) as usize;
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    let dirs = orthonormal_directions(n, base.dims(), rng);
    let mut means = base.means.clone();
    for (i, &c) in order.iter().enumerate().skip(n_shared) {
        means[c] = means[c]
            .iter()
            .zip(&dirs[i])
            .map(|(m, d)| m + cfg.novel_displacement * d)
            .collect();
    }
    let extra = small_rotation(base.dims(), cfg.novel_rotation, rng);
    TaskSpec {
        task_id: id,
        means,
        rotation: base.rotation.matmul(&extra).expect("square rotations"),
        flavor: TaskFlavor::Unseen,
        shift: ShiftParams::none(base.dims()),
        base: Some(base.task_id),
        ..base.clone()
    }
}

/// Non-stationary target stream anchored on one seeded source task.
///
/// Unseen-data segments replay the anchor task under a fresh covariate shift
/// each; unseen-task segments alternate between two open-set variants of the
/// anchor, each with a new task id.
pub fn gen_target_stream(
    sources: &[SourceTask],
    aligner: &FormatAligner,
    mode: StreamMode,
    cfg: &WorldConfig,
    seed: u64,
) -> Result<TargetStream> {
    cfg.validate()?;
    if sources.is_empty() {
        return Err(StreamError::TooFewSources { min: 1, got: 0 });
    }
    let mode_stream = match mode {
        StreamMode::UnseenTask => 1000,
        StreamMode::UnseenData => 2000,
    };
    let root = RngState::new(seed).fork(mode_stream);
    let surface = SurfaceForm::random(cfg.dims, cfg.mixing_strength, &mut root.fork(0));
    let base = &sources[root.fork(1).below(sources.len())].spec;

    let max_id = sources.iter().map(|s| s.spec.task_id.0).max().unwrap_or(0);
    let variants: Vec<TaskSpec> = match mode {
        StreamMode::UnseenData => Vec::new(),
        StreamMode::UnseenTask => (0..2)
            .map(|v| unseen_task(base, TaskId(max_id + 1 + v), cfg, &mut root.fork(500 + u64::from(v))))
            .collect(),
    };
    let mut segments = Vec::with_capacity(cfg.n_segments);
    for i in 0..cfg.n_segments {
        let mut rng = root.fork(10 + i as u64);
        let task = match mode {
            StreamMode::UnseenData => base.shifted(data_shift(base, cfg, &mut rng)),
            StreamMode::UnseenTask => variants[i % variants.len()].clone(),
        };
        segments.push(Segment {
            segment_id: i,
            task,
            n_batches: cfg.batches_per_segment,
        });
    }

    let mut batches = Vec::new();
    let mut labels = Vec::new();
    let mut t = 0;
    for seg in &segments {
        let mut rng = root.fork(100_000 + seg.segment_id as u64);
        for _ in 0..seg.n_batches {
            let (inputs, ys): (Vec<Vec<f64>>, Vec<usize>) =
                (0..cfg.batch_size).map(|_| seg.task.sample(&mut rng)).unzip();
            let mut canonical_inputs = Vec::with_capacity(inputs.len());
            let mut perturbed_inputs = Vec::with_capacity(inputs.len());
            let mut templates = Vec::with_capacity(inputs.len());
            for x in &inputs {
                let (c, tid) = aligner.canonicalize(x);
                let mut p = perturb(&c[..cfg.dims], cfg.perturb_strength, &surface, &mut rng);
                p.extend_from_slice(&c[cfg.dims..]);
                canonical_inputs.push(c);
                perturbed_inputs.push(p);
                templates.push(tid);
            }
            batches.push(UnlabeledBatch {
                inputs,
                canonical_inputs,
                perturbed_inputs,
                templates,
                segment_id: seg.segment_id,
                t,
            });
            labels.push(HiddenLabels::new(ys));
            t += 1;
        }
    }
    TargetStream::new(StreamSchedule { mode, segments }, surface, batches, labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stream::gen_source_tasks;

    fn world(cfg: &WorldConfig) -> (Vec<SourceTask>, FormatAligner) {
        let s = gen_source_tasks(cfg, 11).unwrap();
        let a = FormatAligner::from_sources(&s).unwrap();
        (s, a)
    }

    fn small() -> WorldConfig {
        WorldConfig {
            batches_per_segment: 3,
            n_segments: 5,
            ..WorldConfig::default()
        }
    }

    #[test]
    fn reproducible_streams() {
        let cfg = small();
        let (s, a) = world(&cfg);
        for mode in [StreamMode::UnseenData, StreamMode::UnseenTask] {
            let x = gen_target_stream(&s, &a, mode, &cfg, 3).unwrap();
            let y = gen_target_stream(&s, &a, mode, &cfg, 3).unwrap();
            assert_eq!(x, y);
            assert_eq!(x.len(), 15);
            for i in 0..x.len() {
                let b = x.batch(i);
                assert_eq!(b.unlabeled.len(), cfg.batch_size);
                assert_eq!(b.unlabeled.canonical_inputs.len(), b.hidden.labels().len());
                assert_eq!(b.unlabeled.perturbed_inputs.len(), cfg.batch_size);
                assert_eq!(b.unlabeled.t, i);
            }
        }
    }

    #[test]
    fn schedule_flavors() {
        let cfg = small();
        let (s, a) = world(&cfg);
        let src: Vec<TaskId> = s.iter().map(|t| t.spec.task_id).collect();
        let task = gen_target_stream(&s, &a, StreamMode::UnseenTask, &cfg, 3).unwrap();
        assert!(task.task_ids().iter().any(|id| !src.contains(id)));
        assert!(task.schedule.segments.iter().any(|g| g.task.flavor == TaskFlavor::Unseen));
        let data = gen_target_stream(&s, &a, StreamMode::UnseenData, &cfg, 3).unwrap();
        assert!(data.task_ids().iter().all(|id| src.contains(id)));
        assert!(data.schedule.segments.iter().all(|g| g.task.flavor != TaskFlavor::Unseen));
        assert!(data.segments_csv().lines().count() == 1 + cfg.n_segments);
    }

    #[test]
    fn unseen_task_keeps_labels_and_shares_classes() {
        let cfg = small();
        let (s, a) = world(&cfg);
        let stream = gen_target_stream(&s, &a, StreamMode::UnseenTask, &cfg, 8).unwrap();
        let seg = &stream.schedule.segments[0];
        let base = s.iter().find(|t| Some(t.spec.task_id) == seg.task.base).unwrap();
        assert_eq!(seg.task.labels, base.spec.labels);
        let shared = seg.task.means.iter().zip(&base.spec.means).filter(|(a, b)| a == b).count();
        assert_eq!(shared, 2);
    }

    #[test]
    fn null_shift_matches_source_mean() {
        let cfg = WorldConfig {
            shift: 0.0,
            batches_per_segment: 20,
            n_segments: 1,
            ..WorldConfig::default()
        };
        let (s, a) = world(&cfg);
        let stream = gen_target_stream(&s, &a, StreamMode::UnseenData, &cfg, 2).unwrap();
        let task = &stream.schedule.segments[0].task;
        let src = s.iter().find(|t| t.spec.task_id == task.task_id).unwrap();
        let xs: Vec<Vec<f64>> = stream.unlabeled().iter().flat_map(|b| b.inputs.clone()).collect();
        let n = xs.len() as f64;
        let m = src.val.inputs.len() as f64;
        // Two-sample z-test per feature, Bonferroni-corrected at 1%.
        for j in 0..cfg.dims {
            let col = |v: &[Vec<f64>]| -> (f64, f64) {
                let mu = v.iter().map(|x| x[j]).sum::<f64>() / v.len() as f64;
                let var = v.iter().map(|x| (x[j] - mu).powi(2)).sum::<f64>() / (v.len() as f64 - 1.0);
                (mu, var)
            };
            let (m1, v1) = col(&xs);
            let (m2, v2) = col(&src.val.inputs);
            let z = (m1 - m2) / (v1 / n + v2 / m).sqrt();
            assert!(z.abs() < 3.8, "feature {j}: z = {z}");
        }
    }

    #[test]
    fn perturbation_mostly_preserves_planted_class() {
        let cfg = WorldConfig {
            shift: 0.0,
            ..small()
        };
        let (s, a) = world(&cfg);
        let stream = gen_target_stream(&s, &a, StreamMode::UnseenData, &cfg, 4).unwrap();
        let mut agree = 0;
        let mut total = 0;
        for (b, y) in stream.unlabeled().iter().zip(stream.hidden_labels()) {
            let task = &stream.schedule.segments[b.segment_id].task;
            let tpl = a.template(task.task_id).unwrap();
            for (p, label) in b.perturbed_inputs.iter().zip(y.labels()) {
                // Back to raw coordinates of the task's own template.
                let raw: Vec<f64> = p[..cfg.dims].iter().zip(&tpl.mean).zip(&tpl.std).map(|((v, m), s)| v * s + m).collect();
                agree += usize::from(task.oracle_label(&raw) == *label);
                total += 1;
            }
        }
        assert!(agree as f64 / total as f64 >= 0.95, "{agree}/{total}");
    }
}
