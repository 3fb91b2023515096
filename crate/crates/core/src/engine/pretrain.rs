use serde::{Deserialize, Serialize};

use super::optim::{Adam, Momentum};
use super::{EngineError, PretrainConfig, Result, TtaConfig};
use crate::adapters::{init_svd_adapter, Adapter, BackboneGrads, SvdAdapter, TaLoraAdapter, ToyBackbone};
use crate::numerics::{log_softmax, RngState, Tensor2D};
use crate::objectives::{margins, GuardExample, GuardrailSet};
use crate::rac1::{SourceEntry, SourceLibrary};
use crate::stream::{task_embedding, FormatAligner, LabeledDataset, SourceTask, TaskId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    pub task_id: TaskId,
    /// Linear probe on the canonical inputs (learnability check).
    pub probe_accuracy: f64,
    /// Backbone with the task's TA-LoRA branch after the joint phase.
    pub joint_accuracy: f64,
    /// Backbone with no adapter.
    pub backbone_accuracy: f64,
    /// Backbone with the task's SVD source adapter.
    pub source_adapter_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub tasks: Vec<TaskReport>,
    pub guardrail_size: usize,
    pub warnings: Vec<String>,
}

/// Everything adaptation needs from the source phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pretrained {
    pub backbone: ToyBackbone,
    /// TA-LoRA branch of each task, one adapter per slot.
    pub talora: Vec<Vec<TaLoraAdapter>>,
    pub library: SourceLibrary,
    pub guardrail: GuardrailSet,
    pub aligner: FormatAligner,
    pub report: PretrainReport,
}

impl Pretrained {
    /// Source tasks' validation splits in canonical coordinates, concatenated.
    pub fn canonical_validation(&self, sources: &[SourceTask]) -> LabeledDataset {
        let mut out = LabeledDataset::default();
        for s in sources {
            let d = canonical(&self.aligner, s, &s.val);
            out.inputs.extend(d.inputs);
            out.labels.extend(d.labels);
        }
        out
    }
}

pub(crate) fn canonical(aligner: &FormatAligner, task: &SourceTask, data: &LabeledDataset) -> LabeledDataset {
    let t = aligner.template(task.spec.task_id).expect("aligner built from these sources");
    LabeledDataset {
        inputs: data.inputs.iter().map(|x| FormatAligner::standardize(t, x)).collect(),
        labels: data.labels.clone(),
    }
}

fn set_backbone_params(m: &mut ToyBackbone, p: &[f64]) {
    let mut off = 0;
    for l in m.hidden.iter_mut().chain(std::iter::once(&mut m.head)) {
        let n = l.weight.data().len();
        l.weight.data_mut().copy_from_slice(&p[off..off + n]);
        off += n;
        let nb = l.bias.len();
        l.bias.copy_from_slice(&p[off..off + nb]);
        off += nb;
    }
}

fn grads_flat(g: &BackboneGrads) -> Vec<f64> {
    let mut out = Vec::new();
    for (w, b) in g.hidden_weight.iter().zip(&g.hidden_bias) {
        out.extend_from_slice(w.data());
        out.extend_from_slice(b);
    }
    out.extend_from_slice(g.head_weight.data());
    out.extend_from_slice(&g.head_bias);
    out
}

fn accuracy_with(m: &ToyBackbone, adapters: &[Option<Adapter>], data: &LabeledDataset) -> Result<f64> {
    let mut hits = 0;
    for (x, &y) in data.inputs.iter().zip(&data.labels) {
        hits += usize::from(m.predict(x, adapters)?.argmax() == y);
    }
    Ok(hits as f64 / data.len().max(1) as f64)
}

/// Cross-entropy backprop of one labeled sample into `grads`.
fn ce_backward(
    m: &ToyBackbone,
    adapters: &[Option<Adapter>],
    x: &[f64],
    y: usize,
    scale: f64,
    grads: &mut BackboneGrads,
) -> Result<f64> {
    let trace = m.forward(x, adapters)?;
    let lp = log_softmax(&trace.logits, 1.0)?;
    let dz: Vec<f64> = lp
        .iter()
        .enumerate()
        .map(|(k, l)| l.exp() - if k == y { 1.0 } else { 0.0 })
        .collect();
    m.backward(&trace, adapters, &dz, None, scale, grads);
    Ok(-lp[y])
}

/// Softmax regression on one task's own classes; returns validation accuracy.
pub fn linear_probe_accuracy(train: &LabeledDataset, val: &LabeledDataset) -> f64 {
    let mut classes: Vec<usize> = train.labels.clone();
    classes.sort_unstable();
    classes.dedup();
    let local = |y: usize| classes.binary_search(&y).ok();
    let d = train.inputs.first().map_or(0, Vec::len);
    let k = classes.len();
    let mut w = Tensor2D::zeros(k, d);
    let mut b = vec![0.0; k];
    let lr = 0.5;
    let n = train.len() as f64;
    for _ in 0..200 {
        let mut gw = Tensor2D::zeros(k, d);
        let mut gb = vec![0.0; k];
        for (x, &y) in train.inputs.iter().zip(&train.labels) {
            let z: Vec<f64> = w.matvec(x).expect("probe width").iter().zip(&b).map(|(a, c)| a + c).collect();
            let lp = log_softmax(&z, 1.0).expect("finite logits");
            let yl = local(y).expect("train label");
            let dz: Vec<f64> = lp.iter().enumerate().map(|(j, l)| l.exp() - f64::from(u8::from(j == yl))).collect();
            gw.add_outer(1.0 / n, &dz, x);
            gb.iter_mut().zip(&dz).for_each(|(g, v)| *g += v / n);
        }
        w.axpy(-lr, &gw).expect("same shape");
        b.iter_mut().zip(&gb).for_each(|(p, g)| *p -= lr * g);
    }
    let mut hits = 0;
    for (x, &y) in val.inputs.iter().zip(&val.labels) {
        let z: Vec<f64> = w.matvec(x).expect("probe width").iter().zip(&b).map(|(a, c)| a + c).collect();
        let pred = z
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (j, &v)| if v > acc.1 { (j, v) } else { acc })
            .0;
        hits += usize::from(local(y) == Some(pred));
    }
    hits as f64 / val.len().max(1) as f64
}

fn minibatch<'a>(data: &'a LabeledDataset, n: usize, rng: &mut RngState) -> Vec<(&'a [f64], usize)> {
    (0..n)
        .map(|_| {
            let i = rng.below(data.len());
            (data.inputs[i].as_slice(), data.labels[i])
        })
        .collect()
}

/// Joint phase: backbone, shared `B` per slot and per-task `(u_k, v_k)`
/// trained on the uniformly weighted sum of per-task cross-entropies, with
/// the adapter gate ramped linearly from 0.
fn joint_phase(
    train: &[LabeledDataset],
    input_dim: usize,
    n_labels: usize,
    cfg: &PretrainConfig,
    rng: &mut RngState,
) -> Result<(ToyBackbone, Vec<Vec<TaLoraAdapter>>)> {
    let mut model = ToyBackbone::random(input_dim, &cfg.hidden_widths, n_labels, rng);
    let shapes = model.slot_shapes();
    let r = cfg.talora_rank;
    let k = train.len();
    let mut shared: Vec<Tensor2D> = shapes
        .iter()
        .map(|&(o, _)| Tensor2D::randn(o, r, 1.0 / (r as f64).sqrt(), rng))
        .collect();
    let mut uv: Vec<Vec<(Vec<f64>, Vec<f64>)>> = (0..k)
        .map(|_| {
            shapes
                .iter()
                .map(|&(_, i)| (rng.normal_vec(r, 1.0 / (r as f64).sqrt()), rng.normal_vec(i, 1.0 / (i as f64).sqrt())))
                .collect()
        })
        .collect();

    let mut backbone_opt = Momentum::new(model.weights_flat().len(), cfg.phase_a_lr, cfg.phase_a_momentum);
    let mut shared_opt: Vec<Momentum> = shared
        .iter()
        .map(|b| Momentum::new(b.data().len(), cfg.phase_a_lr, cfg.phase_a_momentum))
        .collect();
    let mut uv_opt: Vec<Vec<Momentum>> = uv
        .iter()
        .map(|task| {
            task.iter()
                .map(|(u, v)| Momentum::new(u.len() + v.len(), cfg.phase_a_lr, cfg.phase_a_momentum))
                .collect()
        })
        .collect();

    let ramp_steps = (cfg.gate_ramp * cfg.phase_a_steps as f64).ceil();
    let gate_at = |s: usize| if ramp_steps == 0.0 { 1.0 } else { (s as f64 / ramp_steps).min(1.0) };
    let build = |shared: &[Tensor2D], uv: &[(Vec<f64>, Vec<f64>)], gate: f64| -> Result<Vec<TaLoraAdapter>> {
        shared
            .iter()
            .zip(uv)
            .map(|(b, (u, v))| Ok(TaLoraAdapter::new(b.clone(), u.clone(), v.clone(), gate)?))
            .collect()
    };

    let weight = 1.0 / k as f64;
    for s in 0..cfg.phase_a_steps {
        let gate = gate_at(s);
        let mut total = BackboneGrads::zeros_like(&model);
        let mut shared_grad: Vec<Vec<f64>> = shared.iter().map(|b| vec![0.0; b.data().len()]).collect();
        let mut uv_grads: Vec<Vec<Vec<f64>>> = Vec::with_capacity(k);
        for (task, data) in train.iter().enumerate() {
            let adapters: Vec<Option<Adapter>> = build(&shared, &uv[task], gate)?.into_iter().map(|a| Some(Adapter::TaLora(a))).collect();
            let mut g = BackboneGrads::zeros_like(&model);
            let batch = minibatch(data, cfg.phase_a_task_batch, rng);
            let scale = weight / batch.len() as f64;
            for (x, y) in batch {
                ce_backward(&model, &adapters, x, y, scale, &mut g)?;
            }
            let mut per_slot = Vec::with_capacity(shapes.len());
            for (l, a) in adapters.iter().enumerate() {
                let a = a.as_ref().expect("every slot adapted");
                let p = a.grads_from_delta(&g.hidden_weight[l]);
                let nb = shared[l].data().len();
                shared_grad[l].iter_mut().zip(&p[..nb]).for_each(|(s, v)| *s += v);
                per_slot.push(p[nb..].to_vec());
            }
            uv_grads.push(per_slot);
            total.add_scaled(1.0, &g);
        }
        let mut p = model.weights_flat();
        backbone_opt.step(&mut p, &grads_flat(&total));
        set_backbone_params(&mut model, &p);
        for (l, b) in shared.iter_mut().enumerate() {
            shared_opt[l].step(b.data_mut(), &shared_grad[l]);
        }
        for task in 0..k {
            for l in 0..shapes.len() {
                let (u, v) = &mut uv[task][l];
                let mut flat = [u.as_slice(), v.as_slice()].concat();
                uv_opt[task][l].step(&mut flat, &uv_grads[task][l]);
                let r = u.len();
                u.copy_from_slice(&flat[..r]);
                v.copy_from_slice(&flat[r..]);
            }
        }
    }
    let final_gate = gate_at(cfg.phase_a_steps);
    let talora = (0..k).map(|task| build(&shared, &uv[task], final_gate)).collect::<Result<_>>()?;
    Ok((model, talora))
}

/// Per-task SVD adapters trained with Adam on a frozen backbone, then
/// rewritten in exact thin-SVD form (orthonormal factors, `σ` descending).
fn source_phase(
    model: &ToyBackbone,
    data: &LabeledDataset,
    rank: usize,
    cfg: &PretrainConfig,
    rng: &mut RngState,
) -> Result<Vec<SvdAdapter>> {
    let mut adapters: Vec<SvdAdapter> = model
        .slot_shapes()
        .into_iter()
        .map(|(o, i)| init_svd_adapter(o, i, rank, rng, cfg.init_scale))
        .collect::<std::result::Result<_, _>>()?;
    let mut opts: Vec<Adam> = adapters.iter().map(|a| Adam::new(a.params().len(), cfg.phase_b_lr)).collect();
    for _ in 0..cfg.phase_b_steps {
        let set: Vec<Option<Adapter>> = adapters.iter().cloned().map(|a| Some(Adapter::Svd(a))).collect();
        let mut g = BackboneGrads::zeros_like(model);
        let batch = minibatch(data, cfg.phase_b_batch, rng);
        let scale = 1.0 / batch.len() as f64;
        for (x, y) in batch {
            ce_backward(model, &set, x, y, scale, &mut g)?;
        }
        for (l, a) in adapters.iter_mut().enumerate() {
            let grad = a.grads_from_delta(&g.hidden_weight[l]);
            let mut p = a.params();
            opts[l].step(&mut p, &grad);
            a.set_params(&p);
        }
    }
    Ok(adapters.iter().map(SvdAdapter::to_svd_form).collect())
}

pub fn mtl_pretrain(sources: &[SourceTask], tta: &TtaConfig, cfg: &PretrainConfig) -> Result<Pretrained> {
    if sources.len() < 2 {
        return Err(EngineError::TooFewSources(sources.len()));
    }
    cfg.validate()?;
    tta.validate()?;
    let aligner = FormatAligner::from_sources(sources)?;
    let train: Vec<LabeledDataset> = sources.iter().map(|s| canonical(&aligner, s, &s.train)).collect();
    let val: Vec<LabeledDataset> = sources.iter().map(|s| canonical(&aligner, s, &s.val)).collect();
    let input_dim = train[0].inputs[0].len();
    let n_labels = sources
        .iter()
        .flat_map(|s| s.spec.labels.iter().copied())
        .max()
        .expect("tasks have classes")
        + 1;
    let root = RngState::new(cfg.seed);

    let (backbone, talora) = joint_phase(&train, input_dim, n_labels, cfg, &mut root.fork(1))?;

    let mut entries = Vec::with_capacity(sources.len());
    let mut scored = Vec::new();
    let mut tasks = Vec::with_capacity(sources.len());
    let mut warnings = Vec::new();
    for (k, s) in sources.iter().enumerate() {
        let adapters = source_phase(&backbone, &train[k], tta.rank, cfg, &mut root.fork(100 + k as u64))?;
        let set: Vec<Option<Adapter>> = adapters.iter().cloned().map(|a| Some(Adapter::Svd(a))).collect();
        let joint: Vec<Option<Adapter>> = talora[k].iter().cloned().map(|a| Some(Adapter::TaLora(a))).collect();
        let probe = linear_probe_accuracy(&train[k], &val[k]);
        if probe < 0.6 {
            let msg = format!("{}: linear probe accuracy {probe:.3} is below 0.6", s.spec.task_id);
            log::warn!("{msg}");
            warnings.push(msg);
        }
        tasks.push(TaskReport {
            task_id: s.spec.task_id,
            probe_accuracy: probe,
            joint_accuracy: accuracy_with(&backbone, &joint, &val[k])?,
            backbone_accuracy: accuracy_with(&backbone, &[], &val[k])?,
            source_adapter_accuracy: accuracy_with(&backbone, &set, &val[k])?,
        });
        for ((x, &y), margin) in train[k].inputs.iter().zip(&train[k].labels).zip(margins(&backbone, &set, &train[k].inputs)?) {
            scored.push(GuardExample {
                input: x.clone(),
                label: y,
                margin,
            });
        }
        entries.push(SourceEntry {
            task_id: s.spec.task_id,
            embedding: task_embedding(&s.train.inputs)?,
            adapters,
        });
    }
    let guardrail = GuardrailSet::from_scored(scored, tta.guard_fraction)?;
    Ok(Pretrained {
        backbone,
        talora,
        library: SourceLibrary::new(entries)?,
        report: PretrainReport {
            tasks,
            guardrail_size: guardrail.len(),
            warnings,
        },
        guardrail,
        aligner,
    })
}
