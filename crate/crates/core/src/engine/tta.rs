use std::collections::VecDeque;

use super::{EngineError, Objective, Result, RunRecord, StepRow, TtaConfig};
use crate::adapters::{Adapter, BackboneGrads, SvdAdapter, ToyBackbone};
use crate::mapk::{compute_signals, MapkController};
use crate::numerics::{RngState, Tensor2D};
use crate::objectives::{
    compose_grads, compose_sc3, generate_candidates, loss_entropy, loss_guard, loss_prob_batch, loss_proc_batch,
    select_pseudo_label, GuardExample, GuardrailSet, LossBreakdown,
};
use crate::rac1::{build_mask_in_space, masked_factor_grads, masked_sigma_grad, reset_tail, retrieve_and_init, PlasticityMask, SourceLibrary};
use crate::stream::{task_embedding, TaskId, UnlabeledBatch};

pub fn adapter_set(adapters: &[SvdAdapter]) -> Vec<Option<Adapter>> {
    adapters.iter().cloned().map(|a| Some(Adapter::Svd(a))).collect()
}

/// Masked gradients of one slot: `(g_σ, dU, dV)`.
#[derive(Clone)]
struct SlotGrad {
    sigma: Vec<f64>,
    u: Tensor2D,
    v: Tensor2D,
}

struct Retrieval {
    task: TaskId,
    retrieved: Vec<SvdAdapter>,
    anchors: Vec<SvdAdapter>,
    masks: Vec<PlasticityMask>,
}

fn retrieve(library: &SourceLibrary, batch: &UnlabeledBatch, cfg: &TtaConfig, rng: &mut RngState) -> Result<Retrieval> {
    let emb = task_embedding(&batch.inputs)?;
    let (task, retrieved) = retrieve_and_init(library, &emb)?;
    let adapting = cfg.eta0 > 0.0;
    let mut masks = Vec::with_capacity(retrieved.len());
    let mut anchors = Vec::with_capacity(retrieved.len());
    for a in &retrieved {
        if cfg.rac1 {
            let m = build_mask_in_space(&a.sigma, cfg.alpha, cfg.mask_space, Some(rng))?;
            anchors.push(if adapting { reset_tail(a, &m)? } else { a.clone() });
            masks.push(m);
        } else {
            masks.push(PlasticityMask::all_plastic(a.rank()));
            anchors.push(a.clone());
        }
    }
    Ok(Retrieval {
        task,
        retrieved,
        anchors,
        masks,
    })
}

fn all_finite(g: &BackboneGrads) -> bool {
    g.hidden_weight.iter().all(|t| t.data().iter().all(|v| v.is_finite()))
}

/// Loss values and the combined `∂L/∂ΔW` per slot for one batch.
fn objective(
    model: &ToyBackbone,
    set: &[Option<Adapter>],
    batch: &UnlabeledBatch,
    pseudo: &[crate::objectives::PseudoLabel],
    guard: &[&GuardExample],
    cfg: &TtaConfig,
) -> Result<(LossBreakdown, BackboneGrads)> {
    let xs = &batch.canonical_inputs;
    match cfg.objective {
        Objective::EntropyOnly => {
            let mut g = BackboneGrads::zeros_like(model);
            let h = loss_entropy(model, set, xs, Some(&mut g))?;
            Ok((compose_sc3([0.0, h, 0.0], [0.0, 1.0, 0.0])?, g))
        }
        Objective::Sc3 => {
            let lambdas = cfg.lambdas();
            let mut gp = BackboneGrads::zeros_like(model);
            let mut gq = BackboneGrads::zeros_like(model);
            let mut gg = BackboneGrads::zeros_like(model);
            let want = |i: usize| lambdas[i] != 0.0;
            let lp = loss_prob_batch(model, set, xs, &batch.perturbed_inputs, cfg.tau_c, want(0).then_some(&mut gp))?;
            let lq = loss_proc_batch(model, set, xs, pseudo, cfg.tau, cfg.w_h, want(1).then_some(&mut gq))?;
            let lg = loss_guard(model, set, guard, want(2).then_some(&mut gg))?;
            let parts = compose_sc3([lp, lq, lg], lambdas)?;
            let g = compose_grads(model, [Some(&gp), Some(&gq), Some(&gg)], lambdas);
            Ok((parts, g))
        }
    }
}

/// Online adaptation over an unlabeled stream with prequential prediction logging.
pub fn tta_run(
    model: &ToyBackbone,
    library: &SourceLibrary,
    guardrail: &GuardrailSet,
    stream: &[UnlabeledBatch],
    cfg: &TtaConfig,
) -> Result<RunRecord> {
    cfg.validate()?;
    let first = stream.first().ok_or(EngineError::EmptyStream)?;
    let root = RngState::new(cfg.seed);
    let mut mask_rng = root.fork(1);
    let mut cand_rng = root.fork(2);
    let mut guard_rng = root.fork(3);

    let mut r = retrieve(library, first, cfg, &mut mask_rng)?;
    let mut adapters = r.anchors.clone();
    let mut controller = MapkController::new(cfg.gate(), cfg.l, cfg.kappa, cfg.gate_mode, cfg.raw_ec_fallback)?;
    let mut noise_std = cfg.noise_std;
    let mut lowered_noise = false;
    let mut guard_cursor = 0usize;
    let mut window: VecDeque<Vec<SlotGrad>> = VecDeque::new();
    let mut steps = Vec::with_capacity(stream.len());
    let mut last_segment = first.segment_id;

    for batch in stream {
        if cfg.per_segment_retrieval && batch.segment_id != last_segment {
            r = retrieve(library, batch, cfg, &mut mask_rng)?;
            adapters = r.anchors.clone();
            window.clear();
        }
        last_segment = batch.segment_id;
        let set = adapter_set(&adapters);

        let mut clean = Vec::with_capacity(batch.len());
        let mut candidates = Vec::with_capacity(batch.len());
        let mut pseudo = Vec::with_capacity(batch.len());
        for x in &batch.canonical_inputs {
            let p = model.predict(x, &set)?;
            let c = generate_candidates(model, &set, x, cfg.m_candidates, noise_std, &mut cand_rng)?;
            pseudo.push(select_pseudo_label(&c, &p));
            candidates.push(c);
            clean.push(p);
        }
        let predictions: Vec<usize> = clean.iter().map(|p| p.argmax()).collect();
        let sample = compute_signals(&clean, &pseudo, &candidates)?;
        let ctl = controller.step(sample);

        let guard: Vec<&GuardExample> = if cfg.resample_guard {
            (0..cfg.guard_batch)
                .map(|_| &guardrail.examples()[guard_rng.below(guardrail.len())])
                .collect()
        } else {
            let b = guardrail.cyclic_batch(guard_cursor, cfg.guard_batch);
            guard_cursor = (guard_cursor + cfg.guard_batch) % guardrail.len();
            b
        };
        let (loss, g) = objective(model, &set, batch, &pseudo, &guard, cfg)?;

        let mut updated = false;
        if !(loss.l_total.is_finite() && all_finite(&g)) {
            log::warn!("non-finite loss at step {}; skipping the update", batch.t);
            if lowered_noise {
                return Err(EngineError::NonFinite { step: batch.t });
            }
            noise_std /= 2.0;
            lowered_noise = true;
        } else if ctl.eta > 0.0 {
            let mut grads = Vec::with_capacity(adapters.len());
            for ((a, m), gw) in adapters.iter().zip(&r.masks).zip(&g.hidden_weight) {
                let sigma = masked_sigma_grad(&a.u, &a.v, gw, m)?;
                let (u, v) = masked_factor_grads(a, gw, m)?;
                grads.push(SlotGrad { sigma, u, v });
            }
            let applied = if cfg.accumulate_gradients {
                window.push_back(grads);
                while window.len() > cfg.l {
                    window.pop_front();
                }
                average(&window)
            } else {
                grads
            };
            for (a, gr) in adapters.iter_mut().zip(&applied) {
                a.sigma.iter_mut().zip(&gr.sigma).for_each(|(s, d)| *s -= ctl.eta * d);
                a.u.axpy(-ctl.eta, &gr.u)?;
                a.v.axpy(-ctl.eta, &gr.v)?;
            }
            updated = true;
        }
        steps.push(StepRow {
            t: batch.t,
            segment_id: batch.segment_id,
            predictions,
            loss,
            controller: ctl,
            updated,
        });
    }
    Ok(RunRecord {
        config: cfg.clone(),
        retrieved_task: r.task,
        retrieved: r.retrieved,
        anchors: r.anchors,
        masks: r.masks,
        final_adapters: adapters,
        steps,
    })
}

fn average(window: &VecDeque<Vec<SlotGrad>>) -> Vec<SlotGrad> {
    let n = window.len() as f64;
    let mut out = window[0].clone();
    for later in window.iter().skip(1) {
        for (o, g) in out.iter_mut().zip(later) {
            o.sigma.iter_mut().zip(&g.sigma).for_each(|(a, b)| *a += b);
            o.u.axpy(1.0, &g.u).expect("same slot shape");
            o.v.axpy(1.0, &g.v).expect("same slot shape");
        }
    }
    for o in &mut out {
        o.sigma.iter_mut().for_each(|a| *a /= n);
        o.u = o.u.scale(1.0 / n);
        o.v = o.v.scale(1.0 / n);
    }
    out
}
