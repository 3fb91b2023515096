//! Unsupervised test-time losses and pseudo-labeling.
//!
//! Every loss returns its value and, when given an accumulator, adds its
//! gradient into [`BackboneGrads`]; the per-slot `hidden_weight` entries are
//! the `∂L/∂ΔW` matrices that the adapter updates consume.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapters::{Adapter, AdapterError, BackboneGrads, ForwardTrace, ToyBackbone};
use crate::numerics::{dot, l2_norm, log_softmax, softmax_temp, Distribution, NumericsError, RngState};

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("need at least 2 candidates, got {0}")]
    TooFewCandidates(usize),
    #[error("empty batch")]
    EmptyBatch,
    #[error("guardrail fraction must lie in (0, 1], got {0}")]
    BadFraction(f64),
    #[error("loss weights must be nonnegative")]
    NegativeWeight,
    #[error("{0} inputs but {1} labels")]
    LabelCount(usize, usize),
    #[error("hidden representation has zero norm")]
    ZeroRepresentation,
    #[error(transparent)]
    Adapter(#[from] AdapterError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

pub type Result<T> = std::result::Result<T, ObjectiveError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub label: usize,
    /// Probability of `label` in the noisy pass that produced it.
    pub confidence: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabel {
    pub label: usize,
    /// Clean-pass probability of `label`.
    pub confidence: f64,
}

/// `M` noisy forward passes; each candidate is the argmax of one pass.
pub fn generate_candidates(
    model: &ToyBackbone,
    adapters: &[Option<Adapter>],
    x: &[f64],
    m: usize,
    noise_std: f64,
    rng: &mut RngState,
) -> Result<Vec<Candidate>> {
    if m < 2 {
        return Err(ObjectiveError::TooFewCandidates(m));
    }
    (0..m)
        .map(|_| {
            let logits = model.forward_noisy(x, adapters, noise_std, rng)?;
            let p = softmax_temp(&logits, 1.0)?;
            let label = p.argmax();
            Ok(Candidate {
                label,
                confidence: p.prob(label),
            })
        })
        .collect()
}

/// Distinct candidate with the highest clean probability; lower index on ties.
pub fn select_pseudo_label(candidates: &[Candidate], clean: &Distribution) -> PseudoLabel {
    let mut labels: Vec<usize> = candidates.iter().map(|c| c.label).collect();
    labels.sort_unstable();
    labels.dedup();
    let mut best = PseudoLabel {
        label: labels[0],
        confidence: clean.prob(labels[0]),
    };
    for &l in &labels[1..] {
        if clean.prob(l) > best.confidence {
            best = PseudoLabel {
                label: l,
                confidence: clean.prob(l),
            };
        }
    }
    best
}

/// Fraction of candidates equal to the modal label (lowest label on ties).
pub fn agreement_rate(candidates: &[Candidate]) -> f64 {
    let mut counts = std::collections::BTreeMap::new();
    for c in candidates {
        *counts.entry(c.label).or_insert(0usize) += 1;
    }
    let modal = counts.values().copied().max().unwrap_or(0);
    modal as f64 / candidates.len() as f64
}

/// `−ln softmax(z)_y` and its gradient `softmax(z) − e_y`.
fn cross_entropy(logits: &[f64], y: usize, tau: f64) -> Result<(f64, Vec<f64>)> {
    let lp = log_softmax(logits, tau)?;
    let grad = lp
        .iter()
        .enumerate()
        .map(|(k, l)| (l.exp() - if k == y { 1.0 } else { 0.0 }) / tau)
        .collect();
    Ok((-lp[y], grad))
}

/// `H(softmax(z))` and its gradient `−p ⊙ (ln p + H)`.
fn entropy_with_grad(logits: &[f64]) -> Result<(f64, Vec<f64>)> {
    let lp = log_softmax(logits, 1.0)?;
    let h: f64 = -lp.iter().map(|l| l.exp() * l).sum::<f64>();
    let grad = lp.iter().map(|l| -l.exp() * (l + h)).collect();
    Ok((h, grad))
}

/// Cosine similarity and its gradients with respect to both arguments.
fn cosine_with_grad(a: &[f64], b: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let (na, nb) = (l2_norm(a), l2_norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(ObjectiveError::ZeroRepresentation);
    }
    let c = dot(a, b) / (na * nb);
    let ga = a.iter().zip(b).map(|(x, y)| y / (na * nb) - c * x / (na * na)).collect();
    let gb = a.iter().zip(b).map(|(x, y)| x / (na * nb) - c * y / (nb * nb)).collect();
    Ok((c, ga, gb))
}

/// Gradients of an InfoNCE term with respect to each representation.
pub struct InfoNceGrads {
    pub anchor: Vec<f64>,
    pub positive: Vec<f64>,
    pub negatives: Vec<Vec<f64>>,
}

/// `−ln [e^{s⁺/τ} / (e^{s⁺/τ} + Σ_j e^{s⁻_j/τ})]` with cosine similarities.
pub fn info_nce(anchor: &[f64], positive: &[f64], negatives: &[&[f64]], tau_c: f64) -> Result<(f64, InfoNceGrads)> {
    let (s_pos, ga_pos, gp) = cosine_with_grad(anchor, positive)?;
    let mut sims = vec![s_pos / tau_c];
    let mut neg_grads = Vec::with_capacity(negatives.len());
    for n in negatives {
        let (s, ga, gn) = cosine_with_grad(anchor, n)?;
        sims.push(s / tau_c);
        neg_grads.push((ga, gn));
    }
    let max = sims.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = sims.iter().map(|s| (s - max).exp()).sum();
    let loss = max + z.ln() - sims[0];
    let w: Vec<f64> = sims.iter().map(|s| (s - max).exp() / z).collect();
    // dL/ds_i = (w_i − [i = 0]) / τ on the raw cosines.
    let c0 = (w[0] - 1.0) / tau_c;
    let mut anchor_g: Vec<f64> = ga_pos.iter().map(|g| c0 * g).collect();
    let positive_g = gp.iter().map(|g| c0 * g).collect();
    let mut negatives_g = Vec::with_capacity(negatives.len());
    for (j, (ga, gn)) in neg_grads.into_iter().enumerate() {
        let cj = w[j + 1] / tau_c;
        anchor_g.iter_mut().zip(&ga).for_each(|(a, g)| *a += cj * g);
        negatives_g.push(gn.into_iter().map(|g| cj * g).collect());
    }
    Ok((
        loss,
        InfoNceGrads {
            anchor: anchor_g,
            positive: positive_g,
            negatives: negatives_g,
        },
    ))
}

/// Pending backprop for one trace: upstream gradients on logits and on `h`.
struct Upstream {
    trace: ForwardTrace,
    dlogits: Vec<f64>,
    dhidden: Vec<f64>,
}

impl Upstream {
    fn new(trace: ForwardTrace) -> Self {
        let dlogits = vec![0.0; trace.logits.len()];
        let dhidden = vec![0.0; trace.hidden().len()];
        Self { trace, dlogits, dhidden }
    }

    fn push(self, model: &ToyBackbone, adapters: &[Option<Adapter>], scale: f64, grads: &mut BackboneGrads) {
        model.backward(&self.trace, adapters, &self.dlogits, Some(&self.dhidden), scale, grads);
    }
}

fn add_into(a: &mut [f64], b: &[f64], c: f64) {
    a.iter_mut().zip(b).for_each(|(x, y)| *x += c * y);
}

/// Paraphrase-consistency term for one query.
///
/// `CE(p(·|x̃), argmax p(·|x))` with the target held fixed, plus InfoNCE
/// between `h(x)` and `h(x̃)` against `h` of each negative. Empty negatives
/// drop the contrastive part.
pub fn loss_prob(
    model: &ToyBackbone,
    adapters: &[Option<Adapter>],
    x: &[f64],
    x_tilde: &[f64],
    negatives: &[Vec<f64>],
    tau_c: f64,
    grads: Option<&mut BackboneGrads>,
) -> Result<f64> {
    let mut clean = Upstream::new(model.forward(x, adapters)?);
    let mut pert = Upstream::new(model.forward(x_tilde, adapters)?);
    let target = clean.trace.distribution().argmax();
    let (ce, dz) = cross_entropy(&pert.trace.logits, target, 1.0)?;
    add_into(&mut pert.dlogits, &dz, 1.0);
    let mut loss = ce;
    let mut negs: Vec<Upstream> = Vec::new();
    if negatives.is_empty() {
        log::warn!("no negatives supplied; contrastive term omitted");
    } else {
        negs = negatives
            .iter()
            .map(|n| Ok(Upstream::new(model.forward(n, adapters)?)))
            .collect::<Result<_>>()?;
        let hs: Vec<&[f64]> = negs.iter().map(|u| u.trace.hidden()).collect();
        let (nce, g) = info_nce(clean.trace.hidden(), pert.trace.hidden(), &hs, tau_c)?;
        loss += nce;
        add_into(&mut clean.dhidden, &g.anchor, 1.0);
        add_into(&mut pert.dhidden, &g.positive, 1.0);
        for (u, gn) in negs.iter_mut().zip(&g.negatives) {
            add_into(&mut u.dhidden, gn, 1.0);
        }
    }
    if let Some(grads) = grads {
        for u in std::iter::once(clean).chain(std::iter::once(pert)).chain(negs) {
            u.push(model, adapters, 1.0, grads);
        }
    }
    Ok(loss)
}

/// Batch mean of the paraphrase-consistency term where the negatives of
/// query `b` are the perturbed twins of every other query in the batch.
pub fn loss_prob_batch(
    model: &ToyBackbone,
    adapters: &[Option<Adapter>],
    xs: &[Vec<f64>],
    x_tildes: &[Vec<f64>],
    tau_c: f64,
    grads: Option<&mut BackboneGrads>,
) -> Result<f64> {
    let n = xs.len();
    if n == 0 {
        return Err(ObjectiveError::EmptyBatch);
    }
    if x_tildes.len() != n {
        return Err(ObjectiveError::LabelCount(n, x_tildes.len()));
    }
    let mut clean: Vec<Upstream> =
        xs.iter().map(|x| Ok(Upstream::new(model.forward(x, adapters)?))).collect::<Result<_>>()?;
    let mut pert: Vec<Upstream> =
        x_tildes.iter().map(|x| Ok(Upstream::new(model.forward(x, adapters)?))).collect::<Result<_>>()?;
    if n == 1 {
        log::warn!("single-query batch; contrastive term omitted");
    }
    let inv = 1.0 / n as f64;
    let mut total = 0.0;
    for b in 0..n {
        let target = clean[b].trace.distribution().argmax();
        let (ce, dz) = cross_entropy(&pert[b].trace.logits, target, 1.0)?;
        total += ce;
        add_into(&mut pert[b].dlogits, &dz, inv);
        if n > 1 {
            let others: Vec<usize> = (0..n).filter(|&j| j != b).collect();
            let hs: Vec<&[f64]> = others.iter().map(|&j| pert[j].trace.hidden()).collect();
            let (nce, g) = info_nce(clean[b].trace.hidden(), pert[b].trace.hidden(), &hs, tau_c)?;
            total += nce;
            add_into(&mut clean[b].dhidden, &g.anchor, inv);
            add_into(&mut pert[b].dhidden, &g.positive, inv);
            for (&j, gn) in others.iter().zip(&g.negatives) {
                add_into(&mut pert[j].dhidden, gn, inv);
            }
        }
    }
    if let Some(grads) = grads {
        for u in clean.into_iter().chain(pert) {
            u.push(model, adapters, 1.0, grads);
        }
    }
    Ok(total * inv)
}

/// Uncertainty-aware term for one query:
/// `CE(softmax(z/τ), a*) − w_H · H(softmax(z))`.
pub fn loss_proc(
    model: &ToyBackbone,
    adapters: &[Option<Adapter>],
    x: &[f64],
    a_star: &PseudoLabel,
    tau: f64,
    w_h: f64,
    grads: Option<&mut BackboneGrads>,
) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(NumericsError::BadTemperature(tau).into());
    }
    let trace = model.forward(x, adapters)?;
    let (ce, mut dz) = cross_entropy(&trace.logits, a_star.label, tau)?;
    let (h, dh) = entropy_with_grad(&trace.logits)?;
    add_into(&mut dz, &dh, -w_h);
    if let Some(grads) = grads {
        model.backward(&trace, adapters, &dz, None, 1.0, grads);
    }
    Ok(ce - w_h * h)
}

/// Batch mean of [`loss_proc`].
pub fn loss_proc_batch(
    model: &ToyBackbone,
    adapters: &[Option<Adapter>],
    xs: &[Vec<f64>],
    pseudo: &[PseudoLabel],
    tau: f64,
    w_h: f64,
    mut grads: Option<&mut BackboneGrads>,
) -> Result<f64> {
    if xs.is_empty() {
        return Err(ObjectiveError::EmptyBatch);
    }
    if pseudo.len() != xs.len() {
        return Err(ObjectiveError::LabelCount(xs.len(), pseudo.len()));
    }
    let inv = 1.0 / xs.len() as f64;
    let mut local = grads.as_ref().map(|_| BackboneGrads::zeros_like(model));
    let mut total = 0.0;
    for (x, a) in xs.iter().zip(pseudo) {
        total += loss_proc(model, adapters, x, a, tau, w_h, local.as_mut())?;
    }
    if let (Some(g), Some(l)) = (grads.as_deref_mut(), local) {
        g.add_scaled(inv, &l);
    }
    Ok(total * inv)
}

/// Mean prediction entropy over a batch (the entropy-minimization baseline objective).
pub fn loss_entropy(
    model: &ToyBackbone,
    adapters: &[Option<Adapter>],
    xs: &[Vec<f64>],
    grads: Option<&mut BackboneGrads>,
) -> Result<f64> {
    if xs.is_empty() {
        return Err(ObjectiveError::EmptyBatch);
    }
    let inv = 1.0 / xs.len() as f64;
    let mut total = 0.0;
    let mut grads = grads;
    for x in xs {
        let trace = model.forward(x, adapters)?;
        let (h, dh) = entropy_with_grad(&trace.logits)?;
        total += h;
        if let Some(g) = grads.as_deref_mut() {
            model.backward(&trace, adapters, &dh, None, inv, g);
        }
    }
    Ok(total * inv)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuardExample {
    pub input: Vec<f64>,
    pub label: usize,
    pub margin: f64,
}

/// Labeled source anchors, sorted by top-2 margin descending.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuardrailSet {
    examples: Vec<GuardExample>,
}

impl GuardrailSet {
    /// Stable sort by margin descending, then keep the top `⌈fraction · N⌉`.
    pub fn from_scored(mut scored: Vec<GuardExample>, fraction: f64) -> Result<Self> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(ObjectiveError::BadFraction(fraction));
        }
        if scored.is_empty() {
            return Err(ObjectiveError::EmptyBatch);
        }
        scored.sort_by(|a, b| b.margin.partial_cmp(&a.margin).unwrap_or(std::cmp::Ordering::Equal));
        let keep = ((fraction * scored.len() as f64) - 1e-9).ceil().max(1.0) as usize;
        scored.truncate(keep);
        Ok(Self { examples: scored })
    }

    pub fn examples(&self) -> &[GuardExample] {
        &self.examples
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// `n` examples starting at `cursor`, wrapping around (margin order).
    pub fn cyclic_batch(&self, cursor: usize, n: usize) -> Vec<&GuardExample> {
        (0..n).map(|i| &self.examples[(cursor + i) % self.examples.len()]).collect()
    }
}

/// Top-2 margins `p₁ − p₂` under `(model, adapters)`.
pub fn margins(model: &ToyBackbone, adapters: &[Option<Adapter>], inputs: &[Vec<f64>]) -> Result<Vec<f64>> {
    inputs
        .iter()
        .map(|x| Ok(model.predict(x, adapters)?.top2_margin()))
        .collect()
}

pub fn margin_sample(
    inputs: &[Vec<f64>],
    labels: &[usize],
    fraction: f64,
    model: &ToyBackbone,
    adapters: &[Option<Adapter>],
) -> Result<GuardrailSet> {
    if inputs.len() != labels.len() {
        return Err(ObjectiveError::LabelCount(inputs.len(), labels.len()));
    }
    let m = margins(model, adapters, inputs)?;
    let scored = inputs
        .iter()
        .zip(labels)
        .zip(m)
        .map(|((x, &y), margin)| GuardExample {
            input: x.clone(),
            label: y,
            margin,
        })
        .collect();
    GuardrailSet::from_scored(scored, fraction)
}

/// Mean supervised cross-entropy over guardrail examples.
pub fn loss_guard(
    model: &ToyBackbone,
    adapters: &[Option<Adapter>],
    batch: &[&GuardExample],
    grads: Option<&mut BackboneGrads>,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(ObjectiveError::EmptyBatch);
    }
    let inv = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    let mut grads = grads;
    for ex in batch {
        let trace = model.forward(&ex.input, adapters)?;
        let (ce, dz) = cross_entropy(&trace.logits, ex.label, 1.0)?;
        total += ce;
        if let Some(g) = grads.as_deref_mut() {
            model.backward(&trace, adapters, &dz, None, inv, g);
        }
    }
    Ok(total * inv)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_prob: f64,
    pub l_proc: f64,
    pub l_guard: f64,
    pub l_total: f64,
    pub lambdas: [f64; 3],
}

pub fn compose_sc3(parts: [f64; 3], lambdas: [f64; 3]) -> Result<LossBreakdown> {
    if lambdas.iter().any(|&l| !(l >= 0.0)) {
        return Err(ObjectiveError::NegativeWeight);
    }
    Ok(LossBreakdown {
        l_prob: parts[0],
        l_proc: parts[1],
        l_guard: parts[2],
        l_total: lambdas[0] * parts[0] + lambdas[1] * parts[1] + lambdas[2] * parts[2],
        lambdas,
    })
}

/// `Σ λ_i g_i`; zero weights contribute nothing.
pub fn compose_grads(model: &ToyBackbone, parts: [Option<&BackboneGrads>; 3], lambdas: [f64; 3]) -> BackboneGrads {
    let mut out = BackboneGrads::zeros_like(model);
    for (g, &l) in parts.iter().zip(&lambdas) {
        if let Some(g) = g {
            if l != 0.0 {
                out.add_scaled(l, g);
            }
        }
    }
    out
}
