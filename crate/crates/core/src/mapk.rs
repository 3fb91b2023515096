//! Reliability-gated learning-rate control.
//!
//! Per step the controller compares the current batch signals with the
//! previous ones, smooths the resulting bits over a window, derives the
//! partial/full activation events and scales the base rate accordingly.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{shannon_entropy, Distribution};
use crate::objectives::{agreement_rate, Candidate, PseudoLabel};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MapkError {
    #[error("need at least 2 candidates per query, got {0}")]
    TooFewCandidates(usize),
    #[error("empty batch")]
    EmptyBatch,
    #[error("batch parts disagree in length")]
    Length,
    #[error("invalid gate parameters: {0}")]
    BadParams(String),
}

pub type Result<T> = std::result::Result<T, MapkError>;

/// Batch reliability signals: mean entropy, mean pseudo-label log-likelihood,
/// mean modal agreement of the stochastic candidates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignalSample {
    pub h: f64,
    pub p: f64,
    pub c: f64,
}

pub fn compute_signals(
    clean: &[Distribution],
    pseudo: &[PseudoLabel],
    candidates: &[Vec<Candidate>],
) -> Result<SignalSample> {
    let n = clean.len();
    if n == 0 {
        return Err(MapkError::EmptyBatch);
    }
    if pseudo.len() != n || candidates.len() != n {
        return Err(MapkError::Length);
    }
    if let Some(c) = candidates.iter().find(|c| c.len() < 2) {
        return Err(MapkError::TooFewCandidates(c.len()));
    }
    let inv = 1.0 / n as f64;
    let h = clean.iter().map(shannon_entropy).sum::<f64>() * inv;
    let p = clean
        .iter()
        .zip(pseudo)
        .map(|(d, a)| d.prob(a.label).max(f64::MIN_POSITIVE).ln())
        .sum::<f64>()
        * inv;
    let c = candidates.iter().map(|c| agreement_rate(c)).sum::<f64>() * inv;
    Ok(SignalSample { h, p, c })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct Indicators {
    pub e_h: bool,
    pub e_p: bool,
    pub e_c: bool,
}

/// Strict improvement bits: entropy fell, likelihood rose, agreement rose.
pub fn raw_indicators(prev: &SignalSample, cur: &SignalSample) -> Indicators {
    Indicators {
        e_h: prev.h - cur.h > 0.0,
        e_p: cur.p - prev.p > 0.0,
        e_c: cur.c - prev.c > 0.0,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Signal {
    H,
    P,
    C,
}

/// `⌈κ l⌉`, robust to round-off just above an integer.
pub fn persistence_threshold(l: usize, kappa: f64) -> usize {
    ((kappa * l as f64) - 1e-9).ceil().max(0.0) as usize
}

/// Sliding windows of indicator bits and signal values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityHistory {
    l: usize,
    kappa: f64,
    bits: [VecDeque<bool>; 3],
    samples: VecDeque<SignalSample>,
    t: usize,
}

impl ReliabilityHistory {
    pub fn new(l: usize, kappa: f64) -> Result<Self> {
        if l == 0 {
            return Err(MapkError::BadParams("window length must be positive".into()));
        }
        if !(kappa > 0.0 && kappa <= 1.0) {
            return Err(MapkError::BadParams(format!("κ must lie in (0, 1], got {kappa}")));
        }
        Ok(Self {
            l,
            kappa,
            bits: Default::default(),
            samples: VecDeque::with_capacity(l + 1),
            t: 0,
        })
    }

    pub fn window(&self) -> usize {
        self.l
    }

    pub fn threshold(&self) -> usize {
        persistence_threshold(self.l, self.kappa)
    }

    /// Steps observed so far.
    pub fn steps(&self) -> usize {
        self.t
    }

    pub fn last_sample(&self) -> Option<&SignalSample> {
        self.samples.back()
    }

    pub fn samples(&self) -> impl Iterator<Item = &SignalSample> {
        self.samples.iter()
    }

    /// Records a sample; returns the raw bits once a previous sample exists.
    pub fn push(&mut self, sample: SignalSample) -> Option<Indicators> {
        let raw = self.samples.back().map(|prev| raw_indicators(prev, &sample));
        if let Some(r) = raw {
            self.push_bits(r);
        }
        self.samples.push_back(sample);
        while self.samples.len() > self.l {
            self.samples.pop_front();
        }
        self.t += 1;
        raw
    }

    /// Appends indicator bits directly.
    pub fn push_bits(&mut self, r: Indicators) {
        for (buf, bit) in self.bits.iter_mut().zip([r.e_h, r.e_p, r.e_c]) {
            buf.push_back(bit);
            while buf.len() > self.l {
                buf.pop_front();
            }
        }
    }

    pub fn bits(&self, s: Signal) -> &VecDeque<bool> {
        &self.bits[s as usize]
    }

    /// Windowed indicator; `None` before the first comparison.
    pub fn smoothed(&self, s: Signal) -> Option<bool> {
        let buf = self.bits(s);
        if buf.is_empty() {
            return None;
        }
        Some(buf.iter().filter(|&&b| b).count() >= self.threshold())
    }

    pub fn smoothed_all(&self) -> Option<Indicators> {
        Some(Indicators {
            e_h: self.smoothed(Signal::H)?,
            e_p: self.smoothed(Signal::P)?,
            e_c: self.smoothed(Signal::C)?,
        })
    }
}

pub fn smoothed_indicator(history: &ReliabilityHistory, signal: Signal) -> bool {
    history.smoothed(signal).unwrap_or(false)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct Activation {
    pub a_p: bool,
    pub a_f: bool,
}

/// Partial: exactly one of entropy/likelihood improved, or neither did but
/// agreement did. Full: both improved.
pub fn activation_events(e_h: bool, e_p: bool, e_c: bool) -> Activation {
    Activation {
        a_p: (e_h ^ e_p) || (e_c && !e_h && !e_p),
        a_f: e_h && e_p,
    }
}

/// Base rate and tier multipliers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateParams {
    pub eta0: f64,
    pub gamma0: f64,
    pub gamma1: f64,
    pub gamma2: f64,
}

impl GateParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(MapkError::BadParams(m));
        if !(self.eta0 >= 0.0 && self.eta0.is_finite()) {
            return bad(format!("η₀ must be finite and nonnegative, got {}", self.eta0));
        }
        if !(self.gamma0 > 0.0 && self.gamma0 < 1.0) {
            return bad(format!("γ₀ must lie in (0, 1), got {}", self.gamma0));
        }
        if !(self.gamma1 > 0.0) {
            return bad(format!("γ₁ must be positive, got {}", self.gamma1));
        }
        if !(self.gamma2 > self.gamma1) {
            return bad(format!("γ₂ must exceed γ₁, got γ₁={} γ₂={}", self.gamma1, self.gamma2));
        }
        Ok(())
    }

    pub fn multiplier(&self, a: Activation) -> f64 {
        self.gamma0 + self.gamma1 * f64::from(u8::from(a.a_p)) + self.gamma2 * f64::from(u8::from(a.a_f))
    }
}

/// `η₀ (γ₀ + γ₁ A_p + γ₂ A_f)`.
pub fn modulated_lr(params: &GateParams, a: Activation) -> f64 {
    params.eta0 * params.multiplier(a)
}

/// Which activation tiers feed the learning rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum GateMode {
    #[default]
    Tiered,
    PartialOnly,
    FullOnly,
    /// Constant `η₀`, no gating.
    Off,
}

/// One controller step, mirrored one-to-one by the signal-trace CSV.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControllerStep {
    pub t: usize,
    pub sample: SignalSample,
    pub raw: Option<Indicators>,
    pub smoothed: Option<Indicators>,
    pub activation: Activation,
    pub eta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapkController {
    params: GateParams,
    mode: GateMode,
    raw_fallback: bool,
    history: ReliabilityHistory,
}

impl MapkController {
    /// `raw_fallback` uses the unsmoothed agreement bit in the partial branch.
    pub fn new(params: GateParams, l: usize, kappa: f64, mode: GateMode, raw_fallback: bool) -> Result<Self> {
        params.validate()?;
        Ok(Self {
            params,
            mode,
            raw_fallback,
            history: ReliabilityHistory::new(l, kappa)?,
        })
    }

    pub fn history(&self) -> &ReliabilityHistory {
        &self.history
    }

    pub fn step(&mut self, sample: SignalSample) -> ControllerStep {
        let t = self.history.steps();
        let raw = self.history.push(sample);
        let smoothed = self.history.smoothed_all();
        let activation = match (raw, smoothed) {
            (Some(r), Some(s)) => {
                let e_c = if self.raw_fallback { r.e_c } else { s.e_c };
                activation_events(s.e_h, s.e_p, e_c)
            }
            _ => Activation::default(),
        };
        let p = &self.params;
        let eta = match self.mode {
            GateMode::Tiered => modulated_lr(p, activation),
            GateMode::PartialOnly => p.eta0 * (p.gamma0 + p.gamma1 * f64::from(u8::from(activation.a_p))),
            GateMode::FullOnly => p.eta0 * (p.gamma0 + p.gamma2 * f64::from(u8::from(activation.a_f))),
            GateMode::Off => p.eta0,
        };
        ControllerStep {
            t,
            sample,
            raw,
            smoothed,
            activation,
            eta,
        }
    }

    /// Learning-rate sequence a fresh controller produces on `samples`.
    pub fn replay(&self, samples: &[SignalSample]) -> Vec<f64> {
        let mut fresh = Self {
            history: ReliabilityHistory::new(self.history.l, self.history.kappa).expect("validated"),
            ..self.clone()
        };
        samples.iter().map(|s| fresh.step(*s).eta).collect()
    }
}

pub const SIGNAL_TRACE_COLUMNS: [&str; 13] = [
    "t", "H", "P", "C", "E_H", "E_P", "E_C", "Es_H", "Es_P", "Es_C", "A_p", "A_f", "eta_t",
];

fn bit(b: Option<bool>) -> String {
    b.map(|b| u8::from(b).to_string()).unwrap_or_default()
}

/// Signal trace; indicator fields are empty during warm-up.
pub fn signal_trace_csv(steps: &[ControllerStep]) -> String {
    let mut out = SIGNAL_TRACE_COLUMNS.join(",");
    out.push('\n');
    for s in steps {
        let row = [
            s.t.to_string(),
            s.sample.h.to_string(),
            s.sample.p.to_string(),
            s.sample.c.to_string(),
            bit(s.raw.map(|r| r.e_h)),
            bit(s.raw.map(|r| r.e_p)),
            bit(s.raw.map(|r| r.e_c)),
            bit(s.smoothed.map(|r| r.e_h)),
            bit(s.smoothed.map(|r| r.e_p)),
            bit(s.smoothed.map(|r| r.e_c)),
            u8::from(s.activation.a_p).to_string(),
            u8::from(s.activation.a_f).to_string(),
            s.eta.to_string(),
        ];
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const TABLE: GateParams = GateParams {
        eta0: 5e-4,
        gamma0: 0.1,
        gamma1: 0.5,
        gamma2: 1.0,
    };

    fn cand(labels: &[usize]) -> Vec<Candidate> {
        labels.iter().map(|&label| Candidate { label, confidence: 1.0 }).collect()
    }

    #[test]
    fn signal_examples() {
        let one_hot = vec![Distribution::one_hot(3, 1); 2];
        let pl = vec![PseudoLabel { label: 1, confidence: 1.0 }; 2];
        let s = compute_signals(&one_hot, &pl, &[cand(&[1, 1, 1]), cand(&[1, 1, 1])]).unwrap();
        assert_eq!((s.h, s.p, s.c), (0.0, 0.0, 1.0));

        let u = vec![Distribution::uniform(4)];
        let pl = vec![PseudoLabel { label: 0, confidence: 0.25 }];
        let s = compute_signals(&u, &pl, &[cand(&[0, 0, 0, 2])]).unwrap();
        assert!((s.h - 4f64.ln()).abs() < 1e-12);
        assert!((s.p - 0.25f64.ln()).abs() < 1e-12);
        assert_eq!(s.c, 0.75);
        assert!(compute_signals(&u, &pl, &[cand(&[0])]).is_err());
    }

    #[test]
    fn signals_ignore_batch_order() {
        let d = vec![
            Distribution::new(vec![0.6, 0.4]).unwrap(),
            Distribution::new(vec![0.1, 0.9]).unwrap(),
            Distribution::new(vec![0.5, 0.5]).unwrap(),
        ];
        let pl: Vec<PseudoLabel> = d.iter().map(|p| PseudoLabel { label: p.argmax(), confidence: 0.0 }).collect();
        let c = vec![cand(&[0, 1]), cand(&[1, 1]), cand(&[0, 0])];
        let a = compute_signals(&d, &pl, &c).unwrap();
        let idx = [2, 0, 1];
        let perm = |v: &[_]| idx.iter().map(|&i| v[i]).collect::<Vec<_>>();
        let b = compute_signals(
            &idx.iter().map(|&i| d[i].clone()).collect::<Vec<_>>(),
            &perm(&pl),
            &idx.iter().map(|&i| c[i].clone()).collect::<Vec<_>>(),
        )
        .unwrap();
        assert!((a.h - b.h).abs() < 1e-15 && (a.p - b.p).abs() < 1e-15 && (a.c - b.c).abs() < 1e-15);
    }

    #[test]
    fn raw_indicator_examples() {
        let s = |h, p, c| SignalSample { h, p, c };
        assert_eq!(raw_indicators(&s(1.0, -1.0, 0.5), &s(1.0, -1.0, 0.5)), Indicators::default());
        let r = raw_indicators(&s(1.2, -0.9, 0.6), &s(1.0, -0.5, 0.6));
        assert_eq!((r.e_h, r.e_p, r.e_c), (true, true, false));
        assert!(!raw_indicators(&s(1.0, 0.0, 0.0), &s(1.2, 0.0, 0.0)).e_h);
    }

    fn history_with(bits: &[bool], l: usize, kappa: f64) -> ReliabilityHistory {
        let mut h = ReliabilityHistory::new(l, kappa).unwrap();
        for &b in bits {
            h.push_bits(Indicators { e_h: b, e_p: b, e_c: b });
        }
        h
    }

    #[test]
    fn seven_of_eight() {
        assert_eq!(persistence_threshold(8, 0.8), 7);
        let seven = [true, true, false, true, true, true, true, true];
        assert!(smoothed_indicator(&history_with(&seven, 8, 0.8), Signal::H));
        let six = [true, false, false, true, true, true, true, true];
        assert!(!smoothed_indicator(&history_with(&six, 8, 0.8), Signal::H));
        assert!(smoothed_indicator(&history_with(&[true; 3], 3, 1.0), Signal::P));
        assert!(!smoothed_indicator(&history_with(&[true, false, true], 3, 1.0), Signal::P));
        // Short prefix keeps the full-window threshold.
        assert!(!smoothed_indicator(&history_with(&[true; 6], 8, 0.8), Signal::C));
        assert!(smoothed_indicator(&history_with(&[true; 7], 8, 0.8), Signal::C));
        // Older bits fall out of the window.
        let mut bits = vec![false; 5];
        bits.extend([true; 8]);
        assert!(smoothed_indicator(&history_with(&bits, 8, 0.8), Signal::H));
    }

    #[test]
    fn truth_table_and_exclusivity() {
        for code in 0..8u8 {
            let (h, p, c) = (code & 4 != 0, code & 2 != 0, code & 1 != 0);
            let a = activation_events(h, p, c);
            assert_eq!(a.a_f, h && p);
            assert_eq!(a.a_p, (h != p) || (c && !h && !p));
            assert!(!(a.a_f && a.a_p));
        }
        assert_eq!(activation_events(true, true, true), Activation { a_p: false, a_f: true });
        assert_eq!(activation_events(false, false, true), Activation { a_p: true, a_f: false });
        assert_eq!(activation_events(false, false, false), Activation::default());
    }

    #[test]
    fn learning_rate_tiers() {
        let none = modulated_lr(&TABLE, Activation::default());
        assert!((none - 5e-5).abs() < 1e-18);
        let partial = modulated_lr(&TABLE, Activation { a_p: true, a_f: false });
        assert!((partial - 3e-4).abs() < 1e-18);
        let full = modulated_lr(&TABLE, activation_events(true, true, false));
        assert!((full - 5.5e-4).abs() < 1e-18);
    }

    #[test]
    fn parameter_ordering_enforced() {
        let bad = [
            GateParams { gamma2: 0.5, ..TABLE },
            GateParams { gamma1: 0.0, ..TABLE },
            GateParams { gamma0: 1.0, ..TABLE },
            GateParams { gamma0: 0.0, ..TABLE },
        ];
        for p in bad {
            assert!(p.validate().is_err(), "{p:?}");
        }
        assert!(TABLE.validate().is_ok());
    }

    #[test]
    fn warm_up_uses_base_tier() {
        let mut c = MapkController::new(TABLE, 8, 0.8, GateMode::Tiered, false).unwrap();
        let s = c.step(SignalSample { h: 1.0, p: -1.0, c: 0.5 });
        assert_eq!(s.raw, None);
        assert!((s.eta - 0.1 * 5e-4).abs() < 1e-18);
    }

    #[test]
    fn csv_has_thirteen_columns() {
        let mut c = MapkController::new(TABLE, 2, 0.5, GateMode::Tiered, false).unwrap();
        let steps: Vec<_> = (0..4)
            .map(|i| c.step(SignalSample { h: 1.0 / (1.0 + i as f64), p: -1.0, c: 0.5 }))
            .collect();
        let csv = signal_trace_csv(&steps);
        for line in csv.lines() {
            assert_eq!(line.split(',').count(), 13);
        }
        assert_eq!(csv.lines().count(), 5);
    }

    fn arb_sample() -> impl Strategy<Value = SignalSample> {
        (0.0f64..2.0, -3.0f64..0.0, 0.0f64..=1.0).prop_map(|(h, p, c)| SignalSample { h, p, c })
    }

    proptest! {
        #[test]
        fn eta_takes_only_three_values(samples in prop::collection::vec(arb_sample(), 1..40), l in 1usize..10) {
            let mut c = MapkController::new(TABLE, l, 0.8, GateMode::Tiered, false).unwrap();
            for s in samples {
                let eta = c.step(s).eta;
                let ok = [0.1, 0.6, 1.1].iter().any(|m| (eta - m * TABLE.eta0).abs() < 1e-18);
                prop_assert!(ok, "eta {}", eta);
            }
        }

        #[test]
        fn replay_is_exact(samples in prop::collection::vec(arb_sample(), 1..40)) {
            let mut c = MapkController::new(TABLE, 8, 0.8, GateMode::Tiered, true).unwrap();
            let live: Vec<f64> = samples.iter().map(|s| c.step(*s).eta).collect();
            prop_assert_eq!(c.replay(&samples), live);
        }

        #[test]
        fn more_ones_never_deactivate(bits in prop::collection::vec(any::<bool>(), 1..20), flip in 0usize..20) {
            let mut more = bits.clone();
            let i = flip % more.len();
            more[i] = true;
            let a = smoothed_indicator(&history_with(&bits, 8, 0.8), Signal::H);
            let b = smoothed_indicator(&history_with(&more, 8, 0.8), Signal::H);
            prop_assert!(!a || b);
        }
    }
}
