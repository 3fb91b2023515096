use serde::{Deserialize, Serialize};

use super::{EngineError, Result};
use crate::mapk::{GateMode, GateParams};
use crate::rac1::MaskSpace;

/// Which unsupervised objective drives adaptation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    /// Weighted paraphrase, pseudo-label/entropy and guardrail terms.
    #[default]
    Sc3,
    /// Plain mean-entropy minimization.
    EntropyOnly,
}

/// Test-time adaptation hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TtaConfig {
    pub alpha: f64,
    pub eta0: f64,
    pub gamma0: f64,
    pub gamma1: f64,
    pub gamma2: f64,
    pub l: usize,
    pub kappa: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub tau: f64,
    pub tau_c: f64,
    pub w_h: f64,
    pub rank: usize,
    pub m_candidates: usize,
    pub noise_std: f64,
    pub guard_fraction: f64,
    pub guard_batch: usize,
    pub seed: u64,
    /// Keep the top-|σ| directions and reset the tail; off means every slot is plastic and nothing is reset.
    pub rac1: bool,
    pub mask_space: MaskSpace,
    pub gate_mode: GateMode,
    /// Use the unsmoothed agreement bit in the partial-activation fallback.
    pub raw_ec_fallback: bool,
    /// Average gradients over the last `min(t, l)` steps before applying them.
    pub accumulate_gradients: bool,
    /// Retrieve and reset again whenever the segment changes.
    pub per_segment_retrieval: bool,
    /// Redraw the guardrail batch uniformly each step instead of cycling in margin order.
    pub resample_guard: bool,
    pub objective: Objective,
}

impl Default for TtaConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            eta0: 5e-4,
            gamma0: 0.1,
            gamma1: 0.5,
            gamma2: 1.0,
            l: 8,
            kappa: 0.8,
            lambda1: 0.2,
            lambda2: 0.7,
            lambda3: 0.1,
            tau: 1.2,
            tau_c: 0.1,
            w_h: 1.0,
            rank: 16,
            m_candidates: 5,
            noise_std: 0.1,
            guard_fraction: 0.1,
            guard_batch: 32,
            seed: 0,
            rac1: true,
            mask_space: MaskSpace::Tail,
            gate_mode: GateMode::Tiered,
            raw_ec_fallback: false,
            accumulate_gradients: false,
            per_segment_retrieval: false,
            resample_guard: false,
            objective: Objective::Sc3,
        }
    }
}

impl TtaConfig {
    pub fn gate(&self) -> GateParams {
        GateParams {
            eta0: self.eta0,
            gamma0: self.gamma0,
            gamma1: self.gamma1,
            gamma2: self.gamma2,
        }
    }

    pub fn lambdas(&self) -> [f64; 3] {
        [self.lambda1, self.lambda2, self.lambda3]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &'static str, msg: String| Err(EngineError::Config { field, msg });
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad("alpha", format!("must lie in [0, 1], got {}", self.alpha));
        }
        if !(self.eta0 >= 0.0 && self.eta0.is_finite()) {
            return bad("eta0", format!("must be finite and nonnegative, got {}", self.eta0));
        }
        if !(self.gamma0 > 0.0 && self.gamma0 < 1.0) {
            return bad("gamma0", format!("must lie in (0, 1), got {}", self.gamma0));
        }
        if !(self.gamma1 > 0.0) {
            return bad("gamma1", format!("must be positive, got {}", self.gamma1));
        }
        if !(self.gamma2 > self.gamma1) {
            return bad("gamma2", format!("must exceed gamma1 ({}), got {}", self.gamma1, self.gamma2));
        }
        if self.l == 0 {
            return bad("l", "must be positive".into());
        }
        if !(self.kappa > 0.0 && self.kappa <= 1.0) {
            return bad("kappa", format!("must lie in (0, 1], got {}", self.kappa));
        }
        if !(self.tau > 1.0 && self.tau.is_finite()) {
            return bad("tau", format!("must exceed 1, got {}", self.tau));
        }
        if !(self.tau_c > 0.0 && self.tau_c.is_finite()) {
            return bad("tau_c", format!("must be positive, got {}", self.tau_c));
        }
        for (field, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2), ("lambda3", self.lambda3), ("w_h", self.w_h)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(field, format!("must be finite and nonnegative, got {v}"));
            }
        }
        if self.rank == 0 {
            return bad("rank", "must be positive".into());
        }
        if self.m_candidates < 2 {
            return bad("m_candidates", format!("must be at least 2, got {}", self.m_candidates));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad("noise_std", format!("must be nonnegative, got {}", self.noise_std));
        }
        if !(self.guard_fraction > 0.0 && self.guard_fraction <= 1.0) {
            return bad("guard_fraction", format!("must lie in (0, 1], got {}", self.guard_fraction));
        }
        if self.guard_batch == 0 {
            return bad("guard_batch", "must be positive".into());
        }
        Ok(())
    }
}

/// Multi-source pretraining schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub hidden_widths: Vec<usize>,
    pub talora_rank: usize,
    pub phase_a_steps: usize,
    /// Per-task minibatch size in the joint phase.
    pub phase_a_task_batch: usize,
    pub phase_a_lr: f64,
    pub phase_a_momentum: f64,
    /// Fraction of the joint phase over which the adapter gate ramps from 0 to 1.
    pub gate_ramp: f64,
    pub phase_b_steps: usize,
    pub phase_b_batch: usize,
    pub phase_b_lr: f64,
    pub init_scale: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            hidden_widths: vec![32, 32],
            talora_rank: 4,
            phase_a_steps: 1500,
            phase_a_task_batch: 16,
            phase_a_lr: 0.05,
            phase_a_momentum: 0.9,
            gate_ramp: 0.3,
            phase_b_steps: 400,
            phase_b_batch: 32,
            phase_b_lr: 0.01,
            init_scale: 0.02,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &'static str, msg: &str| Err(EngineError::Config { field, msg: msg.into() });
        if self.hidden_widths.is_empty() || self.hidden_widths.contains(&0) {
            return bad("hidden_widths", "need at least one positive width");
        }
        if self.talora_rank == 0 {
            return bad("talora_rank", "must be positive");
        }
        if self.phase_a_task_batch == 0 || self.phase_b_batch == 0 {
            return bad("phase_a_task_batch", "batch sizes must be positive");
        }
        if !(self.phase_a_lr > 0.0 && self.phase_b_lr > 0.0) {
            return bad("phase_a_lr", "learning rates must be positive");
        }
        if !(0.0..1.0).contains(&self.phase_a_momentum) {
            return bad("phase_a_momentum", "must lie in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.gate_ramp) {
            return bad("gate_ramp", "must lie in [0, 1]");
        }
        if !(self.init_scale > 0.0) {
            return bad("init_scale", "must be positive");
        }
        Ok(())
    }
}

/// Named variants of the adaptation method.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    None,
    Frozen,
    NoRac1,
    HeadMask,
    RandomMask,
    SmallAlpha,
    LargeAlpha,
    NoMapk,
    PartialOnly,
    FullOnly,
    NoSmoothing,
    NoProb,
    NoProc,
    NoGuard,
    EntropyOnly,
}

impl Ablation {
    pub const ALL: [Ablation; 15] = [
        Ablation::None,
        Ablation::Frozen,
        Ablation::NoRac1,
        Ablation::HeadMask,
        Ablation::RandomMask,
        Ablation::SmallAlpha,
        Ablation::LargeAlpha,
        Ablation::NoMapk,
        Ablation::PartialOnly,
        Ablation::FullOnly,
        Ablation::NoSmoothing,
        Ablation::NoProb,
        Ablation::NoProc,
        Ablation::NoGuard,
        Ablation::EntropyOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::None => "none",
            Ablation::Frozen => "frozen",
            Ablation::NoRac1 => "no-rac1",
            Ablation::HeadMask => "head-mask",
            Ablation::RandomMask => "random-mask",
            Ablation::SmallAlpha => "small-alpha",
            Ablation::LargeAlpha => "large-alpha",
            Ablation::NoMapk => "no-mapk",
            Ablation::PartialOnly => "partial-only",
            Ablation::FullOnly => "full-only",
            Ablation::NoSmoothing => "no-smoothing",
            Ablation::NoProb => "no-prob",
            Ablation::NoProc => "no-proc",
            Ablation::NoGuard => "no-guard",
            Ablation::EntropyOnly => "entropy-only",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|a| a.name() == s)
    }

    pub fn names() -> Vec<&'static str> {
        Self::ALL.iter().map(|a| a.name()).collect()
    }

    pub fn apply(self, cfg: &TtaConfig) -> TtaConfig {
        let mut c = cfg.clone();
        match self {
            Ablation::None => {}
            Ablation::Frozen => c.eta0 = 0.0,
            Ablation::NoRac1 => c.rac1 = false,
            Ablation::HeadMask => c.mask_space = MaskSpace::Head,
            Ablation::RandomMask => c.mask_space = MaskSpace::Random,
            Ablation::SmallAlpha => c.alpha = 0.05,
            Ablation::LargeAlpha => c.alpha = 0.3,
            Ablation::NoMapk => c.gate_mode = GateMode::Off,
            Ablation::PartialOnly => c.gate_mode = GateMode::PartialOnly,
            Ablation::FullOnly => c.gate_mode = GateMode::FullOnly,
            Ablation::NoSmoothing => c.l = 1,
            Ablation::NoProb => c.lambda1 = 0.0,
            Ablation::NoProc => c.lambda2 = 0.0,
            Ablation::NoGuard => c.lambda3 = 0.0,
            Ablation::EntropyOnly => c.objective = Objective::EntropyOnly,
        }
        c
    }
}
