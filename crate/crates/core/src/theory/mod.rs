//! Numerical audit of the projected-gradient stationarity bound on smooth
//! test problems whose smoothness constant and minimizer are known exactly.
//!
//! Problems are separable: `L(θ) = Σ ½λ_i δ_i² + ε(1 − cos δ_i)` with
//! `δ = θ − θ*`. Each coordinate has curvature in `[λ_i − ε, λ_i + ε]`, so
//! `β = max λ + ε` is a certificate, `L(θ*) = 0` is the global minimum, and
//! coordinates with `λ_i < ε` are non-convex.

mod harness;

pub use harness::{
    adapter_coordinates, empirical_beta, run_harness, trajectory_csv, CaseResult, Family, HarnessConfig, SeedRow,
    VerificationReport, TRAJECTORY_COLUMNS,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{dot, RngState};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TheoryError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dim { expected: usize, got: usize },
    #[error("alpha must lie in [0, 1], got {0}")]
    BadAlpha(f64),
    #[error("initial point equals the minimizer; the mismatch ratio is undefined")]
    ZeroMismatch,
    #[error("mismatch assumption unsatisfiable: required rho = {0} >= 1")]
    Unsatisfiable(f64),
    #[error("iterates diverged at step {0}; the smoothness certificate is wrong")]
    Divergence(usize),
    #[error("plastic index {index} out of range for dimension {d}")]
    BadIndex { index: usize, d: usize },
    #[error("invalid problem: {0}")]
    BadProblem(String),
}

pub type Result<T> = std::result::Result<T, TheoryError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothTestProblem {
    pub curvature: Vec<f64>,
    pub theta_star: Vec<f64>,
    /// Amplitude of the `1 − cos` perturbation; 0 for a plain quadratic.
    pub eps: f64,
    /// Certified smoothness constant.
    pub beta: f64,
}

impl SmoothTestProblem {
    pub fn new(curvature: Vec<f64>, theta_star: Vec<f64>, eps: f64) -> Result<Self> {
        if curvature.len() != theta_star.len() {
            return Err(TheoryError::Dim {
                expected: curvature.len(),
                got: theta_star.len(),
            });
        }
        if curvature.is_empty() || curvature.iter().any(|l| !(*l > 0.0 && l.is_finite())) {
            return Err(TheoryError::BadProblem("curvatures must be positive and finite".into()));
        }
        if !(eps >= 0.0 && eps.is_finite()) {
            return Err(TheoryError::BadProblem(format!("eps must be nonnegative, got {eps}")));
        }
        let beta = curvature.iter().cloned().fold(0.0, f64::max) + eps;
        Ok(Self {
            curvature,
            theta_star,
            eps,
            beta,
        })
    }

    /// `½‖θ − θ*‖²` in `d` dimensions (β = 1).
    pub fn identity(theta_star: Vec<f64>) -> Self {
        Self::new(vec![1.0; theta_star.len()], theta_star, 0.0).expect("unit curvature is valid")
    }

    pub fn dim(&self) -> usize {
        self.curvature.len()
    }

    fn check(&self, theta: &[f64]) {
        assert_eq!(theta.len(), self.dim(), "point dimension");
    }

    pub fn loss(&self, theta: &[f64]) -> f64 {
        self.check(theta);
        theta
            .iter()
            .zip(&self.theta_star)
            .zip(&self.curvature)
            .map(|((t, s), l)| {
                let d = t - s;
                0.5 * l * d * d + self.eps * (1.0 - d.cos())
            })
            .sum()
    }

    pub fn grad(&self, theta: &[f64]) -> Vec<f64> {
        self.check(theta);
        theta
            .iter()
            .zip(&self.theta_star)
            .zip(&self.curvature)
            .map(|((t, s), l)| {
                let d = t - s;
                l * d + self.eps * d.sin()
            })
            .collect()
    }

    /// `L(θ*)`, the global minimum.
    pub fn min_loss(&self) -> f64 {
        0.0
    }

    pub fn is_convex(&self) -> bool {
        self.curvature.iter().all(|l| *l >= self.eps)
    }

    /// Largest observed `‖∇L(a) − ∇L(b)‖ / ‖a − b‖` over random pairs.
    pub fn audit_smoothness(&self, pairs: usize, spread: f64, rng: &mut RngState) -> f64 {
        let d = self.dim();
        let mut worst: f64 = 0.0;
        for _ in 0..pairs {
            let a: Vec<f64> = self.theta_star.iter().map(|s| s + rng.gaussian(spread)).collect();
            // Mix near and far pairs so both the local and global curvature are probed.
            let r = spread * 10f64.powf(-3.0 * rng.uniform());
            let b: Vec<f64> = a.iter().map(|x| x + rng.gaussian(r)).collect();
            let (ga, gb) = (self.grad(&a), self.grad(&b));
            let num: f64 = ga.iter().zip(&gb).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            let den: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            if den > 0.0 && d > 0 {
                worst = worst.max(num / den);
            }
        }
        worst
    }
}

/// Orthogonal projector onto a set of coordinates.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Projector {
    d: usize,
    plastic: Vec<usize>,
}

impl Projector {
    pub fn new(d: usize, mut plastic: Vec<usize>) -> Result<Self> {
        plastic.sort_unstable();
        plastic.dedup();
        if let Some(&index) = plastic.iter().find(|&&i| i >= d) {
            return Err(TheoryError::BadIndex { index, d });
        }
        Ok(Self { d, plastic })
    }

    /// Plastic dimension for a mask ratio: the complement of `⌊(1−α)d⌋` kept coordinates.
    pub fn plastic_dim(d: usize, alpha: f64) -> usize {
        let kept = ((1.0 - alpha) * d as f64 + 1e-9).floor() as usize;
        d - kept.min(d)
    }

    /// `⌈αd⌉` plastic coordinates drawn uniformly.
    pub fn random(d: usize, alpha: f64, rng: &mut RngState) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(TheoryError::BadAlpha(alpha));
        }
        let mut idx: Vec<usize> = (0..d).collect();
        rng.shuffle(&mut idx);
        idx.truncate(Self::plastic_dim(d, alpha));
        Self::new(d, idx)
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn rank(&self) -> usize {
        self.plastic.len()
    }

    pub fn plastic(&self) -> &[usize] {
        &self.plastic
    }

    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.d, "projector dimension");
        let mut out = vec![0.0; self.d];
        for &i in &self.plastic {
            out[i] = v[i];
        }
        out
    }

    pub fn norm_sq(&self, v: &[f64]) -> f64 {
        self.plastic.iter().map(|&i| v[i] * v[i]).sum()
    }
}

fn mismatch(theta0: &[f64], theta_star: &[f64]) -> Result<Vec<f64>> {
    if theta0.len() != theta_star.len() {
        return Err(TheoryError::Dim {
            expected: theta_star.len(),
            got: theta0.len(),
        });
    }
    Ok(theta0.iter().zip(theta_star).map(|(a, b)| a - b).collect())
}

/// Smallest `ρ ∈ [0, 1)` with `‖P(θ₀−θ*)‖² ≤ (1−α+αρ)‖θ₀−θ*‖²`.
pub fn min_rho(theta0: &[f64], theta_star: &[f64], p: &Projector, alpha: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(TheoryError::BadAlpha(alpha));
    }
    let e = mismatch(theta0, theta_star)?;
    let total = dot(&e, &e);
    if total == 0.0 {
        return Err(TheoryError::ZeroMismatch);
    }
    let ratio = p.norm_sq(&e) / total;
    if alpha == 0.0 {
        // The factor is 1 whatever ρ is, and the ratio never exceeds 1.
        return Ok(0.0);
    }
    let rho = ((ratio - (1.0 - alpha)) / alpha).max(0.0);
    if rho >= 1.0 {
        return Err(TheoryError::Unsatisfiable(rho));
    }
    Ok(rho)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub eta: f64,
    /// Iterates `θ_0 … θ_N`.
    pub thetas: Vec<Vec<f64>>,
    /// `L(θ_t)` for `t = 0 … N`.
    pub losses: Vec<f64>,
    /// `‖P∇L(θ_t)‖²` for `t = 0 … N−1`.
    pub pgrad_sq: Vec<f64>,
}

impl Trajectory {
    pub fn steps(&self) -> usize {
        self.pgrad_sq.len()
    }
}

/// `θ ← θ − ηP∇L(θ)` with `η = 1/β` for `n` steps.
pub fn run_projected_gd(problem: &SmoothTestProblem, p: &Projector, theta0: &[f64], n: usize) -> Result<Trajectory> {
    run_projected_gd_with_beta(problem, p, theta0, n, problem.beta)
}

/// Same as [`run_projected_gd`] with the step size taken from an assumed `beta`.
pub fn run_projected_gd_with_beta(
    problem: &SmoothTestProblem,
    p: &Projector,
    theta0: &[f64],
    n: usize,
    beta: f64,
) -> Result<Trajectory> {
    if theta0.len() != problem.dim() || p.dim() != problem.dim() {
        return Err(TheoryError::Dim {
            expected: problem.dim(),
            got: theta0.len().min(p.dim()),
        });
    }
    let eta = 1.0 / beta;
    let mut theta = theta0.to_vec();
    let mut thetas = vec![theta.clone()];
    let mut losses = vec![problem.loss(&theta)];
    let mut pgrad_sq = Vec::with_capacity(n);
    for t in 0..n {
        let g = problem.grad(&theta);
        pgrad_sq.push(p.norm_sq(&g));
        for &i in p.plastic() {
            theta[i] -= eta * g[i];
        }
        let l = problem.loss(&theta);
        if !l.is_finite() || l > 1e300 {
            return Err(TheoryError::Divergence(t + 1));
        }
        thetas.push(theta.clone());
        losses.push(l);
    }
    Ok(Trajectory {
        eta,
        thetas,
        losses,
        pgrad_sq,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub rho: f64,
    /// `(1/N')Σ‖P∇L‖²` for every prefix `N' = 1 … N`.
    pub lhs: Vec<f64>,
    /// `(β/N')(1−α+αρ)‖θ₀−θ*‖²` for every prefix.
    pub rhs: Vec<f64>,
    /// LHS/RHS at the full horizon.
    pub tightness: f64,
    pub max_prefix_ratio: f64,
    /// First prefix length at which LHS exceeds RHS.
    pub first_violation: Option<usize>,
}

impl BoundReport {
    pub fn holds(&self) -> bool {
        self.first_violation.is_none()
    }
}

/// Absolute slack for floating-point equality cases of the bound.
pub const BOUND_SLACK: f64 = 1e-12;
/// Absolute slack of the per-step descent inequality.
pub const DESCENT_SLACK: f64 = 1e-9;

/// Checks the averaged stationarity bound at every prefix, with `ρ` from [`min_rho`].
pub fn check_bound(traj: &Trajectory, problem: &SmoothTestProblem, p: &Projector, alpha: f64) -> Result<BoundReport> {
    check_bound_with_beta(traj, problem, p, alpha, problem.beta)
}

pub fn check_bound_with_beta(
    traj: &Trajectory,
    problem: &SmoothTestProblem,
    p: &Projector,
    alpha: f64,
    beta: f64,
) -> Result<BoundReport> {
    let theta0 = &traj.thetas[0];
    let rho = min_rho(theta0, &problem.theta_star, p, alpha)?;
    let e = mismatch(theta0, &problem.theta_star)?;
    let budget = beta * (1.0 - alpha + alpha * rho) * dot(&e, &e);
    let (mut lhs, mut rhs) = (Vec::new(), Vec::new());
    let mut sum = 0.0;
    let mut first_violation = None;
    let mut max_prefix_ratio: f64 = 0.0;
    for (k, g) in traj.pgrad_sq.iter().enumerate() {
        sum += g;
        let n = (k + 1) as f64;
        let (l, r) = (sum / n, budget / n);
        if l > r + BOUND_SLACK && first_violation.is_none() {
            first_violation = Some(k + 1);
        }
        max_prefix_ratio = max_prefix_ratio.max(l / r);
        lhs.push(l);
        rhs.push(r);
    }
    let tightness = match (lhs.last(), rhs.last()) {
        (Some(l), Some(r)) => l / r,
        _ => 0.0,
    };
    Ok(BoundReport {
        rho,
        lhs,
        rhs,
        tightness,
        max_prefix_ratio,
        first_violation,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescentReport {
    /// `L(θ_{t+1}) − L(θ_t) + ‖P∇L(θ_t)‖²/(2β)` per step; must be ≤ slack.
    pub gaps: Vec<f64>,
    pub max_gap: f64,
    pub first_violation: Option<usize>,
}

impl DescentReport {
    pub fn holds(&self) -> bool {
        self.first_violation.is_none()
    }
}

pub fn check_descent_step(traj: &Trajectory, problem: &SmoothTestProblem) -> DescentReport {
    check_descent_with_beta(traj, problem.beta)
}

pub fn check_descent_with_beta(traj: &Trajectory, beta: f64) -> DescentReport {
    let mut gaps = Vec::with_capacity(traj.steps());
    let mut first_violation = None;
    for t in 0..traj.steps() {
        let gap = traj.losses[t + 1] - traj.losses[t] + traj.pgrad_sq[t] / (2.0 * beta);
        if gap > DESCENT_SLACK && first_violation.is_none() {
            first_violation = Some(t);
        }
        gaps.push(gap);
    }
    let max_gap = gaps.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    DescentReport {
        gaps,
        max_gap,
        first_violation,
    }
}

/// `Σ‖P∇L(θ_t)‖² ≤ 2β(L(θ₀) − L(θ*))`; returns `(lhs, rhs)`.
pub fn telescoping_audit(traj: &Trajectory, problem: &SmoothTestProblem, beta: f64) -> (f64, f64) {
    let lhs: f64 = traj.pgrad_sq.iter().sum();
    (lhs, 2.0 * beta * (traj.losses[0] - problem.min_loss()))
}

/// `L(θ₀) − L(θ*) ≤ (β/2)‖θ₀−θ*‖²`; returns `(gap, bound)`.
pub fn gap_link(problem: &SmoothTestProblem, theta0: &[f64]) -> (f64, f64) {
    let e: Vec<f64> = theta0.iter().zip(&problem.theta_star).map(|(a, b)| a - b).collect();
    (problem.loss(theta0) - problem.min_loss(), 0.5 * problem.beta * dot(&e, &e))
}
