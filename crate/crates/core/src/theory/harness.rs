use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    check_bound_with_beta, check_descent_with_beta, gap_link, min_rho, run_projected_gd_with_beta, telescoping_audit,
    BoundReport, Projector, Result, SmoothTestProblem, TheoryError, Trajectory, BOUND_SLACK,
};
use crate::adapters::SvdAdapter;
use crate::numerics::RngState;
use crate::rac1::PlasticityMask;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    /// `½Σλ_iδ_i²` with λ in [0.05, 1].
    Diagonal,
    /// Quadratic plus `0.3·Σ(1 − cos δ_i)`, λ in [0.05, 0.7]; non-convex where λ_i < 0.3.
    Sinusoid,
}

impl Family {
    pub const ALL: [Family; 2] = [Family::Diagonal, Family::Sinusoid];

    pub fn name(self) -> &'static str {
        match self {
            Family::Diagonal => "diagonal",
            Family::Sinusoid => "sinusoid",
        }
    }

    /// Random instance normalized to `β = 1`.
    pub fn generate(self, d: usize, rng: &mut RngState) -> SmoothTestProblem {
        let (lo, hi, eps) = match self {
            Family::Diagonal => (0.05, 1.0, 0.0),
            Family::Sinusoid => (0.05, 0.7, 0.3),
        };
        let mut curvature: Vec<f64> = (0..d).map(|_| lo + (hi - lo) * rng.uniform()).collect();
        curvature[rng.below(d)] = hi;
        let theta_star = rng.normal_vec(d, 1.0);
        SmoothTestProblem::new(curvature, theta_star, eps).expect("generated curvature is valid")
    }

    /// Start spread; wide enough on the sinusoid family to cross non-convex regions.
    pub fn start_scale(self) -> f64 {
        match self {
            Family::Diagonal => 1.0,
            Family::Sinusoid => 3.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HarnessConfig {
    pub alphas: Vec<f64>,
    pub seeds: usize,
    pub d: usize,
    pub n_steps: usize,
    pub smoothness_pairs: usize,
    /// Multiplies the certified β used for the step size and bound (1 = honest).
    pub beta_scale: f64,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        Self {
            alphas: vec![0.1, 0.3, 0.5],
            seeds: 20,
            d: 32,
            n_steps: 200,
            smoothness_pairs: 10_000,
            beta_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseResult {
    pub family: Family,
    pub alpha: f64,
    pub k_plastic: usize,
    pub beta: f64,
    pub convex: bool,
    pub smoothness_observed: f64,
    pub rho: f64,
    pub tightness: f64,
    pub max_prefix_ratio: f64,
    pub bound_violation: Option<usize>,
    pub descent_max_gap: f64,
    pub descent_violation: Option<usize>,
    pub telescoping_lhs: f64,
    pub telescoping_rhs: f64,
    pub gap: f64,
    pub gap_bound: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRow {
    pub seed: u64,
    pub cases: Vec<CaseResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub config: HarnessConfig,
    pub rows: Vec<SeedRow>,
    /// N = 1 identity-quadratic equality case.
    pub identity_tightness: f64,
    /// Mean bound right-hand side per α over isotropic mismatches with ρ fixed.
    pub monotone_alpha: Vec<(f64, f64)>,
    pub monotone_holds: bool,
    pub pass: bool,
}

pub const TRAJECTORY_COLUMNS: [&str; 8] = ["family", "alpha", "seed", "t", "loss", "pgrad_sq", "lhs", "rhs"];

/// Start point `θ* + e`, redrawn until the mismatch assumption is satisfiable.
fn start_point(problem: &SmoothTestProblem, p: &Projector, alpha: f64, scale: f64, rng: &mut RngState) -> Result<Vec<f64>> {
    let mut last = TheoryError::ZeroMismatch;
    for _ in 0..1000 {
        let theta0: Vec<f64> = problem.theta_star.iter().map(|s| s + rng.gaussian(scale)).collect();
        match min_rho(&theta0, &problem.theta_star, p, alpha) {
            Ok(_) => return Ok(theta0),
            Err(e) => last = e,
        }
    }
    Err(last)
}

fn run_case(
    family: Family,
    problem: &SmoothTestProblem,
    alpha: f64,
    cfg: &HarnessConfig,
    rng: &mut RngState,
) -> Result<(CaseResult, Trajectory, BoundReport)> {
    let p = Projector::random(cfg.d, alpha, rng)?;
    let theta0 = start_point(problem, &p, alpha, family.start_scale(), rng)?;
    let beta = problem.beta * cfg.beta_scale;
    let smoothness_observed = problem.audit_smoothness(cfg.smoothness_pairs, family.start_scale(), rng);
    let traj = run_projected_gd_with_beta(problem, &p, &theta0, cfg.n_steps, beta)?;
    let bound = check_bound_with_beta(&traj, problem, &p, alpha, beta)?;
    let descent = check_descent_with_beta(&traj, beta);
    let (telescoping_lhs, telescoping_rhs) = telescoping_audit(&traj, problem, beta);
    let (gap, gap_bound) = gap_link(problem, &theta0);
    let pass = bound.holds()
        && descent.holds()
        && smoothness_observed <= beta * (1.0 + 1e-12)
        && telescoping_lhs <= telescoping_rhs + BOUND_SLACK
        && gap <= gap_bound + BOUND_SLACK;
    let case = CaseResult {
        family,
        alpha,
        k_plastic: p.rank(),
        beta,
        convex: problem.is_convex(),
        smoothness_observed,
        rho: bound.rho,
        tightness: bound.tightness,
        max_prefix_ratio: bound.max_prefix_ratio,
        bound_violation: bound.first_violation,
        descent_max_gap: descent.max_gap,
        descent_violation: descent.first_violation,
        telescoping_lhs,
        telescoping_rhs,
        gap,
        gap_bound,
        pass,
    };
    Ok((case, traj, bound))
}

fn identity_tightness(d: usize) -> Result<f64> {
    let mut rng = RngState::new(0).fork(7);
    let alpha = 0.5;
    let problem = SmoothTestProblem::identity(rng.normal_vec(d, 1.0));
    let p = Projector::random(d, alpha, &mut rng)?;
    // Scale the plastic part so the mismatch ratio sits inside [1−α, 1), where ρ_min > 0.
    let mut e = rng.normal_vec(d, 1.0);
    let target = 1.0 - alpha / 2.0;
    let (pe, total) = (p.norm_sq(&e), e.iter().map(|x| x * x).sum::<f64>());
    let c = (target * (total - pe) / ((1.0 - target) * pe)).sqrt();
    for &i in p.plastic() {
        e[i] *= c;
    }
    let theta0: Vec<f64> = problem.theta_star.iter().zip(&e).map(|(s, x)| s + x).collect();
    let traj = run_projected_gd_with_beta(&problem, &p, &theta0, 1, problem.beta)?;
    Ok(check_bound_with_beta(&traj, &problem, &p, alpha, problem.beta)?.tightness)
}

fn monotone_alpha(alphas: &[f64], d: usize, n: usize) -> Vec<(f64, f64)> {
    let rho = 0.5;
    let mut sorted = alphas.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mean_sq: f64 = (0..100u64)
        .map(|s| RngState::new(s).fork(11).normal_vec(d, 1.0).iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        / 100.0;
    sorted
        .into_iter()
        .map(|a| (a, (1.0 - a + a * rho) * mean_sq / n as f64))
        .collect()
}

/// Runs every family × α × seed case; returns the report and a long-format trajectory CSV.
pub fn run_harness(cfg: &HarnessConfig) -> Result<(VerificationReport, String)> {
    if cfg.d == 0 || cfg.n_steps == 0 || cfg.seeds == 0 {
        return Err(TheoryError::BadProblem("d, n_steps and seeds must be positive".into()));
    }
    if !(cfg.beta_scale > 0.0) {
        return Err(TheoryError::BadProblem(format!("beta_scale must be positive, got {}", cfg.beta_scale)));
    }
    if let Some(a) = cfg.alphas.iter().find(|a| !(0.0..=1.0).contains(*a)) {
        return Err(TheoryError::BadAlpha(*a));
    }
    let per_seed: Vec<Result<(SeedRow, String)>> = (0..cfg.seeds as u64)
        .into_par_iter()
        .map(|seed| {
            let mut cases = Vec::new();
            let mut csv = String::new();
            for (fi, family) in Family::ALL.into_iter().enumerate() {
                let root = RngState::new(seed).fork(fi as u64 + 1);
                let problem = family.generate(cfg.d, &mut root.fork(0));
                for (ai, &alpha) in cfg.alphas.iter().enumerate() {
                    let mut rng = root.fork(ai as u64 + 1);
                    let (case, traj, bound) = run_case(family, &problem, alpha, cfg, &mut rng)?;
                    csv += &trajectory_rows(family, alpha, seed, &traj, &bound);
                    cases.push(case);
                }
            }
            Ok((SeedRow { seed, cases }, csv))
        })
        .collect();
    let mut rows = Vec::with_capacity(cfg.seeds);
    let mut csv = TRAJECTORY_COLUMNS.join(",") + "\n";
    for r in per_seed {
        let (row, part) = r?;
        rows.push(row);
        csv += &part;
    }
    let identity_tightness = identity_tightness(cfg.d)?;
    let monotone_alpha = monotone_alpha(&cfg.alphas, cfg.d, cfg.n_steps);
    let monotone_holds = monotone_alpha.windows(2).all(|w| w[1].1 < w[0].1);
    let pass = rows.iter().all(|r| r.cases.iter().all(|c| c.pass))
        && (identity_tightness - 1.0).abs() <= BOUND_SLACK
        && monotone_holds;
    let report = VerificationReport {
        config: cfg.clone(),
        rows,
        identity_tightness,
        monotone_alpha,
        monotone_holds,
        pass,
    };
    Ok((report, csv))
}

/// Flat coordinates of a set of SVD adapters (per slot: σ, then U and V column-major)
/// with the projector onto the plastic rank directions of each mask.
pub fn adapter_coordinates(adapters: &[SvdAdapter], masks: &[PlasticityMask]) -> Result<(Vec<f64>, Projector)> {
    if adapters.len() != masks.len() {
        return Err(TheoryError::Dim {
            expected: adapters.len(),
            got: masks.len(),
        });
    }
    let mut theta = Vec::new();
    let mut plastic = Vec::new();
    for (a, m) in adapters.iter().zip(masks) {
        let r = a.rank();
        if m.rank() != r {
            return Err(TheoryError::Dim { expected: r, got: m.rank() });
        }
        let base = theta.len();
        theta.extend_from_slice(&a.sigma);
        let (d_out, d_in) = (a.d_out(), a.d_in());
        for j in 0..r {
            theta.extend(a.u.column(j));
        }
        for j in 0..r {
            theta.extend(a.v.column(j));
        }
        for j in m.plastic_indices() {
            plastic.push(base + j);
            plastic.extend((0..d_out).map(|i| base + r + j * d_out + i));
            plastic.extend((0..d_in).map(|i| base + r + r * d_out + j * d_in + i));
        }
    }
    let d = theta.len();
    Ok((theta, Projector::new(d, plastic)?))
}

/// Largest secant ratio `‖g_{t+1} − g_t‖ / ‖θ_{t+1} − θ_t‖` along a path.
pub fn empirical_beta(thetas: &[Vec<f64>], grads: &[Vec<f64>]) -> f64 {
    let norm = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    thetas
        .windows(2)
        .zip(grads.windows(2))
        .filter_map(|(t, g)| {
            let den = norm(&t[1], &t[0]);
            (den > 0.0).then(|| norm(&g[1], &g[0]) / den)
        })
        .fold(0.0, f64::max)
}

/// Long-format CSV of one trajectory and its bound sequences.
pub fn trajectory_csv(family: Family, alpha: f64, seed: u64, traj: &Trajectory, bound: &BoundReport) -> String {
    TRAJECTORY_COLUMNS.join(",") + "\n" + &trajectory_rows(family, alpha, seed, traj, bound)
}

fn trajectory_rows(family: Family, alpha: f64, seed: u64, traj: &Trajectory, bound: &BoundReport) -> String {
    let mut out = String::new();
    for t in 0..traj.steps() {
        out += &format!(
            "{},{alpha},{seed},{t},{},{},{},{}\n",
            family.name(),
            traj.losses[t],
            traj.pgrad_sq[t],
            bound.lhs[t],
            bound.rhs[t]
        );
    }
    out
}
