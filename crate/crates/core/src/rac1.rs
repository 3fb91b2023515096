//! Subspace reconfiguration over SVD adapters.
//!
//! The largest-|σ| rank-1 directions of a retrieved source adapter are kept
//! frozen; the remaining tail slots are zeroed and opened to gradients. The
//! forward pass always uses all `r` components; only gradients are masked.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapters::SvdAdapter;
use crate::numerics::{cosine_sim, NumericsError, RngState, Tensor2D};
use crate::stream::TaskId;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Rac1Error {
    #[error("cannot build a mask from an empty σ")]
    EmptySigma,
    #[error("mask ratio must lie in [0, 1], got {0}")]
    BadAlpha(f64),
    #[error("mask rank {mask} does not match adapter rank {adapter}")]
    RankMismatch { mask: usize, adapter: usize },
    #[error("gradient shape {got:?} does not match ΔW shape {expected:?}")]
    GradShape {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("source library is empty")]
    EmptyLibrary,
    #[error("duplicate task id {0:?} in source library")]
    DuplicateTask(TaskId),
    #[error("embedding has {got} dims, library uses {expected}")]
    EmbeddingDims { expected: usize, got: usize },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

pub type Result<T> = std::result::Result<T, Rac1Error>;

/// Which rank directions stay frozen as consolidated knowledge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum MaskSpace {
    /// Keep the top `⌊(1−α)r⌋` directions by |σ|; the tail is plastic.
    #[default]
    Tail,
    /// Keep the bottom `⌊(1−α)r⌋`; the head directions are plastic.
    Head,
    /// Keep a uniformly random subset of size `⌊(1−α)r⌋`.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlasticityMask {
    /// Kept rank indices, ascending.
    keep: Vec<usize>,
    /// `m_j = 0` for kept directions, `1` for plastic ones.
    m: Vec<f64>,
    alpha: f64,
}

impl PlasticityMask {
    fn from_keep(mut keep: Vec<usize>, r: usize, alpha: f64) -> Self {
        keep.sort_unstable();
        let mut m = vec![1.0; r];
        for &j in &keep {
            m[j] = 0.0;
        }
        Self { keep, m, alpha }
    }

    /// Everything plastic: the unmasked ablation.
    pub fn all_plastic(r: usize) -> Self {
        Self::from_keep(Vec::new(), r, 1.0)
    }

    pub fn rank(&self) -> usize {
        self.m.len()
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn keep_indices(&self) -> &[usize] {
        &self.keep
    }

    pub fn plastic_indices(&self) -> Vec<usize> {
        (0..self.rank()).filter(|&j| self.m[j] == 1.0).collect()
    }

    pub fn is_kept(&self, j: usize) -> bool {
        self.m[j] == 0.0
    }

    pub fn weights(&self) -> &[f64] {
        &self.m
    }
}

/// `⌊(1−α)r⌋`, guarded against round-off just below an integer.
pub fn kept_count(r: usize, alpha: f64) -> usize {
    let raw = (1.0 - alpha) * r as f64;
    let nearest = raw.round();
    if (raw - nearest).abs() < 1e-9 {
        nearest as usize
    } else {
        raw.floor() as usize
    }
}

/// Magnitude order, descending, lower index first on ties.
fn by_magnitude(sigma: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..sigma.len()).collect();
    idx.sort_by(|&a, &b| {
        sigma[b]
            .abs()
            .partial_cmp(&sigma[a].abs())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx
}

pub fn build_mask(sigma: &[f64], alpha: f64) -> Result<PlasticityMask> {
    build_mask_in_space(sigma, alpha, MaskSpace::Tail, None)
}

/// `rng` is only consulted for [`MaskSpace::Random`] (a fixed stream is used when absent).
pub fn build_mask_in_space(
    sigma: &[f64],
    alpha: f64,
    space: MaskSpace,
    rng: Option<&mut RngState>,
) -> Result<PlasticityMask> {
    if sigma.is_empty() {
        return Err(Rac1Error::EmptySigma);
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Rac1Error::BadAlpha(alpha));
    }
    let r = sigma.len();
    let n_keep = kept_count(r, alpha);
    let order = by_magnitude(sigma);
    let keep = match space {
        MaskSpace::Tail => order[..n_keep].to_vec(),
        MaskSpace::Head => order[r - n_keep..].to_vec(),
        MaskSpace::Random => {
            let mut fallback = RngState::new(0);
            let rng = rng.unwrap_or(&mut fallback);
            let mut idx: Vec<usize> = (0..r).collect();
            rng.shuffle(&mut idx);
            idx.truncate(n_keep);
            idx
        }
    };
    Ok(PlasticityMask::from_keep(keep, r, alpha))
}

/// Zeroes σ on every plastic slot; `U`, `V` and kept σ are untouched.
pub fn reset_tail(adapter: &SvdAdapter, mask: &PlasticityMask) -> Result<SvdAdapter> {
    check_rank(adapter, mask)?;
    let mut out = adapter.clone();
    for (j, s) in out.sigma.iter_mut().enumerate() {
        if !mask.is_kept(j) {
            *s = 0.0;
        }
    }
    Ok(out)
}

fn check_rank(adapter: &SvdAdapter, mask: &PlasticityMask) -> Result<()> {
    if mask.rank() != adapter.rank() {
        return Err(Rac1Error::RankMismatch {
            mask: mask.rank(),
            adapter: adapter.rank(),
        });
    }
    Ok(())
}

fn check_grad(u: &Tensor2D, v: &Tensor2D, g: &Tensor2D) -> Result<()> {
    if g.shape() != (u.rows(), v.rows()) || u.cols() != v.cols() {
        return Err(Rac1Error::GradShape {
            expected: (u.rows(), v.rows()),
            got: g.shape(),
        });
    }
    Ok(())
}

/// `m ⊙ diag(Uᵀ G V)` where `G = ∂L/∂ΔW`. The optimizer steps along `−η g`.
pub fn masked_sigma_grad(u: &Tensor2D, v: &Tensor2D, g: &Tensor2D, mask: &PlasticityMask) -> Result<Vec<f64>> {
    check_grad(u, v, g)?;
    if mask.rank() != u.cols() {
        return Err(Rac1Error::RankMismatch {
            mask: mask.rank(),
            adapter: u.cols(),
        });
    }
    let gv = g.matmul(v)?;
    Ok((0..u.cols())
        .map(|j| {
            if mask.is_kept(j) {
                0.0
            } else {
                (0..u.rows()).map(|i| u.get(i, j) * gv.get(i, j)).sum()
            }
        })
        .collect())
}

/// `(G V diag(σ), Gᵀ U diag(σ))` with kept columns zeroed.
pub fn masked_factor_grads(adapter: &SvdAdapter, g: &Tensor2D, mask: &PlasticityMask) -> Result<(Tensor2D, Tensor2D)> {
    check_rank(adapter, mask)?;
    check_grad(&adapter.u, &adapter.v, g)?;
    let mut du = g.matmul(&adapter.v)?;
    let mut dv = g.transpose().matmul(&adapter.u)?;
    for j in 0..adapter.rank() {
        let w = if mask.is_kept(j) { 0.0 } else { adapter.sigma[j] };
        for i in 0..du.rows() {
            du.set(i, j, du.get(i, j) * w);
        }
        for i in 0..dv.rows() {
            dv.set(i, j, dv.get(i, j) * w);
        }
    }
    Ok((du, dv))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceEntry {
    pub task_id: TaskId,
    pub embedding: Vec<f64>,
    /// One SVD adapter per adapter-bearing layer.
    pub adapters: Vec<SvdAdapter>,
}

/// Read-only store of per-task source adapters keyed by task embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceLibrary {
    entries: Vec<SourceEntry>,
}

impl SourceLibrary {
    pub fn new(entries: Vec<SourceEntry>) -> Result<Self> {
        let Some(first) = entries.first() else {
            return Err(Rac1Error::EmptyLibrary);
        };
        let dims = first.embedding.len();
        for (i, e) in entries.iter().enumerate() {
            if e.embedding.len() != dims {
                return Err(Rac1Error::EmbeddingDims {
                    expected: dims,
                    got: e.embedding.len(),
                });
            }
            if entries[..i].iter().any(|o| o.task_id == e.task_id) {
                return Err(Rac1Error::DuplicateTask(e.task_id));
            }
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[SourceEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn embedding_dims(&self) -> usize {
        self.entries[0].embedding.len()
    }

    pub fn get(&self, task: TaskId) -> Option<&SourceEntry> {
        self.entries.iter().find(|e| e.task_id == task)
    }
}

/// Entry with the highest cosine similarity to `target`; lowest task id wins ties.
pub fn retrieve<'a>(library: &'a SourceLibrary, target: &[f64]) -> Result<&'a SourceEntry> {
    if library.is_empty() {
        return Err(Rac1Error::EmptyLibrary);
    }
    if target.len() != library.embedding_dims() {
        return Err(Rac1Error::EmbeddingDims {
            expected: library.embedding_dims(),
            got: target.len(),
        });
    }
    let mut best: Option<(&SourceEntry, f64)> = None;
    for e in library.entries() {
        let c = cosine_sim(target, &e.embedding)?;
        best = match best {
            None => Some((e, c)),
            Some((b, bc)) if c > bc || (c == bc && e.task_id < b.task_id) => Some((e, c)),
            keep => keep,
        };
    }
    Ok(best.expect("nonempty library").0)
}

/// Deep copy of the best-matching entry's adapters.
pub fn retrieve_and_init(library: &SourceLibrary, target: &[f64]) -> Result<(TaskId, Vec<SvdAdapter>)> {
    let e = retrieve(library, target)?;
    Ok((e.task_id, e.adapters.clone()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::init_svd_adapter;
    use crate::numerics::{finite_diff_grad, relative_error};
    use proptest::prelude::*;

    fn t(rows: &[&[f64]]) -> Tensor2D {
        Tensor2D::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn default_ratio_on_rank_sixteen() {
        let sigma: Vec<f64> = (0..16).map(|j| 1.0 + j as f64).collect();
        let m = build_mask(&sigma, 0.1).unwrap();
        assert_eq!(m.keep_indices().len(), 14);
        assert_eq!(m.plastic_indices(), vec![0, 1]);
    }

    #[test]
    fn boundary_ratios() {
        let sigma = [0.3, -1.0, 2.0];
        let frozen = build_mask(&sigma, 0.0).unwrap();
        assert!(frozen.weights().iter().all(|&w| w == 0.0));
        let open = build_mask(&sigma, 1.0).unwrap();
        assert!(open.keep_indices().is_empty());
        assert!(open.weights().iter().all(|&w| w == 1.0));
        assert!(build_mask(&[], 0.1).is_err());
        assert!(build_mask(&sigma, 1.5).is_err());
    }

    #[test]
    fn magnitude_order_example() {
        let m = build_mask(&[0.5, -3.0, 0.1, 2.0], 0.5).unwrap();
        assert_eq!(m.keep_indices(), &[1, 3]);
        assert_eq!(m.plastic_indices(), vec![0, 2]);
    }

    #[test]
    fn ties_prefer_lower_index() {
        let m = build_mask(&[1.0, -1.0, 1.0, 0.0], 0.5).unwrap();
        assert_eq!(m.keep_indices(), &[0, 1]);
    }

    #[test]
    fn head_and_random_spaces() {
        let sigma = [0.5, -3.0, 0.1, 2.0];
        let head = build_mask_in_space(&sigma, 0.5, MaskSpace::Head, None).unwrap();
        assert_eq!(head.keep_indices(), &[0, 2]);
        let mut rng = RngState::new(3);
        let rand = build_mask_in_space(&sigma, 0.5, MaskSpace::Random, Some(&mut rng)).unwrap();
        assert_eq!(rand.keep_indices().len(), 2);
    }

    fn example_adapter() -> SvdAdapter {
        let mut rng = RngState::new(1);
        let mut a = init_svd_adapter(5, 4, 4, &mut rng, 1.0).unwrap();
        a.sigma = vec![0.5, -3.0, 0.1, 2.0];
        a
    }

    #[test]
    fn reset_examples() {
        let a = example_adapter();
        assert_eq!(reset_tail(&a, &build_mask(&a.sigma, 0.0).unwrap()).unwrap(), a);
        let mask = build_mask(&a.sigma, 0.5).unwrap();
        let r = reset_tail(&a, &mask).unwrap();
        assert_eq!(r.sigma, vec![0.0, -3.0, 0.0, 2.0]);
        assert_eq!(r.u, a.u);
        assert_eq!(r.v, a.v);
        let mut dense = Tensor2D::zeros(5, 4);
        for &j in mask.keep_indices() {
            dense.add_outer(a.sigma[j], &a.u.column(j), &a.v.column(j));
        }
        assert!(r.delta_weight().max_abs_diff(&dense) < 1e-12);
        let short = build_mask(&[1.0, 2.0], 0.5).unwrap();
        assert!(reset_tail(&a, &short).is_err());
    }

    #[test]
    fn sigma_grad_by_hand_and_zero_mask() {
        let u = t(&[&[1.0], &[0.0]]);
        let v = t(&[&[1.0], &[0.0]]);
        let g = t(&[&[3.0, 1.0], &[2.0, 4.0]]);
        let open = build_mask(&[1.0], 1.0).unwrap();
        assert_eq!(masked_sigma_grad(&u, &v, &g, &open).unwrap(), vec![3.0]);
        let closed = build_mask(&[1.0], 0.0).unwrap();
        assert_eq!(masked_sigma_grad(&u, &v, &g, &closed).unwrap(), vec![0.0]);
        assert!(masked_sigma_grad(&u, &v, &Tensor2D::zeros(3, 2), &open).is_err());
    }

    #[test]
    fn reset_slots_have_zero_factor_grads() {
        let a = example_adapter();
        let mask = build_mask(&a.sigma, 0.5).unwrap();
        let r = reset_tail(&a, &mask).unwrap();
        let mut rng = RngState::new(8);
        let g = Tensor2D::randn(5, 4, 1.0, &mut rng);
        let (du, dv) = masked_factor_grads(&r, &g, &mask).unwrap();
        for j in 0..4 {
            assert!(du.column(j).iter().all(|&x| x == 0.0));
            assert!(dv.column(j).iter().all(|&x| x == 0.0));
        }
    }

    /// Dense loss `L(ΔW) = Σ C ⊙ ΔW + ¼‖ΔW‖⁴_F`, evaluated through the adapter.
    fn dense_loss(c: &Tensor2D, a: &SvdAdapter) -> f64 {
        let dw = a.delta_weight();
        let lin: f64 = dw.data().iter().zip(c.data()).map(|(d, c)| c * d).sum();
        let n2 = dw.frobenius_norm().powi(2);
        lin + 0.25 * n2 * n2
    }

    fn dense_grad(c: &Tensor2D, a: &SvdAdapter) -> Tensor2D {
        let dw = a.delta_weight();
        let n2 = dw.frobenius_norm().powi(2);
        c.add(&dw.scale(n2)).unwrap()
    }

    fn masked_fd(a: &SvdAdapter, c: &Tensor2D, mask: &PlasticityMask) -> (Vec<f64>, Tensor2D, Tensor2D) {
        let fd = finite_diff_grad(
            |p| {
                let mut b = a.clone();
                b.set_params(p);
                dense_loss(c, &b)
            },
            &a.params(),
            1e-6,
        )
        .unwrap();
        let r = a.rank();
        let mut sig = fd[..r].to_vec();
        let mut du = Tensor2D::new(a.d_out(), r, fd[r..r + a.d_out() * r].to_vec()).unwrap();
        let mut dv = Tensor2D::new(a.d_in(), r, fd[r + a.d_out() * r..].to_vec()).unwrap();
        for j in mask.keep_indices() {
            sig[*j] = 0.0;
            du.set_column(*j, &vec![0.0; a.d_out()]);
            dv.set_column(*j, &vec![0.0; a.d_in()]);
        }
        (sig, du, dv)
    }

    #[test]
    fn rank_one_fully_open_matches_oracle() {
        let mut rng = RngState::new(30);
        let mut a = init_svd_adapter(3, 2, 1, &mut rng, 1.0).unwrap();
        a.sigma = vec![0.8];
        let c = Tensor2D::randn(3, 2, 1.0, &mut rng);
        let mask = PlasticityMask::all_plastic(1);
        let g = dense_grad(&c, &a);
        let (fs, fu, fv) = masked_fd(&a, &c, &mask);
        let s = masked_sigma_grad(&a.u, &a.v, &g, &mask).unwrap();
        let (du, dv) = masked_factor_grads(&a, &g, &mask).unwrap();
        assert!(relative_error(&s, &fs, 1e-8) < 1e-5);
        assert!(relative_error(du.data(), fu.data(), 1e-8) < 1e-5);
        assert!(relative_error(dv.data(), fv.data(), 1e-8) < 1e-5);
    }

    #[test]
    fn retrieval_examples() {
        let ad = vec![init_svd_adapter(2, 2, 1, &mut RngState::new(0), 0.02).unwrap()];
        let e = |id: u32, emb: Vec<f64>| SourceEntry {
            task_id: TaskId(id),
            embedding: emb,
            adapters: ad.clone(),
        };
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let lib = SourceLibrary::new(vec![e(1, vec![1.0, 0.0]), e(2, vec![0.0, 1.0]), e(3, vec![s, s])]).unwrap();
        assert_eq!(retrieve(&lib, &[0.9, 0.1]).unwrap().task_id, TaskId(1));
        assert_eq!(retrieve(&lib, &[0.0, 1.0]).unwrap().task_id, TaskId(2));
        let single = SourceLibrary::new(vec![e(7, vec![1.0, 2.0])]).unwrap();
        assert_eq!(retrieve_and_init(&single, &[-1.0, 0.5]).unwrap().0, TaskId(7));
        assert!(retrieve(&lib, &[0.0, 0.0]).is_err());
        assert!(retrieve(&lib, &[1.0]).is_err());
        let tie = SourceLibrary::new(vec![e(5, vec![1.0, 0.0]), e(4, vec![2.0, 0.0])]).unwrap();
        assert_eq!(retrieve(&tie, &[1.0, 0.0]).unwrap().task_id, TaskId(4));
        assert!(SourceLibrary::new(vec![]).is_err());
        assert!(SourceLibrary::new(vec![e(1, vec![1.0]), e(1, vec![2.0])]).is_err());
    }

    #[test]
    fn retrieved_copy_is_independent() {
        let ad = vec![init_svd_adapter(2, 2, 1, &mut RngState::new(0), 0.02).unwrap()];
        let lib = SourceLibrary::new(vec![SourceEntry {
            task_id: TaskId(0),
            embedding: vec![1.0],
            adapters: ad.clone(),
        }])
        .unwrap();
        let (_, mut copy) = retrieve_and_init(&lib, &[1.0]).unwrap();
        copy[0].sigma[0] = 9.0;
        assert_eq!(lib.entries()[0].adapters, ad);
    }

    proptest! {
        #[test]
        fn cardinality_adds_up(r in 1usize..40, alpha in 0.0f64..=1.0) {
            let sigma: Vec<f64> = (0..r).map(|j| (j as f64 * 0.37).sin()).collect();
            let m = build_mask(&sigma, alpha).unwrap();
            prop_assert_eq!(m.keep_indices().len(), kept_count(r, alpha));
            prop_assert_eq!(m.keep_indices().len() + m.plastic_indices().len(), r);
            for j in 0..r {
                prop_assert_eq!(m.weights()[j] == 0.0, m.keep_indices().contains(&j));
            }
        }

        #[test]
        fn masked_grads_equal_projected_oracle(
            seed in 0u64..1000,
            d_out in 1usize..=4,
            d_in in 1usize..=4,
            alpha in 0.0f64..=1.0,
        ) {
            let mut rng = RngState::new(seed);
            let r = 1 + rng.below(d_out.min(d_in));
            let mut a = init_svd_adapter(d_out, d_in, r, &mut rng, 1.0).unwrap();
            a.sigma = rng.normal_vec(r, 1.0);
            let c = Tensor2D::randn(d_out, d_in, 1.0, &mut rng);
            let mask = build_mask(&a.sigma, alpha).unwrap();
            let g = dense_grad(&c, &a);
            let (fs, fu, fv) = masked_fd(&a, &c, &mask);
            let s = masked_sigma_grad(&a.u, &a.v, &g, &mask).unwrap();
            let (du, dv) = masked_factor_grads(&a, &g, &mask).unwrap();
            prop_assert!(relative_error(&s, &fs, 1e-6) < 1e-5);
            prop_assert!(relative_error(du.data(), fu.data(), 1e-6) < 1e-5);
            prop_assert!(relative_error(dv.data(), fv.data(), 1e-6) < 1e-5);
            for &j in mask.keep_indices() {
                prop_assert_eq!(s[j], 0.0);
            }
        }
    }
}
