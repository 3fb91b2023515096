use serde::{Deserialize, Serialize};

use super::{AdapterError, Result};
use crate::numerics::{RngState, Tensor2D};

pub const DEFAULT_INIT_SCALE: f64 = 0.02;

/// Frozen base layer `y = W⁰ x + b⁰`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrozenLinear {
    pub weight: Tensor2D,
    pub bias: Vec<f64>,
}

impl FrozenLinear {
    pub fn new(weight: Tensor2D, bias: Vec<f64>) -> Result<Self> {
        if bias.len() != weight.rows() {
            return Err(AdapterError::InputWidth {
                expected: weight.rows(),
                got: bias.len(),
            });
        }
        Ok(Self { weight, bias })
    }

    /// Scaled-Gaussian init with zero bias.
    pub fn random(d_out: usize, d_in: usize, rng: &mut RngState) -> Self {
        let std = 1.0 / (d_in as f64).sqrt();
        Self {
            weight: Tensor2D::randn(d_out, d_in, std, rng),
            bias: vec![0.0; d_out],
        }
    }

    pub fn d_out(&self) -> usize {
        self.weight.rows()
    }

    pub fn d_in(&self) -> usize {
        self.weight.cols()
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.d_in() {
            return Err(AdapterError::InputWidth {
                expected: self.d_in(),
                got: x.len(),
            });
        }
        let mut y = self.weight.matvec(x)?;
        for (v, b) in y.iter_mut().zip(&self.bias) {
            *v += b;
        }
        Ok(y)
    }
}

/// `ΔW = B Aᵀ` with `B: d_out × r`, `A: d_in × r`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraAdapter {
    pub b: Tensor2D,
    pub a: Tensor2D,
}

impl LoraAdapter {
    /// Standard LoRA init: Gaussian `A`, zero `B`.
    pub fn new(d_out: usize, d_in: usize, r: usize, rng: &mut RngState, scale: f64) -> Result<Self> {
        check_rank(d_out, d_in, r)?;
        Ok(Self {
            b: Tensor2D::zeros(d_out, r),
            a: Tensor2D::randn(d_in, r, scale, rng),
        })
    }

    pub fn rank(&self) -> usize {
        self.b.cols()
    }
}

/// `ΔW = U diag(σ) Vᵀ` with `U: d_out × r`, `V: d_in × r`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvdAdapter {
    pub u: Tensor2D,
    pub sigma: Vec<f64>,
    pub v: Tensor2D,
}

impl SvdAdapter {
    pub fn new(u: Tensor2D, sigma: Vec<f64>, v: Tensor2D) -> Result<Self> {
        if u.cols() != sigma.len() || v.cols() != sigma.len() {
            return Err(AdapterError::AdapterShape {
                adapter: (u.cols(), v.cols()),
                layer: (sigma.len(), sigma.len()),
            });
        }
        Ok(Self { u, sigma, v })
    }

    pub fn rank(&self) -> usize {
        self.sigma.len()
    }

    pub fn d_out(&self) -> usize {
        self.u.rows()
    }

    pub fn d_in(&self) -> usize {
        self.v.rows()
    }

    pub fn delta_weight(&self) -> Tensor2D {
        let mut dw = Tensor2D::zeros(self.d_out(), self.d_in());
        for (j, &s) in self.sigma.iter().enumerate() {
            if s == 0.0 {
                continue;
            }
            dw.add_outer(s, &self.u.column(j), &self.v.column(j));
        }
        dw
    }

    /// Rewrites the factors as an exact thin SVD of the current `ΔW`:
    /// orthonormal `U`, `V` columns and `σ` sorted descending. `ΔW` is preserved
    /// up to round-off. Directions beyond the numerical rank stay orthonormal
    /// with `σ = 0`.
    pub fn to_svd_form(&self) -> Self {
        let dw = self.delta_weight();
        let (m, n, r) = (dw.rows(), dw.cols(), self.rank());
        let mat = nalgebra::DMatrix::from_row_slice(m, n, dw.data());
        let svd = mat.svd(true, true);
        let u_full = svd.u.expect("svd requested U");
        let vt_full = svd.v_t.expect("svd requested Vᵀ");
        let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
        order.sort_by(|&a, &b| {
            svd.singular_values[b]
                .partial_cmp(&svd.singular_values[a])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        let mut u = Tensor2D::zeros(m, r);
        let mut v = Tensor2D::zeros(n, r);
        let mut sigma = vec![0.0; r];
        for (slot, &k) in order.iter().take(r).enumerate() {
            sigma[slot] = svd.singular_values[k];
            for i in 0..m {
                u.set(i, slot, u_full[(i, k)]);
            }
            for i in 0..n {
                v.set(i, slot, vt_full[(k, i)]);
            }
        }
        Self { u, sigma, v }
    }

    /// Flat parameter vector: `σ`, then `U` row-major, then `V` row-major.
    pub fn params(&self) -> Vec<f64> {
        let mut p = self.sigma.clone();
        p.extend_from_slice(self.u.data());
        p.extend_from_slice(self.v.data());
        p
    }

    pub fn set_params(&mut self, p: &[f64]) {
        let r = self.rank();
        let nu = self.u.data().len();
        let nv = self.v.data().len();
        assert_eq!(p.len(), r + nu + nv);
        self.sigma.copy_from_slice(&p[..r]);
        self.u.data_mut().copy_from_slice(&p[r..r + nu]);
        self.v.data_mut().copy_from_slice(&p[r + nu..]);
    }

    /// Unmasked chain rule from `G = ∂L/∂ΔW`, in [`Self::params`] order.
    pub fn grads_from_delta(&self, g: &Tensor2D) -> Vec<f64> {
        let r = self.rank();
        let gv = g.matmul(&self.v).expect("G·V shapes validated by caller");
        let gtu = g.transpose().matmul(&self.u).expect("Gᵀ·U shapes validated by caller");
        let mut out: Vec<f64> = (0..r)
            .map(|j| (0..self.d_out()).map(|i| self.u.get(i, j) * gv.get(i, j)).sum())
            .collect();
        for i in 0..self.d_out() {
            for j in 0..r {
                out.push(gv.get(i, j) * self.sigma[j]);
            }
        }
        for i in 0..self.d_in() {
            for j in 0..r {
                out.push(gtu.get(i, j) * self.sigma[j]);
            }
        }
        out
    }
}

/// One task's view of a TA-LoRA layer: `ΔW = gate · B (u vᵀ)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaLoraAdapter {
    pub b_shared: Tensor2D,
    pub u_k: Vec<f64>,
    pub v_k: Vec<f64>,
    pub gate: f64,
}

impl TaLoraAdapter {
    pub fn new(b_shared: Tensor2D, u_k: Vec<f64>, v_k: Vec<f64>, gate: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&gate) {
            return Err(AdapterError::BadGate(gate));
        }
        if u_k.len() != b_shared.cols() {
            return Err(AdapterError::AdapterShape {
                adapter: (b_shared.rows(), u_k.len()),
                layer: (b_shared.rows(), b_shared.cols()),
            });
        }
        Ok(Self {
            b_shared,
            u_k,
            v_k,
            gate,
        })
    }

    pub fn delta_weight(&self) -> Tensor2D {
        let bu = self.b_shared.matvec(&self.u_k).expect("B·u shapes checked at construction");
        let mut dw = Tensor2D::zeros(self.b_shared.rows(), self.v_k.len());
        dw.add_outer(self.gate, &bu, &self.v_k);
        dw
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Adapter {
    Svd(SvdAdapter),
    Lora(LoraAdapter),
    TaLora(TaLoraAdapter),
}

/// One optional adapter per adapter-bearing layer; `None` means base layer only.
pub type AdapterSet = Vec<Option<Adapter>>;

impl Adapter {
    pub fn shape(&self) -> (usize, usize) {
        match self {
            Adapter::Svd(a) => (a.d_out(), a.d_in()),
            Adapter::Lora(a) => (a.b.rows(), a.a.rows()),
            Adapter::TaLora(a) => (a.b_shared.rows(), a.v_k.len()),
        }
    }

    pub fn delta_weight(&self) -> Tensor2D {
        match self {
            Adapter::Svd(a) => a.delta_weight(),
            Adapter::Lora(a) => a.b.matmul(&a.a.transpose()).expect("B·Aᵀ shapes share rank"),
            Adapter::TaLora(a) => a.delta_weight(),
        }
    }

    /// `ΔW x` through the factors, without forming `ΔW`.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        match self {
            Adapter::Svd(a) => {
                let coeff: Vec<f64> = a
                    .v
                    .matvec_t(x)
                    .expect("checked width")
                    .iter()
                    .zip(&a.sigma)
                    .map(|(c, s)| c * s)
                    .collect();
                a.u.matvec(&coeff).expect("U·c shapes")
            }
            Adapter::Lora(a) => {
                let coeff = a.a.matvec_t(x).expect("checked width");
                a.b.matvec(&coeff).expect("B·c shapes")
            }
            Adapter::TaLora(a) => {
                let s = a.gate * crate::numerics::dot(&a.v_k, x);
                let bu = a.b_shared.matvec(&a.u_k).expect("B·u shapes");
                bu.into_iter().map(|v| v * s).collect()
            }
        }
    }

    /// `ΔWᵀ y` through the factors.
    pub fn apply_t(&self, y: &[f64]) -> Vec<f64> {
        match self {
            Adapter::Svd(a) => {
                let coeff: Vec<f64> = a
                    .u
                    .matvec_t(y)
                    .expect("checked width")
                    .iter()
                    .zip(&a.sigma)
                    .map(|(c, s)| c * s)
                    .collect();
                a.v.matvec(&coeff).expect("V·c shapes")
            }
            Adapter::Lora(a) => {
                let coeff = a.b.matvec_t(y).expect("checked width");
                a.a.matvec(&coeff).expect("A·c shapes")
            }
            Adapter::TaLora(a) => {
                let bu = a.b_shared.matvec(&a.u_k).expect("B·u shapes");
                let s = a.gate * crate::numerics::dot(&bu, y);
                a.v_k.iter().map(|v| v * s).collect()
            }
        }
    }

    pub fn params(&self) -> Vec<f64> {
        match self {
            Adapter::Svd(a) => a.params(),
            Adapter::Lora(a) => [a.b.data(), a.a.data()].concat(),
            Adapter::TaLora(a) => {
                let mut p = a.b_shared.data().to_vec();
                p.extend_from_slice(&a.u_k);
                p.extend_from_slice(&a.v_k);
                p
            }
        }
    }

    pub fn set_params(&mut self, p: &[f64]) {
        match self {
            Adapter::Svd(a) => a.set_params(p),
            Adapter::Lora(a) => {
                let nb = a.b.data().len();
                a.b.data_mut().copy_from_slice(&p[..nb]);
                a.a.data_mut().copy_from_slice(&p[nb..]);
            }
            Adapter::TaLora(a) => {
                let nb = a.b_shared.data().len();
                let r = a.u_k.len();
                a.b_shared.data_mut().copy_from_slice(&p[..nb]);
                a.u_k.copy_from_slice(&p[nb..nb + r]);
                a.v_k.copy_from_slice(&p[nb + r..]);
            }
        }
    }

    /// Chain rule from `G = ∂L/∂ΔW` to [`Self::params`] order.
    pub fn grads_from_delta(&self, g: &Tensor2D) -> Vec<f64> {
        match self {
            Adapter::Svd(a) => a.grads_from_delta(g),
            Adapter::Lora(a) => {
                let db = g.matmul(&a.a).expect("G·A");
                let da = g.transpose().matmul(&a.b).expect("Gᵀ·B");
                [db.data(), da.data()].concat()
            }
            Adapter::TaLora(a) => {
                let gv = g.matvec(&a.v_k).expect("G·v");
                let bu = a.b_shared.matvec(&a.u_k).expect("B·u");
                let mut db = Tensor2D::zeros(a.b_shared.rows(), a.b_shared.cols());
                db.add_outer(a.gate, &gv, &a.u_k);
                let du: Vec<f64> = a.b_shared.matvec_t(&gv).expect("Bᵀ·Gv").iter().map(|v| v * a.gate).collect();
                let dv: Vec<f64> = g.matvec_t(&bu).expect("Gᵀ·Bu").iter().map(|v| v * a.gate).collect();
                let mut out = db.data().to_vec();
                out.extend(du);
                out.extend(dv);
                out
            }
        }
    }
}

fn check_rank(d_out: usize, d_in: usize, r: usize) -> Result<()> {
    if r == 0 || r > d_out.min(d_in) {
        return Err(AdapterError::BadRank { rank: r, d_out, d_in });
    }
    Ok(())
}

/// Gaussian `U`, `V` with std `scale`; `σ = 0`, so `ΔW = 0` exactly.
pub fn init_svd_adapter(d_out: usize, d_in: usize, r: usize, rng: &mut RngState, scale: f64) -> Result<SvdAdapter> {
    check_rank(d_out, d_in, r)?;
    if !(scale > 0.0) {
        return Err(AdapterError::BadScale(scale));
    }
    let u = Tensor2D::randn(d_out, r, scale, rng);
    let v = Tensor2D::randn(d_in, r, scale, rng);
    Ok(SvdAdapter {
        u,
        sigma: vec![0.0; r],
        v,
    })
}

pub fn delta_weight(a: &SvdAdapter) -> Tensor2D {
    a.delta_weight()
}

/// `(W⁰ + ΔW) x + b⁰`; a gated TA-LoRA adapter contributes `gate · ΔW x`.
pub fn adapter_forward(layer: &FrozenLinear, adapter: Option<&Adapter>, x: &[f64]) -> Result<Vec<f64>> {
    let mut y = layer.forward(x)?;
    if let Some(a) = adapter {
        if a.shape() != (layer.d_out(), layer.d_in()) {
            return Err(AdapterError::AdapterShape {
                adapter: a.shape(),
                layer: (layer.d_out(), layer.d_in()),
            });
        }
        for (v, d) in y.iter_mut().zip(a.apply(x)) {
            *v += d;
        }
    }
    Ok(y)
}
