use serde::{Deserialize, Serialize};

use super::layers::{adapter_forward, Adapter, AdapterSet, FrozenLinear};
use super::{AdapterError, Result};
use crate::numerics::{softmax_temp, Distribution, RngState, Tensor2D};

pub const DEFAULT_HIDDEN_WIDTH: usize = 32;

/// Feedforward classifier with tanh hidden layers. Every hidden layer is an
/// adapter slot; the head is never adapted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyBackbone {
    pub hidden: Vec<FrozenLinear>,
    pub head: FrozenLinear,
}

/// Per-sample activations kept for backprop.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Input to each hidden layer (`layer_inputs[0]` is the model input).
    pub layer_inputs: Vec<Vec<f64>>,
    /// Post-tanh activation of each hidden layer.
    pub activations: Vec<Vec<f64>>,
    pub logits: Vec<f64>,
}

impl ForwardTrace {
    /// `h(x)`: the last hidden activation.
    pub fn hidden(&self) -> &[f64] {
        self.activations.last().expect("backbone has at least one hidden layer")
    }

    pub fn distribution(&self) -> Distribution {
        softmax_temp(&self.logits, 1.0).expect("finite logits")
    }
}

/// Accumulated gradients of a scalar loss.
///
/// `hidden_weight[l]` is `∂L/∂W_l`, which equals `∂L/∂ΔW_l` for the adapter in that slot.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneGrads {
    pub hidden_weight: Vec<Tensor2D>,
    pub hidden_bias: Vec<Vec<f64>>,
    pub head_weight: Tensor2D,
    pub head_bias: Vec<f64>,
}

impl BackboneGrads {
    pub fn zeros_like(model: &ToyBackbone) -> Self {
        Self {
            hidden_weight: model.hidden.iter().map(|l| Tensor2D::zeros(l.d_out(), l.d_in())).collect(),
            hidden_bias: model.hidden.iter().map(|l| vec![0.0; l.d_out()]).collect(),
            head_weight: Tensor2D::zeros(model.head.d_out(), model.head.d_in()),
            head_bias: vec![0.0; model.head.d_out()],
        }
    }

    pub fn scale(&mut self, c: f64) {
        for t in &mut self.hidden_weight {
            *t = t.scale(c);
        }
        for b in &mut self.hidden_bias {
            b.iter_mut().for_each(|v| *v *= c);
        }
        self.head_weight = self.head_weight.scale(c);
        self.head_bias.iter_mut().for_each(|v| *v *= c);
    }

    /// `self += c · other`.
    pub fn add_scaled(&mut self, c: f64, other: &BackboneGrads) {
        for (a, b) in self.hidden_weight.iter_mut().zip(&other.hidden_weight) {
            a.axpy(c, b).expect("same backbone shapes");
        }
        for (a, b) in self.hidden_bias.iter_mut().zip(&other.hidden_bias) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += c * y);
        }
        self.head_weight.axpy(c, &other.head_weight).expect("same head shape");
        self.head_bias.iter_mut().zip(&other.head_bias).for_each(|(x, y)| *x += c * y);
    }
}

impl ToyBackbone {
    pub fn random(input_dim: usize, widths: &[usize], n_classes: usize, rng: &mut RngState) -> Self {
        assert!(!widths.is_empty(), "need at least one hidden layer");
        let mut hidden = Vec::with_capacity(widths.len());
        let mut d_in = input_dim;
        for &w in widths {
            hidden.push(FrozenLinear::random(w, d_in, rng));
            d_in = w;
        }
        let head = FrozenLinear::random(n_classes, d_in, rng);
        Self { hidden, head }
    }

    pub fn input_dim(&self) -> usize {
        self.hidden[0].d_in()
    }

    pub fn n_classes(&self) -> usize {
        self.head.d_out()
    }

    pub fn n_slots(&self) -> usize {
        self.hidden.len()
    }

    /// `(d_out, d_in)` of each adapter slot.
    pub fn slot_shapes(&self) -> Vec<(usize, usize)> {
        self.hidden.iter().map(|l| (l.d_out(), l.d_in())).collect()
    }

    pub fn empty_adapters(&self) -> AdapterSet {
        vec![None; self.n_slots()]
    }

    fn slot<'a>(adapters: &'a [Option<Adapter>], l: usize) -> Option<&'a Adapter> {
        adapters.get(l).and_then(Option::as_ref)
    }

    fn check_slots(&self, adapters: &[Option<Adapter>]) -> Result<()> {
        if adapters.len() > self.n_slots() {
            return Err(AdapterError::SlotCount {
                expected: self.n_slots(),
                got: adapters.len(),
            });
        }
        Ok(())
    }

    /// Full forward pass. Missing slots count as no adapter.
    pub fn forward(&self, x: &[f64], adapters: &[Option<Adapter>]) -> Result<ForwardTrace> {
        self.check_slots(adapters)?;
        let mut layer_inputs = Vec::with_capacity(self.n_slots());
        let mut activations = Vec::with_capacity(self.n_slots());
        let mut cur = x.to_vec();
        for (l, layer) in self.hidden.iter().enumerate() {
            let pre = adapter_forward(layer, Self::slot(adapters, l), &cur)?;
            layer_inputs.push(cur);
            cur = pre.into_iter().map(f64::tanh).collect();
            activations.push(cur.clone());
        }
        let logits = self.head.forward(&cur)?;
        Ok(ForwardTrace {
            layer_inputs,
            activations,
            logits,
        })
    }

    /// `(logits, h)` for one input.
    pub fn backbone_forward(&self, x: &[f64], adapters: &[Option<Adapter>]) -> Result<(Vec<f64>, Vec<f64>)> {
        let trace = self.forward(x, adapters)?;
        let h = trace.hidden().to_vec();
        Ok((trace.logits, h))
    }

    pub fn predict(&self, x: &[f64], adapters: &[Option<Adapter>]) -> Result<Distribution> {
        Ok(self.forward(x, adapters)?.distribution())
    }

    /// Forward pass with i.i.d. `N(0, noise_std²)` added to every hidden activation.
    pub fn forward_noisy(
        &self,
        x: &[f64],
        adapters: &[Option<Adapter>],
        noise_std: f64,
        rng: &mut RngState,
    ) -> Result<Vec<f64>> {
        self.check_slots(adapters)?;
        let mut cur = x.to_vec();
        for (l, layer) in self.hidden.iter().enumerate() {
            let pre = adapter_forward(layer, Self::slot(adapters, l), &cur)?;
            cur = pre.into_iter().map(|v| v.tanh() + noise_std * rng.normal()).collect();
        }
        Ok(self.head.forward(&cur)?)
    }

    /// Backprop `dlogits` (and an optional extra `dhidden` on `h(x)`) through one
    /// trace, adding `scale ×` the result into `grads`.
    pub fn backward(
        &self,
        trace: &ForwardTrace,
        adapters: &[Option<Adapter>],
        dlogits: &[f64],
        dhidden: Option<&[f64]>,
        scale: f64,
        grads: &mut BackboneGrads,
    ) {
        let h = trace.hidden();
        grads.head_weight.add_outer(scale, dlogits, h);
        grads.head_bias.iter_mut().zip(dlogits).for_each(|(g, d)| *g += scale * d);
        let mut dact = self.head.weight.matvec_t(dlogits).expect("head shape");
        if let Some(extra) = dhidden {
            dact.iter_mut().zip(extra).for_each(|(a, e)| *a += e);
        }
        for l in (0..self.n_slots()).rev() {
            let act = &trace.activations[l];
            let delta: Vec<f64> = dact.iter().zip(act).map(|(d, a)| d * (1.0 - a * a)).collect();
            grads.hidden_weight[l].add_outer(scale, &delta, &trace.layer_inputs[l]);
            grads.hidden_bias[l].iter_mut().zip(&delta).for_each(|(g, d)| *g += scale * d);
            if l > 0 {
                let mut prev = self.hidden[l].weight.matvec_t(&delta).expect("layer shape");
                if let Some(a) = Self::slot(adapters, l) {
                    prev.iter_mut().zip(a.apply_t(&delta)).for_each(|(p, q)| *p += q);
                }
                dact = prev;
            }
        }
    }

    /// Flat view of all frozen weights (hidden layers then head), for tests and audits.
    pub fn weights_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in self.hidden.iter().chain(std::iter::once(&self.head)) {
            out.extend_from_slice(l.weight.data());
            out.extend_from_slice(&l.bias);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::{init_svd_adapter, LoraAdapter, TaLoraAdapter};
    use crate::numerics::{finite_diff_grad, log_softmax, relative_error};

    fn model(seed: u64) -> ToyBackbone {
        ToyBackbone::random(6, &[5, 4], 3, &mut RngState::new(seed))
    }

    fn ce(model: &ToyBackbone, adapters: &AdapterSet, x: &[f64], y: usize) -> f64 {
        let t = model.forward(x, adapters).unwrap();
        -log_softmax(&t.logits, 1.0).unwrap()[y]
    }

    fn random_adapters(model: &ToyBackbone, rng: &mut RngState) -> AdapterSet {
        let (o0, i0) = model.slot_shapes()[0];
        let (o1, i1) = model.slot_shapes()[1];
        let mut svd = init_svd_adapter(o0, i0, 3, rng, 0.7).unwrap();
        svd.sigma = rng.normal_vec(3, 1.0);
        let ta = TaLoraAdapter::new(Tensor2D::randn(o1, 2, 0.5, rng), rng.normal_vec(2, 1.0), rng.normal_vec(i1, 1.0), 0.8)
            .unwrap();
        vec![Some(Adapter::Svd(svd)), Some(Adapter::TaLora(ta))]
    }

    #[test]
    fn zero_init_adapters_match_frozen_reference() {
        let m = model(1);
        let mut rng = RngState::new(2);
        let mut adapters = m.empty_adapters();
        for (slot, (o, i)) in adapters.iter_mut().zip(m.slot_shapes()) {
            *slot = Some(Adapter::Svd(init_svd_adapter(o, i, 2, &mut rng, 0.02).unwrap()));
        }
        for _ in 0..20 {
            let x = rng.normal_vec(6, 1.0);
            let (l0, h0) = m.backbone_forward(&x, &[]).unwrap();
            let (l1, h1) = m.backbone_forward(&x, &adapters).unwrap();
            assert_eq!(l0, l1);
            assert_eq!(h0, h1);
        }
    }

    #[test]
    fn identical_inputs_identical_outputs() {
        let m = model(3);
        let mut rng = RngState::new(4);
        let adapters = random_adapters(&m, &mut rng);
        let x = rng.normal_vec(6, 1.0);
        assert_eq!(m.backbone_forward(&x, &adapters).unwrap(), m.backbone_forward(&x.clone(), &adapters).unwrap());
    }

    #[test]
    fn too_many_slots_rejected() {
        let m = model(3);
        assert!(m.forward(&[0.0; 6], &[None, None, None]).is_err());
    }

    #[test]
    fn cross_entropy_adapter_gradients_match_finite_differences() {
        let m = model(5);
        let mut rng = RngState::new(6);
        for trial in 0..5 {
            let adapters = random_adapters(&m, &mut rng);
            let x = rng.normal_vec(6, 1.0);
            let y = trial % 3;
            let trace = m.forward(&x, &adapters).unwrap();
            let p = trace.distribution();
            let mut dlogits = p.probs().to_vec();
            dlogits[y] -= 1.0;
            let mut grads = BackboneGrads::zeros_like(&m);
            m.backward(&trace, &adapters, &dlogits, None, 1.0, &mut grads);
            for slot in 0..2 {
                let a = adapters[slot].as_ref().unwrap();
                let analytic = a.grads_from_delta(&grads.hidden_weight[slot]);
                let fd = finite_diff_grad(
                    |theta| {
                        let mut ad = adapters.clone();
                        ad[slot].as_mut().unwrap().set_params(theta);
                        ce(&m, &ad, &x, y)
                    },
                    &a.params(),
                    1e-6,
                )
                .unwrap();
                assert!(relative_error(&analytic, &fd, 1e-8) < 1e-5, "slot {slot}");
            }
        }
    }

    #[test]
    fn backbone_weight_gradients_match_finite_differences() {
        let m = model(8);
        let mut rng = RngState::new(9);
        let lora = LoraAdapter {
            b: Tensor2D::randn(5, 2, 0.3, &mut rng),
            a: Tensor2D::randn(6, 2, 0.3, &mut rng),
        };
        let adapters = vec![Some(Adapter::Lora(lora)), None];
        let x = rng.normal_vec(6, 1.0);
        let trace = m.forward(&x, &adapters).unwrap();
        let mut dlogits = trace.distribution().probs().to_vec();
        dlogits[1] -= 1.0;
        let mut grads = BackboneGrads::zeros_like(&m);
        m.backward(&trace, &adapters, &dlogits, None, 1.0, &mut grads);
        let fd = finite_diff_grad(
            |w| {
                let mut mm = m.clone();
                mm.hidden[1].weight.data_mut().copy_from_slice(w);
                ce(&mm, &adapters, &x, 1)
            },
            m.hidden[1].weight.data(),
            1e-6,
        )
        .unwrap();
        assert!(relative_error(grads.hidden_weight[1].data(), &fd, 1e-8) < 1e-5);
        let fd_b = finite_diff_grad(
            |b| {
                let mut mm = m.clone();
                mm.head.bias.copy_from_slice(b);
                ce(&mm, &adapters, &x, 1)
            },
            &m.head.bias,
            1e-6,
        )
        .unwrap();
        assert!(relative_error(&grads.head_bias, &fd_b, 1e-8) < 1e-5);
    }

    #[test]
    fn tanh_smoothness_over_many_points() {
        // Gradient of a linear read-out of h(x) against finite differences in x.
        let m = model(12);
        let mut rng = RngState::new(13);
        let w = rng.normal_vec(4, 1.0);
        for _ in 0..100 {
            let x = rng.normal_vec(6, 2.0);
            let f = |z: &[f64]| crate::numerics::dot(&w, m.forward(z, &[]).unwrap().hidden());
            let fd = finite_diff_grad(f, &x, 1e-6).unwrap();
            let probe = &m;
            let trace = probe.forward(&x, &[]).unwrap();
            let mut dact = w.clone();
            let mut grad_x = vec![0.0; 6];
            for l in (0..probe.n_slots()).rev() {
                let act = &trace.activations[l];
                let delta: Vec<f64> = dact.iter().zip(act).map(|(d, a)| d * (1.0 - a * a)).collect();
                let prev = probe.hidden[l].weight.matvec_t(&delta).unwrap();
                if l == 0 {
                    grad_x = prev;
                } else {
                    dact = prev;
                }
            }
            assert!(relative_error(&grad_x, &fd, 1e-8) < 1e-5);
        }
    }
}
