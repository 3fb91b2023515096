//! Adapter-bearing linear layers and the frozen toy backbone.
//!
//! Three update parameterizations share one slot type:
//!
//! * [`LoraAdapter`]: `ΔW = B Aᵀ`
//! * [`SvdAdapter`]: `ΔW = U diag(σ) Vᵀ`, the form adapted at test time
//! * [`TaLoraAdapter`]: `ΔW = gate · B (u vᵀ)`, used during multi-source pretraining
//!
//! Every adapter exposes its parameters as a flat vector together with the
//! chain rule from `∂L/∂ΔW`, which is what the gradient checks exercise.

mod backbone;
mod layers;

pub use backbone::{BackboneGrads, ForwardTrace, ToyBackbone, DEFAULT_HIDDEN_WIDTH};
pub use layers::{
    adapter_forward, delta_weight, init_svd_adapter, Adapter, AdapterSet, FrozenLinear, LoraAdapter, SvdAdapter,
    TaLoraAdapter, DEFAULT_INIT_SCALE,
};

use thiserror::Error;

use crate::numerics::NumericsError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AdapterError {
    #[error("rank {rank} invalid for a {d_out}x{d_in} layer (need 1 <= r <= min dims)")]
    BadRank { rank: usize, d_out: usize, d_in: usize },
    #[error("init scale must be positive, got {0}")]
    BadScale(f64),
    #[error("input width {got} does not match layer width {expected}")]
    InputWidth { expected: usize, got: usize },
    #[error("adapter shape {adapter:?} does not fit layer shape {layer:?}")]
    AdapterShape {
        adapter: (usize, usize),
        layer: (usize, usize),
    },
    #[error("gate must lie in [0, 1], got {0}")]
    BadGate(f64),
    #[error("adapter set has {got} slots, backbone has {expected}")]
    SlotCount { expected: usize, got: usize },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

pub type Result<T> = std::result::Result<T, AdapterError>;
