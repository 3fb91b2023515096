use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::numerics::{RngState, Tensor2D};

/// Fixed near-identity orthogonal feature mixing, drawn once per run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurfaceForm {
    mixing: Tensor2D,
}

/// Cayley transform `(I − A)⁻¹(I + A)` of a random skew matrix with entry std `strength / √n`.
pub(crate) fn small_rotation(n: usize, strength: f64, rng: &mut RngState) -> Tensor2D {
    let mut a = DMatrix::<f64>::zeros(n, n);
    let s = strength / (n as f64).sqrt();
    for i in 0..n {
        for j in i + 1..n {
            let v = s * rng.normal();
            a[(i, j)] = v;
            a[(j, i)] = -v;
        }
    }
    let eye = DMatrix::<f64>::identity(n, n);
    let inv = (&eye - &a).try_inverse().expect("I − A is invertible for skew A");
    let q = inv * (&eye + &a);
    Tensor2D::new(n, n, q.transpose().as_slice().to_vec()).expect("finite rotation")
}

impl SurfaceForm {
    pub fn identity(dims: usize) -> Self {
        Self {
            mixing: Tensor2D::identity(dims),
        }
    }

    pub fn random(dims: usize, strength: f64, rng: &mut RngState) -> Self {
        Self {
            mixing: small_rotation(dims, strength, rng),
        }
    }

    pub fn dims(&self) -> usize {
        self.mixing.rows()
    }

    pub fn mixing(&self) -> &Tensor2D {
        &self.mixing
    }
}

/// Surface-form twin: `Q (x + ε)` with `ε ~ N(0, strength² I)`.
pub fn perturb(x: &[f64], strength: f64, form: &SurfaceForm, rng: &mut RngState) -> Vec<f64> {
    assert!(strength >= 0.0, "perturbation strength must be nonnegative");
    let noisy: Vec<f64> = x.iter().map(|v| v + strength * rng.normal()).collect();
    form.mixing.matvec(&noisy).expect("surface form matches input width")
}
