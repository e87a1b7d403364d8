//! Reverse-mode differentiation over dense `f64` arrays.
//!
//! Values are recorded on an append-only [`Tape`]; [`Tape::backward`] walks it
//! once in reverse creation order. Besides the usual dense-network operations
//! the tape carries the one-hot modular algebra and a straight-through argmax
//! node whose backward pass is the Jacobian of a tempered softmax.

mod check;
mod params;
mod tape;
mod tensor;

pub use check::finite_difference_check;
pub use params::{Adam, AdamConfig, ParamId, ParamStore, Parameter};
pub use tape::{Gradients, Tape, Var, MASKED_LOGIT};
pub use tensor::{argmax, Tensor};

/// Default straight-through temperature.
pub const DEFAULT_TAU: f64 = 0.1;

/// Closed-form Jacobian of `softmax(θ/τ)`: `J[i][j] = p_i (δ_ij − p_j) / τ`.
pub fn softmax_temperature_jacobian(theta: &[f64], tau: f64) -> Vec<Vec<f64>> {
    let mut p = theta.to_vec();
    tape::softmax_in_place(&mut p, 1.0 / tau);
    (0..p.len())
        .map(|i| {
            (0..p.len())
                .map(|j| p[i] * (if i == j { 1.0 } else { 0.0 } - p[j]) / tau)
                .collect()
        })
        .collect()
}
