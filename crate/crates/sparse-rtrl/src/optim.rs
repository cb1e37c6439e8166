//! Mask-preserving optimizers over the flattened parameter vector.
//!
//! Updates touch only unmasked entries, so pruned parameters stay exactly
//! zero forever — the property every sparsity saving in this crate rests on.
//! Both optimizers treat a non-finite gradient as a hard programming error:
//! by the time numbers reach the update they have already been averaged over
//! a batch, so a NaN here means an upstream bug, not a recoverable condition.

use crate::linalg::BitMask;

/// Adam moment estimates and hyperparameters.
///
/// Moments live on the same flattened index space as the parameters and stay
/// zero at masked entries (they are never written there).
#[derive(Clone, Debug)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step_count: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_adam: f64,
}

impl AdamState {
    /// Standard defaults: β₁ = 0.9, β₂ = 0.999, ε = 1e-8.
    pub fn new(len: usize, lr: f64) -> Self {
        assert!(lr > 0.0, "learning rate must be positive");
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step_count: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps_adam: 1e-8,
        }
    }
}

fn check_finite(grads: &[f64], mask: &BitMask) {
    for (i, g) in grads.iter().enumerate() {
        if mask.get(i) {
            assert!(g.is_finite(), "non-finite gradient {g} at parameter {i}");
        }
    }
}

/// One bias-corrected Adam step on the unmasked entries of `w`.
pub fn adam_step(w: &mut [f64], grads: &[f64], mask: &BitMask, state: &mut AdamState) {
    assert_eq!(w.len(), grads.len(), "gradient length mismatch");
    assert_eq!(w.len(), mask.len(), "mask length mismatch");
    assert_eq!(w.len(), state.m.len(), "optimizer state length mismatch");
    check_finite(grads, mask);

    state.step_count += 1;
    let t = state.step_count as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for i in 0..w.len() {
        if !mask.get(i) {
            debug_assert!(grads[i] == 0.0, "gradient leaked into masked entry {i}");
            assert!(w[i] == 0.0, "masked parameter {i} is nonzero");
            continue;
        }
        let g = grads[i];
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        let mhat = state.m[i] / bc1;
        let vhat = state.v[i] / bc2;
        w[i] -= state.lr * mhat / (vhat.sqrt() + state.eps_adam);
    }
}

/// Plain gradient descent on the unmasked entries: `w -= lr·g`.
pub fn sgd_step(w: &mut [f64], grads: &[f64], mask: &BitMask, lr: f64) {
    assert_eq!(w.len(), grads.len(), "gradient length mismatch");
    assert_eq!(w.len(), mask.len(), "mask length mismatch");
    check_finite(grads, mask);
    for i in 0..w.len() {
        if !mask.get(i) {
            assert!(w[i] == 0.0, "masked parameter {i} is nonzero");
            continue;
        }
        w[i] -= lr * grads[i];
    }
}
