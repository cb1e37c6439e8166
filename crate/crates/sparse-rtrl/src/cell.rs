//! The recurrent cell: a thresholded affine unit with a triangular surrogate
//! derivative, plus a smooth tanh reference cell used to validate gradients
//! against finite differences (the step nonlinearity itself has no usable
//! derivative to difference).
//!
//! State update for unit k:
//!
//! ```text
//! v_k = Σ_l W_rec[k,l]·a_l(prev) + Σ_i W_in[k,i]·x_i + b_k − θ_k
//! a_k = 1 if v_k > 0 else 0
//! ```
//!
//! Backward passes use the surrogate slope `γ·max{0, 1 − |v|/(2ε)}`, which is
//! exactly zero once `|v| ≥ 2ε`. Those exact zeros are what the sparse
//! influence backends exploit: a unit with zero slope contributes an entirely
//! zero row to both the Jacobian and the immediate influence.

use crate::counter::OpCounter;
use crate::linalg::{
    masked_event_matvec, masked_matvec, matvec, transpose_matvec, BitMask, DenseMatrix,
};
use crate::prng::Prng;

/// Sub-stream tags for deriving independent generators from one run seed.
/// Keeping them in a single registry guarantees no two consumers collide.
pub const STREAM_WEIGHTS: u64 = 1;
pub const STREAM_MASK: u64 = 2;
pub const STREAM_READOUT: u64 = 3;
pub const STREAM_SHUFFLE: u64 = 4;

/// Surrogate derivative shape: height `gamma`, half-width parameter
/// `epsilon` (the support is `|v| < 2ε`).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SurrogateConfig {
    pub gamma: f64,
    pub epsilon: f64,
}

impl SurrogateConfig {
    pub fn new(gamma: f64, epsilon: f64) -> Self {
        assert!(gamma > 0.0, "surrogate height must be positive");
        assert!(epsilon > 0.0, "surrogate width must be positive");
        SurrogateConfig { gamma, epsilon }
    }
}

impl Default for SurrogateConfig {
    /// γ = 1, ε = 0.5: unit height, slope support |v| < 1.
    fn default() -> Self {
        SurrogateConfig {
            gamma: 1.0,
            epsilon: 0.5,
        }
    }
}

/// Triangular surrogate slope `γ·max{0, 1 − |v|/(2ε)}`.
///
/// Returns exactly `+0.0` for `|v| ≥ 2ε`; the sparse paths key off that
/// bit pattern, so the clamp must not produce `γ·(-0.0)`.
pub fn pseudo_derivative(v: f64, cfg: &SurrogateConfig) -> f64 {
    let t = 1.0 - v.abs() / (2.0 * cfg.epsilon);
    if t <= 0.0 {
        0.0
    } else {
        cfg.gamma * t
    }
}

/// Which state-update rule an engine run uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CellKind {
    /// Binary threshold unit with surrogate slope — the activity-sparse cell.
    Threshold,
    /// Smooth tanh unit — dense activity, exact derivative, used as the
    /// finite-difference-checkable reference.
    Tanh,
}

/// Recurrent parameters plus the frozen sparsity mask.
///
/// The flattened parameter vector `w` has length `p = n·m` with
/// `m = n + n_in + 1`; unit `k` owns the contiguous block `[k·m, (k+1)·m)`,
/// laid out as its recurrent row, then its input row, then its bias.
/// Thresholds are fixed hyperparameters, not entries of `w`.
///
/// Invariant: every parameter whose mask bit is clear is exactly `0.0`, and
/// stays `0.0` through training. The constructor zeroes such entries;
/// [`CellParams::set_from_flat`] rejects violations.
#[derive(Clone, Debug)]
pub struct CellParams {
    pub n: usize,
    pub n_in: usize,
    pub w_rec: DenseMatrix,
    pub w_in: DenseMatrix,
    pub bias: Vec<f64>,
    pub theta: Vec<f64>,
    pub param_mask: BitMask,
    // Per-matrix views of param_mask, precomputed so the forward kernels can
    // consume them directly. Derived in the constructor; the mask is frozen,
    // so these never go stale.
    mask_rec: BitMask,
    mask_in: BitMask,
    mask_bias: BitMask,
}

impl CellParams {
    /// Assembles parameters, zeroing every masked entry.
    pub fn new(
        w_rec: DenseMatrix,
        w_in: DenseMatrix,
        bias: Vec<f64>,
        theta: Vec<f64>,
        param_mask: BitMask,
    ) -> Self {
        let n = w_rec.rows();
        assert_eq!(w_rec.cols(), n, "recurrent matrix must be square");
        assert_eq!(w_in.rows(), n, "input matrix row count mismatch");
        let n_in = w_in.cols();
        assert_eq!(bias.len(), n, "bias length mismatch");
        assert_eq!(theta.len(), n, "threshold length mismatch");
        let m = n + n_in + 1;
        assert_eq!(param_mask.len(), n * m, "mask must cover all parameters");

        let mut p = CellParams {
            n,
            n_in,
            w_rec,
            w_in,
            bias,
            theta,
            param_mask,
            mask_rec: BitMask::zeros(n * n),
            mask_in: BitMask::zeros(n * n_in),
            mask_bias: BitMask::zeros(n),
        };
        for k in 0..n {
            for j in 0..m {
                let bit = p.param_mask.get(k * m + j);
                if j < n {
                    p.mask_rec.set(k * n + j, bit);
                    if !bit {
                        p.w_rec.set(k, j, 0.0);
                    }
                } else if j < n + n_in {
                    p.mask_in.set(k * n_in + (j - n), bit);
                    if !bit {
                        p.w_in.set(k, j - n, 0.0);
                    }
                } else {
                    p.mask_bias.set(k, bit);
                    if !bit {
                        p.bias[k] = 0.0;
                    }
                }
            }
        }
        p
    }

    /// Random initialization: weights uniform on `(−1/√m, +1/√m)` drawn in
    /// flat parameter order, a mask with exactly `p − round(ω·p)` kept bits,
    /// constant thresholds. Weights and mask come from independent
    /// sub-streams of `seed`, so the same seed with different `omega` prunes
    /// different subsets of the *same* underlying weights.
    pub fn init_random(n: usize, n_in: usize, omega: f64, theta: f64, seed: u64) -> Self {
        assert!((0.0..=1.0).contains(&omega), "omega must lie in [0,1]");
        let m = n + n_in + 1;
        let p = n * m;
        let scale = 1.0 / (m as f64).sqrt();

        let mut wrng = Prng::derive(seed, STREAM_WEIGHTS);
        let flat: Vec<f64> = (0..p).map(|_| wrng.uniform(-scale, scale)).collect();

        let mut mrng = Prng::derive(seed, STREAM_MASK);
        let pruned = (omega * p as f64).round() as usize;
        let mask = BitMask::random_with_popcount(p, p - pruned, &mut mrng);

        let mut w_rec = DenseMatrix::zeros(n, n);
        let mut w_in = DenseMatrix::zeros(n, n_in);
        let mut bias = vec![0.0; n];
        for k in 0..n {
            for j in 0..m {
                let v = flat[k * m + j];
                if j < n {
                    w_rec.set(k, j, v);
                } else if j < n + n_in {
                    w_in.set(k, j - n, v);
                } else {
                    bias[k] = v;
                }
            }
        }
        CellParams::new(w_rec, w_in, bias, vec![theta; n], mask)
    }

    /// Parameters per unit: recurrent row + input row + bias.
    pub fn m(&self) -> usize {
        self.n + self.n_in + 1
    }

    /// Total flattened parameter count `n·m`.
    pub fn p(&self) -> usize {
        self.n * self.m()
    }

    pub fn mask_rec(&self) -> &BitMask {
        &self.mask_rec
    }

    pub fn mask_in(&self) -> &BitMask {
        &self.mask_in
    }

    pub fn mask_bias(&self) -> &BitMask {
        &self.mask_bias
    }

    /// Reads one entry of the flattened parameter vector.
    pub fn flat_get(&self, idx: usize) -> f64 {
        let m = self.m();
        let (k, j) = (idx / m, idx % m);
        assert!(k < self.n, "flat index out of range");
        if j < self.n {
            self.w_rec.get(k, j)
        } else if j < self.n + self.n_in {
            self.w_in.get(k, j - self.n)
        } else {
            self.bias[k]
        }
    }

    /// The flattened parameter vector in canonical order.
    pub fn to_flat(&self) -> Vec<f64> {
        (0..self.p()).map(|i| self.flat_get(i)).collect()
    }

    /// Writes the flattened vector back. Masked positions must still be
    /// exactly zero — a nonzero there means an optimizer leaked gradient
    /// into pruned weights, which would silently break every sparsity claim.
    pub fn set_from_flat(&mut self, w: &[f64]) {
        assert_eq!(w.len(), self.p(), "flat parameter length mismatch");
        let m = self.m();
        for k in 0..self.n {
            for j in 0..m {
                let idx = k * m + j;
                let v = w[idx];
                assert!(
                    self.param_mask.get(idx) || v == 0.0,
                    "masked parameter {idx} drifted to {v}; the mask is frozen"
                );
                if j < self.n {
                    self.w_rec.set(k, j, v);
                } else if j < self.n + self.n_in {
                    self.w_in.set(k, j - self.n, v);
                } else {
                    self.bias[k] = v;
                }
            }
        }
    }
}

/// One timestep of cell output plus the sparsity it realized.
#[derive(Clone, Debug)]
pub struct CellState {
    /// Pre-threshold internal state v.
    pub v: Vec<f64>,
    /// Activations. Binary {0,1} for the threshold cell; real for tanh.
    pub a: Vec<f64>,
    /// Surrogate (or exact) derivative per unit.
    pub hprime: Vec<f64>,
    /// Fraction of units with a == 0 this step.
    pub alpha: f64,
    /// Fraction of units with hprime == 0 this step.
    pub beta: f64,
}

fn sparsity_fractions(a: &[f64], hprime: &[f64]) -> (f64, f64) {
    let n = a.len() as f64;
    let zeros_a = a.iter().filter(|&&v| v == 0.0).count() as f64;
    let zeros_h = hprime.iter().filter(|&&v| v == 0.0).count() as f64;
    (zeros_a / n, zeros_h / n)
}

/// One threshold-cell step. Forward MACs are counted event-style: the
/// recurrent product only touches columns of active units and unmasked
/// entries, the input product only unmasked entries.
pub fn cell_step(
    params: &CellParams,
    a_prev: &[f64],
    x: &[f64],
    cfg: &SurrogateConfig,
    counter: &mut OpCounter,
) -> CellState {
    assert_eq!(a_prev.len(), params.n, "a_prev length mismatch");
    assert_eq!(x.len(), params.n_in, "input length mismatch");

    let rec = masked_event_matvec(
        &params.w_rec,
        &params.mask_rec,
        a_prev,
        &mut counter.macs_forward,
    );
    let inp = masked_matvec(&params.w_in, &params.mask_in, x, &mut counter.macs_forward);

    let n = params.n;
    let mut v = vec![0.0; n];
    let mut a = vec![0.0; n];
    let mut hprime = vec![0.0; n];
    for k in 0..n {
        let b = if params.mask_bias.get(k) {
            params.bias[k]
        } else {
            0.0
        };
        v[k] = rec[k] + inp[k] + b - params.theta[k];
        a[k] = if v[k] > 0.0 { 1.0 } else { 0.0 };
        hprime[k] = pseudo_derivative(v[k], cfg);
    }
    let (alpha, beta) = sparsity_fractions(&a, &hprime);
    CellState {
        v,
        a,
        hprime,
        alpha,
        beta,
    }
}

/// One tanh-cell step: `h = tanh(W_rec·h_prev + W_in·x + b)` with the same
/// mask semantics but no threshold. The derivative slot carries `1 − h²`.
/// Activity is dense, so the recurrent product runs over every unmasked
/// entry rather than event columns.
pub fn tanh_cell_step(
    params: &CellParams,
    h_prev: &[f64],
    x: &[f64],
    counter: &mut OpCounter,
) -> CellState {
    assert_eq!(h_prev.len(), params.n, "h_prev length mismatch");
    assert_eq!(x.len(), params.n_in, "input length mismatch");

    let rec = masked_matvec(
        &params.w_rec,
        &params.mask_rec,
        h_prev,
        &mut counter.macs_forward,
    );
    let inp = masked_matvec(&params.w_in, &params.mask_in, x, &mut counter.macs_forward);

    let n = params.n;
    let mut v = vec![0.0; n];
    let mut a = vec![0.0; n];
    let mut hprime = vec![0.0; n];
    for k in 0..n {
        let b = if params.mask_bias.get(k) {
            params.bias[k]
        } else {
            0.0
        };
        v[k] = rec[k] + inp[k] + b;
        a[k] = v[k].tanh();
        hprime[k] = 1.0 - a[k] * a[k];
    }
    let (alpha, beta) = sparsity_fractions(&a, &hprime);
    CellState {
        v,
        a,
        hprime,
        alpha,
        beta,
    }
}

/// Row `k` of the state-to-state Jacobian as `(column, value)` pairs:
/// `J[k,l] = hprime_k · W_rec[k,l]` over unmasked `l`. A unit with zero
/// slope returns the empty row without touching the weights.
pub fn jacobian_row(params: &CellParams, state: &CellState, k: usize) -> Vec<(usize, f64)> {
    assert!(k < params.n, "unit index out of range");
    let h = state.hprime[k];
    if h == 0.0 {
        return Vec::new();
    }
    let row = params.w_rec.row(k);
    let mut out = Vec::new();
    for (l, &w) in row.iter().enumerate() {
        if params.mask_rec.get(k * params.n + l) {
            out.push((l, h * w));
        }
    }
    out
}

/// Row `k` of the immediate influence as `(flat parameter column, value)`
/// pairs. Unit `k` only touches its own parameter block, with values
/// `hprime_k · [a_prev; x; 1]` at the unmasked positions; zero slope means
/// an empty row.
pub fn immediate_influence_row(
    params: &CellParams,
    state: &CellState,
    a_prev: &[f64],
    x: &[f64],
    k: usize,
) -> Vec<(usize, f64)> {
    assert!(k < params.n, "unit index out of range");
    assert_eq!(a_prev.len(), params.n, "a_prev length mismatch");
    assert_eq!(x.len(), params.n_in, "input length mismatch");
    let h = state.hprime[k];
    if h == 0.0 {
        return Vec::new();
    }
    let m = params.m();
    let base = k * m;
    let mut out = Vec::new();
    for j in 0..m {
        if !params.param_mask.get(base + j) {
            continue;
        }
        let input = if j < params.n {
            a_prev[j]
        } else if j < params.n + params.n_in {
            x[j - params.n]
        } else {
            1.0
        };
        out.push((base + j, h * input));
    }
    out
}

/// Linear readout mapping activations to logits.
#[derive(Clone, Debug)]
pub struct Readout {
    pub w_out: DenseMatrix,
    pub b_out: Vec<f64>,
}

impl Readout {
    pub fn new(w_out: DenseMatrix, b_out: Vec<f64>) -> Self {
        assert_eq!(w_out.rows(), b_out.len(), "readout bias length mismatch");
        assert!(
            w_out.as_slice().iter().chain(&b_out).all(|x| x.is_finite()),
            "readout entries must be finite"
        );
        Readout { w_out, b_out }
    }

    /// Weights uniform on `(−1/√n, +1/√n)` drawn row-major, zero bias.
    pub fn init_random(n_out: usize, n: usize, seed: u64) -> Self {
        let mut rng = Prng::derive(seed, STREAM_READOUT);
        let scale = 1.0 / (n as f64).sqrt();
        let data: Vec<f64> = (0..n_out * n).map(|_| rng.uniform(-scale, scale)).collect();
        Readout::new(DenseMatrix::from_vec(n_out, n, data), vec![0.0; n_out])
    }
}

/// Logits `W_out·a + b_out`. Readout work is outside the recurrent cost
/// model, so nothing is counted here.
pub fn readout_forward(r: &Readout, a: &[f64]) -> Vec<f64> {
    let mut y = matvec(&r.w_out, a);
    for (yo, b) in y.iter_mut().zip(&r.b_out) {
        *yo += b;
    }
    y
}

/// Softmax cross-entropy, computed via the max-shifted log-sum-exp; returns
/// the loss and its logit gradient `softmax − onehot(target)`.
pub fn cross_entropy_loss_and_grad(logits: &[f64], target: usize) -> (f64, Vec<f64>) {
    assert!(target < logits.len(), "target class out of range");
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = sum.ln() - (logits[target] - max);
    let mut grad: Vec<f64> = exps.iter().map(|&e| e / sum).collect();
    grad[target] -= 1.0;
    (loss, grad)
}

/// Mean squared error `(1/n)·Σ(y−t)²` with gradient `2(y−t)/n`.
pub fn mse_loss_and_grad(output: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
    assert_eq!(output.len(), target.len(), "MSE dimension mismatch");
    let n = output.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; output.len()];
    for (i, (&y, &t)) in output.iter().zip(target).enumerate() {
        let d = y - t;
        loss += d * d / n;
        grad[i] = 2.0 * d / n;
    }
    (loss, grad)
}

/// Gradients of the loss with respect to the readout parameters.
#[derive(Clone, Debug)]
pub struct ReadoutGrads {
    pub w_out: DenseMatrix,
    pub b_out: Vec<f64>,
}

/// Pulls the logit gradient back through the readout: returns the credit
/// assignment vector `c̄ = W_outᵀ·(dL/dlogits)` over the hidden units,
/// together with the readout parameter gradients (outer product with the
/// activations, plus the bias gradient).
pub fn credit_assignment(r: &Readout, dlogits: &[f64], a: &[f64]) -> (Vec<f64>, ReadoutGrads) {
    assert_eq!(
        dlogits.len(),
        r.w_out.rows(),
        "logit gradient length mismatch"
    );
    assert_eq!(a.len(), r.w_out.cols(), "activation length mismatch");
    let cbar = transpose_matvec(&r.w_out, dlogits);
    let n_out = r.w_out.rows();
    let n = r.w_out.cols();
    let mut gw = DenseMatrix::zeros(n_out, n);
    for o in 0..n_out {
        for k in 0..n {
            gw.set(o, k, dlogits[o] * a[k]);
        }
    }
    (
        cbar,
        ReadoutGrads {
            w_out: gw,
            b_out: dlogits.to_vec(),
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn full_mask(n: usize, n_in: usize) -> BitMask {
        BitMask::ones(n * (n + n_in + 1))
    }

    #[test]
    fn pseudo_derivative_reference_points() {
        let cfg = SurrogateConfig::default();
        assert_eq!(pseudo_derivative(0.0, &cfg), 1.0);
        assert_eq!(pseudo_derivative(0.5, &cfg), 0.5);
        assert_eq!(pseudo_derivative(-0.5, &cfg), 0.5);
        assert_eq!(pseudo_derivative(1.0, &cfg), 0.0);
        assert_eq!(pseudo_derivative(-1.0, &cfg), 0.0);
        assert_eq!(pseudo_derivative(7.3, &cfg), 0.0);
    }

    #[test]
    fn pseudo_derivative_zero_outside_support_is_positive_zero() {
        let cfg = SurrogateConfig::new(2.5, 0.25);
        for v in [0.5, -0.5, 0.5000001, 10.0, -1e9] {
            let h = pseudo_derivative(v, &cfg);
            assert_eq!(h, 0.0);
            assert!(h.is_sign_positive(), "slope zero must be +0.0");
        }
        // Just inside the support the slope is strictly positive.
        assert!(pseudo_derivative(0.4999999, &cfg) > 0.0);
    }

    #[test]
    fn cell_step_two_unit_swap_example() {
        // W_rec swaps the two units; only unit 1 sees the active unit 0 and
        // crosses its threshold.
        let params = CellParams::new(
            DenseMatrix::from_rows(&[&[0.0, 1.0], &[1.0, 0.0]]),
            DenseMatrix::zeros(2, 1),
            vec![0.0, 0.0],
            vec![0.5, 0.5],
            full_mask(2, 1),
        );
        let mut c = OpCounter::new();
        let s = cell_step(
            &params,
            &[1.0, 0.0],
            &[0.0],
            &SurrogateConfig::default(),
            &mut c,
        );
        assert_eq!(s.v, vec![-0.5, 0.5]);
        assert_eq!(s.a, vec![0.0, 1.0]);
        assert_eq!(s.hprime, vec![0.5, 0.5]);
        assert_eq!(s.alpha, 0.5);
        assert_eq!(s.beta, 0.0);
        // Recurrent product touches one active column × 2 unmasked rows;
        // input product touches all 2 unmasked entries.
        assert_eq!(c.macs_forward, 4);
    }

    #[test]
    fn quiescent_network_sits_at_minus_theta() {
        let params = CellParams::new(
            DenseMatrix::from_rows(&[&[0.3, -0.2], &[0.1, 0.4]]),
            DenseMatrix::zeros(2, 1),
            vec![0.0, 0.0],
            vec![0.5, 0.7],
            full_mask(2, 1),
        );
        let mut c = OpCounter::new();
        let s = cell_step(
            &params,
            &[0.0, 0.0],
            &[0.0],
            &SurrogateConfig::default(),
            &mut c,
        );
        assert_eq!(s.v, vec![-0.5, -0.7]);
        assert_eq!(s.a, vec![0.0, 0.0]);
        assert_eq!(s.alpha, 1.0);
    }

    #[test]
    fn fully_pruned_network_ignores_all_inputs() {
        let params = CellParams::new(
            DenseMatrix::from_rows(&[&[5.0, 5.0], &[5.0, 5.0]]),
            DenseMatrix::from_rows(&[&[9.0], &[9.0]]),
            vec![3.0, 3.0],
            vec![0.5, 0.5],
            BitMask::zeros(2 * 4),
        );
        let mut c = OpCounter::new();
        let s = cell_step(
            &params,
            &[1.0, 1.0],
            &[42.0],
            &SurrogateConfig::default(),
            &mut c,
        );
        assert_eq!(s.v, vec![-0.5, -0.5]);
        assert_eq!(s.a, vec![0.0, 0.0]);
        assert_eq!(c.macs_forward, 0);
    }

    #[test]
    fn masked_parameters_never_contribute() {
        // Two parameter sets differing only at masked positions produce the
        // same state: the constructor pins masked entries to zero.
        let mut mask = full_mask(2, 1);
        mask.set(1, false); // W_rec[0,1]
        mask.set(6, false); // W_in[1,0] (m=4: unit 1 block starts at 4)
        let mk = |junk: f64| {
            CellParams::new(
                DenseMatrix::from_rows(&[&[0.4, junk], &[0.2, 0.1]]),
                DenseMatrix::from_rows(&[&[0.3], &[junk]]),
                vec![0.1, 0.2],
                vec![0.5, 0.5],
                mask.clone(),
            )
        };
        let (pa, pb) = (mk(123.0), mk(-777.0));
        let mut ca = OpCounter::new();
        let mut cb = OpCounter::new();
        let sa = cell_step(
            &pa,
            &[1.0, 1.0],
            &[2.0],
            &SurrogateConfig::default(),
            &mut ca,
        );
        let sb = cell_step(
            &pb,
            &[1.0, 1.0],
            &[2.0],
            &SurrogateConfig::default(),
            &mut cb,
        );
        assert_eq!(sa.v, sb.v);
        assert_eq!(ca.macs_forward, cb.macs_forward);
    }

    #[test]
    fn jacobian_row_scales_unmasked_weights() {
        let params = CellParams::new(
            DenseMatrix::from_rows(&[&[1.0, 0.0], &[0.25, -0.5]]),
            DenseMatrix::zeros(2, 1),
            vec![0.0, 0.0],
            vec![0.5, 0.5],
            full_mask(2, 1),
        );
        let state = CellState {
            v: vec![0.0, 1.0],
            a: vec![0.0, 1.0],
            hprime: vec![0.5, 0.0],
            alpha: 0.5,
            beta: 0.5,
        };
        assert_eq!(jacobian_row(&params, &state, 0), vec![(0, 0.5), (1, 0.0)]);
        // Zero slope → canonical empty row.
        assert!(jacobian_row(&params, &state, 1).is_empty());
    }

    #[test]
    fn jacobian_row_skips_masked_columns() {
        let mut mask = full_mask(2, 1);
        mask.set(0, false); // W_rec[0,0]
        let params = CellParams::new(
            DenseMatrix::from_rows(&[&[9.0, 2.0], &[1.0, 1.0]]),
            DenseMatrix::zeros(2, 1),
            vec![0.0, 0.0],
            vec![0.5, 0.5],
            mask,
        );
        let state = CellState {
            v: vec![0.0, 0.0],
            a: vec![0.0, 0.0],
            hprime: vec![1.0, 1.0],
            alpha: 1.0,
            beta: 0.0,
        };
        assert_eq!(jacobian_row(&params, &state, 0), vec![(1, 2.0)]);
    }

    #[test]
    fn immediate_influence_row_concatenates_inputs() {
        // n=2, n_in=1, m=4; unit 0 owns columns 0..4. With unit slope the
        // stored values are exactly [a_prev; x; 1].
        let params = CellParams::new(
            DenseMatrix::from_rows(&[&[0.0, 1.0], &[1.0, 0.0]]),
            DenseMatrix::from_rows(&[&[0.5], &[0.5]]),
            vec![0.1, 0.1],
            vec![0.5, 0.5],
            full_mask(2, 1),
        );
        let state = CellState {
            v: vec![0.0, -2.0],
            a: vec![0.0, 0.0],
            hprime: vec![1.0, 0.0],
            alpha: 1.0,
            beta: 0.5,
        };
        let row = immediate_influence_row(&params, &state, &[1.0, 0.0], &[2.0], 0);
        assert_eq!(row, vec![(0, 1.0), (1, 0.0), (2, 2.0), (3, 1.0)]);
        assert!(immediate_influence_row(&params, &state, &[1.0, 0.0], &[2.0], 1).is_empty());
    }

    #[test]
    fn immediate_influence_row_respects_mask() {
        let mut mask = full_mask(2, 1);
        mask.set(2, false); // unit 0's input weight column
        let params = CellParams::new(
            DenseMatrix::from_rows(&[&[0.0, 1.0], &[1.0, 0.0]]),
            DenseMatrix::from_rows(&[&[0.5], &[0.5]]),
            vec![0.1, 0.1],
            vec![0.5, 0.5],
            mask,
        );
        let state = CellState {
            v: vec![0.0, 0.0],
            a: vec![0.0, 0.0],
            hprime: vec![1.0, 1.0],
            alpha: 1.0,
            beta: 0.0,
        };
        let row = immediate_influence_row(&params, &state, &[1.0, 0.0], &[2.0], 0);
        assert_eq!(row, vec![(0, 1.0), (1, 0.0), (3, 1.0)]);
    }

    #[test]
    fn tanh_cell_zero_weights_gives_tanh_bias() {
        let params = CellParams::new(
            DenseMatrix::zeros(2, 2),
            DenseMatrix::zeros(2, 1),
            vec![0.3, -0.7],
            vec![0.5, 0.5], // thresholds are ignored by the tanh cell
            full_mask(2, 1),
        );
        let mut c = OpCounter::new();
        let s = tanh_cell_step(&params, &[0.9, -0.9], &[5.0], &mut c);
        assert_eq!(s.a, vec![0.3f64.tanh(), (-0.7f64).tanh()]);
    }

    #[test]
    fn tanh_cell_at_origin_has_unit_derivative() {
        let params = CellParams::new(
            DenseMatrix::from_rows(&[&[0.5, 0.5], &[0.5, 0.5]]),
            DenseMatrix::zeros(2, 1),
            vec![0.0, 0.0],
            vec![0.5, 0.5],
            full_mask(2, 1),
        );
        let mut c = OpCounter::new();
        let s = tanh_cell_step(&params, &[0.0, 0.0], &[0.0], &mut c);
        assert_eq!(s.a, vec![0.0, 0.0]);
        assert_eq!(s.hprime, vec![1.0, 1.0]);
    }

    #[test]
    fn tanh_cell_matches_dense_affine_oracle() {
        let mut rng = Prng::new(77);
        let n = 3;
        let n_in = 2;
        let params = CellParams::init_random(n, n_in, 0.0, 0.5, 99);
        let h_prev: Vec<f64> = (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let x: Vec<f64> = (0..n_in).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let mut c = OpCounter::new();
        let s = tanh_cell_step(&params, &h_prev, &x, &mut c);
        for k in 0..n {
            let mut z = params.bias[k];
            for l in 0..n {
                z += params.w_rec.get(k, l) * h_prev[l];
            }
            for i in 0..n_in {
                z += params.w_in.get(k, i) * x[i];
            }
            assert!((s.a[k] - z.tanh()).abs() < 1e-15);
            assert!((s.hprime[k] - (1.0 - z.tanh().powi(2))).abs() < 1e-15);
        }
        assert_eq!(c.macs_forward, (n * n + n * n_in) as u64);
    }

    #[test]
    fn cross_entropy_uniform_logits_is_ln2() {
        let (loss, grad) = cross_entropy_loss_and_grad(&[0.7, 0.7], 1);
        assert_eq!(loss, std::f64::consts::LN_2);
        assert!((grad[0] - 0.5).abs() < 1e-15);
        assert!((grad[1] + 0.5).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_confident_correct_loss_vanishes() {
        let (loss, _) = cross_entropy_loss_and_grad(&[60.0, 0.0], 0);
        assert!((0.0..1e-20).contains(&loss));
    }

    #[test]
    fn cross_entropy_matches_softmax_oracle() {
        // Direct evaluation for logits [1, 0], target 0:
        // loss = ln(1 + e⁻¹), grad = [σ − 1, 1 − σ] with σ = e/(e+1).
        let (loss, grad) = cross_entropy_loss_and_grad(&[1.0, 0.0], 0);
        assert!((loss - 0.31326168751822286).abs() < 1e-16);
        assert!((grad[0] + 0.2689414213699951).abs() < 1e-16);
        assert!((grad[1] - 0.2689414213699951).abs() < 1e-16);
        // Gradient of any softmax cross-entropy sums to zero.
        assert!((grad[0] + grad[1]).abs() < 1e-16);
    }

    #[test]
    fn mse_simple_case() {
        let (loss, grad) = mse_loss_and_grad(&[1.0, 0.0], &[0.0, 1.0]);
        assert_eq!(loss, 1.0);
        assert_eq!(grad, vec![1.0, -1.0]);
    }

    #[test]
    fn credit_assignment_identity_readout_passes_through() {
        let r = Readout::new(
            DenseMatrix::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]),
            vec![0.0, 0.0],
        );
        let (cbar, _) = credit_assignment(&r, &[0.25, -0.75], &[1.0, 0.0]);
        assert_eq!(cbar, vec![0.25, -0.75]);
    }

    #[test]
    fn credit_assignment_zero_gradient_is_zero() {
        let r = Readout::init_random(2, 4, 5);
        let (cbar, grads) = credit_assignment(&r, &[0.0, 0.0], &[1.0, 0.0, 1.0, 1.0]);
        assert!(cbar.iter().all(|&v| v == 0.0));
        assert!(grads.w_out.as_slice().iter().all(|&v| v == 0.0));
        assert!(grads.b_out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn credit_assignment_matches_transpose_oracle() {
        let r = Readout::init_random(2, 5, 31);
        let dl = [0.4, -1.2];
        let a = [1.0, 0.0, 1.0, 1.0, 0.0];
        let (cbar, grads) = credit_assignment(&r, &dl, &a);
        for k in 0..5 {
            let want = r.w_out.get(0, k) * dl[0] + r.w_out.get(1, k) * dl[1];
            assert!((cbar[k] - want).abs() < 1e-15);
            for o in 0..2 {
                assert_eq!(grads.w_out.get(o, k), dl[o] * a[k]);
            }
        }
        assert_eq!(grads.b_out, dl.to_vec());
    }

    #[test]
    fn init_random_mask_popcount_and_zeroing() {
        let n = 16;
        let n_in = 2;
        let p = n * (n + n_in + 1);
        for omega in [0.0, 0.5, 0.9] {
            let params = CellParams::init_random(n, n_in, omega, 0.5, 1234);
            let kept = p - (omega * p as f64).round() as usize;
            assert_eq!(params.param_mask.popcount(), kept);
            let flat = params.to_flat();
            for i in 0..p {
                if params.param_mask.get(i) {
                    assert!(flat[i].abs() < 1.0 / (params.m() as f64).sqrt());
                } else {
                    assert_eq!(flat[i], 0.0);
                }
            }
        }
    }

    #[test]
    fn init_random_is_deterministic_per_seed() {
        let a = CellParams::init_random(8, 2, 0.5, 0.5, 7);
        let b = CellParams::init_random(8, 2, 0.5, 0.5, 7);
        assert_eq!(a.to_flat(), b.to_flat());
        let c = CellParams::init_random(8, 2, 0.5, 0.5, 8);
        assert_ne!(a.to_flat(), c.to_flat());
    }

    #[test]
    fn same_seed_different_omega_shares_surviving_weights() {
        // The mask stream is independent of the weight stream, so a denser
        // mask reveals the same underlying values where both masks keep.
        let dense = CellParams::init_random(6, 2, 0.0, 0.5, 11);
        let sparse = CellParams::init_random(6, 2, 0.7, 0.5, 11);
        for i in 0..dense.p() {
            if sparse.param_mask.get(i) {
                assert_eq!(sparse.flat_get(i), dense.flat_get(i));
            }
        }
    }

    #[test]
    #[allow(clippy::identity_op)] // indices spell out the full k*m+j layout formula
    fn flat_round_trip_and_layout() {
        let mut params = CellParams::init_random(3, 2, 0.0, 0.5, 42);
        let m = params.m();
        assert_eq!(m, 6);
        let flat = params.to_flat();
        // Unit k's block: recurrent row, input row, bias.
        assert_eq!(flat[1 * m + 0], params.w_rec.get(1, 0));
        assert_eq!(flat[1 * m + 3], params.w_in.get(1, 0));
        assert_eq!(flat[1 * m + 5], params.bias[1]);
        let before = flat.clone();
        params.set_from_flat(&flat);
        assert_eq!(params.to_flat(), before);
    }

    #[test]
    #[should_panic(expected = "drifted")]
    fn set_from_flat_rejects_nonzero_masked_entries() {
        let mut params = CellParams::init_random(3, 2, 0.5, 0.5, 42);
        let mut flat = params.to_flat();
        let masked_idx = (0..params.p())
            .find(|&i| !params.param_mask.get(i))
            .unwrap();
        flat[masked_idx] = 1e-9;
        params.set_from_flat(&flat);
    }

    #[test]
    fn state_fractions_match_definitions() {
        let params = CellParams::init_random(16, 2, 0.3, 0.5, 5);
        let mut rng = Prng::new(17);
        let mut c = OpCounter::new();
        for _ in 0..20 {
            let a_prev: Vec<f64> = (0..16).map(|_| (rng.next_u64() & 1) as f64).collect();
            let x: Vec<f64> = (0..2).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let s = cell_step(&params, &a_prev, &x, &SurrogateConfig::default(), &mut c);
            let zeros_a = s.a.iter().filter(|&&v| v == 0.0).count();
            let zeros_h = s.hprime.iter().filter(|&&v| v == 0.0).count();
            assert_eq!(s.alpha, zeros_a as f64 / 16.0);
            assert_eq!(s.beta, zeros_h as f64 / 16.0);
            for k in 0..16 {
                assert_eq!(s.a[k] == 1.0, s.v[k] > 0.0);
                assert_eq!(s.hprime[k] == 0.0, s.v[k].abs() >= 1.0);
            }
        }
    }
}
