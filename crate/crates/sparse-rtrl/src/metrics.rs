//! Sparsity statistics, the analytic cost model, and the compute-adjusted
//! iteration measure.
//!
//! Conventions: sparsity *levels* (α, β, ω) are fractions of zeros; *tilde*
//! quantities (α̃, β̃, ω̃) are the complementary densities, `1 − level`. The
//! cost model speaks entirely in densities.

use crate::counter::OpCounter;

/// Per-step sparsity observations collected during episodes. Merging
/// concatenates, so batch-level means are means over every (sequence, step)
/// pair, in ascending sequence order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SparsityStats {
    /// Fraction of zero activations per step.
    pub alphas: Vec<f64>,
    /// Fraction of zero surrogate derivatives per step.
    pub betas: Vec<f64>,
    /// Structurally stored influence entries per step
    /// (active rows × active columns).
    pub stored_entries: Vec<u64>,
}

impl SparsityStats {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push_step(&mut self, alpha: f64, beta: f64, stored: u64) {
        debug_assert!((0.0..=1.0).contains(&alpha));
        debug_assert!((0.0..=1.0).contains(&beta));
        self.alphas.push(alpha);
        self.betas.push(beta);
        self.stored_entries.push(stored);
    }

    pub fn merge(&mut self, other: &SparsityStats) {
        self.alphas.extend_from_slice(&other.alphas);
        self.betas.extend_from_slice(&other.betas);
        self.stored_entries.extend_from_slice(&other.stored_entries);
    }

    pub fn steps(&self) -> usize {
        self.alphas.len()
    }

    fn mean(xs: &[f64]) -> f64 {
        if xs.is_empty() {
            return 0.0;
        }
        xs.iter().sum::<f64>() / xs.len() as f64
    }

    /// Mean zero-activation fraction over all recorded steps.
    pub fn alpha_mean(&self) -> f64 {
        Self::mean(&self.alphas)
    }

    /// Mean zero-derivative fraction over all recorded steps.
    pub fn beta_mean(&self) -> f64 {
        Self::mean(&self.betas)
    }

    /// Mean backward density, `1 − beta_mean`.
    pub fn beta_tilde_mean(&self) -> f64 {
        1.0 - self.beta_mean()
    }

    /// Mean fraction of the full n×p influence matrix that is structurally
    /// stored.
    pub fn influence_density_mean(&self, n: usize, p: usize) -> f64 {
        if self.stored_entries.is_empty() {
            return 0.0;
        }
        let full = (n * p) as f64;
        self.stored_entries
            .iter()
            .map(|&s| s as f64 / full)
            .sum::<f64>()
            / self.stored_entries.len() as f64
    }
}

/// Densities and dimensions feeding the analytic cost table.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CostModel {
    pub n: usize,
    pub n_in: usize,
    pub p: usize,
    pub t: usize,
    pub alpha_tilde: f64,
    pub beta_tilde: f64,
    pub omega_tilde: f64,
}

impl CostModel {
    pub fn new(
        n: usize,
        n_in: usize,
        p: usize,
        t: usize,
        alpha_tilde: f64,
        beta_tilde: f64,
        omega_tilde: f64,
    ) -> Self {
        for (name, v) in [
            ("alpha_tilde", alpha_tilde),
            ("beta_tilde", beta_tilde),
            ("omega_tilde", omega_tilde),
        ] {
            assert!(v > 0.0 && v <= 1.0, "{name} must lie in (0, 1], got {v}");
        }
        CostModel {
            n,
            n_in,
            p,
            t,
            alpha_tilde,
            beta_tilde,
            omega_tilde,
        }
    }
}

/// The seven rows of the cost table. The SnAp rows are analytic predictions
/// only; no approximate-RTRL execution path exists in this crate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Bptt,
    RtrlDense,
    RtrlParam,
    RtrlActivity,
    RtrlBoth,
    Snap1,
    Snap2,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Bptt,
        Method::RtrlDense,
        Method::RtrlParam,
        Method::RtrlActivity,
        Method::RtrlBoth,
        Method::Snap1,
        Method::Snap2,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Method::Bptt => "bptt",
            Method::RtrlDense => "rtrl-dense",
            Method::RtrlParam => "rtrl-param",
            Method::RtrlActivity => "rtrl-activity",
            Method::RtrlBoth => "rtrl-both",
            Method::Snap1 => "snap1",
            Method::Snap2 => "snap2",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Analytic (memory units, time-per-step units) for one method row.
///
/// In each time cost the first term is the forward pass and the second is
/// the influence-matrix update; BPTT's second term is its parameter-gradient
/// accumulation.
pub fn cost_predict(model: &CostModel, method: Method) -> (f64, f64) {
    let n = model.n as f64;
    let p = model.p as f64;
    let t = model.t as f64;
    let (at, bt, ot) = (model.alpha_tilde, model.beta_tilde, model.omega_tilde);
    match method {
        Method::Bptt => (t * n + p, n * n + p),
        Method::RtrlDense => (n + n * p, n * n + n * n * p),
        Method::RtrlParam => (n + ot * n * p, ot * n * n + ot * ot * n * n * p),
        Method::RtrlActivity => (at * n + bt * n * p, at * n * n + bt * bt * n * n * p),
        Method::RtrlBoth => (
            at * n + ot * bt * n * p,
            ot * at * n * n + ot * ot * bt * bt * n * n * p,
        ),
        Method::Snap1 => (n + ot * p, ot * n * n + ot * p),
        Method::Snap2 => (n + ot * ot * n * p, ot * n * n + ot * ot * ot * n * n * p),
    }
}

/// The per-iteration compute savings factor `ω̃²·β̃²`.
pub fn savings_factor(omega_tilde: f64, beta_tilde: f64) -> f64 {
    omega_tilde * omega_tilde * beta_tilde * beta_tilde
}

/// Cumulative sum of the savings factor across iterations: element `i` is
/// `Σ_{j≤i} ω̃²·β̃_j²`, where `β̃_j` is the mean backward density of
/// iteration `j`. With activity sparsity disabled the caller passes
/// `β̃_j ≡ 1`, collapsing the factor to `ω̃²`.
pub fn compute_adjusted_iteration(beta_tilde_means: &[f64], omega_tilde: f64) -> Vec<f64> {
    assert!(!beta_tilde_means.is_empty(), "series must be nonempty");
    let mut acc = 0.0;
    beta_tilde_means
        .iter()
        .map(|&bt| {
            acc += savings_factor(omega_tilde, bt);
            acc
        })
        .collect()
}

/// Measured influence MACs compared against the analytic per-step
/// prediction `β̃⁽ᵗ⁾β̃⁽ᵗ⁻¹⁾·ω̃²·n²·p + β̃⁽ᵗ⁾·ω̃·p` (propagation plus
/// immediate influence), summed over the recorded steps with `β̃⁽⁰⁾ = 0`.
#[derive(Clone, Copy, Debug)]
pub struct MeasuredVsPredicted {
    pub measured: u64,
    pub predicted: f64,
    /// measured / predicted; 1.0 when both are zero.
    pub ratio: f64,
}

pub fn measured_vs_predicted(
    counter: &OpCounter,
    stats: &SparsityStats,
    model: &CostModel,
) -> MeasuredVsPredicted {
    let n = model.n as f64;
    let p = model.p as f64;
    let ot = model.omega_tilde;
    let mut predicted = 0.0;
    let mut bt_prev = 0.0; // the influence matrix starts empty
    for &beta in &stats.betas {
        let bt = 1.0 - beta;
        predicted += bt * bt_prev * ot * ot * n * n * p + bt * ot * p;
        bt_prev = bt;
    }
    let measured = counter.macs_influence;
    let ratio = if predicted == 0.0 {
        if measured == 0 {
            1.0
        } else {
            f64::INFINITY
        }
    } else {
        measured as f64 / predicted
    };
    MeasuredVsPredicted {
        measured,
        predicted,
        ratio,
    }
}
