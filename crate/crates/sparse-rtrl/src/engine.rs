//! The forward-mode learning engine: influence-matrix recursion, online
//! gradient accumulation, and the episode driver.
//!
//! The influence matrix `M⁽ᵗ⁾` (n×p) holds the derivative of every unit's
//! state with respect to every trained parameter, updated each step as
//!
//! ```text
//! M⁽ᵗ⁾ = J⁽ᵗ⁾·M⁽ᵗ⁻¹⁾ + M̄⁽ᵗ⁾
//! ```
//!
//! with `J` the state-to-state Jacobian and `M̄` the immediate influence.
//! Because every entry of row k of both `J` and `M̄` carries the factor
//! `H′(v_k)`, the row factors as
//!
//! ```text
//! M⁽ᵗ⁾_k = H′(v_k)·[ Σ_l W_rec[k,l]·M⁽ᵗ⁻¹⁾_l + ∂v_k/∂w ]
//! ```
//!
//! which is how all three backends compute it: raw-weight products summed in
//! ascending `l`, the immediate term added after the sum, the `H′` scale
//! applied last. Keeping one arithmetic order everywhere is what makes the
//! dense and sparse paths agree bit-for-bit — the terms a sparse backend
//! skips are exact zeros, and adding an exact zero never changes a nonzero
//! IEEE-754 sum. The lone exception is the sign of zero-valued results
//! (a skipped `-0.0` leaves `+0.0` behind), so cross-backend comparisons go
//! through [`canonical_bits`].
//!
//! Three row-sparsity facts drive the work savings, all exact:
//! rows of `M` are live only for units with nonzero slope (backward
//! sparsity β); columns of `M` are live only for unmasked parameters
//! (parameter sparsity ω); and the `J·M` sum only visits live rows of the
//! previous matrix through unmasked weights.

use crate::cell::{
    cell_step, credit_assignment, cross_entropy_loss_and_grad, readout_forward, tanh_cell_step,
    CellKind, CellParams, CellState, Readout, ReadoutGrads, SurrogateConfig,
};
use crate::counter::OpCounter;
use crate::linalg::{BitMask, DenseMatrix, RowCompressedMatrix};
use crate::metrics::SparsityStats;

/// Influence-matrix storage/iteration strategy.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Backend {
    /// Full n×p loops, no sparsity shortcuts. The correctness reference and
    /// the dense-cost yardstick: its counters realize the n²p + p model.
    DenseReference,
    /// Sparse loops over a dense n×p buffer. Exists as the differential
    /// midpoint between the other two: same arithmetic as RowCompressed,
    /// same storage as DenseReference, so a disagreement pins the bug to
    /// either indexing or iteration.
    MaskedDense,
    /// Sparse loops over compressed storage: only live rows are kept, each
    /// holding only unmasked columns.
    RowCompressed,
}

impl Backend {
    pub fn name(&self) -> &'static str {
        match self {
            Backend::DenseReference => "dense-reference",
            Backend::MaskedDense => "masked-dense",
            Backend::RowCompressed => "row-compressed",
        }
    }
}

impl std::fmt::Display for Backend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Bit pattern of a float with both zero signs mapped to `+0.0`.
///
/// Sparse backends never materialize the `-0.0` that a dense multiply by a
/// structurally-skipped zero can produce; numerically the results are still
/// equal, so equality of canonical bits is the right cross-backend test.
pub fn canonical_bits(x: f64) -> u64 {
    if x == 0.0 {
        0
    } else {
        x.to_bits()
    }
}

/// Precomputed index structure for one (params, mask) pair, shared by every
/// step of an episode.
#[derive(Clone, Debug)]
pub struct ParamIndex {
    /// Unmasked flat parameter columns, ascending. These are exactly the
    /// columns of the influence matrix that can ever be nonzero.
    pub active_cols: Vec<usize>,
    /// Position of each flat column within `active_cols`, or `usize::MAX`.
    pub col_pos: Vec<usize>,
    /// Per unit: the unmasked entries of its recurrent row, ascending.
    pub unmasked_rec: Vec<Vec<usize>>,
    /// Per unit: the unmasked offsets within its owned parameter block.
    pub owned_unmasked: Vec<Vec<usize>>,
}

impl ParamIndex {
    pub fn new(params: &CellParams) -> Self {
        let n = params.n;
        let m = params.m();
        let p = params.p();
        let active_cols: Vec<usize> = (0..p).filter(|&c| params.param_mask.get(c)).collect();
        let mut col_pos = vec![usize::MAX; p];
        for (i, &c) in active_cols.iter().enumerate() {
            col_pos[c] = i;
        }
        let unmasked_rec = (0..n)
            .map(|k| {
                (0..n)
                    .filter(|&l| params.mask_rec().get(k * n + l))
                    .collect()
            })
            .collect();
        let owned_unmasked = (0..n)
            .map(|k| {
                (0..m)
                    .filter(|&j| params.param_mask.get(k * m + j))
                    .collect()
            })
            .collect();
        ParamIndex {
            active_cols,
            col_pos,
            unmasked_rec,
            owned_unmasked,
        }
    }
}

enum Storage {
    Dense(DenseMatrix),
    MaskedDense(DenseMatrix),
    /// Live rows (ascending) with one value block per row; every block is
    /// laid out along `ParamIndex::active_cols`.
    RowCompressed {
        rows: Vec<usize>,
        vals: Vec<f64>,
    },
}

/// The influence matrix `M⁽ᵗ⁾` plus its structural activity pattern.
pub struct InfluenceMatrix {
    pub n: usize,
    pub p: usize,
    pub backend: Backend,
    /// Units whose rows are live (nonzero slope at the step that wrote them).
    pub row_active: BitMask,
    /// Unmasked parameter columns; static across the episode.
    pub col_active: BitMask,
    storage: Storage,
}

impl InfluenceMatrix {
    /// The all-zero matrix of step 0: parameters have had no influence yet.
    pub fn zero(backend: Backend, params: &CellParams) -> Self {
        let n = params.n;
        let p = params.p();
        let storage = match backend {
            Backend::DenseReference => Storage::Dense(DenseMatrix::zeros(n, p)),
            Backend::MaskedDense => Storage::MaskedDense(DenseMatrix::zeros(n, p)),
            Backend::RowCompressed => Storage::RowCompressed {
                rows: Vec::new(),
                vals: Vec::new(),
            },
        };
        InfluenceMatrix {
            n,
            p,
            backend,
            row_active: BitMask::zeros(n),
            col_active: params.param_mask.clone(),
            storage,
        }
    }

    /// Entry (k, c); structurally absent positions read as `+0.0`.
    pub fn get(&self, k: usize, c: usize) -> f64 {
        assert!(k < self.n && c < self.p, "influence index out of range");
        match &self.storage {
            Storage::Dense(d) | Storage::MaskedDense(d) => d.get(k, c),
            Storage::RowCompressed { rows, vals } => match rows.binary_search(&k) {
                Ok(ri) => {
                    let width = if rows.is_empty() {
                        0
                    } else {
                        vals.len() / rows.len()
                    };
                    // Column order inside a block mirrors ascending unmasked
                    // columns, so the block offset is the rank of c among them.
                    if !self.col_active.get(c) {
                        return 0.0;
                    }
                    let pos = (0..c).filter(|&cc| self.col_active.get(cc)).count();
                    vals[ri * width + pos]
                }
                Err(_) => 0.0,
            },
        }
    }

    /// Entries the backend actually holds in memory.
    pub fn stored_entries(&self) -> u64 {
        match &self.storage {
            Storage::Dense(_) | Storage::MaskedDense(_) => (self.n * self.p) as u64,
            Storage::RowCompressed { vals, .. } => vals.len() as u64,
        }
    }

    /// Live rows × live columns — the footprint a compressed representation
    /// needs, independent of which backend is running.
    pub fn structural_entries(&self) -> u64 {
        (self.row_active.popcount() * self.col_active.popcount()) as u64
    }

    /// Dense copy, for diffing and assertions.
    pub fn to_dense(&self) -> DenseMatrix {
        match &self.storage {
            Storage::Dense(d) | Storage::MaskedDense(d) => d.clone(),
            Storage::RowCompressed { rows, vals } => {
                let mut out = DenseMatrix::zeros(self.n, self.p);
                let width = if rows.is_empty() {
                    0
                } else {
                    vals.len() / rows.len()
                };
                let cols: Vec<usize> = self.col_active.ones_indices();
                for (ri, &k) in rows.iter().enumerate() {
                    for (ci, &c) in cols.iter().enumerate() {
                        out.set(k, c, vals[ri * width + ci]);
                    }
                }
                out
            }
        }
    }

    /// The matrix in general row-compressed form (live rows, live columns).
    pub fn to_row_compressed(&self) -> RowCompressedMatrix {
        crate::linalg::to_row_compressed(&self.to_dense(), &self.row_active, &self.col_active)
    }
}

fn local_input(a_prev: &[f64], x: &[f64], n: usize, n_in: usize, j: usize) -> f64 {
    if j < n {
        a_prev[j]
    } else if j < n + n_in {
        x[j - n]
    } else {
        1.0
    }
}

/// One influence-recursion step: consumes the previous matrix, returns the
/// new one, and counts the multiply-accumulates it performed.
///
/// Counting convention (shared by the dense yardstick and both sparse
/// backends): the propagation term counts one MAC per (row, summed weight,
/// column) triple it visits; the immediate term counts one per owned column
/// it adds into. The final `H′` row scale is bookkeeping-free in all
/// backends, so ratios between backends compare like with like.
pub fn influence_update(
    m_prev: &InfluenceMatrix,
    state: &CellState,
    params: &CellParams,
    a_prev: &[f64],
    x: &[f64],
    pidx: &ParamIndex,
    counter: &mut OpCounter,
) -> InfluenceMatrix {
    let n = params.n;
    let n_in = params.n_in;
    let m = params.m();
    let p = params.p();
    assert_eq!(m_prev.n, n, "influence row dimension mismatch");
    assert_eq!(m_prev.p, p, "influence column dimension mismatch");
    assert_eq!(state.hprime.len(), n, "state dimension mismatch");
    assert_eq!(a_prev.len(), n, "a_prev dimension mismatch");
    assert_eq!(x.len(), n_in, "input dimension mismatch");

    let mut row_active = BitMask::zeros(n);
    for k in 0..n {
        row_active.set(k, state.hprime[k] != 0.0);
    }

    let storage = match &m_prev.storage {
        Storage::Dense(prev) => {
            let mut buf = DenseMatrix::zeros(n, p);
            for k in 0..n {
                let wrow = params.w_rec.row(k);
                let block = k * m;
                let h = state.hprime[k];
                for c in 0..p {
                    let mut acc = 0.0;
                    for (l, &w) in wrow.iter().enumerate() {
                        acc += w * prev.get(l, c);
                    }
                    if c >= block && c < block + m && params.param_mask.get(c) {
                        acc += local_input(a_prev, x, n, n_in, c - block);
                    }
                    buf.set(k, c, h * acc);
                }
            }
            // Full-loop yardstick: n²p propagation MACs and one immediate
            // add per owned (unit, column) pair, masked or not.
            counter.add_influence((n * n * p) as u64, (n * m) as u64);
            Storage::Dense(buf)
        }
        Storage::MaskedDense(prev) => {
            let mut buf = DenseMatrix::zeros(n, p);
            let (mut propagate, mut immediate) = (0u64, 0u64);
            for k in 0..n {
                let h = state.hprime[k];
                if h == 0.0 {
                    continue;
                }
                let wrow = params.w_rec.row(k);
                let block = k * m;
                // Live previous rows reachable through unmasked weights.
                let s_k: Vec<usize> = pidx.unmasked_rec[k]
                    .iter()
                    .copied()
                    .filter(|&l| m_prev.row_active.get(l))
                    .collect();
                for &c in &pidx.active_cols {
                    let mut acc = 0.0;
                    for &l in &s_k {
                        acc += wrow[l] * prev.get(l, c);
                    }
                    if c >= block && c < block + m {
                        acc += local_input(a_prev, x, n, n_in, c - block);
                        immediate += 1;
                    }
                    buf.set(k, c, h * acc);
                }
                propagate += (s_k.len() * pidx.active_cols.len()) as u64;
            }
            counter.add_influence(propagate, immediate);
            Storage::MaskedDense(buf)
        }
        Storage::RowCompressed {
            rows: prev_rows,
            vals: prev_vals,
        } => {
            let width = pidx.active_cols.len();
            let new_rows: Vec<usize> = (0..n).filter(|&k| state.hprime[k] != 0.0).collect();
            let mut new_vals = vec![0.0; new_rows.len() * width];
            let (mut propagate, mut immediate) = (0u64, 0u64);
            for (ri, &k) in new_rows.iter().enumerate() {
                let wrow = params.w_rec.row(k);
                let block = k * m;
                let h = state.hprime[k];
                // (weight, previous-row offset) pairs, ascending in l.
                let s_k: Vec<(f64, usize)> = pidx.unmasked_rec[k]
                    .iter()
                    .filter_map(|&l| {
                        prev_rows
                            .binary_search(&l)
                            .ok()
                            .map(|pi| (wrow[l], pi * width))
                    })
                    .collect();
                let out = &mut new_vals[ri * width..(ri + 1) * width];
                for (ci, &c) in pidx.active_cols.iter().enumerate() {
                    let mut acc = 0.0;
                    for &(w, off) in &s_k {
                        acc += w * prev_vals[off + ci];
                    }
                    if c >= block && c < block + m {
                        acc += local_input(a_prev, x, n, n_in, c - block);
                        immediate += 1;
                    }
                    out[ci] = h * acc;
                }
                propagate += (s_k.len() * width) as u64;
            }
            counter.add_influence(propagate, immediate);
            Storage::RowCompressed {
                rows: new_rows,
                vals: new_vals,
            }
        }
    };

    let out = InfluenceMatrix {
        n,
        p,
        backend: m_prev.backend,
        row_active,
        col_active: m_prev.col_active.clone(),
        storage,
    };
    counter.record_influence_storage(out.stored_entries());
    out
}

/// Accumulated parameter and readout gradients for one or more episodes.
#[derive(Clone, Debug)]
pub struct GradAccumulator {
    /// dL/dw over the flattened parameter vector; masked columns stay zero.
    pub dldw: Vec<f64>,
    pub readout_w: DenseMatrix,
    pub readout_b: Vec<f64>,
}

impl GradAccumulator {
    pub fn zeros(p: usize, n_out: usize, n: usize) -> Self {
        GradAccumulator {
            dldw: vec![0.0; p],
            readout_w: DenseMatrix::zeros(n_out, n),
            readout_b: vec![0.0; n_out],
        }
    }

    pub fn add_readout(&mut self, g: &ReadoutGrads) {
        for (a, b) in self
            .readout_w
            .as_mut_slice()
            .iter_mut()
            .zip(g.w_out.as_slice())
        {
            *a += b;
        }
        for (a, b) in self.readout_b.iter_mut().zip(&g.b_out) {
            *a += b;
        }
    }

    /// Elementwise sum; used for the ordered batch reduction.
    pub fn add(&mut self, other: &GradAccumulator) {
        assert_eq!(
            self.dldw.len(),
            other.dldw.len(),
            "gradient length mismatch"
        );
        for (a, b) in self.dldw.iter_mut().zip(&other.dldw) {
            *a += b;
        }
        for (a, b) in self
            .readout_w
            .as_mut_slice()
            .iter_mut()
            .zip(other.readout_w.as_slice())
        {
            *a += b;
        }
        for (a, b) in self.readout_b.iter_mut().zip(&other.readout_b) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.dldw {
            *v *= s;
        }
        for v in self.readout_w.as_mut_slice() {
            *v *= s;
        }
        for v in &mut self.readout_b {
            *v *= s;
        }
    }
}

/// Folds one step's credit assignment into the parameter gradient:
/// `dL/dw += Mᵀ·c̄`, visiting only live rows and columns on the sparse
/// backends, full loops on the dense reference.
pub fn grad_step(
    m: &InfluenceMatrix,
    cbar: &[f64],
    acc: &mut GradAccumulator,
    counter: &mut OpCounter,
) {
    assert_eq!(cbar.len(), m.n, "credit vector length mismatch");
    assert_eq!(acc.dldw.len(), m.p, "gradient length mismatch");
    match &m.storage {
        Storage::Dense(buf) => {
            for k in 0..m.n {
                let row = buf.row(k);
                let c = cbar[k];
                for (g, &v) in acc.dldw.iter_mut().zip(row) {
                    *g += v * c;
                }
            }
            counter.macs_grad += (m.n * m.p) as u64;
        }
        Storage::MaskedDense(buf) => {
            let cols: Vec<usize> = m.col_active.ones_indices();
            let mut visited = 0u64;
            for k in 0..m.n {
                if !m.row_active.get(k) {
                    continue;
                }
                let row = buf.row(k);
                let cb = cbar[k];
                for &c in &cols {
                    acc.dldw[c] += row[c] * cb;
                }
                visited += cols.len() as u64;
            }
            counter.macs_grad += visited;
        }
        Storage::RowCompressed { rows, vals } => {
            let cols: Vec<usize> = m.col_active.ones_indices();
            let width = cols.len();
            for (ri, &k) in rows.iter().enumerate() {
                let cb = cbar[k];
                let block = &vals[ri * width..(ri + 1) * width];
                for (ci, &c) in cols.iter().enumerate() {
                    acc.dldw[c] += block[ci] * cb;
                }
            }
            counter.macs_grad += (rows.len() * width) as u64;
        }
    }
}

/// One training sequence: per-step inputs and optional per-step class
/// targets. Sequence classification places a single target at the last step.
#[derive(Clone, Debug)]
pub struct Sequence {
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<Option<usize>>,
}

impl Sequence {
    /// A sequence supervised only at its final step.
    pub fn classification(inputs: Vec<Vec<f64>>, label: usize) -> Self {
        assert!(!inputs.is_empty(), "sequence must have at least one step");
        let mut targets = vec![None; inputs.len()];
        *targets.last_mut().unwrap() = Some(label);
        Sequence { inputs, targets }
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

/// Cell choice, surrogate shape, and influence backend for an episode.
#[derive(Clone, Copy, Debug)]
pub struct EngineConfig {
    pub kind: CellKind,
    pub surrogate: SurrogateConfig,
    pub backend: Backend,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            kind: CellKind::Threshold,
            surrogate: SurrogateConfig::default(),
            backend: Backend::RowCompressed,
        }
    }
}

/// Everything one episode produces.
pub struct EpisodeResult {
    /// Sum of the per-step losses (a single term for classification).
    pub loss: f64,
    pub grads: GradAccumulator,
    pub stats: SparsityStats,
    pub counter: OpCounter,
}

/// Runs one sequence forward with online gradient accumulation:
/// state update → influence update → (where a target exists) readout, loss,
/// credit assignment, gradient fold. Starts from `a⁽⁰⁾ = 0`, `M⁽⁰⁾ = 0`.
pub fn rtrl_episode(
    params: &CellParams,
    readout: &Readout,
    seq: &Sequence,
    cfg: &EngineConfig,
) -> EpisodeResult {
    assert!(!seq.is_empty(), "episode requires a nonempty sequence");
    assert_eq!(
        seq.targets.len(),
        seq.inputs.len(),
        "one (possibly absent) target per input step"
    );

    let pidx = ParamIndex::new(params);
    let mut counter = OpCounter::new();
    let mut stats = SparsityStats::new();
    let mut grads = GradAccumulator::zeros(params.p(), readout.w_out.rows(), params.n);
    let mut m = InfluenceMatrix::zero(cfg.backend, params);
    let mut a_prev = vec![0.0; params.n];
    let mut loss_total = 0.0;

    for (x, target) in seq.inputs.iter().zip(&seq.targets) {
        let state = match cfg.kind {
            CellKind::Threshold => cell_step(params, &a_prev, x, &cfg.surrogate, &mut counter),
            CellKind::Tanh => tanh_cell_step(params, &a_prev, x, &mut counter),
        };
        m = influence_update(&m, &state, params, &a_prev, x, &pidx, &mut counter);
        stats.push_step(state.alpha, state.beta, m.structural_entries());

        if let Some(t) = target {
            let logits = readout_forward(readout, &state.a);
            let (loss, dlogits) = cross_entropy_loss_and_grad(&logits, *t);
            loss_total += loss;
            let (cbar, rgrads) = credit_assignment(readout, &dlogits, &state.a);
            grads.add_readout(&rgrads);
            grad_step(&m, &cbar, &mut grads, &mut counter);
        }
        a_prev = state.a;
    }

    EpisodeResult {
        loss: loss_total,
        grads,
        stats,
        counter,
    }
}

/// Forward pass only; returns the last step's logits. Used for validation,
/// where no gradients (and no influence matrix) are needed.
pub fn forward_last_logits(
    params: &CellParams,
    readout: &Readout,
    inputs: &[Vec<f64>],
    kind: CellKind,
    surrogate: &SurrogateConfig,
) -> Vec<f64> {
    assert!(
        !inputs.is_empty(),
        "forward pass requires at least one step"
    );
    let mut scratch = OpCounter::new();
    let mut a_prev = vec![0.0; params.n];
    for x in inputs {
        let state = match kind {
            CellKind::Threshold => cell_step(params, &a_prev, x, surrogate, &mut scratch),
            CellKind::Tanh => tanh_cell_step(params, &a_prev, x, &mut scratch),
        };
        a_prev = state.a;
    }
    readout_forward(readout, &a_prev)
}

/// One entry that differed between two backends.
#[derive(Clone, Copy, Debug)]
pub struct EntryDiff {
    pub index: usize,
    pub reference: f64,
    pub candidate: f64,
}

/// A cross-backend disagreement, with the entries that differ.
#[derive(Debug)]
pub enum EquivalenceError {
    LossMismatch {
        backend: Backend,
        reference: f64,
        candidate: f64,
    },
    GradientMismatch {
        backend: Backend,
        field: &'static str,
        diffs: Vec<EntryDiff>,
    },
}

impl std::fmt::Display for EquivalenceError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            EquivalenceError::LossMismatch {
                backend,
                reference,
                candidate,
            } => write!(
                f,
                "{backend} loss {candidate:?} differs from dense reference {reference:?}"
            ),
            EquivalenceError::GradientMismatch {
                backend,
                field,
                diffs,
            } => {
                write!(
                    f,
                    "{backend} disagrees with dense reference on {} {field} entries:",
                    diffs.len()
                )?;
                for d in diffs.iter().take(8) {
                    write!(
                        f,
                        "\n  [{}] reference {:?} ({:#018x}) vs {:?} ({:#018x})",
                        d.index,
                        d.reference,
                        d.reference.to_bits(),
                        d.candidate,
                        d.candidate.to_bits()
                    )?;
                }
                if diffs.len() > 8 {
                    write!(f, "\n  … {} more", diffs.len() - 8)?;
                }
                Ok(())
            }
        }
    }
}

impl std::error::Error for EquivalenceError {}

/// Per-backend outcome of an equivalence run.
pub struct EquivalenceReport {
    pub loss: f64,
    /// (backend, counters) for dense-reference, masked-dense, row-compressed.
    pub counters: Vec<(Backend, OpCounter)>,
}

fn diff_canonical(reference: &[f64], candidate: &[f64]) -> Vec<EntryDiff> {
    reference
        .iter()
        .zip(candidate)
        .enumerate()
        .filter(|(_, (r, c))| canonical_bits(**r) != canonical_bits(**c))
        .map(|(i, (r, c))| EntryDiff {
            index: i,
            reference: *r,
            candidate: *c,
        })
        .collect()
}

/// Runs the same episode under all three backends and demands agreement:
/// identical losses and canonically bit-identical gradients. Returns the
/// per-backend counters so callers can compare the work each one did.
pub fn backend_equivalence_check(
    params: &CellParams,
    readout: &Readout,
    seq: &Sequence,
    kind: CellKind,
    surrogate: &SurrogateConfig,
) -> Result<EquivalenceReport, EquivalenceError> {
    let run = |backend: Backend| {
        rtrl_episode(
            params,
            readout,
            seq,
            &EngineConfig {
                kind,
                surrogate: *surrogate,
                backend,
            },
        )
    };
    let dense = run(Backend::DenseReference);
    let mut counters = vec![(Backend::DenseReference, dense.counter.clone())];

    for backend in [Backend::MaskedDense, Backend::RowCompressed] {
        let r = run(backend);
        if r.loss.to_bits() != dense.loss.to_bits() {
            return Err(EquivalenceError::LossMismatch {
                backend,
                reference: dense.loss,
                candidate: r.loss,
            });
        }
        for (field, reference, candidate) in [
            ("dL/dw", &dense.grads.dldw, &r.grads.dldw),
            (
                "readout weight gradient",
                &dense.grads.readout_w.as_slice().to_vec(),
                &r.grads.readout_w.as_slice().to_vec(),
            ),
            (
                "readout bias gradient",
                &dense.grads.readout_b,
                &r.grads.readout_b,
            ),
        ] {
            let diffs = diff_canonical(reference, candidate);
            if !diffs.is_empty() {
                return Err(EquivalenceError::GradientMismatch {
                    backend,
                    field,
                    diffs,
                });
            }
        }
        counters.push((backend, r.counter));
    }

    Ok(EquivalenceReport {
        loss: dense.loss,
        counters,
    })
}
