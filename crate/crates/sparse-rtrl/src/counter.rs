//! Instrumented operation counters.
//!
//! Every kernel that does floating-point multiply-accumulate work threads one
//! of these through and bumps the relevant field. The savings claims of the
//! sparse paths are made against these measured counts, never against
//! formula predictions alone, so the counters are part of the contract:
//! a kernel that does work without counting it invalidates the comparison.

/// Multiply-accumulate and storage counters for one run (a step, an episode,
/// or an aggregate across a batch — the semantics are set by whoever owns it).
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct OpCounter {
    /// MACs spent in the forward pass (pre-activation products).
    pub macs_forward: u64,
    /// MACs spent updating the influence matrix (propagate + immediate).
    pub macs_influence: u64,
    /// The J·M propagation share of `macs_influence`.
    pub macs_influence_propagate: u64,
    /// The immediate-influence share of `macs_influence`.
    pub macs_influence_immediate: u64,
    /// MACs spent folding credit assignment into the gradient (Mᵀ·c̄).
    pub macs_grad: u64,
    /// Influence entries held right now (structural, value-independent).
    pub stored_influence_entries: u64,
    /// High-water mark of `stored_influence_entries`.
    pub peak_stored_influence_entries: u64,
    /// State copies a reverse-mode run would have to keep (n per stored step).
    pub trace_states: u64,
}

impl OpCounter {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds one influence-update's worth of work, keeping the total and its
    /// propagate/immediate breakdown consistent.
    pub fn add_influence(&mut self, propagate: u64, immediate: u64) {
        self.macs_influence_propagate += propagate;
        self.macs_influence_immediate += immediate;
        self.macs_influence += propagate + immediate;
    }

    /// Records the current influence storage footprint and updates the peak.
    pub fn record_influence_storage(&mut self, entries: u64) {
        self.stored_influence_entries = entries;
        if entries > self.peak_stored_influence_entries {
            self.peak_stored_influence_entries = entries;
        }
    }

    /// Total MACs across all phases.
    pub fn macs_total(&self) -> u64 {
        self.macs_forward + self.macs_influence + self.macs_grad
    }

    pub fn reset(&mut self) {
        *self = Self::default();
    }

    /// Folds another counter into this one. MAC fields add; storage uses the
    /// final `stored_influence_entries` of `other` and the max of the peaks.
    pub fn merge(&mut self, other: &OpCounter) {
        self.macs_forward += other.macs_forward;
        self.macs_influence += other.macs_influence;
        self.macs_influence_propagate += other.macs_influence_propagate;
        self.macs_influence_immediate += other.macs_influence_immediate;
        self.macs_grad += other.macs_grad;
        self.stored_influence_entries = other.stored_influence_entries;
        self.peak_stored_influence_entries = self
            .peak_stored_influence_entries
            .max(other.peak_stored_influence_entries);
        self.trace_states += other.trace_states;
    }
}
