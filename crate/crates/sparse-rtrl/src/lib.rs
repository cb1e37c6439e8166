//! Exact real-time recurrent learning for recurrent networks that are
//! sparse twice over: most units are silent at any instant (activity
//! sparsity) and most weights are pruned away (parameter sparsity).
//!
//! The influence matrix that forward-mode credit assignment carries is
//! n·p entries — unusable at face value. But every timestep, the rows
//! belonging to units whose pseudo-derivative vanished are exactly zero,
//! and the columns belonging to masked-out parameters are zero forever.
//! Propagating only the live block makes the cost per step scale with the
//! *square* of the two densities while the gradients stay bit-for-bit
//! identical to the dense computation — nothing here is approximate.
//!
//! The crate provides the sparse propagation engine with three
//! interchangeable backends ([`engine`]), a threshold cell with a
//! triangular surrogate slope and a tanh reference cell ([`cell`]),
//! backprop-through-time and finite-difference oracles to check against
//! ([`oracle`]), instrumented operation counting with the matching
//! analytical cost model ([`counter`], [`metrics`]), and a spiral
//! orientation benchmark with a deterministic training driver
//! ([`spiral`], [`driver`]).

// The kernels iterate by unit index k and slot index l/c because those
// indices carry meaning (they name rows of the influence matrix and columns
// of the parameter block); iterator adapters would hide that correspondence.
#![allow(clippy::needless_range_loop)]

pub mod book;
pub mod cell;
pub mod counter;
pub mod driver;
pub mod engine;
pub mod linalg;
pub mod metrics;
pub mod optim;
pub mod oracle;
pub mod prng;
pub mod spiral;

pub use cell::{CellKind, CellParams, Readout, SurrogateConfig};
pub use counter::OpCounter;
pub use engine::{
    backend_equivalence_check, rtrl_episode, Backend, EngineConfig, InfluenceMatrix, Sequence,
};
pub use metrics::{CostModel, Method, SparsityStats};
pub use prng::Prng;
