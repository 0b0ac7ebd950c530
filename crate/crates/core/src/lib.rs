//! Snapshot ensembles for instruction-following navigation on scene graphs.
//!
//! The crate is organised bottom-up:
//!
//! - [`navsim`]: scene graphs, episodes, the synthetic dataset generator and
//!   the single-run environment loop.
//! - [`policy`]: the recurrent cross-modal attention policy (original and
//!   past-action-aware wiring) on top of a small recorded-tape autodiff.
//! - [`training`]: imitation + actor-critic losses, attention regularization,
//!   the periodic snapshot schedule and the snapshot file format.
//! - [`ensemble`]: fused score-summing inference and beam-search selection.
//! - [`metrics`]: SR/TL/NE/SPL plus the disagreement, Venn, long-navigation,
//!   per-scene and export analyses.
//! - [`experiment`]: config files, seed splitting, the end-to-end pipeline and
//!   the M/k ablation sweep.

pub mod ensemble;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod navsim;
pub mod policy;
pub mod tape;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
