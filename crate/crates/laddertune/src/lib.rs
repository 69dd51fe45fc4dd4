//! Ladder side-tuning on a small transformer, with training-step memory
//! measured byte-for-byte off a reverse-mode tape.
//!
//! The crate is organized around that tape: `tape` records forward ops and
//! what each keeps for backward, `backbone` and `side` build the frozen
//! trunk and the narrow gated side network on top of it, `petl` applies the
//! baselines (full tuning, adapters, LoRA, BitFit, prompt tuning), `prune`
//! initializes the side network from the backbone by structural pruning,
//! and `memory` predicts the tape's numbers in closed form.

pub mod backbone;
#[cfg(test)]
mod backbone_tests;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod memory;
pub mod optim;
pub mod params;
pub mod petl;
#[cfg(test)]
mod petl_tests;
pub mod prune;
pub mod side;
#[cfg(test)]
mod side_tests;
pub mod task;
#[cfg(test)]
mod task_tests;
pub mod train;
#[cfg(test)]
mod train_tests;
pub mod ablate;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use tape::{DType, Elem, GradMap, Owner, RetainedBytes, RetainedReport, SaveReason, Tape, Var};
pub use tensor::Tensor;
