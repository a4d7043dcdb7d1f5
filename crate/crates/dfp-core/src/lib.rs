//! Dataless scoring of feed-forward network architectures via the deep
//! frame potential of their induced block dictionaries.
//!
//! An architecture (chain, residual, densely connected, or a general
//! lower-triangular skip topology) induces a structured block dictionary.
//! This crate builds that dictionary, computes its normalized Gram blocks,
//! evaluates frame potential and mutual coherence, derives the analytic
//! chain lower bound, and minimizes the potential over the learned
//! parameters to produce an architecture score. A small sparse-coding
//! module verifies the underlying approximation theory on desk-scale
//! instances.
//!
//! The crate is `no_std`-compatible (requires `alloc`); the `std` feature
//! (default) only adds wall-clock timing to minimization results.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod arch;
pub mod bound;
pub mod dict;
pub mod gram;
mod mat;
mod math;
pub mod minimize;
pub mod potential;
mod rng;
pub mod sparse;

pub use arch::{ArchSpec, Edge, EdgeKind, Family, LayerGeom, SpecError};
pub use dict::{Block, BlockDictionary, DictError, InitPolicy};
pub use gram::{GramBlocks, GramError};
pub use mat::Mat;
pub use minimize::{MinimizeConfig, MinimizeError, MinimizeResult, StepRule};
pub use potential::PotentialReport;
pub use rng::{NormalSource, SplitMix64};
