//! Desk-scale lottery-ticket laboratory.
//!
//! The crate is organised bottom-up:
//!
//! - [`nn`]: a small deterministic network engine (dense/conv layers,
//!   reverse-mode gradients, SGD, Kaiming-uniform init, masked forward).
//! - [`pruning`]: LAMP scoring, global score-threshold pruning and mask algebra.
//! - [`trajectory`]: circle-probe trajectory length as an expressivity measure.
//! - [`ticket_search`]: iterative train → prune → rewind search and winning
//!   ticket identification.
//! - [`metrics`]: success rate, accuracy gain, LTS score, trajectory-length gain
//!   and per-architecture aggregation.

pub mod metrics;
pub mod nn;
pub mod pruning;
pub mod rng;
pub mod ticket_search;
pub mod trajectory;

pub use nn::{Layer, NetworkSpec, Parameters, Split, DatasetSplits, TrainConfig};
pub use pruning::MaskSet;
pub use rng::RngState;
