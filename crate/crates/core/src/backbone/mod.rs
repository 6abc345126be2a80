//! Snippet-level residual networks with DSA insertion points.
//!
//! A video enters as `(N, C, U, T, H, W)`. Every layer except DSA acts on
//! each snippet independently with shared weights; DSA is the only path
//! between snippets. Per-snippet class scores are averaged into one
//! video-level prediction.

mod block;
mod data;
mod experiment;
mod net;
mod shift;
mod train;

pub use block::{
    run_block, run_block_on, BlockKind, BlockParams, BlockSpec, BlockVars, BnParams, DsaPlacement, Position,
};
pub use data::{make_order_dataset, OrderDataset, ORDER_SHAPE};
pub use experiment::{
    permutation_invariant, run_order_experiment, OrderArtifacts, OrderExperiment, OrderRun, PERMUTATION_PROBE,
};
pub use net::{consensus, permute_snippets, ToyNet, ToyNetOutput, ToyNetSpec, ToyNetVars};
pub use shift::{temporal_shift, TSM_SHIFT_FRACTION};
pub use train::{evaluate, train_toy, EpochRecord, TrainConfig, TrainReport};
