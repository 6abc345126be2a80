//! Analytic MAC and parameter accounting.
//!
//! Conventions: one multiply-accumulate counts as one FLOP; batch norm,
//! ReLU and pooling cost nothing at run time; convolutions are bias-free
//! and followed by batch norm (two parameters per output channel); the
//! classifier has a bias. A clip of `U` snippets costs `U` times one
//! snippet, and spatial crops are not multiplied in.

mod arch;
mod model;
mod report;

pub use arch::{ArchSpec, BlockType, InputSize, PoolSpec, StageSpec, StemSpec, BUILTIN_ARCHS};
pub use model::{arch_cost, dsa_overhead, layer_cost, DsaPlacementSpec, FeatureShape, Layer, LayerCost};
pub use report::{render, CostLine, CostReport, DsaOverhead, DsaOverheadLine, Format, CONVENTION};
