//! Differentiable operations.
//!
//! Each submodule exposes plain forward kernels on [`Tensor`](crate::Tensor)s
//! and the matching [`Tape`](crate::Tape) methods that record a backward rule.

pub mod channels;
pub mod conv;
pub mod elementwise;
pub mod linalg;
pub mod norm;
pub mod reduce;

pub use channels::{concat_channels, split_channels};
pub use conv::{conv_spatial, conv_temporal, ConvGeometry};
pub use elementwise::{add, relu};
pub use linalg::matmul;
pub use norm::{batch_norm, Mode, RunningStats, BN_EPS, BN_MOMENTUM};
pub use reduce::{global_avg_pool, softmax};

/// Splits `shape` around `axis` into `(outer, extent, inner)` element counts.
pub(crate) fn around_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}
