//! Dynamic segment aggregation (DSA) for video-level feature learning.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`], [`ops`], [`tape`]: a small `f64` tensor library with
//!   reverse-mode differentiation.
//! - [`dsa`]: context pooling, dynamic kernel generation, channel-wise
//!   segment convolution and the split/concat module.
//! - [`conv4d`]: a brute-force 4D convolution used as an independent oracle.
//! - [`backbone`]: toy residual blocks with DSA insertion points, a
//!   segment-consensus network and a synthetic snippet-order task.
//! - [`cost`]: analytic MAC and parameter accounting for staged networks.
//! - [`gradcheck`]: finite-difference checks for every differentiable op.

pub mod backbone;
pub mod checkpoint;
pub mod conv4d;
pub mod cost;
pub mod dsa;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod ops;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use ops::Mode;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
