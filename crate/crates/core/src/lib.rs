//! Kernel-based identification of sparse dynamic networks with Kronecker
//! structure.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod dims;
pub mod error;
pub mod export;
pub mod hyperopt;
pub mod kernel;
pub mod likelihood;
pub mod metrics;
pub mod netgen;
pub mod regress;

pub use dims::Dims;
pub use error::{KronError, Result};
