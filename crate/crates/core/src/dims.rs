use serde::{Deserialize, Serialize};

use crate::error::{KronError, Result};

/// Network dimensions: `p1` modules of `p2` nodes each, driven by `m` inputs.
///
/// Output channel `(h, k)` lives at position `h * p2 + k` (0-based), input
/// channel `i` at position `i`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dims {
    pub p1: usize,
    pub p2: usize,
    pub m: usize,
}

impl Dims {
    pub fn new(p1: usize, p2: usize, m: usize) -> Result<Self> {
        if p1 == 0 || p2 == 0 {
            return Err(KronError::InvalidArgument(format!(
                "module counts must be positive (p1={p1}, p2={p2})"
            )));
        }
        Ok(Dims { p1, p2, m })
    }

    /// Number of output channels `p1 * p2`.
    #[inline]
    pub fn outputs(&self) -> usize {
        self.p1 * self.p2
    }

    #[inline]
    pub fn channel(&self, h: usize, k: usize) -> usize {
        h * self.p2 + k
    }

    /// Inverse of [`Dims::channel`].
    #[inline]
    pub fn split_channel(&self, c: usize) -> (usize, usize) {
        (c / self.p2, c % self.p2)
    }

    #[inline]
    pub fn lambda_index(&self, h: usize, j: usize) -> usize {
        h * self.p1 + j
    }

    #[inline]
    pub fn gamma_index(&self, k: usize, l: usize) -> usize {
        k * self.p2 + l
    }

    #[inline]
    pub fn omega_index(&self, k: usize, i: usize) -> usize {
        k * self.m + i
    }

    /// Number of scalar impulse responses in `G`.
    pub fn g_blocks(&self) -> usize {
        self.outputs() * self.outputs()
    }

    /// Number of scalar impulse responses in `F`.
    pub fn f_blocks(&self) -> usize {
        self.outputs() * self.m
    }
}

impl std::fmt::Display for Dims {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "(p1={}, p2={}, m={})", self.p1, self.p2, self.m)
    }
}
