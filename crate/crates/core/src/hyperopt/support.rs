//! Binary network supports.

use serde::{Deserialize, Serialize};

use crate::dims::Dims;
use crate::error::{KronError, Result};
use crate::kernel::BlockScaleMatrix;

/// Kronecker factors of a network: `supp(G) = E1 (x) E2`,
/// `supp(F) = A1 (x) A2`. Entries are 0 or 1.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSupport {
    pub e1: Vec<Vec<u8>>,
    pub e2: Vec<Vec<u8>>,
    pub a1: Vec<u8>,
    pub a2: Vec<Vec<u8>>,
}

fn check_binary(name: &str, rows: &[Vec<u8>], r: usize, c: usize) -> Result<()> {
    if rows.len() != r || rows.iter().any(|row| row.len() != c) {
        return Err(KronError::Dimension(format!("{name} must be {r}x{c}")));
    }
    if rows.iter().flatten().any(|&v| v > 1) {
        return Err(KronError::InvalidArgument(format!("{name} must be binary")));
    }
    Ok(())
}

impl NetworkSupport {
    pub fn full(dims: Dims) -> Self {
        NetworkSupport {
            e1: vec![vec![1; dims.p1]; dims.p1],
            e2: vec![vec![1; dims.p2]; dims.p2],
            a1: if dims.m > 0 { vec![1; dims.p1] } else { Vec::new() },
            a2: vec![vec![1; dims.m]; dims.p2],
        }
    }

    pub fn empty(dims: Dims) -> Self {
        NetworkSupport {
            e1: vec![vec![0; dims.p1]; dims.p1],
            e2: vec![vec![0; dims.p2]; dims.p2],
            a1: if dims.m > 0 { vec![0; dims.p1] } else { Vec::new() },
            a2: vec![vec![0; dims.m]; dims.p2],
        }
    }

    pub fn check(&self, dims: Dims) -> Result<()> {
        check_binary("E1", &self.e1, dims.p1, dims.p1)?;
        check_binary("E2", &self.e2, dims.p2, dims.p2)?;
        check_binary("A2", &self.a2, dims.p2, dims.m)?;
        let a1_len = if dims.m > 0 { dims.p1 } else { 0 };
        if self.a1.len() != a1_len || self.a1.iter().any(|&v| v > 1) {
            return Err(KronError::Dimension(format!(
                "A1 must be a binary vector of length {a1_len}"
            )));
        }
        Ok(())
    }

    pub fn dims(&self) -> Dims {
        Dims {
            p1: self.e1.len(),
            p2: self.e2.len(),
            m: self.a2.first().map_or(0, Vec::len),
        }
    }

    /// Elementwise edges `E1 (x) E2` and `A1 (x) A2`.
    pub fn edges(&self) -> EdgeMask {
        let dims = self.dims();
        let p = dims.outputs();
        let mut g = vec![vec![0; p]; p];
        let mut f = vec![vec![0; dims.m]; p];
        for h in 0..dims.p1 {
            for k in 0..dims.p2 {
                let row = dims.channel(h, k);
                for j in 0..dims.p1 {
                    for l in 0..dims.p2 {
                        g[row][dims.channel(j, l)] = self.e1[h][j] * self.e2[k][l];
                    }
                }
                for i in 0..dims.m {
                    f[row][i] = self.a1[h] * self.a2[k][i];
                }
            }
        }
        EdgeMask { g, f }
    }
}

/// Elementwise support: `g[row][col] = 1` iff output `col` Granger-causes
/// output `row`; `f[row][i] = 1` iff input `i` drives output `row`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgeMask {
    pub g: Vec<Vec<u8>>,
    pub f: Vec<Vec<u8>>,
}

impl EdgeMask {
    /// Nonzero pattern of block scales.
    pub fn from_block_scales(s: &BlockScaleMatrix) -> Self {
        let pattern = |m: &nalgebra::DMatrix<f64>| -> Vec<Vec<u8>> {
            (0..m.nrows())
                .map(|r| (0..m.ncols()).map(|c| u8::from(m[(r, c)] > 0.0)).collect())
                .collect()
        };
        EdgeMask {
            g: pattern(&s.g),
            f: pattern(&s.f),
        }
    }

    pub fn outputs(&self) -> usize {
        self.g.len()
    }

    pub fn inputs(&self) -> usize {
        self.f.first().map_or(0, Vec::len)
    }

    pub fn g_edges(&self) -> usize {
        self.g.iter().flatten().map(|&v| v as usize).sum()
    }

    pub fn f_edges(&self) -> usize {
        self.f.iter().flatten().map(|&v| v as usize).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kronecker_edges() {
        let sup = NetworkSupport {
            e1: vec![vec![1, 0], vec![1, 1]],
            e2: vec![vec![0, 1], vec![1, 0]],
            a1: vec![0, 1],
            a2: vec![vec![1], vec![0]],
        };
        let dims = Dims::new(2, 2, 1).unwrap();
        sup.check(dims).unwrap();
        let e = sup.edges();
        assert_eq!(e.g[0], vec![0, 1, 0, 0]);
        assert_eq!(e.g[3], vec![1, 0, 1, 0]);
        assert_eq!(e.f, vec![vec![0], vec![0], vec![1], vec![0]]);
        assert_eq!(e.g_edges(), 6);
    }

    #[test]
    fn rejects_non_binary() {
        let mut sup = NetworkSupport::full(Dims::new(2, 1, 0).unwrap());
        sup.e1[0][1] = 2;
        assert!(sup.check(Dims::new(2, 1, 0).unwrap()).is_err());
    }
}
