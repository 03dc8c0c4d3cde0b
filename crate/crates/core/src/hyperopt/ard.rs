//! Zero-lock certificates for the Kronecker scales under a whitened design.
//!
//! After whitening, `Z~ = Z L = sqrt(N) Q` with `Q^T Q = I`, and the least
//! squares block estimate satisfies `||g_LS||^2_{P^-1} = ||Q_b^T y||^2 / N`.
//! A scale can be locked at zero when every block it controls stays below
//! `(r / N) * sigma2`, with `r` the block dimension.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::dims::Dims;
use crate::error::{KronError, Result};
use crate::kernel::BaseKernelMatrix;
use crate::regress::RegressorSet;

/// Relative eigenvalue cutoff defining the numerical rank of the kernels.
pub const RANK_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArdReport {
    pub dims: Dims,
    pub samples: usize,
    pub sigma2: f64,
    pub rank_p: usize,
    pub rank_r: usize,
    pub threshold_g: f64,
    pub threshold_f: f64,
    /// `||g_LS[row, col]||^2_{P^-1}` per block.
    pub g_statistic: Vec<Vec<f64>>,
    pub f_statistic: Vec<Vec<f64>>,
    pub lambda: Vec<bool>,
    pub gamma: Vec<bool>,
    pub pi: Vec<bool>,
    pub omega: Vec<bool>,
}

impl ArdReport {
    pub fn all_lockable(&self) -> bool {
        self.lambda
            .iter()
            .chain(&self.gamma)
            .chain(&self.pi)
            .chain(&self.omega)
            .all(|&b| b)
    }

    pub fn lockable_count(&self) -> (usize, usize) {
        let all: Vec<bool> = self
            .lambda
            .iter()
            .chain(&self.gamma)
            .chain(&self.pi)
            .chain(&self.omega)
            .copied()
            .collect();
        (all.iter().filter(|&&b| b).count(), all.len())
    }
}

/// Evaluates the certificate for fixed kernels and a common noise variance.
pub fn ard_certificate_with(
    regs: &RegressorSet,
    p_kernel: &BaseKernelMatrix,
    r_kernel: &BaseKernelMatrix,
    sigma2: f64,
) -> Result<ArdReport> {
    let dims = regs.dims();
    let p = dims.outputs();
    let lags = regs.lags();
    let n = regs.rows();
    if !(sigma2 > 0.0) {
        return Err(KronError::InvalidArgument(format!(
            "noise variance must be positive, got {sigma2}"
        )));
    }
    let lp = p_kernel.reduced_factor(RANK_TOL);
    let lr = if dims.m > 0 {
        r_kernel.reduced_factor(RANK_TOL)
    } else {
        DMatrix::zeros(lags, 0)
    };
    let (rp, rr) = (lp.ncols(), lr.ncols());
    let cols = p * rp + dims.m * rr;
    if n < cols {
        return Err(KronError::RankDeficient(format!(
            "whitening needs N >= {cols} regressors, got N = {n}"
        )));
    }
    let offset = |b: usize| if b < p { b * rp } else { p * rp + (b - p) * rr };
    let width = |b: usize| if b < p { rp } else { rr };

    let mut qs = Vec::with_capacity(regs.groups().len());
    for group in regs.groups() {
        let mut zt = DMatrix::zeros(n, cols);
        for b in 0..p {
            let prod = group.a.columns(b * lags, lags) * &lp;
            zt.columns_mut(offset(b), rp).copy_from(&prod);
        }
        for i in 0..dims.m {
            let prod = group.b.columns(i * lags, lags) * &lr;
            zt.columns_mut(offset(p + i), rr).copy_from(&prod);
        }
        let qr = zt.qr();
        let r = qr.r();
        let rmax = r.diagonal().iter().map(|v| v.abs()).fold(0.0, f64::max);
        if r.diagonal().iter().any(|v| v.abs() <= 1e-10 * rmax) || rmax == 0.0 {
            return Err(KronError::RankDeficient(
                "whitened regressor matrix is rank deficient".into(),
            ));
        }
        qs.push(qr.q());
    }

    let nf = n as f64;
    let mut g_stat = vec![vec![0.0; p]; p];
    let mut f_stat = vec![vec![0.0; dims.m]; p];
    for c in 0..p {
        let q = &qs[regs.group_of(c)];
        let qy = q.tr_mul(regs.y_plus(c));
        for b in 0..p + dims.m {
            let v = qy.rows(offset(b), width(b)).norm_squared() / nf;
            if b < p {
                g_stat[c][b] = v;
            } else {
                f_stat[c][b - p] = v;
            }
        }
    }
    let threshold_g = rp as f64 / nf * sigma2;
    let threshold_f = rr as f64 / nf * sigma2;
    let g_ok = |row: usize, col: usize| g_stat[row][col] <= threshold_g;
    let f_ok = |row: usize, i: usize| f_stat[row][i] <= threshold_f;

    let mut lambda = vec![true; dims.p1 * dims.p1];
    let mut gamma = vec![true; dims.p2 * dims.p2];
    let mut pi = vec![true; if dims.m > 0 { dims.p1 } else { 0 }];
    let mut omega = vec![true; dims.p2 * dims.m];
    for h in 0..dims.p1 {
        for k in 0..dims.p2 {
            let row = dims.channel(h, k);
            for j in 0..dims.p1 {
                for l in 0..dims.p2 {
                    if !g_ok(row, dims.channel(j, l)) {
                        lambda[dims.lambda_index(h, j)] = false;
                        gamma[dims.gamma_index(k, l)] = false;
                    }
                }
            }
            for i in 0..dims.m {
                if !f_ok(row, i) {
                    pi[h] = false;
                    omega[dims.omega_index(k, i)] = false;
                }
            }
        }
    }
    Ok(ArdReport {
        dims,
        samples: n,
        sigma2,
        rank_p: rp,
        rank_r: rr,
        threshold_g,
        threshold_f,
        g_statistic: g_stat,
        f_statistic: f_stat,
        lambda,
        gamma,
        pi,
        omega,
    })
}
