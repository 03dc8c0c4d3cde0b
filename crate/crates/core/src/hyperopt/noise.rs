//! Noise variances from a long ridge-regularized ARX fit.

use nalgebra::DMatrix;

use crate::error::{KronError, Result};
use crate::likelihood::NoiseModel;
use crate::regress::{build_regressors, Dataset, RegressionMode};

/// Variance floor for (nearly) noiseless data.
pub const NOISE_FLOOR: f64 = 1e-12;
const RIDGE: f64 = 1e-6;
const MAX_ORDER: usize = 50;

/// Default ARX order: `min(50, N / 4)`, further capped so the parameter
/// count stays below half of the regression rows.
pub fn default_arx_order(samples: usize, regressor_channels: usize) -> usize {
    let cap = (samples / 2) / regressor_channels.max(1);
    MAX_ORDER.min(samples / 4).min(cap).max(1)
}

/// Per-channel residual variance of an ARX model of the given order on all
/// outputs and inputs.
///
/// Rows whose regressors would reach before the first sample are dropped,
/// and residual sums are divided by the residual degrees of freedom
/// `rows - parameters`.
pub fn estimate_noise_arx(data: &Dataset, order: usize, mode: RegressionMode) -> Result<NoiseModel> {
    let n = data.len();
    if order == 0 {
        return Err(KronError::InvalidArgument("ARX order must be positive".into()));
    }
    if order > n / 4 {
        return Err(KronError::InvalidArgument(format!(
            "ARX order {order} exceeds N/4 = {} for N = {n}",
            n / 4
        )));
    }
    let regs = build_regressors(data, order, mode, order)?;
    let params = regs.coefficients();
    let rows = regs.rows();
    if rows <= params {
        return Err(KronError::InvalidArgument(format!(
            "ARX order {order} needs more than {params} rows, only {rows} available"
        )));
    }
    let dims = data.dims();
    let mut sigma2 = Vec::with_capacity(dims.outputs());
    let mut solved: Vec<Option<(DMatrix<f64>, nalgebra::Cholesky<f64, nalgebra::Dyn>)>> =
        vec![None; regs.groups().len()];
    for c in 0..dims.outputs() {
        let g = regs.group_of(c);
        if solved[g].is_none() {
            let grp = &regs.groups()[g];
            let mut z = DMatrix::zeros(rows, params);
            z.columns_mut(0, grp.a.ncols()).copy_from(&grp.a);
            z.columns_mut(grp.a.ncols(), grp.b.ncols()).copy_from(&grp.b);
            let mut gram = z.tr_mul(&z);
            let ridge = RIDGE * gram.trace() / params as f64;
            for i in 0..params {
                gram[(i, i)] += ridge.max(f64::MIN_POSITIVE);
            }
            let chol = gram.cholesky().ok_or_else(|| {
                KronError::RankDeficient(format!("ARX normal equations singular (order {order})"))
            })?;
            solved[g] = Some((z, chol));
        }
        let (z, chol) = solved[g].as_ref().unwrap();
        let y = regs.y_plus(c);
        let theta = chol.solve(&z.tr_mul(y));
        let resid = y - z * theta;
        let v = resid.norm_squared() / (rows - params) as f64;
        sigma2.push(v.max(NOISE_FLOOR));
    }
    NoiseModel::new(sigma2)
}
