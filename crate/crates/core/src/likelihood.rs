//! Negative log-marginal likelihood, its gradient and posterior means.
//!
//! The covariance of the stacked measurements is block diagonal across
//! output channels, so every quantity is computed channel by channel from
//!
//! `V_c = sigma2_c * I + sum_b s[c, b] * Z_b P_b Z_b^T`
//!
//! where `b` runs over the `p` output blocks and `m` input blocks of the
//! regressor and `P_b` is `P` or `R`. Writing `Z~ = Z L` with `L L^T = P`,
//! the same model can be evaluated either in data space (`N x N`) or in
//! coefficient space (`(p + m) T x (p + m) T`) through the matrix inversion
//! lemma. The smaller of the two is chosen automatically.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rayon::prelude::*;

use crate::dims::Dims;
use crate::error::{KronError, Result};
use crate::kernel::{BaseKernelMatrix, BlockScaleMatrix};
use crate::regress::RegressorSet;

const JITTER_RETRIES: usize = 3;
const JITTER_BASE: f64 = 1e-10;
/// Kernel eigenvalues below this fraction of the largest are dropped from
/// the square root used to build the likelihood.
pub const FACTOR_RANK_TOL: f64 = 1e-12;

/// Per-channel noise variances.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseModel {
    sigma2: Vec<f64>,
}

impl NoiseModel {
    pub fn new(sigma2: Vec<f64>) -> Result<Self> {
        if sigma2.is_empty() {
            return Err(KronError::InvalidArgument(
                "noise model needs at least one channel".into(),
            ));
        }
        if let Some(v) = sigma2.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
            return Err(KronError::InvalidArgument(format!(
                "noise variances must be positive and finite, got {v}"
            )));
        }
        Ok(NoiseModel { sigma2 })
    }

    pub fn constant(channels: usize, sigma2: f64) -> Result<Self> {
        NoiseModel::new(vec![sigma2; channels])
    }

    pub fn sigma2(&self) -> &[f64] {
        &self.sigma2
    }

    pub fn channels(&self) -> usize {
        self.sigma2.len()
    }
}

/// Posterior-mean impulse responses: `g[t]` is the `p x p` coefficient
/// matrix of lag `t + 1`, `f[t]` the `p x m` input coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct ImpulseEstimate {
    pub dims: Dims,
    pub g: Vec<DMatrix<f64>>,
    pub f: Vec<DMatrix<f64>>,
}

impl ImpulseEstimate {
    pub fn zeros(dims: Dims, lags: usize) -> Self {
        let p = dims.outputs();
        ImpulseEstimate {
            dims,
            g: vec![DMatrix::zeros(p, p); lags],
            f: vec![DMatrix::zeros(p, dims.m); lags],
        }
    }

    /// Truncation length `T`.
    pub fn lags(&self) -> usize {
        self.g.len()
    }

    /// Impulse response from output `col` to output `row`.
    pub fn g_block(&self, row: usize, col: usize) -> Vec<f64> {
        self.g.iter().map(|gt| gt[(row, col)]).collect()
    }

    /// Impulse response from input `i` to output `row`.
    pub fn f_block(&self, row: usize, i: usize) -> Vec<f64> {
        self.f.iter().map(|ft| ft[(row, i)]).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.g
            .iter()
            .chain(&self.f)
            .all(|mat| mat.iter().all(|v| v.is_finite()))
    }

    /// Rescales coefficients for data that was divided by `out_scale` per
    /// output and `in_scale` per input before fitting.
    pub fn denormalize(&mut self, out_scale: &[f64], in_scale: &[f64]) {
        for gt in &mut self.g {
            for r in 0..gt.nrows() {
                for c in 0..gt.ncols() {
                    gt[(r, c)] *= out_scale[r] / out_scale[c];
                }
            }
        }
        for ft in &mut self.f {
            for r in 0..ft.nrows() {
                for c in 0..ft.ncols() {
                    ft[(r, c)] *= out_scale[r] / in_scale[c];
                }
            }
        }
    }
}

/// Data-space Gram matrix of one channel with its Cholesky factor.
#[derive(Debug, Clone)]
pub struct ChannelGram {
    pub channel: usize,
    pub v: DMatrix<f64>,
    pub cholesky: DMatrix<f64>,
}

/// Which linear-algebra formulation to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolverPath {
    /// Coefficient space when `(p + m) T < N`, data space otherwise.
    Auto,
    Coefficient,
    Data,
}

/// Shape-independent products of the regressors, reusable across kernels.
#[derive(Debug, Clone)]
pub struct RegressionCache<'a> {
    regs: &'a RegressorSet,
    /// Full regressor `[A B]` per group.
    z: Vec<DMatrix<f64>>,
    /// `Z^T Z` per group (coefficient space only).
    zz: Vec<DMatrix<f64>>,
    /// `Z^T y` per channel (coefficient space only).
    zy: Vec<DVector<f64>>,
    yy: Vec<f64>,
    path: SolverPath,
}

impl<'a> RegressionCache<'a> {
    pub fn new(regs: &'a RegressorSet, path: SolverPath) -> Self {
        let path = match path {
            SolverPath::Auto if regs.coefficients() < regs.rows() => SolverPath::Coefficient,
            SolverPath::Auto => SolverPath::Data,
            other => other,
        };
        let z: Vec<DMatrix<f64>> = regs
            .groups()
            .iter()
            .map(|g| {
                let mut z = DMatrix::zeros(g.a.nrows(), g.a.ncols() + g.b.ncols());
                z.columns_mut(0, g.a.ncols()).copy_from(&g.a);
                z.columns_mut(g.a.ncols(), g.b.ncols()).copy_from(&g.b);
                z
            })
            .collect();
        let p = regs.dims().outputs();
        let yy = (0..p).map(|c| regs.y_plus(c).norm_squared()).collect();
        let (zz, zy) = if path == SolverPath::Coefficient {
            let zz = z.iter().map(|z| z.tr_mul(z)).collect();
            let zy = (0..p)
                .map(|c| z[regs.group_of(c)].tr_mul(regs.y_plus(c)))
                .collect();
            (zz, zy)
        } else {
            (Vec::new(), Vec::new())
        };
        RegressionCache {
            regs,
            z,
            zz,
            zy,
            yy,
            path,
        }
    }

    pub fn path(&self) -> SolverPath {
        self.path
    }

    pub fn regressors(&self) -> &RegressorSet {
        self.regs
    }
}

enum GroupData {
    /// `L^T Z^T Z L`.
    Coefficient { gram: DMatrix<f64> },
    /// `Z L`.
    Data { zt: DMatrix<f64> },
}

struct ChannelOut {
    nll: f64,
    grad: Option<Vec<f64>>,
    theta: Option<DVector<f64>>,
}

/// Likelihood evaluator for fixed base kernels, regressors and noise.
pub struct LikelihoodEngine<'c, 'a> {
    cache: &'c RegressionCache<'a>,
    noise: NoiseModel,
    p_factor: DMatrix<f64>,
    r_factor: DMatrix<f64>,
    /// Start of each block in the reduced coefficient vector.
    offsets: Vec<usize>,
    groups: Vec<GroupData>,
    /// `L^T Z^T y` per channel (coefficient space only).
    c: Vec<DVector<f64>>,
    /// Per group, per block `tr(L_b^T Z_b^T Z_b L_b)` (coefficient space).
    block_traces: Vec<Vec<f64>>,
}

impl<'c, 'a> LikelihoodEngine<'c, 'a> {
    pub fn new(
        cache: &'c RegressionCache<'a>,
        p_kernel: &BaseKernelMatrix,
        r_kernel: &BaseKernelMatrix,
        noise: NoiseModel,
    ) -> Result<Self> {
        let regs = cache.regs;
        let dims = regs.dims();
        let lags = regs.lags();
        if p_kernel.size() != lags || (dims.m > 0 && r_kernel.size() != lags) {
            return Err(KronError::Dimension(format!(
                "kernel sizes ({}, {}) do not match truncation {lags}",
                p_kernel.size(),
                r_kernel.size()
            )));
        }
        if noise.channels() != dims.outputs() {
            return Err(KronError::Dimension(format!(
                "noise model has {} channels, expected {}",
                noise.channels(),
                dims.outputs()
            )));
        }
        let p_factor = p_kernel.reduced_factor(FACTOR_RANK_TOL);
        let r_factor = if dims.m > 0 {
            r_kernel.reduced_factor(FACTOR_RANK_TOL)
        } else {
            DMatrix::zeros(lags, 0)
        };
        let blocks = dims.outputs() + dims.m;
        let factor_of = |b: usize| if b < dims.outputs() { &p_factor } else { &r_factor };
        let mut offsets = Vec::with_capacity(blocks + 1);
        offsets.push(0);
        for b in 0..blocks {
            offsets.push(offsets[b] + factor_of(b).ncols());
        }
        let total = offsets[blocks];
        let width = |b: usize| offsets[b + 1] - offsets[b];

        let mut groups = Vec::with_capacity(cache.z.len());
        let mut block_traces = Vec::new();
        match cache.path {
            SolverPath::Coefficient => {
                for zz in &cache.zz {
                    // right then left multiplication by the block-diagonal factor
                    let mut right = DMatrix::zeros(zz.nrows(), total);
                    for b in 0..blocks {
                        let prod = zz.columns(b * lags, lags) * factor_of(b);
                        right.columns_mut(offsets[b], width(b)).copy_from(&prod);
                    }
                    let mut gram = DMatrix::zeros(total, total);
                    for b in 0..blocks {
                        let prod = factor_of(b).tr_mul(&right.rows(b * lags, lags));
                        gram.rows_mut(offsets[b], width(b)).copy_from(&prod);
                    }
                    gram = (&gram + gram.transpose()) * 0.5;
                    block_traces.push(
                        (0..blocks)
                            .map(|b| (offsets[b]..offsets[b + 1]).map(|i| gram[(i, i)]).sum())
                            .collect(),
                    );
                    groups.push(GroupData::Coefficient { gram });
                }
            }
            _ => {
                for z in &cache.z {
                    let mut zt = DMatrix::zeros(z.nrows(), total);
                    for b in 0..blocks {
                        let prod = z.columns(b * lags, lags) * factor_of(b);
                        zt.columns_mut(offsets[b], width(b)).copy_from(&prod);
                    }
                    groups.push(GroupData::Data { zt });
                }
            }
        }
        let c = cache
            .zy
            .iter()
            .map(|zy| {
                let mut out = DVector::zeros(total);
                for b in 0..blocks {
                    let seg = factor_of(b).tr_mul(&zy.rows(b * lags, lags));
                    out.rows_mut(offsets[b], width(b)).copy_from(&seg);
                }
                out
            })
            .collect();
        Ok(LikelihoodEngine {
            cache,
            noise,
            p_factor,
            r_factor,
            offsets,
            groups,
            c,
            block_traces,
        })
    }

    pub fn dims(&self) -> Dims {
        self.cache.regs.dims()
    }

    pub fn lags(&self) -> usize {
        self.cache.regs.lags()
    }

    pub fn noise(&self) -> &NoiseModel {
        &self.noise
    }

    pub fn path(&self) -> SolverPath {
        self.cache.path
    }

    /// Negative log-marginal likelihood.
    pub fn nll(&self, scales: &BlockScaleMatrix) -> Result<f64> {
        Ok(self.channel_terms(scales)?.iter().sum())
    }

    /// Per-channel NLL terms in channel order.
    pub fn channel_terms(&self, scales: &BlockScaleMatrix) -> Result<Vec<f64>> {
        let outs = self.run(scales, false, false)?;
        Ok(outs.iter().map(|o| o.nll).collect())
    }

    /// NLL with its gradient with respect to every block scale.
    pub fn nll_block_grad(&self, scales: &BlockScaleMatrix) -> Result<(f64, BlockScaleMatrix)> {
        let outs = self.run(scales, true, false)?;
        let dims = self.dims();
        let p = dims.outputs();
        let mut grad = BlockScaleMatrix::zeros(dims);
        let mut total = 0.0;
        for (c, out) in outs.iter().enumerate() {
            total += out.nll;
            let gb = out.grad.as_ref().expect("gradient requested");
            for b in 0..p {
                grad.g[(c, b)] = gb[b];
            }
            for i in 0..dims.m {
                grad.f[(c, i)] = gb[p + i];
            }
        }
        Ok((total, grad))
    }

    pub fn posterior_mean(&self, scales: &BlockScaleMatrix) -> Result<ImpulseEstimate> {
        let outs = self.run(scales, false, true)?;
        let dims = self.dims();
        let p = dims.outputs();
        let lags = self.lags();
        let mut est = ImpulseEstimate::zeros(dims, lags);
        for (c, out) in outs.iter().enumerate() {
            let theta = out.theta.as_ref().expect("posterior requested");
            for t in 0..lags {
                for b in 0..p {
                    est.g[t][(c, b)] = theta[b * lags + t];
                }
                for i in 0..dims.m {
                    est.f[t][(c, i)] = theta[(p + i) * lags + t];
                }
            }
        }
        Ok(est)
    }

    /// Data-space Gram matrix `V_c` and its Cholesky factor.
    pub fn channel_gram(&self, scales: &BlockScaleMatrix, channel: usize) -> Result<ChannelGram> {
        scales.check_dims(self.dims())?;
        let zt = self.data_regressor(channel);
        let s = self.channel_scales(scales, channel);
        let v = self.data_covariance(&zt, &s, self.noise.sigma2[channel]);
        let chol = cholesky_with_jitter(v.clone(), channel)?;
        Ok(ChannelGram {
            channel,
            v,
            cholesky: chol.l(),
        })
    }

    fn run(&self, scales: &BlockScaleMatrix, grad: bool, post: bool) -> Result<Vec<ChannelOut>> {
        scales.check_dims(self.dims())?;
        let p = self.dims().outputs();
        let eval = |c: usize| -> Result<ChannelOut> {
            let s = self.channel_scales(scales, c);
            match &self.groups[self.cache.regs.group_of(c)] {
                GroupData::Coefficient { gram } => self.eval_coefficient(c, gram, &s, grad, post),
                GroupData::Data { zt } => self.eval_data(c, zt, &s, grad, post),
            }
        };
        let outs: Vec<Result<ChannelOut>> = if p > 1 && rayon::current_num_threads() > 1 {
            (0..p).into_par_iter().map(eval).collect()
        } else {
            (0..p).map(eval).collect()
        };
        outs.into_iter().collect()
    }

    fn channel_scales(&self, scales: &BlockScaleMatrix, c: usize) -> Vec<f64> {
        let dims = self.dims();
        (0..dims.outputs())
            .map(|b| scales.g[(c, b)])
            .chain((0..dims.m).map(|i| scales.f[(c, i)]))
            .collect()
    }

    fn factor(&self, block: usize) -> &DMatrix<f64> {
        if block < self.dims().outputs() {
            &self.p_factor
        } else {
            &self.r_factor
        }
    }

    /// Range of block `b` in the reduced coefficient vector.
    fn span(&self, b: usize) -> (usize, usize) {
        (self.offsets[b], self.offsets[b + 1] - self.offsets[b])
    }

    fn data_regressor(&self, channel: usize) -> DMatrix<f64> {
        let g = self.cache.regs.group_of(channel);
        match &self.groups[g] {
            GroupData::Data { zt } => zt.clone(),
            GroupData::Coefficient { .. } => {
                let z = &self.cache.z[g];
                let lags = self.lags();
                let blocks = self.offsets.len() - 1;
                let mut zt = DMatrix::zeros(z.nrows(), self.offsets[blocks]);
                for b in 0..blocks {
                    let prod = z.columns(b * lags, lags) * self.factor(b);
                    let (o, w) = self.span(b);
                    zt.columns_mut(o, w).copy_from(&prod);
                }
                zt
            }
        }
    }

    fn data_covariance(&self, zt: &DMatrix<f64>, s: &[f64], sigma2: f64) -> DMatrix<f64> {
        let mut scaled = zt.clone();
        for (b, &sb) in s.iter().enumerate() {
            let (o, w) = self.span(b);
            scaled.columns_mut(o, w).scale_mut(sb);
        }
        let mut v = scaled * zt.transpose();
        for i in 0..v.nrows() {
            v[(i, i)] += sigma2;
        }
        v
    }

    fn eval_data(
        &self,
        c: usize,
        zt: &DMatrix<f64>,
        s: &[f64],
        grad: bool,
        post: bool,
    ) -> Result<ChannelOut> {
        let sigma2 = self.noise.sigma2[c];
        let y = self.cache.regs.y_plus(c);
        let v = self.data_covariance(zt, s, sigma2);
        let chol = cholesky_with_jitter(v, c)?;
        let l = chol.l_dirty();
        let logdet = 2.0 * l.diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let alpha = chol.solve(y);
        let nll = 0.5 * (logdet + y.dot(&alpha));
        let need_zta = grad || post;
        let zta = if need_zta { Some(zt.tr_mul(&alpha)) } else { None };
        let grad = if grad {
            let w = l
                .solve_lower_triangular(zt)
                .ok_or_else(|| KronError::Numerical(format!("singular factor in channel {c}")))?;
            let zta = zta.as_ref().unwrap();
            Some(
                (0..s.len())
                    .map(|b| {
                        let (o, width) = self.span(b);
                        let tr = w.columns(o, width).norm_squared();
                        let q = zta.rows(o, width).norm_squared();
                        0.5 * (tr - q)
                    })
                    .collect(),
            )
        } else {
            None
        };
        let theta = if post {
            Some(self.theta_from(zta.as_ref().unwrap(), s))
        } else {
            None
        };
        Ok(ChannelOut { nll, grad, theta })
    }

    fn eval_coefficient(
        &self,
        c: usize,
        gram: &DMatrix<f64>,
        s: &[f64],
        grad: bool,
        post: bool,
    ) -> Result<ChannelOut> {
        let sigma2 = self.noise.sigma2[c];
        let rows = self.cache.regs.rows() as f64;
        let dim = gram.nrows();
        let cvec = &self.c[c];
        let yy = self.cache.yy[c];

        // coefficients of blocks with a positive scale
        let mut active = Vec::new();
        let mut u = Vec::new();
        for (b, &sb) in s.iter().enumerate() {
            if sb > 0.0 {
                active.extend(self.offsets[b]..self.offsets[b + 1]);
                u.resize(active.len(), sb.sqrt());
            }
        }
        let na = active.len();

        let mut mmat = DMatrix::from_fn(na, na, |i, j| {
            u[i] * u[j] * gram[(active[i], active[j])] / sigma2
        });
        for i in 0..na {
            mmat[(i, i)] += 1.0;
        }
        let w = DVector::from_fn(na, |i, _| u[i] * cvec[active[i]]);
        let (logdet_m, z, chol) = if na > 0 {
            let chol = cholesky_with_jitter(mmat, c)?;
            let l = chol.l_dirty();
            let logdet = 2.0 * l.diagonal().iter().map(|d| d.ln()).sum::<f64>();
            let z = l
                .solve_lower_triangular(&w)
                .ok_or_else(|| KronError::Numerical(format!("singular factor in channel {c}")))?;
            (logdet, z, Some(chol))
        } else {
            (0.0, DVector::zeros(0), None)
        };
        let logdet = rows * sigma2.ln() + logdet_m;
        let quad = (yy - z.norm_squared() / sigma2) / sigma2;
        let nll = 0.5 * (logdet + quad);
        if !grad && !post {
            return Ok(ChannelOut {
                nll,
                grad: None,
                theta: None,
            });
        }

        // X = C^{-1} diag(u) G[active, :]
        let x = match &chol {
            Some(chol) => {
                let rhs = DMatrix::from_fn(na, dim, |i, j| u[i] * gram[(active[i], j)]);
                Some(chol.l_dirty().solve_lower_triangular(&rhs).ok_or_else(|| {
                    KronError::Numerical(format!("singular factor in channel {c}"))
                })?)
            }
            None => None,
        };
        // Z~^T alpha
        let mut zta = cvec / sigma2;
        if let Some(x) = &x {
            zta -= x.tr_mul(&z) / (sigma2 * sigma2);
        }

        let traces = &self.block_traces[self.cache.regs.group_of(c)];
        let grad = if grad {
            Some(
                (0..s.len())
                    .map(|b| {
                        let (o, width) = self.span(b);
                        let explained = match &x {
                            Some(x) => x.columns(o, width).norm_squared(),
                            None => 0.0,
                        };
                        let tr = (traces[b] - explained / sigma2) / sigma2;
                        let q = zta.rows(o, width).norm_squared();
                        0.5 * (tr - q)
                    })
                    .collect(),
            )
        } else {
            None
        };
        let theta = if post {
            Some(self.theta_from(&zta, s))
        } else {
            None
        };
        Ok(ChannelOut { nll, grad, theta })
    }

    /// `theta_b = s_b L_b (Z~^T alpha)_b`, exactly zero for zero scales.
    fn theta_from(&self, zta: &DVector<f64>, s: &[f64]) -> DVector<f64> {
        let lags = self.lags();
        let mut theta = DVector::zeros(s.len() * lags);
        for (b, &sb) in s.iter().enumerate() {
            if sb != 0.0 {
                let (o, w) = self.span(b);
                let seg = self.factor(b) * zta.rows(o, w) * sb;
                theta.rows_mut(b * lags, lags).copy_from(&seg);
            }
        }
        theta
    }
}

/// Cholesky factorization, retried with growing diagonal jitter.
pub(crate) fn cholesky_with_jitter(
    mut mat: DMatrix<f64>,
    channel: usize,
) -> Result<Cholesky<f64, Dyn>> {
    let n = mat.nrows();
    if let Some(ch) = mat.clone().cholesky() {
        return Ok(ch);
    }
    let mean_diag = mat.trace() / n.max(1) as f64;
    let mut jitter = JITTER_BASE * mean_diag.abs().max(f64::MIN_POSITIVE);
    let mut added = 0.0;
    for _ in 0..JITTER_RETRIES {
        for i in 0..n {
            mat[(i, i)] += jitter - added;
        }
        added = jitter;
        log::debug!("channel {channel}: retrying Cholesky with jitter {jitter:e}");
        if let Some(ch) = mat.clone().cholesky() {
            return Ok(ch);
        }
        jitter *= 10.0;
    }
    Err(KronError::Cholesky {
        channel,
        attempts: JITTER_RETRIES + 1,
    })
}

/// One-shot NLL for the given block scales.
pub fn nll(
    scales: &BlockScaleMatrix,
    p_kernel: &BaseKernelMatrix,
    r_kernel: &BaseKernelMatrix,
    regs: &RegressorSet,
    noise: &NoiseModel,
) -> Result<f64> {
    let cache = RegressionCache::new(regs, SolverPath::Auto);
    LikelihoodEngine::new(&cache, p_kernel, r_kernel, noise.clone())?.nll(scales)
}

/// One-shot NLL gradient with respect to the Kronecker scales
/// `[lambda, gamma, pi, omega]`.
pub fn nll_grad(
    xi: &crate::kernel::KroneckerScales,
    p_kernel: &BaseKernelMatrix,
    r_kernel: &BaseKernelMatrix,
    regs: &RegressorSet,
    noise: &NoiseModel,
) -> Result<Vec<f64>> {
    let dims = regs.dims();
    let params = xi.to_params();
    let variant = crate::kernel::Variant::K;
    let scales = variant.block_scales(&params, dims)?;
    let cache = RegressionCache::new(regs, SolverPath::Auto);
    let engine = LikelihoodEngine::new(&cache, p_kernel, r_kernel, noise.clone())?;
    let (_, gb) = engine.nll_block_grad(&scales)?;
    Ok(variant.pullback(&params, dims, &gb))
}

/// One-shot posterior mean for the given block scales.
pub fn posterior_mean(
    scales: &BlockScaleMatrix,
    p_kernel: &BaseKernelMatrix,
    r_kernel: &BaseKernelMatrix,
    regs: &RegressorSet,
    noise: &NoiseModel,
) -> Result<ImpulseEstimate> {
    let cache = RegressionCache::new(regs, SolverPath::Auto);
    LikelihoodEngine::new(&cache, p_kernel, r_kernel, noise.clone())?.posterior_mean(scales)
}
