//! Noise, kernel-shape and scale estimation; the full identification
//! pipeline for every estimator variant.

pub mod ard;
pub mod noise;
pub mod optimizer;
pub mod shapes;
pub mod support;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use ard::{ard_certificate_with, ArdReport};
pub use noise::{default_arx_order, estimate_noise_arx};
pub use optimizer::{OptimizerOptions, OptimizerOutcome};
pub use shapes::{estimate_shapes, ShapeEstimate, ShapeSearch};
pub use support::{EdgeMask, NetworkSupport};

use crate::dims::Dims;
use crate::error::{KronError, Result};
use crate::kernel::{build_stable_spline, BaseKernelMatrix, KernelShape, KroneckerScales, Variant};
use crate::likelihood::{ImpulseEstimate, LikelihoodEngine, NoiseModel, RegressionCache, SolverPath};
use crate::regress::{build_regressors, Dataset, RegressionMode, RegressorSet};

/// Shape grid density.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShapeGrid {
    Full,
    Coarse,
}

impl ShapeGrid {
    pub fn search(self) -> ShapeSearch {
        match self {
            ShapeGrid::Full => ShapeSearch::default(),
            ShapeGrid::Coarse => ShapeSearch::coarse(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimatorConfig {
    pub variant: Variant,
    /// Truncation length `T`.
    pub lags: usize,
    pub kappa: f64,
    pub max_iters: usize,
    pub grad_tol: f64,
    /// Number of initial points (the first is all ones).
    pub restarts: usize,
    pub mode: RegressionMode,
    /// Scales at or below this value are zero.
    pub support_threshold: f64,
    pub seed: u64,
    /// Earliest regression rows to drop.
    pub discard: usize,
    /// Divide every channel by its RMS before fitting.
    pub normalize: bool,
    /// ARX order for noise estimation; `None` picks the default.
    pub arx_order: Option<usize>,
    pub shape_grid: ShapeGrid,
    /// Fixed kernel shapes, skipping shape estimation.
    pub p_shape: Option<KernelShape>,
    pub r_shape: Option<KernelShape>,
    /// Fixed noise variances (original units), skipping ARX estimation.
    pub noise: Option<Vec<f64>>,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig {
            variant: Variant::K,
            lags: 50,
            kappa: 1e4,
            max_iters: 400,
            grad_tol: 1e-6,
            restarts: 3,
            mode: RegressionMode::Standard,
            support_threshold: 1e-6,
            seed: 0,
            discard: 0,
            normalize: true,
            arx_order: None,
            shape_grid: ShapeGrid::Full,
            p_shape: None,
            r_shape: None,
            noise: None,
        }
    }
}

impl EstimatorConfig {
    pub fn validate(&self, dims: Dims) -> Result<()> {
        if !(self.kappa > 0.0) {
            return Err(KronError::Config(format!("kappa must be positive, got {}", self.kappa)));
        }
        if self.lags == 0 {
            return Err(KronError::Config("truncation T must be at least 1".into()));
        }
        if !(self.support_threshold >= 0.0) {
            return Err(KronError::Config("support threshold must be nonnegative".into()));
        }
        if self.restarts == 0 {
            return Err(KronError::Config("restarts must be at least 1".into()));
        }
        if !(self.grad_tol >= 0.0) {
            return Err(KronError::Config("grad_tol must be nonnegative".into()));
        }
        if let Some(noise) = &self.noise {
            if noise.len() != dims.outputs() {
                return Err(KronError::Config(format!(
                    "noise override has {} entries, expected {}",
                    noise.len(),
                    dims.outputs()
                )));
            }
        }
        self.variant.check_dims(dims)
    }
}

/// Optimizer bookkeeping for one fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub iterations: usize,
    pub evaluations: usize,
    pub restarts: usize,
    pub best_restart: usize,
    pub converged: bool,
    /// NLL of each restart (`None` when the restart failed).
    pub restart_nll: Vec<Option<f64>>,
    /// Largest `max(0, -grad_i) / ||grad||_inf` over zero coordinates.
    pub kkt_violation: f64,
    pub path: String,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub variant: Variant,
    pub dims: Dims,
    /// Posterior-mean impulse responses in original units.
    pub estimate: ImpulseEstimate,
    /// Optimized scale parameters (normalized units), thresholded at `tau`.
    pub params: Vec<f64>,
    /// The same parameters split into Kronecker factors (variant K).
    pub kronecker: Option<KroneckerScales>,
    /// Kronecker factors of the support (variants K and H).
    pub support: Option<NetworkSupport>,
    pub edges: EdgeMask,
    /// NLL of the (normalized) problem at `params`.
    pub nll: f64,
    /// Noise variances in original units.
    pub noise: NoiseModel,
    pub shapes: ShapeEstimate,
    pub output_scale: Vec<f64>,
    pub input_scale: Vec<f64>,
    pub diagnostics: FitDiagnostics,
}

/// Data-dependent preprocessing shared by all variants.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub dims: Dims,
    pub regs: RegressorSet,
    /// Noise variances of the normalized data.
    pub noise: NoiseModel,
    pub shapes: ShapeEstimate,
    pub output_scale: Vec<f64>,
    pub input_scale: Vec<f64>,
}

impl Prepared {
    /// Normalizes the data, builds regressors and estimates noise and
    /// kernel shapes.
    pub fn new(data: &Dataset, cfg: &EstimatorConfig) -> Result<Self> {
        let dims = data.dims();
        cfg.validate(dims)?;
        let (work, output_scale, input_scale) = if cfg.normalize {
            data.normalized()
        } else {
            (data.clone(), vec![1.0; dims.outputs()], vec![1.0; dims.m])
        };
        let regs = build_regressors(&work, cfg.lags, cfg.mode, cfg.discard)?;
        if regs.rows() < 2 {
            return Err(KronError::InvalidArgument("too few samples to fit".into()));
        }
        let noise = match &cfg.noise {
            Some(v) => NoiseModel::new(
                v.iter()
                    .zip(&output_scale)
                    .map(|(s, c)| s / (c * c))
                    .collect(),
            )?,
            None => {
                let order = cfg
                    .arx_order
                    .unwrap_or_else(|| default_arx_order(work.len(), dims.outputs() + dims.m));
                estimate_noise_arx(&work, order, cfg.mode)?
            }
        };
        let cache = RegressionCache::new(&regs, SolverPath::Auto);
        let shapes = match (cfg.p_shape, cfg.r_shape) {
            (Some(p), r) if r.is_some() || dims.m == 0 => {
                let pk = build_stable_spline(p, cfg.lags)?;
                let r = r.unwrap_or_default();
                let rk = build_stable_spline(r, cfg.lags)?;
                let engine = LikelihoodEngine::new(&cache, &pk, &rk, noise.clone())?;
                let x0 = vec![1.0; Variant::SS.param_count(dims)];
                let f = optimize_variant(&engine, Variant::SS, &x0, &OptimizerOptions::default())?.f;
                ShapeEstimate {
                    p,
                    r,
                    r_used: dims.m > 0,
                    nll: f,
                }
            }
            (None, None) => estimate_shapes(&cache, &noise, &cfg.shape_grid.search())?,
            _ => {
                return Err(KronError::Config(
                    "fix both kernel shapes or neither when the system has inputs".into(),
                ))
            }
        };
        Ok(Prepared {
            dims,
            regs,
            noise,
            shapes,
            output_scale,
            input_scale,
        })
    }

    pub fn kernels(&self) -> Result<(BaseKernelMatrix, BaseKernelMatrix)> {
        let lags = self.regs.lags();
        Ok((
            build_stable_spline(self.shapes.p, lags)?,
            build_stable_spline(self.shapes.r, lags)?,
        ))
    }

    /// Noise variances in original units.
    pub fn noise_original(&self) -> NoiseModel {
        NoiseModel::new(
            self.noise
                .sigma2()
                .iter()
                .zip(&self.output_scale)
                .map(|(s, c)| s * c * c)
                .collect(),
        )
        .expect("positive variances stay positive")
    }
}

/// Runs the optimizer on one variant's parameterization.
pub(crate) fn optimize_variant(
    engine: &LikelihoodEngine<'_, '_>,
    variant: Variant,
    x0: &[f64],
    opts: &OptimizerOptions,
) -> Result<OptimizerOutcome> {
    let dims = engine.dims();
    let fg = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
        let s = variant.block_scales_unchecked(x, dims);
        let (f, gb) = engine.nll_block_grad(&s)?;
        Ok((f, variant.pullback(x, dims, &gb)))
    };
    let fv = |x: &[f64]| engine.nll(&variant.block_scales_unchecked(x, dims));
    optimizer::minimize(fg, fv, x0, opts)
}

/// Initial points: all ones, then log-uniform draws from `[1e-2, 1e2]`.
pub fn initial_points(n: usize, restarts: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![vec![1.0; n]];
    for _ in 1..restarts {
        out.push(
            (0..n)
                .map(|_| 10f64.powf(rng.random_range(-2.0..2.0)))
                .collect(),
        );
    }
    out
}

/// Support factors of the thresholded parameters, with an empty Kronecker
/// factor forcing its partner empty (its scales are then unidentifiable).
fn kronecker_support(variant: Variant, params: &[f64], dims: Dims) -> Option<NetworkSupport> {
    let bin = |v: f64| u8::from(v > 0.0);
    let square = |v: &[f64], q: usize| -> Vec<Vec<u8>> {
        (0..q).map(|r| (0..q).map(|c| bin(v[r * q + c])).collect()).collect()
    };
    let mut sup = match variant {
        Variant::K => {
            let xi = KroneckerScales::from_params(params, dims);
            NetworkSupport {
                e1: square(&xi.lambda, dims.p1),
                e2: square(&xi.gamma, dims.p2),
                a1: xi.pi.iter().map(|&v| bin(v)).collect(),
                a2: (0..dims.p2)
                    .map(|k| (0..dims.m).map(|i| bin(xi.omega[dims.omega_index(k, i)])).collect())
                    .collect(),
            }
        }
        Variant::H => {
            let e = square(params, dims.p1);
            NetworkSupport {
                e1: e.clone(),
                e2: e,
                a1: Vec::new(),
                a2: vec![Vec::new(); dims.p2],
            }
        }
        Variant::S | Variant::SS => return None,
    };
    let empty = |m: &[Vec<u8>]| m.iter().flatten().all(|&v| v == 0);
    if empty(&sup.e1) || empty(&sup.e2) {
        sup.e1.iter_mut().flatten().for_each(|v| *v = 0);
        sup.e2.iter_mut().flatten().for_each(|v| *v = 0);
    }
    if dims.m > 0 && (sup.a1.iter().all(|&v| v == 0) || empty(&sup.a2)) {
        sup.a1.iter_mut().for_each(|v| *v = 0);
        sup.a2.iter_mut().flatten().for_each(|v| *v = 0);
    }
    Some(sup)
}

/// Optimizes the variant's scales on prepared data and extracts the
/// network estimate.
pub fn fit_prepared(prep: &Prepared, cfg: &EstimatorConfig) -> Result<FitResult> {
    let dims = prep.dims;
    cfg.validate(dims)?;
    if cfg.lags != prep.regs.lags() || cfg.mode != prep.regs.mode() {
        return Err(KronError::Config(
            "configuration does not match the prepared regressors".into(),
        ));
    }
    let variant = cfg.variant;
    let (pk, rk) = prep.kernels()?;
    let cache = RegressionCache::new(&prep.regs, SolverPath::Auto);
    let engine = LikelihoodEngine::new(&cache, &pk, &rk, prep.noise.clone())?;
    let n = variant.param_count(dims);
    let opts = OptimizerOptions {
        upper: cfg.kappa,
        max_iters: cfg.max_iters,
        grad_tol: cfg.grad_tol,
        ..OptimizerOptions::default()
    };
    let starts = initial_points(n, cfg.restarts, cfg.seed);
    let runs: Vec<Result<OptimizerOutcome>> = starts
        .par_iter()
        .map(|x0| optimize_variant(&engine, variant, x0, &opts))
        .collect();

    let mut best: Option<(usize, &OptimizerOutcome)> = None;
    for (i, run) in runs.iter().enumerate() {
        match run {
            Ok(out) if best.is_none_or(|(_, b)| out.f < b.f) => best = Some((i, out)),
            Ok(_) => {}
            Err(e) => log::warn!("restart {i} failed: {e}"),
        }
    }
    let Some((best_restart, outcome)) = best else {
        return Err(runs.into_iter().find_map(|r| r.err()).expect("at least one restart"));
    };

    if !outcome.converged {
        log::warn!(
            "variant {variant}: optimizer stopped after {} iterations without converging",
            outcome.iterations
        );
    }
    let mut params = outcome.x.clone();
    for v in &mut params {
        if *v <= cfg.support_threshold {
            *v = 0.0;
        }
    }
    let blocks = variant.block_scales(&params, dims)?;
    let (nll, gb) = engine.nll_block_grad(&blocks)?;
    let grad = variant.pullback(&params, dims, &gb);
    let gmax = grad.iter().map(|g| g.abs()).fold(0.0, f64::max);
    let kkt_violation = if gmax > 0.0 {
        params
            .iter()
            .zip(&grad)
            .filter(|(x, _)| **x == 0.0)
            .map(|(_, g)| (-g).max(0.0) / gmax)
            .fold(0.0, f64::max)
    } else {
        0.0
    };

    let mut estimate = engine.posterior_mean(&blocks)?;
    estimate.denormalize(&prep.output_scale, &prep.input_scale);
    let support = kronecker_support(variant, &params, dims);
    let edges = match &support {
        Some(s) => s.edges(),
        None => EdgeMask::from_block_scales(&blocks),
    };
    let kronecker = (variant == Variant::K).then(|| KroneckerScales::from_params(&params, dims));

    let diagnostics = FitDiagnostics {
        iterations: outcome.iterations,
        evaluations: runs.iter().flatten().map(|o| o.evaluations).sum(),
        restarts: cfg.restarts,
        best_restart,
        converged: outcome.converged,
        restart_nll: runs.iter().map(|r| r.as_ref().ok().map(|o| o.f)).collect(),
        kkt_violation,
        path: format!("{:?}", cache.path()).to_lowercase(),
    };
    Ok(FitResult {
        variant,
        dims,
        estimate,
        params,
        kronecker,
        support,
        edges,
        nll,
        noise: prep.noise_original(),
        shapes: prep.shapes,
        output_scale: prep.output_scale.clone(),
        input_scale: prep.input_scale.clone(),
        diagnostics,
    })
}

/// Full pipeline: noise, shapes, scales, posterior mean and support.
pub fn fit(data: &Dataset, cfg: &EstimatorConfig) -> Result<FitResult> {
    let prep = Prepared::new(data, cfg)?;
    fit_prepared(&prep, cfg)
}

/// Zero-lock certificate on the (normalized) data, using the mean of the
/// noise estimates and the configured or estimated kernel shapes.
pub fn ard_certificate(data: &Dataset, cfg: &EstimatorConfig) -> Result<ArdReport> {
    let prep = Prepared::new(data, cfg)?;
    let (pk, rk) = prep.kernels()?;
    let s = prep.noise.sigma2();
    let mean = s.iter().sum::<f64>() / s.len() as f64;
    ard_certificate_with(&prep.regs, &pk, &rk, mean)
}
