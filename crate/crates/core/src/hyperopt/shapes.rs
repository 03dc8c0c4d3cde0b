//! Kernel shape selection on the unstructured model, where all `G` blocks
//! share one scale and all `F` blocks another.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::optimizer::OptimizerOptions;
use super::optimize_variant;
use crate::error::{KronError, Result};
use crate::kernel::{build_stable_spline, KernelShape, Variant};
use crate::likelihood::{LikelihoodEngine, NoiseModel, RegressionCache};

pub const BETA_BOUNDS: (f64, f64) = (0.05, 0.95);
pub const OMEGA_BOUNDS: (f64, f64) = (0.05, 3.1);

/// Selected base-kernel shapes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShapeEstimate {
    pub p: KernelShape,
    pub r: KernelShape,
    /// False when there is no input and `r` is the unused default.
    pub r_used: bool,
    /// NLL of the unstructured model at the selected shapes.
    pub nll: f64,
}

/// Grid and refinement settings.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeSearch {
    pub betas: Vec<f64>,
    pub omegas: Vec<f64>,
    /// Pattern-search halvings after the grid.
    pub refine_rounds: usize,
    pub inner_iters: usize,
}

impl Default for ShapeSearch {
    fn default() -> Self {
        let omegas = log_grid(0.1, 3.0, 6);
        ShapeSearch {
            betas: (1..=9).map(|i| i as f64 / 10.0).collect(),
            omegas,
            refine_rounds: 2,
            inner_iters: 60,
        }
    }
}

impl ShapeSearch {
    /// Small grid for tests and quick runs.
    pub fn coarse() -> Self {
        ShapeSearch {
            betas: vec![0.3, 0.5, 0.7, 0.9],
            omegas: log_grid(0.1, 3.0, 3),
            refine_rounds: 1,
            inner_iters: 40,
        }
    }
}

fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    (0..n)
        .map(|i| (lo.ln() + (hi.ln() - lo.ln()) * i as f64 / (n - 1) as f64).exp())
        .collect()
}

/// NLL of the unstructured model for fixed shapes, minimized over the two
/// shared scales (always from the same starting point).
fn profile_nll(
    cache: &RegressionCache<'_>,
    noise: &NoiseModel,
    p: KernelShape,
    r: KernelShape,
    opts: &OptimizerOptions,
) -> Result<f64> {
    let lags = cache.regressors().lags();
    let pk = build_stable_spline(p, lags)?;
    let rk = build_stable_spline(r, lags)?;
    let engine = LikelihoodEngine::new(cache, &pk, &rk, noise.clone())?;
    let dims = cache.regressors().dims();
    let x0 = vec![1.0; Variant::SS.param_count(dims)];
    Ok(optimize_variant(&engine, Variant::SS, &x0, opts)?.f)
}

/// First index of the smallest finite value.
fn argmin(values: &[Result<f64>]) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in values.iter().enumerate() {
        if let Ok(v) = v {
            if v.is_finite() && best.is_none_or(|(_, b)| *v < b) {
                best = Some((i, *v));
            }
        }
    }
    best
}

fn evaluate(
    cache: &RegressionCache<'_>,
    noise: &NoiseModel,
    points: &[(KernelShape, KernelShape)],
    opts: &OptimizerOptions,
) -> Vec<Result<f64>> {
    points
        .par_iter()
        .map(|&(p, r)| profile_nll(cache, noise, p, r, opts))
        .collect()
}

fn clamp_shape(beta: f64, omega: f64) -> KernelShape {
    KernelShape::new(
        beta.clamp(BETA_BOUNDS.0, BETA_BOUNDS.1),
        omega.clamp(OMEGA_BOUNDS.0, OMEGA_BOUNDS.1),
    )
    .expect("bounds lie inside the valid shape domain")
}

/// Grid search with `R` tied to `P`, a separate grid for `R` when there is
/// an input, then pattern-search refinement of all four shape parameters.
pub fn estimate_shapes(
    cache: &RegressionCache<'_>,
    noise: &NoiseModel,
    search: &ShapeSearch,
) -> Result<ShapeEstimate> {
    let dims = cache.regressors().dims();
    let has_input = dims.m > 0;
    let opts = OptimizerOptions {
        max_iters: search.inner_iters,
        grad_tol: 1e-5,
        f_tol: 1e-8,
        ..OptimizerOptions::default()
    };

    let grid: Vec<KernelShape> = search
        .betas
        .iter()
        .flat_map(|&b| search.omegas.iter().map(move |&w| clamp_shape(b, w)))
        .collect();
    if grid.is_empty() {
        return Err(KronError::Config("shape grid is empty".into()));
    }
    let tied: Vec<(KernelShape, KernelShape)> = grid
        .iter()
        .map(|&s| (s, if has_input { s } else { KernelShape::default() }))
        .collect();
    let values = evaluate(cache, noise, &tied, &opts);
    let (idx, mut best_f) = argmin(&values).ok_or_else(|| {
        KronError::Numerical("every kernel shape on the grid was infeasible".into())
    })?;
    let (mut p, mut r) = tied[idx];

    if has_input {
        let r_grid: Vec<(KernelShape, KernelShape)> = grid.iter().map(|&s| (p, s)).collect();
        let values = evaluate(cache, noise, &r_grid, &opts);
        if let Some((i, f)) = argmin(&values) {
            if f < best_f {
                best_f = f;
                r = r_grid[i].1;
            }
        }
    }

    // pattern search, steps starting at half the grid spacing
    let mut db = grid_step(&search.betas) / 2.0;
    let mut dw = grid_step_log(&search.omegas) / 2.0;
    for _ in 0..search.refine_rounds {
        let mut candidates = Vec::new();
        for (sb, sw) in [(1.0, 0.0), (-1.0, 0.0), (0.0, 1.0), (0.0, -1.0)] {
            let np = clamp_shape(p.beta() + sb * db, p.omega0() * (sw * dw).exp());
            candidates.push((np, if has_input { r } else { KernelShape::default() }));
            if has_input {
                let nr = clamp_shape(r.beta() + sb * db, r.omega0() * (sw * dw).exp());
                candidates.push((p, nr));
            }
        }
        candidates.retain(|c| *c != (p, r));
        let values = evaluate(cache, noise, &candidates, &opts);
        if let Some((i, f)) = argmin(&values) {
            if f < best_f {
                best_f = f;
                p = candidates[i].0;
                if has_input {
                    r = candidates[i].1;
                }
            }
        }
        db /= 2.0;
        dw /= 2.0;
    }

    Ok(ShapeEstimate {
        p,
        r: if has_input { r } else { KernelShape::default() },
        r_used: has_input,
        nll: best_f,
    })
}

fn grid_step(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.1;
    }
    (values[values.len() - 1] - values[0]).abs() / (values.len() - 1) as f64
}

fn grid_step_log(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.5;
    }
    (values[values.len() - 1] / values[0]).ln().abs() / (values.len() - 1) as f64
}
