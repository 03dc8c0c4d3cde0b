//! Scaled projected gradient on a box with Armijo backtracking along the
//! projection arc and Barzilai-Borwein trial steps.

use crate::error::{KronError, Result};

/// Optimizer tuning.
#[derive(Debug, Clone, Copy)]
pub struct OptimizerOptions {
    pub upper: f64,
    pub max_iters: usize,
    /// Stop when the infinity norm of the projected gradient step falls
    /// below `grad_tol * max(1, |f|)`.
    pub grad_tol: f64,
    /// Stop after three consecutive relative decreases below this value.
    pub f_tol: f64,
    /// Floor of the diagonal scaling `max(x_i, floor)`.
    pub scaling_floor: f64,
    pub armijo: f64,
    pub max_backtracks: usize,
}

impl Default for OptimizerOptions {
    fn default() -> Self {
        OptimizerOptions {
            upper: 1e4,
            max_iters: 400,
            grad_tol: 1e-6,
            f_tol: 1e-10,
            scaling_floor: 1e-3,
            armijo: 1e-4,
            max_backtracks: 40,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OptimizerOutcome {
    pub x: Vec<f64>,
    pub f: f64,
    pub grad: Vec<f64>,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
    /// Objective after every accepted iteration, starting with `f(x0)`.
    pub history: Vec<f64>,
}

fn project(x: &mut [f64], upper: f64) {
    for v in x {
        *v = v.clamp(0.0, upper);
    }
}

/// Infinity norm of `x - P(x - g)`.
pub fn projected_gradient_norm(x: &[f64], g: &[f64], upper: f64) -> f64 {
    x.iter()
        .zip(g)
        .map(|(&xi, &gi)| (xi - (xi - gi).clamp(0.0, upper)).abs())
        .fold(0.0, f64::max)
}

/// Minimizes `f` over `[0, upper]^n`. `fg` returns value and gradient,
/// `fv` only the value (used during backtracking).
pub fn minimize<FG, FV>(
    fg: FG,
    fv: FV,
    x0: &[f64],
    opts: &OptimizerOptions,
) -> Result<OptimizerOutcome>
where
    FG: Fn(&[f64]) -> Result<(f64, Vec<f64>)>,
    FV: Fn(&[f64]) -> Result<f64>,
{
    let mut x = x0.to_vec();
    project(&mut x, opts.upper);
    let (mut f, mut g) = fg(&x)?;
    let mut evaluations = 1;
    if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Err(KronError::Numerical(format!(
            "objective is not finite at the initial point ({f})"
        )));
    }
    let mut history = vec![f];
    let mut step = 1.0;
    let mut prev: Option<(Vec<f64>, Vec<f64>)> = None;
    let mut small_decreases = 0;
    let mut converged = false;
    let mut iterations = 0;

    while iterations < opts.max_iters {
        if projected_gradient_norm(&x, &g, opts.upper) <= opts.grad_tol * f.abs().max(1.0) {
            converged = true;
            break;
        }
        let scale: Vec<f64> = x.iter().map(|&v| v.max(opts.scaling_floor)).collect();
        if let Some((px, pg)) = &prev {
            // BB1 step in the scaled metric
            let mut ss = 0.0;
            let mut sy = 0.0;
            for i in 0..x.len() {
                let s = x[i] - px[i];
                let y = g[i] - pg[i];
                ss += s * s / scale[i];
                sy += s * y;
            }
            step = if sy > 0.0 { (ss / sy).clamp(1e-10, 1e10) } else { (step * 2.0).min(1e10) };
        } else {
            let gmax = g
                .iter()
                .zip(&scale)
                .map(|(gi, di)| (gi * di).abs())
                .fold(0.0, f64::max);
            step = if gmax > 0.0 { 1.0 / gmax } else { 1.0 };
            // hyperparameters live on a unit scale after normalization
            step = step.min(1.0);
        }

        let mut t = step;
        let mut accepted = None;
        for _ in 0..=opts.max_backtracks {
            let mut trial: Vec<f64> = x
                .iter()
                .zip(&g)
                .zip(&scale)
                .map(|((&xi, &gi), &di)| xi - t * di * gi)
                .collect();
            project(&mut trial, opts.upper);
            let decrease: f64 = g.iter().zip(trial.iter().zip(&x)).map(|(gi, (a, b))| gi * (a - b)).sum();
            if decrease == 0.0 && trial == x {
                break;
            }
            let ft = fv(&trial);
            evaluations += 1;
            match ft {
                Ok(ft) if ft.is_finite() && ft <= f + opts.armijo * decrease => {
                    accepted = Some(trial);
                    break;
                }
                // infeasible trial points are treated like a failed Armijo test
                Ok(_) | Err(KronError::Cholesky { .. }) => {}
                Err(e) => return Err(e),
            }
            t *= 0.5;
        }
        let Some(xn) = accepted else {
            // no descent available along the projection arc
            converged = projected_gradient_norm(&x, &g, opts.upper)
                <= 1e3 * opts.grad_tol * f.abs().max(1.0);
            break;
        };
        step = t;
        let (fn_, gn) = fg(&xn)?;
        evaluations += 1;
        iterations += 1;
        let rel = (f - fn_) / f.abs().max(1.0);
        prev = Some((std::mem::replace(&mut x, xn), std::mem::replace(&mut g, gn)));
        f = fn_;
        history.push(f);
        if rel < opts.f_tol {
            small_decreases += 1;
            if small_decreases >= 3 {
                converged = true;
                break;
            }
        } else {
            small_decreases = 0;
        }
    }
    if !converged {
        log::debug!("optimizer stopped after {iterations} iterations without converging");
    }
    Ok(OptimizerOutcome {
        x,
        f,
        grad: g,
        iterations,
        evaluations,
        converged,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quad(center: &'static [f64]) -> impl Fn(&[f64]) -> Result<(f64, Vec<f64>)> {
        move |x: &[f64]| {
            let f = x.iter().zip(center).map(|(a, c)| (a - c).powi(2)).sum();
            let g = x.iter().zip(center).map(|(a, c)| 2.0 * (a - c)).collect();
            Ok((f, g))
        }
    }

    #[test]
    fn interior_minimum_is_found() {
        let fg = quad(&[0.5, 2.0, 7.0]);
        let out = minimize(&fg, |x: &[f64]| fg(x).map(|v| v.0), &[1.0, 1.0, 1.0], &OptimizerOptions::default()).unwrap();
        assert!(out.converged);
        for (a, b) in out.x.iter().zip([0.5, 2.0, 7.0]) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
    }

    #[test]
    fn lower_face_is_hit_exactly() {
        let fg = quad(&[-1.0, 3.0]);
        let out = minimize(&fg, |x: &[f64]| fg(x).map(|v| v.0), &[1.0, 1.0], &OptimizerOptions::default()).unwrap();
        assert_eq!(out.x[0], 0.0);
        assert!(out.grad[0] >= 0.0);
        assert!((out.x[1] - 3.0).abs() < 1e-4);
    }

    #[test]
    fn upper_face_is_respected() {
        let fg = quad(&[50.0]);
        let opts = OptimizerOptions {
            upper: 10.0,
            ..OptimizerOptions::default()
        };
        let out = minimize(&fg, |x: &[f64]| fg(x).map(|v| v.0), &[1.0], &opts).unwrap();
        assert_eq!(out.x[0], 10.0);
    }

    #[test]
    fn history_never_increases() {
        // Rosenbrock restricted to the positive quadrant
        let fg = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
            let (a, b) = (x[0], x[1]);
            let f = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
            let g = vec![
                -2.0 * (1.0 - a) - 400.0 * a * (b - a * a),
                200.0 * (b - a * a),
            ];
            Ok((f, g))
        };
        let out = minimize(fg, |x: &[f64]| fg(x).map(|v| v.0), &[0.1, 2.0], &OptimizerOptions::default()).unwrap();
        assert!(out.history.windows(2).all(|w| w[1] <= w[0]));
        assert!(out.f < 1e-6);
    }

    #[test]
    fn non_finite_start_is_an_error() {
        let fg = |_: &[f64]| -> Result<(f64, Vec<f64>)> { Ok((f64::NAN, vec![0.0])) };
        assert!(minimize(fg, |_: &[f64]| Ok(0.0), &[1.0], &OptimizerOptions::default()).is_err());
    }
}
