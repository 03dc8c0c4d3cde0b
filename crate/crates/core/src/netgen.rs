//! Random sparse Kronecker networks and their simulation.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dims::Dims;
use crate::error::{KronError, Result};
use crate::hyperopt::NetworkSupport;
use crate::likelihood::NoiseModel;
use crate::regress::Dataset;

/// Length of the true impulse responses.
pub const T_SIM: usize = 200;
/// Closed-loop spectral radius enforced on the network recursion.
pub const STABILITY_TARGET: f64 = 0.95;
const MIN_SCALE: f64 = 0.1;
const MAX_ATTEMPTS: usize = 50;

/// True network: `g[t]`, `f[t]` are the coefficients of lag `t + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub dims: Dims,
    pub g: Vec<DMatrix<f64>>,
    pub f: Vec<DMatrix<f64>>,
    pub support: NetworkSupport,
    pub noise: NoiseModel,
    pub seed: u64,
    /// Global factor applied to `G` for closed-loop stability.
    pub scale: f64,
}

impl GroundTruth {
    pub fn lags(&self) -> usize {
        self.g.len()
    }

    /// Copy keeping only the first `lags` coefficients.
    pub fn truncated(&self, lags: usize) -> GroundTruth {
        let keep = lags.min(self.lags());
        GroundTruth {
            g: self.g[..keep].to_vec(),
            f: self.f[..keep].to_vec(),
            ..self.clone()
        }
    }

    /// Spectral radius of the block companion matrix of `I - G(z)`.
    pub fn closed_loop_radius(&self) -> f64 {
        closed_loop_radius(&self.g)
    }
}

/// Bernoulli(`density`) factors, each redrawn until it is not all zero.
/// With `hierarchical`, `E2 = E1` (needs `p1 == p2`).
pub fn random_support(dims: Dims, density: f64, hierarchical: bool, seed: u64) -> Result<NetworkSupport> {
    if !(density > 0.0 && density <= 1.0) {
        return Err(KronError::InvalidArgument(format!(
            "density must lie in (0, 1], got {density}"
        )));
    }
    if hierarchical && dims.p1 != dims.p2 {
        return Err(KronError::InvalidArgument(
            "hierarchical supports need p1 == p2".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |rows: usize, cols: usize| -> Vec<Vec<u8>> {
        if rows * cols == 0 {
            return vec![Vec::new(); rows];
        }
        loop {
            let m: Vec<Vec<u8>> = (0..rows)
                .map(|_| (0..cols).map(|_| u8::from(rng.random::<f64>() < density)).collect())
                .collect();
            if m.iter().flatten().any(|&v| v == 1) {
                return m;
            }
        }
    };
    let e1 = draw(dims.p1, dims.p1);
    let e2 = if hierarchical { e1.clone() } else { draw(dims.p2, dims.p2) };
    let (a1, a2) = if dims.m > 0 {
        let a1 = draw(dims.p1, 1).into_iter().map(|r| r[0]).collect();
        (a1, draw(dims.p2, dims.m))
    } else {
        (Vec::new(), vec![Vec::new(); dims.p2])
    };
    Ok(NetworkSupport { e1, e2, a1, a2 })
}

/// Largest eigenvalue modulus of a small dense matrix.
fn spectral_radius(a: &DMatrix<f64>) -> f64 {
    a.complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}

/// Unit-norm impulse response of a random strictly causal SISO system.
fn random_impulse(order: usize, pole_radius: f64, len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let mut a = DMatrix::from_fn(order, order, |_, _| StandardNormal.sample(&mut *rng));
        let rho = spectral_radius(&a);
        if !(rho > 1e-12) {
            continue;
        }
        let target = rng.random_range(0.5..pole_radius.max(0.5 + 1e-9));
        a *= target / rho;
        let b = DVector::from_fn(order, |_, _| StandardNormal.sample(&mut *rng));
        let c = DVector::from_fn(order, |_, _| StandardNormal.sample(&mut *rng));
        let mut state = b;
        let mut h = Vec::with_capacity(len);
        for _ in 0..len {
            h.push(c.dot(&state));
            state = &a * state;
        }
        let norm = h.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1e-12 && norm.is_finite() {
            return h.into_iter().map(|v| v / norm).collect();
        }
    }
}

/// Spectral radius of the block companion matrix of the recursion
/// `x(t) = sum_tau g[tau-1] x(t - tau)`, estimated by power iteration.
pub fn closed_loop_radius(g: &[DMatrix<f64>]) -> f64 {
    let lags = g.len();
    if lags == 0 {
        return 0.0;
    }
    let p = g[0].nrows();
    let steps = 3000;
    let window = 1000;
    let hist_len = lags;
    // ring buffer of the last `lags` states
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut hist: Vec<DVector<f64>> = (0..hist_len)
        .map(|_| DVector::from_fn(p, |_, _| StandardNormal.sample(&mut rng)))
        .collect();
    let mut head = 0; // index of x(t-1)
    let mut log_scale = 0.0;
    let mut log_at_window = 0.0;
    let state_norm = |hist: &[DVector<f64>]| hist.iter().map(|v| v.norm_squared()).sum::<f64>().sqrt();
    for step in 0..steps {
        let mut next = DVector::zeros(p);
        for (tau, gt) in g.iter().enumerate() {
            let idx = (head + hist_len - tau) % hist_len;
            next.gemv(1.0, gt, &hist[idx], 1.0);
        }
        head = (head + 1) % hist_len;
        hist[head] = next;
        if step % 20 == 19 {
            let n = state_norm(&hist);
            if n == 0.0 || !n.is_finite() {
                return if n == 0.0 { 0.0 } else { f64::INFINITY };
            }
            for v in &mut hist {
                *v /= n;
            }
            log_scale += n.ln();
        }
        if step + 1 == steps - window {
            log_at_window = log_scale + state_norm(&hist).ln();
        }
    }
    let end = log_scale + state_norm(&hist).ln();
    ((end - log_at_window) / window as f64).exp()
}

/// Largest `c` in `(0, 1]` with `closed_loop_radius(c * g) <= target`,
/// found by bisection.
pub fn stabilizing_scale(g: &[DMatrix<f64>], target: f64) -> f64 {
    let scaled = |c: f64| -> Vec<DMatrix<f64>> { g.iter().map(|m| m * c).collect() };
    if closed_loop_radius(g) <= target {
        return 1.0;
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..30 {
        let mid = 0.5 * (lo + hi);
        if closed_loop_radius(&scaled(mid)) <= target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

/// Random true network on `support`. Every nonzero entry of `E1 (x) E2`
/// and `A1 (x) A2` gets the unit-norm impulse response of an independent
/// random state-space system of the given order; `G` is then scaled for
/// closed-loop stability, redrawing when the scale drops below 0.1.
pub fn random_system(
    support: &NetworkSupport,
    order: usize,
    pole_radius: f64,
    noise: NoiseModel,
    seed: u64,
) -> Result<GroundTruth> {
    let dims = support.dims();
    support.check(dims)?;
    if order == 0 {
        return Err(KronError::InvalidArgument("system order must be at least 1".into()));
    }
    if !(pole_radius > 0.5 && pole_radius < 1.0) {
        return Err(KronError::InvalidArgument(format!(
            "pole radius must lie in (0.5, 1), got {pole_radius}"
        )));
    }
    if noise.channels() != dims.outputs() {
        return Err(KronError::Dimension("noise model does not match outputs".into()));
    }
    let edges = support.edges();
    let p = dims.outputs();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..MAX_ATTEMPTS {
        let mut g = vec![DMatrix::zeros(p, p); T_SIM];
        let mut f = vec![DMatrix::zeros(p, dims.m); T_SIM];
        for r in 0..p {
            for c in 0..p {
                if edges.g[r][c] == 1 {
                    let h = random_impulse(order, pole_radius, T_SIM, &mut rng);
                    for (t, v) in h.into_iter().enumerate() {
                        g[t][(r, c)] = v;
                    }
                }
            }
            for i in 0..dims.m {
                if edges.f[r][i] == 1 {
                    let h = random_impulse(order, pole_radius, T_SIM, &mut rng);
                    for (t, v) in h.into_iter().enumerate() {
                        f[t][(r, i)] = v;
                    }
                }
            }
        }
        let scale = stabilizing_scale(&g, STABILITY_TARGET);
        if scale < MIN_SCALE {
            log::debug!("seed {seed}: stabilizing scale {scale} too small, redrawing");
            continue;
        }
        for gt in &mut g {
            *gt *= scale;
        }
        return Ok(GroundTruth {
            dims,
            g,
            f,
            support: support.clone(),
            noise,
            seed,
            scale,
        });
    }
    Err(KronError::Generation {
        seed,
        attempts: MAX_ATTEMPTS,
    })
}

/// Input excitation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum InputSpec {
    /// White Gaussian noise through an 8th-order Butterworth lowpass with
    /// cutoff `cutoff` (fraction of the Nyquist frequency), rescaled to
    /// unit variance.
    Lowpass { cutoff: f64 },
    White,
}

impl Default for InputSpec {
    fn default() -> Self {
        InputSpec::Lowpass { cutoff: 0.4 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimOptions {
    pub input: InputSpec,
    pub burn_in: usize,
    /// Drop the innovation `e(t)` entirely.
    pub noiseless: bool,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions {
            input: InputSpec::default(),
            burn_in: 200,
            noiseless: false,
        }
    }
}

/// Second-order section `b0 + b1 z^-1 + b2 z^-2 over 1 + a1 z^-1 + a2 z^-2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 2],
}

/// Digital Butterworth lowpass of even `order` via the bilinear transform
/// with frequency prewarping; unit gain at DC.
pub fn butterworth_lowpass(order: usize, cutoff: f64) -> Result<Vec<Biquad>> {
    if order == 0 || !order.is_multiple_of(2) {
        return Err(KronError::InvalidArgument("filter order must be even and positive".into()));
    }
    if !(cutoff > 0.0 && cutoff < 1.0) {
        return Err(KronError::InvalidArgument(format!(
            "cutoff must lie in (0, 1), got {cutoff}"
        )));
    }
    let warped = 2.0 * (PI * cutoff / 2.0).tan();
    let k = 2.0;
    let sections = (0..order / 2)
        .map(|i| {
            let theta = PI * (2 * i + 1 + order) as f64 / (2 * order) as f64;
            // s^2 + a s + 1 for the normalized analog pole pair
            let damp = -2.0 * theta.cos();
            let w2 = warped * warped;
            let a0 = k * k + damp * warped * k + w2;
            let a1 = 2.0 * (w2 - k * k);
            let a2 = k * k - damp * warped * k + w2;
            Biquad {
                b: [w2 / a0, 2.0 * w2 / a0, w2 / a0],
                a: [a1 / a0, a2 / a0],
            }
        })
        .collect();
    Ok(sections)
}

/// Applies a cascade of biquads in direct form II transposed.
pub fn filter(sections: &[Biquad], x: &[f64]) -> Vec<f64> {
    let mut y = x.to_vec();
    for s in sections {
        let (mut z1, mut z2) = (0.0, 0.0);
        for v in &mut y {
            let input = *v;
            let out = s.b[0] * input + z1;
            z1 = s.b[1] * input - s.a[0] * out + z2;
            z2 = s.b[2] * input - s.a[1] * out;
            *v = out;
        }
    }
    y
}

fn input_signal(spec: InputSpec, len: usize, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    let white: Vec<f64> = (0..len).map(|_| StandardNormal.sample(&mut *rng)).collect();
    match spec {
        InputSpec::White => Ok(white),
        InputSpec::Lowpass { cutoff } => {
            let filtered = filter(&butterworth_lowpass(8, cutoff)?, &white);
            let mean = filtered.iter().sum::<f64>() / len as f64;
            let var = filtered.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / len as f64;
            let sd = var.sqrt();
            Ok(if sd > 0.0 {
                filtered.into_iter().map(|v| v / sd).collect()
            } else {
                filtered
            })
        }
    }
}

/// Simulates `n` samples after `burn_in` discarded ones, from zero initial
/// conditions.
pub fn simulate(gt: &GroundTruth, n: usize, opts: &SimOptions, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(KronError::InvalidArgument("N must be at least 1".into()));
    }
    let dims = gt.dims;
    let p = dims.outputs();
    let total = n + opts.burn_in;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut u = DMatrix::zeros(total, dims.m);
    for i in 0..dims.m {
        let col = input_signal(opts.input, total, &mut rng)?;
        u.column_mut(i).copy_from_slice(&col);
    }
    let sd: Vec<f64> = gt.noise.sigma2().iter().map(|s| s.sqrt()).collect();
    let mut y = DMatrix::zeros(total, p);
    for t in 0..total {
        let mut row = DVector::zeros(p);
        for (tau, (gt_, ft)) in gt.g.iter().zip(&gt.f).enumerate() {
            let lag = tau + 1;
            if lag > t {
                break;
            }
            row.gemv(1.0, gt_, &y.row(t - lag).transpose(), 1.0);
            if dims.m > 0 {
                row.gemv(1.0, ft, &u.row(t - lag).transpose(), 1.0);
            }
        }
        for c in 0..p {
            let e: f64 = StandardNormal.sample(&mut rng);
            if !opts.noiseless {
                row[c] += sd[c] * e;
            }
        }
        if row.iter().any(|v| !v.is_finite() || v.abs() > 1e12) {
            return Err(KronError::Diverged {
                seed,
                message: format!("output overflow at sample {t}"),
            });
        }
        y.row_mut(t).copy_from(&row.transpose());
    }
    let y = y.rows(opts.burn_in, n).into_owned();
    let u = u.rows(opts.burn_in, n).into_owned();
    Dataset::new(y, u, dims)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_noise(dims: Dims) -> NoiseModel {
        NoiseModel::constant(dims.outputs(), 1.0).unwrap()
    }

    #[test]
    fn full_density_is_all_ones() {
        let dims = Dims::new(3, 2, 2).unwrap();
        assert_eq!(random_support(dims, 1.0, false, 5).unwrap(), NetworkSupport::full(dims));
    }

    #[test]
    fn fill_fraction_matches_density() {
        let dims = Dims::new(4, 4, 1).unwrap();
        let mut ones = 0usize;
        let seeds = 10_000;
        for seed in 0..seeds {
            let s = random_support(dims, 0.6, false, seed).unwrap();
            ones += s.e1.iter().flatten().map(|&v| v as usize).sum::<usize>();
        }
        let frac = ones as f64 / (seeds as f64 * 16.0);
        assert!((0.57..=0.63).contains(&frac), "fill {frac}");
    }

    #[test]
    fn factors_are_never_empty() {
        let dims = Dims::new(2, 2, 1).unwrap();
        for seed in 0..2000 {
            let s = random_support(dims, 0.05, false, seed).unwrap();
            assert!(s.e1.iter().flatten().any(|&v| v == 1));
            assert!(s.e2.iter().flatten().any(|&v| v == 1));
            assert!(s.a1.iter().any(|&v| v == 1));
            assert!(s.a2.iter().flatten().any(|&v| v == 1));
        }
    }

    #[test]
    fn hierarchical_support_ties_factors() {
        let dims = Dims::new(3, 3, 0).unwrap();
        let s = random_support(dims, 0.5, true, 1).unwrap();
        assert_eq!(s.e1, s.e2);
        assert!(random_support(Dims::new(2, 3, 0).unwrap(), 0.5, true, 1).is_err());
    }

    #[test]
    fn coefficients_follow_support() {
        let dims = Dims::new(2, 2, 1).unwrap();
        for seed in 0..5 {
            let sup = random_support(dims, 0.6, false, seed).unwrap();
            let gt = random_system(&sup, 20, 0.95, unit_noise(dims), seed).unwrap();
            let edges = sup.edges();
            for r in 0..4 {
                for c in 0..4 {
                    let nonzero = gt.g.iter().any(|m| m[(r, c)] != 0.0);
                    assert_eq!(nonzero, edges.g[r][c] == 1);
                }
                let nonzero = gt.f.iter().any(|m| m[(r, 0)] != 0.0);
                assert_eq!(nonzero, edges.f[r][0] == 1);
            }
            assert!(gt.scale >= MIN_SCALE && gt.scale <= 1.0);
            assert!(gt.closed_loop_radius() <= STABILITY_TARGET + 1e-3);
        }
    }

    #[test]
    fn input_free_system_has_empty_f() {
        let dims = Dims::new(2, 1, 0).unwrap();
        let sup = random_support(dims, 0.6, false, 3).unwrap();
        let gt = random_system(&sup, 5, 0.9, unit_noise(dims), 3).unwrap();
        assert!(gt.f.iter().all(|m| m.ncols() == 0));
    }

    #[test]
    fn noiseless_long_run_stays_bounded() {
        let dims = Dims::new(2, 2, 0).unwrap();
        for seed in 0..3 {
            let sup = random_support(dims, 0.8, false, seed).unwrap();
            let gt = random_system(&sup, 20, 0.95, unit_noise(dims), seed).unwrap();
            // random initial data through the first samples, then free response
            let data = simulate(&gt, 200, &SimOptions { burn_in: 0, ..SimOptions::default() }, seed).unwrap();
            let mut y = DMatrix::zeros(5000, 4);
            y.rows_mut(0, 200).copy_from(data.y());
            for t in 200..5000 {
                let mut row = DVector::zeros(4);
                for (tau, g) in gt.g.iter().enumerate() {
                    row.gemv(1.0, g, &y.row(t - tau - 1).transpose(), 1.0);
                }
                y.row_mut(t).copy_from(&row.transpose());
            }
            assert!(y.amax() < 1e6);
        }
    }

    #[test]
    fn closed_loop_radius_of_scalar_ar1() {
        let g = vec![DMatrix::from_element(1, 1, 0.8)];
        assert!((closed_loop_radius(&g) - 0.8).abs() < 1e-6);
        // y(t) = 1.2 y(t-1) - 0.5 y(t-2): complex roots of modulus sqrt(0.5)
        let g = vec![DMatrix::from_element(1, 1, 1.2), DMatrix::from_element(1, 1, -0.5)];
        assert!((closed_loop_radius(&g) - 0.5f64.sqrt()).abs() < 1e-3);
    }

    #[test]
    fn butterworth_has_unit_dc_gain_and_cutoff() {
        let secs = butterworth_lowpass(8, 0.4).unwrap();
        let response = |w: f64| -> f64 {
            let z = nalgebra::Complex::new(0.0, -w).exp();
            secs.iter()
                .map(|s| {
                    let num = s.b[0] + s.b[1] * z + s.b[2] * z * z;
                    let den = 1.0 + s.a[0] * z + s.a[1] * z * z;
                    (num / den).norm()
                })
                .product()
        };
        assert!((response(0.0) - 1.0).abs() < 1e-12);
        assert!((response(0.4 * PI) - 0.5f64.sqrt()).abs() < 1e-9);
        assert!(response(0.8 * PI) < 1e-3);
    }

    #[test]
    fn zero_network_outputs_noise() {
        let dims = Dims::new(1, 2, 1).unwrap();
        let mut sup = NetworkSupport::empty(dims);
        sup.a1 = vec![0];
        let gt = GroundTruth {
            dims,
            g: vec![DMatrix::zeros(2, 2); 3],
            f: vec![DMatrix::zeros(2, 1); 3],
            support: sup,
            noise: NoiseModel::new(vec![1.0, 4.0]).unwrap(),
            seed: 0,
            scale: 1.0,
        };
        let data = simulate(&gt, 2000, &SimOptions::default(), 11).unwrap();
        for (c, s2) in [1.0, 4.0].iter().enumerate() {
            let col = data.y().column(c);
            let mean = col.mean();
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 1999.0;
            assert!((var / s2 - 1.0).abs() < 0.15, "channel {c}: {var}");
        }
        let u = data.u().column(0);
        assert!((u.norm_squared() / 2000.0 - 1.0).abs() < 0.15);
    }

    #[test]
    fn noise_scaling_is_linear() {
        let dims = Dims::new(1, 2, 1).unwrap();
        let sup = random_support(dims, 1.0, false, 2).unwrap();
        let gt = random_system(&sup, 10, 0.9, unit_noise(dims), 2).unwrap();
        let mut gt4 = gt.clone();
        gt4.noise = NoiseModel::constant(2, 4.0).unwrap();
        let opts = SimOptions::default();
        let clean = simulate(&gt, 500, &SimOptions { noiseless: true, ..opts }, 9).unwrap();
        let a = simulate(&gt, 500, &opts, 9).unwrap();
        let b = simulate(&gt4, 500, &opts, 9).unwrap();
        let da = a.y() - clean.y();
        let db = b.y() - clean.y();
        assert!((db.norm() / da.norm() - 2.0).abs() < 1e-9);
    }

    #[test]
    fn simulation_is_reproducible() {
        let dims = Dims::new(2, 2, 1).unwrap();
        let sup = random_support(dims, 0.6, false, 7).unwrap();
        let gt = random_system(&sup, 20, 0.95, unit_noise(dims), 7).unwrap();
        let a = simulate(&gt, 300, &SimOptions::default(), 1).unwrap();
        let b = simulate(&gt, 300, &SimOptions::default(), 1).unwrap();
        assert!(a.y().iter().zip(b.y().iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        let gt2 = random_system(&sup, 20, 0.95, unit_noise(dims), 7).unwrap();
        assert_eq!(gt, gt2);
    }
}
