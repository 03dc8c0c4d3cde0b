//! Stable-spline base kernels and the Kronecker scale families built on them.
//!
//! Every impulse-response block `g[hk, jl]` is modelled as a zero-mean
//! Gaussian process with covariance `s[hk, jl] * P`, where `P` is a
//! modulated stable-spline kernel and `s` is the effective block scale of the
//! chosen estimator variant. The same holds for `f[hk, i]` with base kernel
//! `R`.

use std::f64::consts::PI;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::dims::Dims;
use crate::error::{KronError, Result};

/// Decay rate and modulation frequency of a stable-spline kernel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelShape {
    beta: f64,
    omega0: f64,
}

impl KernelShape {
    pub fn new(beta: f64, omega0: f64) -> Result<Self> {
        if !(beta > 0.0 && beta < 1.0) {
            return Err(KronError::InvalidShape(format!(
                "beta must lie in (0, 1), got {beta}"
            )));
        }
        if !(omega0 > 0.0 && omega0 < PI) {
            return Err(KronError::InvalidShape(format!(
                "omega0 must lie in (0, pi), got {omega0}"
            )));
        }
        Ok(KernelShape { beta, omega0 })
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn omega0(&self) -> f64 {
        self.omega0
    }
}

impl Default for KernelShape {
    /// `(0.5, 0.1 * pi)`, used for `R` whenever there is no input.
    fn default() -> Self {
        KernelShape {
            beta: 0.5,
            omega0: 0.1 * PI,
        }
    }
}

/// Dense `T x T` stable-spline kernel matrix together with a square-root
/// factor `L` satisfying `L * L^T = P`.
#[derive(Debug, Clone)]
pub struct BaseKernelMatrix {
    entries: DMatrix<f64>,
    factor: DMatrix<f64>,
    eigenvalues: Vec<f64>,
    shape: KernelShape,
}

impl BaseKernelMatrix {
    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    /// Square-root factor built from the eigendecomposition, with
    /// round-off negative eigenvalues clamped to zero.
    pub fn factor(&self) -> &DMatrix<f64> {
        &self.factor
    }

    pub fn shape(&self) -> KernelShape {
        self.shape
    }

    pub fn size(&self) -> usize {
        self.entries.nrows()
    }

    pub fn trace(&self) -> f64 {
        self.entries.trace()
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Number of eigenvalues above `rel_tol * max_eigenvalue`.
    pub fn numerical_rank(&self, rel_tol: f64) -> usize {
        let max = self.eigenvalues.iter().copied().fold(0.0, f64::max);
        self.eigenvalues
            .iter()
            .filter(|&&e| e > rel_tol * max)
            .count()
    }

    /// Columns of [`BaseKernelMatrix::factor`] whose eigenvalue exceeds
    /// `rel_tol * max_eigenvalue`, i.e. a full-column-rank square root.
    pub fn reduced_factor(&self, rel_tol: f64) -> DMatrix<f64> {
        let max = self.eigenvalues.iter().copied().fold(0.0, f64::max);
        let keep: Vec<usize> = (0..self.eigenvalues.len())
            .filter(|&j| self.eigenvalues[j] > rel_tol * max)
            .collect();
        self.factor.select_columns(&keep)
    }

    /// Whether the minimum eigenvalue is at least `-tol * trace`.
    pub fn is_psd(&self, tol: f64) -> bool {
        self.min_eigenvalue() >= -tol * self.trace()
    }
}

/// One entry of the modulated stable-spline kernel, lags `t, s >= 1`.
pub fn stable_spline_entry(shape: KernelShape, t: usize, s: usize) -> f64 {
    let beta = shape.beta;
    let (tf, sf) = (t as f64, s as f64);
    let mx = tf.max(sf);
    let ss = (-beta * (tf + sf)).exp() * (-beta * mx).exp() / 2.0 - (-3.0 * beta * mx).exp() / 6.0;
    ss * (shape.omega0 * (tf - sf)).cos()
}

pub fn build_stable_spline(shape: KernelShape, size: usize) -> Result<BaseKernelMatrix> {
    if size == 0 {
        return Err(KronError::InvalidArgument(
            "kernel size must be at least 1".into(),
        ));
    }
    // Re-validate: shapes may come from deserialized data.
    let shape = KernelShape::new(shape.beta, shape.omega0)?;
    let mut entries = DMatrix::zeros(size, size);
    for t in 0..size {
        for s in 0..=t {
            let v = stable_spline_entry(shape, t + 1, s + 1);
            entries[(t, s)] = v;
            entries[(s, t)] = v;
        }
    }
    let eig = SymmetricEigen::new(entries.clone());
    let mut factor = eig.eigenvectors.clone();
    for (j, &ev) in eig.eigenvalues.iter().enumerate() {
        let root = ev.max(0.0).sqrt();
        factor.column_mut(j).scale_mut(root);
    }
    Ok(BaseKernelMatrix {
        entries,
        factor,
        eigenvalues: eig.eigenvalues.iter().copied().collect(),
        shape,
    })
}

/// Harmonic combination `a * b / (a + b)`, zero when both vanish.
///
/// Unchecked: callers guarantee `a, b >= 0` or deliberately probe slightly
/// negative values (finite-difference checks).
#[inline]
pub(crate) fn harmonic(a: f64, b: f64) -> f64 {
    let sum = a + b;
    if sum == 0.0 {
        0.0
    } else {
        a * b / sum
    }
}

/// Partial derivative of [`harmonic`] with respect to its first argument,
/// `(b / (a + b))^2`, taken as zero when `a = b = 0`.
#[inline]
pub(crate) fn harmonic_partial(a: f64, b: f64) -> f64 {
    let sum = a + b;
    if sum == 0.0 {
        0.0
    } else {
        let r = b / sum;
        r * r
    }
}

pub fn effective_block_scale(a: f64, b: f64) -> Result<f64> {
    if !(a >= 0.0) || !(b >= 0.0) {
        return Err(KronError::InvalidArgument(format!(
            "block scales must be nonnegative, got ({a}, {b})"
        )));
    }
    Ok(harmonic(a, b))
}

/// The diagonal scale vectors of the Kronecker kernel.
///
/// * `lambda[h * p1 + j]` weights module `j -> h`,
/// * `gamma[k * p2 + l]` weights node `l -> k` inside every module,
/// * `pi[h]` weights the input into module `h`,
/// * `omega[k * m + i]` weights input `i` into node `k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KroneckerScales {
    pub lambda: Vec<f64>,
    pub gamma: Vec<f64>,
    pub pi: Vec<f64>,
    pub omega: Vec<f64>,
}

impl KroneckerScales {
    pub fn constant(dims: Dims, value: f64) -> Self {
        let has_input = dims.m > 0;
        KroneckerScales {
            lambda: vec![value; dims.p1 * dims.p1],
            gamma: vec![value; dims.p2 * dims.p2],
            pi: if has_input { vec![value; dims.p1] } else { Vec::new() },
            omega: vec![value; dims.p2 * dims.m],
        }
    }

    pub fn check_dims(&self, dims: Dims) -> Result<()> {
        let expect_pi = if dims.m > 0 { dims.p1 } else { 0 };
        let checks = [
            ("lambda", self.lambda.len(), dims.p1 * dims.p1),
            ("gamma", self.gamma.len(), dims.p2 * dims.p2),
            ("omega", self.omega.len(), dims.p2 * dims.m),
        ];
        for (name, got, want) in checks {
            if got != want {
                return Err(KronError::Dimension(format!(
                    "{name} has {got} entries, expected {want} for {dims}"
                )));
            }
        }
        if self.pi.len() != expect_pi && !(dims.m == 0 && self.pi.len() == dims.p1) {
            return Err(KronError::Dimension(format!(
                "pi has {} entries, expected {expect_pi} for {dims}",
                self.pi.len()
            )));
        }
        Ok(())
    }

    /// Checks that every entry lies in `[0, kappa]`.
    pub fn check_box(&self, kappa: f64) -> Result<()> {
        let all = self
            .lambda
            .iter()
            .chain(&self.gamma)
            .chain(&self.pi)
            .chain(&self.omega);
        for &v in all {
            if !(0.0..=kappa).contains(&v) {
                return Err(KronError::InvalidArgument(format!(
                    "scale {v} outside [0, {kappa}]"
                )));
            }
        }
        Ok(())
    }

    fn check_nonnegative(&self) -> Result<()> {
        self.check_box(f64::INFINITY)
    }

    /// Flat parameter layout `[lambda, gamma, pi, omega]`; `pi` is empty
    /// without input.
    pub fn to_params(&self) -> Vec<f64> {
        let mut out = self.lambda.clone();
        out.extend_from_slice(&self.gamma);
        out.extend_from_slice(&self.pi);
        out.extend_from_slice(&self.omega);
        out
    }

    /// Inverse of [`KroneckerScales::to_params`]; panics on a short slice.
    pub fn from_params(params: &[f64], dims: Dims) -> Self {
        let n_lam = dims.p1 * dims.p1;
        let n_gam = dims.p2 * dims.p2;
        let n_pi = if dims.m > 0 { dims.p1 } else { 0 };
        let (lambda, rest) = params.split_at(n_lam);
        let (gamma, rest) = rest.split_at(n_gam);
        let (pi, omega) = rest.split_at(n_pi);
        KroneckerScales {
            lambda: lambda.to_vec(),
            gamma: gamma.to_vec(),
            pi: pi.to_vec(),
            omega: omega[..dims.p2 * dims.m].to_vec(),
        }
    }
}

/// Effective scale multiplying the base kernel for every impulse-response
/// block: `g[(hk), (jl)]` for `G` and `f[(hk), i]` for `F`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockScaleMatrix {
    pub g: DMatrix<f64>,
    pub f: DMatrix<f64>,
}

impl BlockScaleMatrix {
    pub fn zeros(dims: Dims) -> Self {
        let p = dims.outputs();
        BlockScaleMatrix {
            g: DMatrix::zeros(p, p),
            f: DMatrix::zeros(p, dims.m),
        }
    }

    pub fn check_dims(&self, dims: Dims) -> Result<()> {
        let p = dims.outputs();
        if self.g.shape() != (p, p) || self.f.shape() != (p, dims.m) {
            return Err(KronError::Dimension(format!(
                "block scales {:?}/{:?} do not match {dims}",
                self.g.shape(),
                self.f.shape()
            )));
        }
        Ok(())
    }

    /// Sets every scale at or below `threshold` to exactly zero.
    pub fn clamp_below(&mut self, threshold: f64) {
        for v in self.g.iter_mut().chain(self.f.iter_mut()) {
            if *v <= threshold {
                *v = 0.0;
            }
        }
    }
}

/// Maximum-entropy Kronecker kernel (variant K).
pub fn block_scales_k(xi: &KroneckerScales, dims: Dims) -> Result<BlockScaleMatrix> {
    xi.check_dims(dims)?;
    xi.check_nonnegative()?;
    let mut out = BlockScaleMatrix::zeros(dims);
    for h in 0..dims.p1 {
        for k in 0..dims.p2 {
            let row = dims.channel(h, k);
            for j in 0..dims.p1 {
                let lam = xi.lambda[dims.lambda_index(h, j)];
                for l in 0..dims.p2 {
                    let gam = xi.gamma[dims.gamma_index(k, l)];
                    out.g[(row, dims.channel(j, l))] = harmonic(lam, gam);
                }
            }
            for i in 0..dims.m {
                out.f[(row, i)] = harmonic(xi.pi[h], xi.omega[dims.omega_index(k, i)]);
            }
        }
    }
    Ok(out)
}

/// Independent per-block scales (variant S). The first `p^2` entries of
/// `scales` are the `G` blocks in row-major `((hk), (jl))` order, the
/// remaining `p * m` the `F` blocks.
pub fn block_scales_s(scales: &[f64], dims: Dims) -> Result<BlockScaleMatrix> {
    let p = dims.outputs();
    let want = dims.g_blocks() + dims.f_blocks();
    if scales.len() != want {
        return Err(KronError::Dimension(format!(
            "expected {want} independent scales for {dims}, got {}",
            scales.len()
        )));
    }
    if let Some(v) = scales.iter().find(|v| !(**v >= 0.0)) {
        return Err(KronError::InvalidArgument(format!(
            "block scales must be nonnegative, got {v}"
        )));
    }
    let (gs, fs) = scales.split_at(dims.g_blocks());
    Ok(BlockScaleMatrix {
        g: DMatrix::from_row_slice(p, p, gs),
        f: DMatrix::from_row_slice(p, dims.m, fs),
    })
}

/// A single shared scale for `G` and one for `F` (variant SS).
pub fn block_scales_ss(lambda: f64, pi: f64, dims: Dims) -> Result<BlockScaleMatrix> {
    if !(lambda >= 0.0) || !(pi >= 0.0) {
        return Err(KronError::InvalidArgument(format!(
            "shared scales must be nonnegative, got ({lambda}, {pi})"
        )));
    }
    let p = dims.outputs();
    Ok(BlockScaleMatrix {
        g: DMatrix::from_element(p, p, lambda),
        f: DMatrix::from_element(p, dims.m, pi),
    })
}

/// Hierarchical kernel (variant H): the same initiator `lambda` plays both
/// Kronecker roles. Requires `p1 == p2` and no input.
pub fn block_scales_h(lambda: &[f64], dims: Dims) -> Result<BlockScaleMatrix> {
    if dims.p1 != dims.p2 || dims.m > 0 {
        return Err(KronError::Config(format!(
            "hierarchical kernel requires p1 == p2 and m == 0, got {dims}"
        )));
    }
    let q = dims.p1;
    if lambda.len() != q * q {
        return Err(KronError::Dimension(format!(
            "expected {} initiator scales, got {}",
            q * q,
            lambda.len()
        )));
    }
    if let Some(v) = lambda.iter().find(|v| !(**v >= 0.0)) {
        return Err(KronError::InvalidArgument(format!(
            "initiator scales must be nonnegative, got {v}"
        )));
    }
    let mut out = BlockScaleMatrix::zeros(dims);
    for h in 0..q {
        for k in 0..q {
            for j in 0..q {
                for l in 0..q {
                    let a = lambda[h * q + j];
                    let b = lambda[k * q + l];
                    out.g[(dims.channel(h, k), dims.channel(j, l))] = harmonic(a, b);
                }
            }
        }
    }
    Ok(out)
}

/// Estimator variant, i.e. how block scales are parameterized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// Maximum-entropy Kronecker kernel.
    K,
    /// Independent scale per impulse-response block.
    S,
    /// One shared scale for `G` and one for `F`.
    SS,
    /// Hierarchical Kronecker kernel, `p1 == p2`, no input.
    H,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::K, Variant::S, Variant::SS, Variant::H];

    pub fn name(self) -> &'static str {
        match self {
            Variant::K => "K",
            Variant::S => "S",
            Variant::SS => "SS",
            Variant::H => "H",
        }
    }

    pub fn check_dims(self, dims: Dims) -> Result<()> {
        if self == Variant::H && (dims.p1 != dims.p2 || dims.m > 0) {
            return Err(KronError::Config(format!(
                "variant H only applies to systems without input and p1 == p2, got {dims}"
            )));
        }
        Ok(())
    }

    /// Number of scale hyperparameters.
    pub fn param_count(self, dims: Dims) -> usize {
        let input_pi = if dims.m > 0 { dims.p1 } else { 0 };
        match self {
            Variant::K => dims.p1 * dims.p1 + dims.p2 * dims.p2 + input_pi + dims.p2 * dims.m,
            Variant::S => dims.g_blocks() + dims.f_blocks(),
            Variant::SS => 1 + usize::from(dims.m > 0),
            Variant::H => dims.p1 * dims.p1,
        }
    }

    /// Validated block scales for a parameter vector.
    pub fn block_scales(self, params: &[f64], dims: Dims) -> Result<BlockScaleMatrix> {
        self.check_dims(dims)?;
        if params.len() != self.param_count(dims) {
            return Err(KronError::Dimension(format!(
                "variant {} expects {} parameters for {dims}, got {}",
                self.name(),
                self.param_count(dims),
                params.len()
            )));
        }
        if let Some(v) = params.iter().find(|v| !(**v >= 0.0)) {
            return Err(KronError::InvalidArgument(format!(
                "scale parameters must be nonnegative, got {v}"
            )));
        }
        Ok(self.block_scales_unchecked(params, dims))
    }

    /// Block scales without sign checks, for derivative probes across the
    /// lower bound. Panics if the length does not match.
    pub fn block_scales_unchecked(self, params: &[f64], dims: Dims) -> BlockScaleMatrix {
        let p = dims.outputs();
        match self {
            Variant::K => {
                let xi = KroneckerScales::from_params(params, dims);
                let mut out = BlockScaleMatrix::zeros(dims);
                for row in 0..p {
                    let (h, k) = dims.split_channel(row);
                    for col in 0..p {
                        let (j, l) = dims.split_channel(col);
                        out.g[(row, col)] = harmonic(
                            xi.lambda[dims.lambda_index(h, j)],
                            xi.gamma[dims.gamma_index(k, l)],
                        );
                    }
                    for i in 0..dims.m {
                        out.f[(row, i)] =
                            harmonic(xi.pi[h], xi.omega[dims.omega_index(k, i)]);
                    }
                }
                out
            }
            Variant::S => {
                let (gs, fs) = params.split_at(dims.g_blocks());
                BlockScaleMatrix {
                    g: DMatrix::from_row_slice(p, p, gs),
                    f: DMatrix::from_row_slice(p, dims.m, fs),
                }
            }
            Variant::SS => BlockScaleMatrix {
                g: DMatrix::from_element(p, p, params[0]),
                f: DMatrix::from_element(p, dims.m, params.get(1).copied().unwrap_or(0.0)),
            },
            Variant::H => {
                let q = dims.p1;
                let mut out = BlockScaleMatrix::zeros(dims);
                for row in 0..p {
                    let (h, k) = dims.split_channel(row);
                    for col in 0..p {
                        let (j, l) = dims.split_channel(col);
                        out.g[(row, col)] = harmonic(params[h * q + j], params[k * q + l]);
                    }
                }
                out
            }
        }
    }

    /// Chain rule: maps a gradient with respect to block scales onto the
    /// variant's parameters.
    pub fn pullback(self, params: &[f64], dims: Dims, grad: &BlockScaleMatrix) -> Vec<f64> {
        let p = dims.outputs();
        let mut out = vec![0.0; self.param_count(dims)];
        match self {
            Variant::K => {
                let xi = KroneckerScales::from_params(params, dims);
                let n_lam = dims.p1 * dims.p1;
                let n_gam = dims.p2 * dims.p2;
                let n_pi = if dims.m > 0 { dims.p1 } else { 0 };
                for row in 0..p {
                    let (h, k) = dims.split_channel(row);
                    for col in 0..p {
                        let (j, l) = dims.split_channel(col);
                        let li = dims.lambda_index(h, j);
                        let gi = dims.gamma_index(k, l);
                        let (lam, gam) = (xi.lambda[li], xi.gamma[gi]);
                        let gb = grad.g[(row, col)];
                        out[li] += gb * harmonic_partial(lam, gam);
                        out[n_lam + gi] += gb * harmonic_partial(gam, lam);
                    }
                    for i in 0..dims.m {
                        let oi = dims.omega_index(k, i);
                        let (pi, om) = (xi.pi[h], xi.omega[oi]);
                        let gb = grad.f[(row, i)];
                        out[n_lam + n_gam + h] += gb * harmonic_partial(pi, om);
                        out[n_lam + n_gam + n_pi + oi] += gb * harmonic_partial(om, pi);
                    }
                }
            }
            Variant::S => {
                let mut idx = 0;
                for row in 0..p {
                    for col in 0..p {
                        out[idx] = grad.g[(row, col)];
                        idx += 1;
                    }
                }
                for row in 0..p {
                    for i in 0..dims.m {
                        out[idx] = grad.f[(row, i)];
                        idx += 1;
                    }
                }
            }
            Variant::SS => {
                out[0] = grad.g.sum();
                if dims.m > 0 {
                    out[1] = grad.f.sum();
                }
            }
            Variant::H => {
                let q = dims.p1;
                for row in 0..p {
                    let (h, k) = dims.split_channel(row);
                    for col in 0..p {
                        let (j, l) = dims.split_channel(col);
                        let (ai, bi) = (h * q + j, k * q + l);
                        let (a, b) = (params[ai], params[bi]);
                        let gb = grad.g[(row, col)];
                        out[ai] += gb * harmonic_partial(a, b);
                        out[bi] += gb * harmonic_partial(b, a);
                    }
                }
            }
        }
        out
    }
}

impl std::str::FromStr for Variant {
    type Err = KronError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "K" => Ok(Variant::K),
            "S" => Ok(Variant::S),
            "SS" => Ok(Variant::SS),
            "H" => Ok(Variant::H),
            other => Err(KronError::Config(format!(
                "unknown variant {other:?} (expected K, S, SS or H)"
            ))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rejects_invalid_shapes() {
        assert!(KernelShape::new(0.0, 0.5).is_err());
        assert!(KernelShape::new(1.0, 0.5).is_err());
        assert!(KernelShape::new(0.5, 0.0).is_err());
        assert!(KernelShape::new(0.5, PI).is_err());
        assert!(KernelShape::new(f64::NAN, 0.5).is_err());
        assert!(KernelShape::new(0.5, 1.0).is_ok());
    }

    #[test]
    fn single_lag_kernel_is_a_third_of_exp() {
        let p = build_stable_spline(KernelShape::new(0.5, 0.1).unwrap(), 1).unwrap();
        let want = (-1.5f64).exp() / 3.0;
        assert!((p.entries()[(0, 0)] - want).abs() < 1e-16);
    }

    #[test]
    fn kernel_is_exactly_symmetric() {
        let p = build_stable_spline(KernelShape::new(0.37, 2.1).unwrap(), 30).unwrap();
        let e = p.entries();
        assert_eq!(e, &e.transpose());
    }

    #[test]
    fn kernel_psd_and_decaying_diagonal() {
        let p = build_stable_spline(KernelShape::new(0.3, 0.5).unwrap(), 20).unwrap();
        assert!(p.is_psd(1e-10), "min eig {}", p.min_eigenvalue());
        let e = p.entries();
        for t in 0..20 {
            assert!(e[(t, t)] <= e[(0, 0)]);
            assert!(e[(t, t)] <= (-0.3 * (t + 1) as f64).exp());
        }
    }

    #[test]
    fn factor_reproduces_kernel() {
        let p = build_stable_spline(KernelShape::new(0.2, 0.7).unwrap(), 25).unwrap();
        let l = p.factor();
        let diff = l * l.transpose() - p.entries();
        assert!(diff.amax() < 1e-14);
    }

    #[test]
    fn zero_size_is_rejected() {
        assert!(build_stable_spline(KernelShape::default(), 0).is_err());
    }

    #[test]
    fn effective_scale_examples() {
        assert_eq!(effective_block_scale(0.0, 0.0).unwrap(), 0.0);
        assert_eq!(effective_block_scale(2.0, 2.0).unwrap(), 1.0);
        assert_eq!(effective_block_scale(3.0, 0.0).unwrap(), 0.0);
        assert!(effective_block_scale(-1.0, 1.0).is_err());
    }

    #[test]
    fn effective_scale_grid_properties() {
        let grid: Vec<f64> = (0..25).map(|i| 0.25 * i as f64).collect();
        for &a in &grid {
            for &b in &grid {
                let s = effective_block_scale(a, b).unwrap();
                assert_eq!(s, effective_block_scale(b, a).unwrap());
                assert!(s <= a.min(b) + 1e-15);
                assert!(effective_block_scale(a + 0.1, b).unwrap() >= s);
                assert!(effective_block_scale(a, b + 0.1).unwrap() >= s);
            }
        }
    }

    #[test]
    fn k_scales_all_ones() {
        let dims = Dims::new(2, 3, 2).unwrap();
        let xi = KroneckerScales::constant(dims, 1.0);
        let b = block_scales_k(&xi, dims).unwrap();
        assert!(b.g.iter().all(|&v| v == 0.5));
        assert!(b.f.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn k_scales_zero_lambda_annihilates_module_pair() {
        let dims = Dims::new(3, 2, 1).unwrap();
        let mut xi = KroneckerScales::constant(dims, 1.0);
        let (h0, j0) = (2, 0);
        xi.lambda[dims.lambda_index(h0, j0)] = 0.0;
        let b = block_scales_k(&xi, dims).unwrap();
        for h in 0..3 {
            for k in 0..2 {
                for j in 0..3 {
                    for l in 0..2 {
                        let v = b.g[(dims.channel(h, k), dims.channel(j, l))];
                        if (h, j) == (h0, j0) {
                            assert_eq!(v, 0.0);
                        } else {
                            assert_eq!(v, 0.5);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn k_scales_reject_bad_dims() {
        let dims = Dims::new(2, 2, 1).unwrap();
        let mut xi = KroneckerScales::constant(dims, 1.0);
        xi.gamma.pop();
        assert!(block_scales_k(&xi, dims).is_err());
    }

    /// Dense oracle: the diagonal of `(A (x) B)(A (x) I + I (x) B)^-1`,
    /// indexed by `(a_index, b_index)` in Kronecker order.
    fn dense_kron_diag(a: &[f64], b: &[f64]) -> DMatrix<f64> {
        let da = DMatrix::from_diagonal(&nalgebra::DVector::from_row_slice(a));
        let db = DMatrix::from_diagonal(&nalgebra::DVector::from_row_slice(b));
        let ia = DMatrix::<f64>::identity(a.len(), a.len());
        let ib = DMatrix::<f64>::identity(b.len(), b.len());
        let num = da.kronecker(&db);
        let den = da.kronecker(&ib) + ia.kronecker(&db);
        let x = num * den.try_inverse().unwrap();
        let mut out = DMatrix::zeros(a.len(), b.len());
        for ai in 0..a.len() {
            for bi in 0..b.len() {
                out[(ai, bi)] = x[(ai * b.len() + bi, ai * b.len() + bi)];
            }
        }
        out
    }

    fn random_positive(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(0.05..5.0)).collect()
    }

    #[test]
    fn k_scales_match_dense_kronecker_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for p1 in 1..=3 {
            for p2 in 1..=3 {
                for m in 0..=2 {
                    let dims = Dims::new(p1, p2, m).unwrap();
                    let xi = KroneckerScales {
                        lambda: random_positive(&mut rng, p1 * p1),
                        gamma: random_positive(&mut rng, p2 * p2),
                        pi: if m > 0 { random_positive(&mut rng, p1) } else { vec![] },
                        omega: random_positive(&mut rng, p2 * m),
                    };
                    let b = block_scales_k(&xi, dims).unwrap();
                    let xg = dense_kron_diag(&xi.lambda, &xi.gamma);
                    for h in 0..p1 {
                        for j in 0..p1 {
                            for k in 0..p2 {
                                for l in 0..p2 {
                                    let want = xg[(h * p1 + j, k * p2 + l)];
                                    let got = b.g[(dims.channel(h, k), dims.channel(j, l))];
                                    assert!((want - got).abs() < 1e-12);
                                }
                            }
                        }
                    }
                    if m > 0 {
                        let xf = dense_kron_diag(&xi.pi, &xi.omega);
                        for h in 0..p1 {
                            for k in 0..p2 {
                                for i in 0..m {
                                    let want = xf[(h, k * m + i)];
                                    let got = b.f[(dims.channel(h, k), i)];
                                    assert!((want - got).abs() < 1e-12);
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn s_scales_are_a_reshape() {
        let dims = Dims::new(2, 2, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v = random_positive(&mut rng, 16 + 4);
        let b = block_scales_s(&v, dims).unwrap();
        let mut idx = 0;
        for r in 0..4 {
            for c in 0..4 {
                assert_eq!(b.g[(r, c)], v[idx]);
                idx += 1;
            }
        }
        for r in 0..4 {
            assert_eq!(b.f[(r, 0)], v[idx]);
            idx += 1;
        }
        let mut ones = vec![1.0; 20];
        ones[5] = 0.0;
        let b = block_scales_s(&ones, dims).unwrap();
        assert_eq!(b.g.iter().filter(|&&x| x == 0.0).count(), 1);
        assert_eq!(b.g[(1, 1)], 0.0);
        assert!(block_scales_s(&ones[..19], dims).is_err());
    }

    #[test]
    fn ss_scales_are_constant() {
        let dims = Dims::new(3, 2, 2).unwrap();
        let b = block_scales_ss(0.7, 0.3, dims).unwrap();
        assert_eq!(b.g.len(), 36);
        assert_eq!(b.f.len(), 12);
        assert!(b.g.iter().all(|&v| v == 0.7));
        assert!(b.f.iter().all(|&v| v == 0.3));
        let z = block_scales_ss(0.0, 0.0, dims).unwrap();
        assert!(z.g.iter().chain(z.f.iter()).all(|&v| v == 0.0));
        assert!(block_scales_ss(-0.1, 0.0, dims).is_err());
    }

    #[test]
    fn h_scales_examples_and_oracle() {
        let dims = Dims::new(2, 2, 0).unwrap();
        let b = block_scales_h(&[2.0; 4], dims).unwrap();
        assert!(b.g.iter().all(|&v| v == 1.0));

        let mut lam = vec![1.0; 4];
        lam[2] = 0.0; // (h, j) = (1, 0)
        let b = block_scales_h(&lam, dims).unwrap();
        for h in 0..2 {
            for k in 0..2 {
                for j in 0..2 {
                    for l in 0..2 {
                        let v = b.g[(dims.channel(h, k), dims.channel(j, l))];
                        let zero = (h, j) == (1, 0) || (k, l) == (1, 0);
                        assert_eq!(v == 0.0, zero);
                    }
                }
            }
        }

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let lam = random_positive(&mut rng, 4);
        let b = block_scales_h(&lam, dims).unwrap();
        let x = dense_kron_diag(&lam, &lam);
        for h in 0..2 {
            for j in 0..2 {
                for k in 0..2 {
                    for l in 0..2 {
                        let want = x[(h * 2 + j, k * 2 + l)];
                        let got = b.g[(dims.channel(h, k), dims.channel(j, l))];
                        assert!((want - got).abs() < 1e-12);
                    }
                }
            }
        }

        assert!(block_scales_h(&[1.0; 4], Dims::new(2, 2, 1).unwrap()).is_err());
        assert!(block_scales_h(&[1.0; 4], Dims::new(2, 3, 0).unwrap()).is_err());
    }

    proptest! {
        #[test]
        fn random_shapes_are_psd(beta in 0.01f64..0.99, omega in 0.01f64..3.13) {
            let p = build_stable_spline(KernelShape::new(beta, omega).unwrap(), 50).unwrap();
            prop_assert!(p.is_psd(1e-10));
        }

        #[test]
        fn effective_scale_bounded_by_min(a in 0.0f64..1e4, b in 0.0f64..1e4) {
            let s = effective_block_scale(a, b).unwrap();
            prop_assert!(s >= 0.0);
            prop_assert!(s <= a.min(b) * (1.0 + 1e-15));
        }
    }
}
