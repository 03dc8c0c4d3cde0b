//! Evaluation metrics and Monte Carlo studies.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dims::Dims;
use crate::error::{KronError, Result};
use crate::hyperopt::{fit_prepared, EdgeMask, EstimatorConfig, NetworkSupport, Prepared};
use crate::kernel::Variant;
use crate::likelihood::{ImpulseEstimate, NoiseModel};
use crate::netgen::{random_support, random_system, simulate, GroundTruth, SimOptions};

/// `100 (1 - sqrt(sum_t ||T_t - E_t||^2 / sum_t ||T_t - mean(T)||^2))` over
/// lags `0..horizon`; missing lags count as zero.
pub fn fit_score(truth: &[DMatrix<f64>], est: &[DMatrix<f64>], horizon: usize) -> Result<f64> {
    if horizon == 0 {
        return Err(KronError::InvalidArgument("horizon must be at least 1".into()));
    }
    let shape = truth
        .first()
        .or(est.first())
        .map(|m| m.shape())
        .ok_or_else(|| KronError::InvalidArgument("no coefficients to compare".into()))?;
    let zero = DMatrix::zeros(shape.0, shape.1);
    let at = |seq: &'_ [DMatrix<f64>], t: usize| -> Result<DMatrix<f64>> {
        match seq.get(t) {
            Some(m) if m.shape() != shape => {
                Err(KronError::Dimension("coefficient shapes differ".into()))
            }
            Some(m) => Ok(m.clone()),
            None => Ok(zero.clone()),
        }
    };
    let mut mean = zero.clone();
    for t in 0..horizon {
        mean += at(truth, t)?;
    }
    mean /= horizon as f64;
    let (mut num, mut den) = (0.0, 0.0);
    for t in 0..horizon {
        let tt = at(truth, t)?;
        num += (&tt - at(est, t)?).norm_squared();
        den += (&tt - &mean).norm_squared();
    }
    if !(den > 0.0) {
        return Err(KronError::Numerical(
            "true response is constant over the horizon".into(),
        ));
    }
    Ok(100.0 * (1.0 - (num / den).sqrt()))
}

/// Average impulse-response fit: the mean of the `G` and `F` scores, or the
/// `G` score alone without inputs.
pub fn airf(truth: &GroundTruth, est: &ImpulseEstimate, horizon: usize) -> Result<f64> {
    if truth.dims != est.dims {
        return Err(KronError::Dimension("truth and estimate dims differ".into()));
    }
    let g = fit_score(&truth.g, &est.g, horizon)?;
    if truth.dims.m == 0 {
        return Ok(g);
    }
    let f = fit_score(&truth.f, &est.f, horizon)?;
    Ok(0.5 * (g + f))
}

fn mismatches(a: &[Vec<u8>], b: &[Vec<u8>]) -> usize {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .filter(|(x, y)| x != y)
        .count()
}

/// Fraction of misspecified edges between two elementwise supports.
pub fn err(truth: &EdgeMask, est: &EdgeMask) -> Result<f64> {
    let p = truth.outputs();
    let m = truth.inputs();
    let square = |e: &EdgeMask| e.g.iter().all(|r| r.len() == p) && e.f.iter().all(|r| r.len() == m);
    if est.outputs() != p || est.f.len() != truth.f.len() || !square(truth) || !square(est) {
        return Err(KronError::Dimension("edge masks have different dims".into()));
    }
    let g = mismatches(&truth.g, &est.g) as f64;
    if m == 0 {
        return Ok(g / (p * p) as f64);
    }
    let f = mismatches(&truth.f, &est.f) as f64;
    Ok(g / (2 * p * p) as f64 + f / (2 * p * m) as f64)
}

/// [`err`] on the Kronecker products of two factored supports.
pub fn err_support(truth: &NetworkSupport, est: &NetworkSupport) -> Result<f64> {
    if truth.dims() != est.dims() {
        return Err(KronError::Dimension("supports have different dims".into()));
    }
    err(&truth.edges(), &est.edges())
}

/// Sample quantile with linear interpolation between order statistics
/// (type 7): position `(n - 1) q` in the sorted sample.
pub fn quantile_type7(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let h = (sorted.len() - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub n: usize,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

impl MetricSummary {
    pub fn from_values(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        Some(MetricSummary {
            n: v.len(),
            min: v[0],
            q1: quantile_type7(&v, 0.25),
            median: quantile_type7(&v, 0.5),
            q3: quantile_type7(&v, 0.75),
            max: v[v.len() - 1],
        })
    }
}

/// Monte Carlo protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Protocol {
    pub dims: Dims,
    pub density: f64,
    /// Draw `E2 = E1`.
    pub hierarchical: bool,
    pub samples: usize,
    pub system_order: usize,
    pub pole_radius: f64,
    pub noise_variance: f64,
    pub runs: usize,
    pub master_seed: u64,
    pub estimators: Vec<Variant>,
    pub sim: SimOptions,
    /// Base estimator settings; `variant` and `seed` are set per fit. The
    /// AIRF horizon equals `estimator.lags`.
    pub estimator: EstimatorConfig,
}

impl Default for Protocol {
    fn default() -> Self {
        Protocol {
            dims: Dims { p1: 2, p2: 2, m: 1 },
            density: 0.6,
            hierarchical: false,
            samples: 500,
            system_order: 20,
            pole_radius: 0.95,
            noise_variance: 1.0,
            runs: 20,
            master_seed: DEFAULT_SEED,
            estimators: vec![Variant::K, Variant::S, Variant::SS],
            sim: SimOptions::default(),
            estimator: EstimatorConfig::default(),
        }
    }
}

/// Seed used whenever none is given.
pub const DEFAULT_SEED: u64 = 20_190_101;

impl Protocol {
    pub fn validate(&self) -> Result<()> {
        let _ = Dims::new(self.dims.p1, self.dims.p2, self.dims.m).map_err(|e| KronError::Config(e.to_string()))?;
        if self.runs == 0 {
            return Err(KronError::Config("runs must be at least 1".into()));
        }
        if self.estimators.is_empty() {
            return Err(KronError::Config("no estimators selected".into()));
        }
        if !(self.density > 0.0 && self.density <= 1.0) {
            return Err(KronError::Config(format!("density must lie in (0, 1], got {}", self.density)));
        }
        if !(self.noise_variance > 0.0) {
            return Err(KronError::Config("noise variance must be positive".into()));
        }
        if self.samples == 0 {
            return Err(KronError::Config("samples must be at least 1".into()));
        }
        for v in &self.estimators {
            let cfg = EstimatorConfig {
                variant: *v,
                ..self.estimator.clone()
            };
            cfg.validate(self.dims).map_err(|e| match e {
                KronError::Config(_) => e,
                other => KronError::Config(other.to_string()),
            })?;
        }
        Ok(())
    }

    /// Seed of run `run`, independent of the other runs.
    pub fn run_seed(&self, run: usize) -> u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(self.master_seed);
        rng.set_stream(run as u64);
        rng.next_u64()
    }
}

/// One fit of one estimator in one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run: usize,
    pub seed: u64,
    pub estimator: Variant,
    pub airf: f64,
    pub err: f64,
    pub nll: f64,
    pub converged: bool,
    pub dims: Dims,
    pub density: f64,
    pub samples: usize,
    pub lags: usize,
    /// Fit time including the shared noise and shape estimation.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub wall_time_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunFailure {
    pub run: usize,
    pub seed: u64,
    /// `None` when generating the data failed.
    pub estimator: Option<Variant>,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorSummary {
    pub estimator: Variant,
    pub succeeded: usize,
    pub failed: usize,
    pub airf: Option<MetricSummary>,
    pub err: Option<MetricSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Study {
    pub protocol: Protocol,
    pub records: Vec<RunRecord>,
    pub failures: Vec<RunFailure>,
    pub summary: Vec<EstimatorSummary>,
}

impl Study {
    pub fn records_for(&self, v: Variant) -> impl Iterator<Item = &RunRecord> {
        self.records.iter().filter(move |r| r.estimator == v)
    }

    pub fn summary_for(&self, v: Variant) -> Option<&EstimatorSummary> {
        self.summary.iter().find(|s| s.estimator == v)
    }
}

/// Generates the ground truth and dataset of one run.
pub fn generate_run(protocol: &Protocol, seed: u64) -> Result<(GroundTruth, crate::regress::Dataset)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (s_sup, s_sys, s_sim) = (rng.next_u64(), rng.next_u64(), rng.next_u64());
    let dims = protocol.dims;
    let support = random_support(dims, protocol.density, protocol.hierarchical, s_sup)?;
    let noise = NoiseModel::constant(dims.outputs(), protocol.noise_variance)?;
    let gt = random_system(&support, protocol.system_order, protocol.pole_radius, noise, s_sys)?;
    let data = simulate(&gt, protocol.samples, &protocol.sim, s_sim)?;
    Ok((gt, data))
}

type RunOutcome = (Vec<RunRecord>, Vec<RunFailure>);

fn execute_run(protocol: &Protocol, run: usize, record_timing: bool) -> RunOutcome {
    let seed = protocol.run_seed(run);
    let (gt, data) = match generate_run(protocol, seed) {
        Ok(v) => v,
        Err(e) => {
            return (
                Vec::new(),
                vec![RunFailure {
                    run,
                    seed,
                    estimator: None,
                    message: e.to_string(),
                }],
            )
        }
    };
    let truth_edges = gt.support.edges();
    let horizon = protocol.estimator.lags;
    let mut records = Vec::new();
    let mut failures = Vec::new();
    // noise and kernel shapes do not depend on the variant
    let start = Instant::now();
    let base = EstimatorConfig {
        variant: protocol.estimators[0],
        seed,
        ..protocol.estimator.clone()
    };
    let prep = match Prepared::new(&data, &base) {
        Ok(p) => p,
        Err(e) => {
            failures.push(RunFailure {
                run,
                seed,
                estimator: None,
                message: e.to_string(),
            });
            return (records, failures);
        }
    };
    let prep_time = start.elapsed().as_secs_f64();
    for &variant in &protocol.estimators {
        let cfg = EstimatorConfig { variant, ..base.clone() };
        let start = Instant::now();
        let outcome = fit_prepared(&prep, &cfg).and_then(|res| {
            let a = airf(&gt, &res.estimate, horizon)?;
            let e = err(&truth_edges, &res.edges)?;
            Ok((res, a, e))
        });
        let elapsed = prep_time + start.elapsed().as_secs_f64();
        match outcome {
            Ok((res, a, e)) => records.push(RunRecord {
                run,
                seed,
                estimator: variant,
                airf: a,
                err: e,
                nll: res.nll,
                converged: res.diagnostics.converged,
                dims: protocol.dims,
                density: protocol.density,
                samples: protocol.samples,
                lags: horizon,
                wall_time_s: record_timing.then_some(elapsed),
            }),
            Err(e) => failures.push(RunFailure {
                run,
                seed,
                estimator: Some(variant),
                message: e.to_string(),
            }),
        }
    }
    (records, failures)
}

/// Runs the study. Runs execute concurrently; records are ordered by run
/// index, then estimator order. Failed fits are reported, not fatal.
pub fn monte_carlo(protocol: &Protocol, record_timing: bool) -> Result<Study> {
    protocol.validate()?;
    let outcomes: Vec<RunOutcome> = (0..protocol.runs)
        .into_par_iter()
        .map(|run| execute_run(protocol, run, record_timing))
        .collect();
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for (r, f) in outcomes {
        records.extend(r);
        failures.extend(f);
    }
    for f in &failures {
        log::warn!("run {} (seed {}) failed: {}", f.run, f.seed, f.message);
    }
    let summary = summarize(protocol, &records, &failures);
    Ok(Study {
        protocol: protocol.clone(),
        records,
        failures,
        summary,
    })
}

fn summarize(protocol: &Protocol, records: &[RunRecord], failures: &[RunFailure]) -> Vec<EstimatorSummary> {
    protocol
        .estimators
        .iter()
        .map(|&v| {
            let own: Vec<&RunRecord> = records.iter().filter(|r| r.estimator == v).collect();
            let airf: Vec<f64> = own.iter().map(|r| r.airf).collect();
            let err: Vec<f64> = own.iter().map(|r| r.err).collect();
            let failed = failures
                .iter()
                .filter(|f| f.estimator.is_none_or(|e| e == v))
                .count();
            EstimatorSummary {
                estimator: v,
                succeeded: own.len(),
                failed,
                airf: MetricSummary::from_values(&airf),
                err: MetricSummary::from_values(&err),
            }
        })
        .collect()
}

/// One JSON record per line.
pub fn write_jsonl(path: impl AsRef<Path>, records: &[RunRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| KronError::io(path, e))
}

pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Vec<RunRecord>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| KronError::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(KronError::from))
        .collect()
}

/// Columns `estimator,metric,succeeded,failed,min,q1,median,q3,max`.
pub fn write_summary_csv(path: impl AsRef<Path>, summary: &[EstimatorSummary]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| KronError::Csv(e.to_string()))?;
    let csv_err = |e: csv::Error| KronError::Csv(e.to_string());
    w.write_record(["estimator", "metric", "succeeded", "failed", "min", "q1", "median", "q3", "max"])
        .map_err(csv_err)?;
    for s in summary {
        for (name, m) in [("airf", &s.airf), ("err", &s.err)] {
            let mut row = vec![
                s.estimator.name().to_string(),
                name.to_string(),
                s.succeeded.to_string(),
                s.failed.to_string(),
            ];
            match m {
                Some(m) => row.extend([m.min, m.q1, m.median, m.q3, m.max].iter().map(|v| v.to_string())),
                None => row.extend(std::iter::repeat_n("NaN".to_string(), 5)),
            }
            w.write_record(&row).map_err(csv_err)?;
        }
    }
    w.flush().map_err(|e| KronError::io(path, e))
}

/// Box-plot data for gnuplot: one whitespace-separated column per estimator,
/// one row per run, `NaN` where a fit failed. `metric` is `airf` or `err`.
pub fn write_gnuplot(path: impl AsRef<Path>, study: &Study, metric: &str) -> Result<()> {
    let pick: fn(&RunRecord) -> f64 = match metric {
        "airf" => |r| r.airf,
        "err" => |r| r.err,
        other => {
            return Err(KronError::InvalidArgument(format!("unknown metric {other}")));
        }
    };
    let path = path.as_ref();
    let mut out = Vec::new();
    let io = |e| KronError::io(path, e);
    let names: Vec<&str> = study.protocol.estimators.iter().map(|v| v.name()).collect();
    writeln!(out, "# {metric}: columns run {}", names.join(" ")).map_err(io)?;
    for run in 0..study.protocol.runs {
        write!(out, "{run}").map_err(io)?;
        for &v in &study.protocol.estimators {
            let value = study
                .records
                .iter()
                .find(|r| r.run == run && r.estimator == v)
                .map_or(f64::NAN, pick);
            write!(out, " {value}").map_err(io)?;
        }
        writeln!(out).map_err(io)?;
    }
    std::fs::write(path, out).map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn truth_from(g: Vec<DMatrix<f64>>, f: Vec<DMatrix<f64>>, dims: Dims) -> GroundTruth {
        GroundTruth {
            dims,
            g,
            f,
            support: NetworkSupport::full(dims),
            noise: NoiseModel::constant(dims.outputs(), 1.0).unwrap(),
            seed: 0,
            scale: 1.0,
        }
    }

    fn ramp(p: usize, cols: usize, lags: usize, phase: f64) -> Vec<DMatrix<f64>> {
        (0..lags)
            .map(|t| DMatrix::from_fn(p, cols, |r, c| ((t + 1) as f64 * 0.3 + phase + (r * 3 + c) as f64).sin()))
            .collect()
    }

    #[test]
    fn airf_identities() {
        let dims = Dims::new(1, 2, 1).unwrap();
        let gt = truth_from(ramp(2, 2, 10, 0.0), ramp(2, 1, 10, 1.0), dims);
        let exact = ImpulseEstimate {
            dims,
            g: gt.g.clone(),
            f: gt.f.clone(),
        };
        assert_eq!(airf(&gt, &exact, 10).unwrap(), 100.0);
        let mean = |seq: &[DMatrix<f64>]| {
            let m = seq.iter().fold(DMatrix::zeros(seq[0].nrows(), seq[0].ncols()), |a, b| a + b) / seq.len() as f64;
            vec![m; seq.len()]
        };
        let flat = ImpulseEstimate {
            dims,
            g: mean(&gt.g),
            f: mean(&gt.f),
        };
        assert!(airf(&gt, &flat, 10).unwrap().abs() < 1e-12);
        // half-right: perfect G, mean F -> (100 + 0) / 2
        let half = ImpulseEstimate {
            dims,
            g: gt.g.clone(),
            f: mean(&gt.f),
        };
        assert!((airf(&gt, &half, 10).unwrap() - 50.0).abs() < 1e-10);
    }

    #[test]
    fn airf_without_inputs_is_g_fit() {
        let dims = Dims::new(2, 1, 0).unwrap();
        let gt = truth_from(ramp(2, 2, 6, 0.0), vec![DMatrix::zeros(2, 0); 6], dims);
        let est = ImpulseEstimate {
            dims,
            g: ramp(2, 2, 6, 0.1),
            f: vec![DMatrix::zeros(2, 0); 6],
        };
        let direct = fit_score(&gt.g, &est.g, 6).unwrap();
        assert_eq!(airf(&gt, &est, 6).unwrap(), direct);
        // hand-evaluated fit for the same data
        let mut mean = DMatrix::zeros(2, 2);
        for m in &gt.g {
            mean += m;
        }
        mean /= 6.0;
        let num: f64 = gt.g.iter().zip(&est.g).map(|(a, b)| (a - b).norm_squared()).sum();
        let den: f64 = gt.g.iter().map(|a| (a - &mean).norm_squared()).sum();
        assert!((direct - 100.0 * (1.0 - (num / den).sqrt())).abs() < 1e-12);
    }

    #[test]
    fn airf_uses_horizon_and_zero_padding() {
        let dims = Dims::new(1, 1, 0).unwrap();
        let g: Vec<DMatrix<f64>> = (0..200).map(|t| DMatrix::from_element(1, 1, 0.8f64.powi(t as i32))).collect();
        let gt = truth_from(g.clone(), vec![DMatrix::zeros(1, 0); 200], dims);
        let est = ImpulseEstimate {
            dims,
            g: g[..3].to_vec(),
            f: vec![DMatrix::zeros(1, 0); 3],
        };
        let score = airf(&gt, &est, 3).unwrap();
        assert_eq!(score, 100.0);
        assert!(airf(&gt, &est, 10).unwrap() < 100.0);
    }

    #[test]
    fn constant_truth_is_an_error() {
        let dims = Dims::new(1, 1, 0).unwrap();
        let gt = truth_from(vec![DMatrix::from_element(1, 1, 0.5); 4], vec![DMatrix::zeros(1, 0); 4], dims);
        let est = ImpulseEstimate::zeros(dims, 4);
        assert!(airf(&gt, &est, 4).is_err());
    }

    #[test]
    fn err_identities() {
        let dims = Dims::new(2, 2, 0).unwrap();
        let full = NetworkSupport::full(dims);
        assert_eq!(err_support(&full, &full).unwrap(), 0.0);
        let empty = NetworkSupport::empty(dims);
        assert_eq!(err_support(&full, &empty).unwrap(), 1.0);
        // dense truth, estimate missing one entry of the Kronecker product
        let mut est = full.edges();
        est.g[1][2] = 0;
        assert_eq!(err(&full.edges(), &est).unwrap(), 1.0 / 16.0);
    }

    #[test]
    fn err_with_inputs_weights_both_halves() {
        let dims = Dims::new(1, 2, 1).unwrap();
        let full = NetworkSupport::full(dims).edges();
        let mut est = full.clone();
        est.f[0][0] = 0;
        assert_eq!(err(&full, &est).unwrap(), 1.0 / 4.0);
        est.g[0][0] = 0;
        assert_eq!(err(&full, &est).unwrap(), 1.0 / 8.0 + 1.0 / 4.0);
        let other = NetworkSupport::full(Dims::new(2, 1, 1).unwrap());
        assert!(err_support(&NetworkSupport::full(dims), &other).is_err());
    }

    #[test]
    fn type7_quantiles() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile_type7(&v, 0.5), 2.5);
        assert_eq!(quantile_type7(&v, 0.25), 1.75);
        assert_eq!(quantile_type7(&v, 0.75), 3.25);
        assert_eq!(quantile_type7(&[7.0], 0.3), 7.0);
    }

    fn mask_strategy(p: usize, m: usize) -> impl Strategy<Value = EdgeMask> {
        (
            prop::collection::vec(prop::collection::vec(0u8..2, p), p),
            prop::collection::vec(prop::collection::vec(0u8..2, m), p),
        )
            .prop_map(|(g, f)| EdgeMask { g, f })
    }

    proptest! {
        #[test]
        fn err_is_a_metric(a in mask_strategy(4, 2), b in mask_strategy(4, 2), c in mask_strategy(4, 2)) {
            let ab = err(&a, &b).unwrap();
            prop_assert_eq!(ab, err(&b, &a).unwrap());
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert!(ab <= err(&a, &c).unwrap() + err(&c, &b).unwrap() + 1e-15);
            prop_assert_eq!(err(&a, &a).unwrap(), 0.0);
        }

        #[test]
        fn airf_is_orthogonally_invariant(angle in 0.0f64..6.3, phase in 0.0f64..3.0, noise in 0.01f64..1.0) {
            let dims = Dims::new(1, 2, 1).unwrap();
            let gt_g = ramp(2, 2, 8, 0.0);
            let gt_f = ramp(2, 1, 8, 0.5);
            let est_g: Vec<_> = ramp(2, 2, 8, phase).iter().zip(&gt_g).map(|(a, b)| b + a * noise).collect();
            let est_f: Vec<_> = ramp(2, 1, 8, phase).iter().zip(&gt_f).map(|(a, b)| b + a * noise).collect();
            let (s, c) = angle.sin_cos();
            let q = DMatrix::from_row_slice(2, 2, &[c, -s, s, c]);
            let rot = |seq: &[DMatrix<f64>]| -> Vec<DMatrix<f64>> { seq.iter().map(|m| &q * m).collect() };
            let base = airf(
                &truth_from(gt_g.clone(), gt_f.clone(), dims),
                &ImpulseEstimate { dims, g: est_g.clone(), f: est_f.clone() },
                8,
            ).unwrap();
            let rotated = airf(
                &truth_from(rot(&gt_g), rot(&gt_f), dims),
                &ImpulseEstimate { dims, g: rot(&est_g), f: rot(&est_f) },
                8,
            ).unwrap();
            prop_assert!((base - rotated).abs() < 1e-9);
            prop_assert!(base <= 100.0);
        }
    }

    fn tiny_protocol() -> Protocol {
        Protocol {
            dims: Dims::new(1, 1, 1).unwrap(),
            samples: 200,
            runs: 2,
            estimators: vec![Variant::K, Variant::SS],
            estimator: EstimatorConfig {
                lags: 10,
                restarts: 1,
                shape_grid: crate::hyperopt::ShapeGrid::Coarse,
                ..EstimatorConfig::default()
            },
            ..Protocol::default()
        }
    }

    #[test]
    fn trivial_study_defines_both_metrics() {
        let protocol = Protocol {
            runs: 1,
            estimators: vec![Variant::K],
            ..tiny_protocol()
        };
        let study = monte_carlo(&protocol, false).unwrap();
        assert_eq!(study.records.len(), 1);
        let r = &study.records[0];
        assert!(r.airf.is_finite() && r.airf <= 100.0);
        assert!((0.0..=1.0).contains(&r.err));
        assert!(r.wall_time_s.is_none());
    }

    #[test]
    fn studies_are_deterministic() {
        let protocol = tiny_protocol();
        let a = monte_carlo(&protocol, false).unwrap();
        let b = monte_carlo(&protocol, false).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.records.len(), 4);
        let dir = tempfile::tempdir().unwrap();
        let (pa, pb) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
        write_jsonl(&pa, &a.records).unwrap();
        write_jsonl(&pb, &b.records).unwrap();
        assert_eq!(std::fs::read(&pa).unwrap(), std::fs::read(&pb).unwrap());
        assert_eq!(read_jsonl(&pa).unwrap(), a.records);
        write_summary_csv(dir.path().join("s.csv"), &a.summary).unwrap();
        write_gnuplot(dir.path().join("airf.dat"), &a, "airf").unwrap();
        let dat = std::fs::read_to_string(dir.path().join("airf.dat")).unwrap();
        assert_eq!(dat.lines().count(), 3);
    }

    #[test]
    fn h_with_inputs_is_rejected_up_front() {
        let protocol = Protocol {
            estimators: vec![Variant::H],
            ..tiny_protocol()
        };
        assert!(matches!(monte_carlo(&protocol, false), Err(KronError::Config(_))));
    }

    #[test]
    fn run_seeds_are_distinct() {
        let p = Protocol::default();
        let seeds: std::collections::HashSet<u64> = (0..100).map(|r| p.run_seed(r)).collect();
        assert_eq!(seeds.len(), 100);
    }
}
