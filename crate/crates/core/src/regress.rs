//! Datasets and the truncated Toeplitz regressors built from them.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dims::Dims;
use crate::error::{KronError, Result};

/// Measured trajectories. Row `t` of `y` is the output at sample `t + 1`,
/// columns ordered by channel `(h, k)`; `u` has one column per input.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    y: DMatrix<f64>,
    u: DMatrix<f64>,
    dims: Dims,
}

impl Dataset {
    pub fn new(y: DMatrix<f64>, u: DMatrix<f64>, dims: Dims) -> Result<Self> {
        if y.nrows() == 0 {
            return Err(KronError::InvalidArgument("dataset has no samples".into()));
        }
        if y.ncols() != dims.outputs() {
            return Err(KronError::Dimension(format!(
                "output matrix has {} columns, {dims} needs {}",
                y.ncols(),
                dims.outputs()
            )));
        }
        if u.ncols() != dims.m || u.nrows() != y.nrows() {
            return Err(KronError::Dimension(format!(
                "input matrix is {}x{}, expected {}x{}",
                u.nrows(),
                u.ncols(),
                y.nrows(),
                dims.m
            )));
        }
        if let Some(v) = y.iter().chain(u.iter()).find(|v| !v.is_finite()) {
            return Err(KronError::InvalidArgument(format!(
                "dataset contains a non-finite value ({v})"
            )));
        }
        Ok(Dataset { y, u, dims })
    }

    pub fn y(&self) -> &DMatrix<f64> {
        &self.y
    }

    pub fn u(&self) -> &DMatrix<f64> {
        &self.u
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    /// Sample count `N`.
    pub fn len(&self) -> usize {
        self.y.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.y.nrows() == 0
    }

    /// Subtracts the per-channel sample mean from every output and input.
    pub fn demeaned(&self) -> Dataset {
        let center = |m: &DMatrix<f64>| {
            let mut out = m.clone();
            for mut col in out.column_iter_mut() {
                let mean = col.mean();
                col.add_scalar_mut(-mean);
            }
            out
        };
        Dataset {
            y: center(&self.y),
            u: center(&self.u),
            dims: self.dims,
        }
    }

    /// Divides every column by its root-mean-square value. Returns the
    /// normalized dataset and the per-column scale factors (outputs, inputs).
    pub fn normalized(&self) -> (Dataset, Vec<f64>, Vec<f64>) {
        let scale = |m: &DMatrix<f64>| -> (DMatrix<f64>, Vec<f64>) {
            let mut out = m.clone();
            let mut factors = Vec::with_capacity(m.ncols());
            for mut col in out.column_iter_mut() {
                let rms = (col.norm_squared() / col.len() as f64).sqrt();
                let c = if rms > 0.0 && rms.is_finite() { rms } else { 1.0 };
                col.unscale_mut(c);
                factors.push(c);
            }
            (out, factors)
        };
        let (y, ys) = scale(&self.y);
        let (u, us) = scale(&self.u);
        (
            Dataset {
                y,
                u,
                dims: self.dims,
            },
            ys,
            us,
        )
    }
}

/// How lagged regressors are formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RegressionMode {
    #[default]
    Standard,
    /// Periodic series folded into super-samples: channels of earlier
    /// positions inside the same super-sample enter without delay.
    SpatioTemporal,
}

/// Regressors shared by every output channel of one module (in standard
/// mode there is a single group).
#[derive(Debug, Clone)]
pub struct RegressorGroup {
    /// `rows x (p * T)` lagged outputs, blocks ordered by input channel.
    pub a: DMatrix<f64>,
    /// `rows x (m * T)` lagged inputs.
    pub b: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct RegressorSet {
    mode: RegressionMode,
    lags: usize,
    dims: Dims,
    groups: Vec<RegressorGroup>,
    y_plus: Vec<DVector<f64>>,
}

impl RegressorSet {
    pub fn mode(&self) -> RegressionMode {
        self.mode
    }

    /// Truncation length `T`.
    pub fn lags(&self) -> usize {
        self.lags
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    /// Number of regression rows (samples minus discarded transient rows).
    pub fn rows(&self) -> usize {
        self.y_plus[0].len()
    }

    pub fn groups(&self) -> &[RegressorGroup] {
        &self.groups
    }

    pub fn group_of(&self, channel: usize) -> usize {
        match self.mode {
            RegressionMode::Standard => 0,
            RegressionMode::SpatioTemporal => self.dims.split_channel(channel).0,
        }
    }

    pub fn a(&self, channel: usize) -> &DMatrix<f64> {
        &self.groups[self.group_of(channel)].a
    }

    pub fn b(&self, channel: usize) -> &DMatrix<f64> {
        &self.groups[self.group_of(channel)].b
    }

    /// Time-reversed measurements of one channel, `y(N)` first.
    pub fn y_plus(&self, channel: usize) -> &DVector<f64> {
        &self.y_plus[channel]
    }

    /// Coefficients per channel: `(p + m) * T`.
    pub fn coefficients(&self) -> usize {
        (self.dims.outputs() + self.dims.m) * self.lags
    }
}

/// Builds the Toeplitz regressors with zero initial conditions.
///
/// Row `s` (0-based) predicts sample `N - s`; column `b * T + (n - 1)` holds
/// source `b` delayed by `n` samples, or by `n - 1` for the undelayed blocks
/// of spatio-temporal mode. The `discard` earliest predictions are dropped.
pub fn build_regressors(
    data: &Dataset,
    lags: usize,
    mode: RegressionMode,
    discard: usize,
) -> Result<RegressorSet> {
    if lags == 0 {
        return Err(KronError::InvalidArgument(
            "truncation length must be at least 1".into(),
        ));
    }
    let n = data.len();
    if discard >= n {
        return Err(KronError::InvalidArgument(format!(
            "cannot discard {discard} of {n} rows"
        )));
    }
    let dims = data.dims();
    let p = dims.outputs();
    let m = dims.m;
    let rows = n - discard;
    if mode == RegressionMode::SpatioTemporal && !m.is_multiple_of(dims.p1) {
        return Err(KronError::Config(format!(
            "spatio-temporal inputs must fold evenly: m={m} is not a multiple of p1={}",
            dims.p1
        )));
    }

    // value of `series[:, col]` at 0-based time `tau - delay`, zero before the start
    let lagged = |series: &DMatrix<f64>, col: usize, tau: usize, delay: usize| -> f64 {
        if delay <= tau {
            series[(tau - delay, col)]
        } else {
            0.0
        }
    };

    let group_count = match mode {
        RegressionMode::Standard => 1,
        RegressionMode::SpatioTemporal => dims.p1,
    };
    let inputs_per_position = if m > 0 { m / dims.p1 } else { 0 };
    let mut groups = Vec::with_capacity(group_count);
    for g in 0..group_count {
        let mut a = DMatrix::zeros(rows, p * lags);
        let mut b = DMatrix::zeros(rows, m * lags);
        for s in 0..rows {
            let tau = n - 1 - s;
            for src in 0..p {
                let undelayed =
                    mode == RegressionMode::SpatioTemporal && dims.split_channel(src).0 < g;
                for lag in 1..=lags {
                    let delay = if undelayed { lag - 1 } else { lag };
                    a[(s, src * lags + lag - 1)] = lagged(data.y(), src, tau, delay);
                }
            }
            for i in 0..m {
                let undelayed =
                    mode == RegressionMode::SpatioTemporal && i / inputs_per_position < g;
                for lag in 1..=lags {
                    let delay = if undelayed { lag - 1 } else { lag };
                    b[(s, i * lags + lag - 1)] = lagged(data.u(), i, tau, delay);
                }
            }
        }
        groups.push(RegressorGroup { a, b });
    }

    let y_plus = (0..p)
        .map(|c| DVector::from_fn(rows, |s, _| data.y()[(n - 1 - s, c)]))
        .collect();

    Ok(RegressorSet {
        mode,
        lags,
        dims,
        groups,
        y_plus,
    })
}

/// Folds a series with period `p1` into super-samples:
/// channel `(h, k)` at super-sample `t` is `x[t * p1 + h, k]`, and input
/// `h * m_raw + i` is `w[t * p1 + h, i]`. A trailing partial period is
/// dropped with a warning.
pub fn fold_series(x: &DMatrix<f64>, w: Option<&DMatrix<f64>>, p1: usize) -> Result<Dataset> {
    if p1 == 0 {
        return Err(KronError::InvalidArgument("period p1 must be positive".into()));
    }
    let samples = x.nrows();
    let p2 = x.ncols();
    let n = samples / p1;
    if n == 0 {
        return Err(KronError::InvalidArgument(format!(
            "series of length {samples} is shorter than one period ({p1})"
        )));
    }
    if !samples.is_multiple_of(p1) {
        warn!(
            "series length {samples} is not a multiple of {p1}; dropping the last {} samples",
            samples % p1
        );
    }
    let m_raw = w.map_or(0, |w| w.ncols());
    if let Some(w) = w {
        if w.nrows() != samples {
            return Err(KronError::Dimension(format!(
                "input series has {} samples, output series {samples}",
                w.nrows()
            )));
        }
    }
    let dims = Dims::new(p1, p2, p1 * m_raw)?;
    let y = DMatrix::from_fn(n, p1 * p2, |t, c| {
        let (h, k) = (c / p2, c % p2);
        x[(t * p1 + h, k)]
    });
    let u = match w {
        Some(w) => DMatrix::from_fn(n, p1 * m_raw, |t, c| {
            let (h, i) = (c / m_raw, c % m_raw);
            w[(t * p1 + h, i)]
        }),
        None => DMatrix::zeros(n, 0),
    };
    Dataset::new(y, u, dims)
}

/// Reads a dataset with header `t, y_1..y_p, u_1..u_m`.
pub fn load_dataset_csv(path: impl AsRef<Path>, dims: Dims) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| KronError::io(path, e))?;
    read_dataset_csv(file, dims)
}

pub fn read_dataset_csv<R: std::io::Read>(reader: R, dims: Dims) -> Result<Dataset> {
    let p = dims.outputs();
    let width = 1 + p + dims.m;
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header = rdr.headers().map_err(|e| KronError::Csv(e.to_string()))?;
    if header.len() != width {
        return Err(KronError::Csv(format!(
            "header has {} columns, {dims} needs {width} (t, {p} outputs, {} inputs)",
            header.len(),
            dims.m
        )));
    }
    let mut ys = Vec::new();
    let mut us = Vec::new();
    let mut last_t = f64::NEG_INFINITY;
    for (r, record) in rdr.records().enumerate() {
        let row = r + 1;
        let record = record.map_err(|e| KronError::Csv(format!("row {row}: {e}")))?;
        if record.len() != width {
            return Err(KronError::Csv(format!(
                "row {row} has {} columns, expected {width}",
                record.len()
            )));
        }
        let mut values = Vec::with_capacity(width);
        for (c, cell) in record.iter().enumerate() {
            if cell.is_empty() {
                return Err(KronError::CsvCell {
                    row,
                    column: c + 1,
                    message: "missing value".into(),
                });
            }
            let v: f64 = cell.parse().map_err(|_| KronError::CsvCell {
                row,
                column: c + 1,
                message: format!("not a number: {cell:?}"),
            })?;
            if !v.is_finite() {
                return Err(KronError::CsvCell {
                    row,
                    column: c + 1,
                    message: format!("non-finite value {cell:?}"),
                });
            }
            values.push(v);
        }
        if values[0] <= last_t {
            return Err(KronError::CsvCell {
                row,
                column: 1,
                message: "rows must be sorted by strictly increasing t".into(),
            });
        }
        last_t = values[0];
        ys.extend_from_slice(&values[1..1 + p]);
        us.extend_from_slice(&values[1 + p..]);
    }
    let n = ys.len() / p;
    if n == 0 {
        return Err(KronError::Csv("file contains no data rows".into()));
    }
    Dataset::new(
        DMatrix::from_row_slice(n, p, &ys),
        DMatrix::from_row_slice(n, dims.m, &us),
        dims,
    )
}

pub fn write_dataset_csv(path: impl AsRef<Path>, data: &Dataset) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| KronError::io(path, e))?;
    let mut out = BufWriter::new(file);
    write_dataset(&mut out, data).map_err(|e| KronError::io(path, e))
}

fn write_dataset<W: Write>(out: &mut W, data: &Dataset) -> std::io::Result<()> {
    let p = data.dims().outputs();
    let mut header = vec!["t".to_string()];
    header.extend((1..=p).map(|c| format!("y_{c}")));
    header.extend((1..=data.dims().m).map(|i| format!("u_{i}")));
    writeln!(out, "{}", header.join(","))?;
    for t in 0..data.len() {
        write!(out, "{}", t + 1)?;
        for c in 0..p {
            // Display for f64 is the shortest representation that round-trips.
            write!(out, ",{}", data.y()[(t, c)])?;
        }
        for i in 0..data.dims().m {
            write!(out, ",{}", data.u()[(t, i)])?;
        }
        writeln!(out)?;
    }
    out.flush()
}

pub fn read_dims_json(path: impl AsRef<Path>) -> Result<Dims> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| KronError::io(path, e))?;
    let dims: Dims = serde_json::from_str(&text)?;
    Dims::new(dims.p1, dims.p2, dims.m)
}

pub fn write_dims_json(path: impl AsRef<Path>, dims: Dims) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string(&dims)?;
    std::fs::write(path, text + "\n").map_err(|e| KronError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dataset(y: &[f64], p: usize, u: &[f64], dims: Dims) -> Dataset {
        let n = y.len() / p;
        Dataset::new(
            DMatrix::from_row_slice(n, p, y),
            DMatrix::from_row_slice(n, dims.m, u),
            dims,
        )
        .unwrap()
    }

    #[test]
    fn csv_three_rows() {
        let text = "t,y_1,u_1\n1,0.5,1\n2,0.25,0\n3,-1e-3,2\n";
        let d = read_dataset_csv(text.as_bytes(), Dims::new(1, 1, 1).unwrap()).unwrap();
        assert_eq!(d.len(), 3);
        assert_eq!(d.y()[(2, 0)], -1e-3);
        assert_eq!(d.u()[(2, 0)], 2.0);
    }

    #[test]
    fn csv_bad_cell_names_position() {
        let text = "t,y_1,u_1\n1,0.5,1\n2,abc,0\n";
        match read_dataset_csv(text.as_bytes(), Dims::new(1, 1, 1).unwrap()) {
            Err(KronError::CsvCell { row, column, .. }) => assert_eq!((row, column), (2, 2)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn csv_rejects_nan_missing_and_width() {
        let dims = Dims::new(1, 1, 1).unwrap();
        assert!(read_dataset_csv("t,y_1,u_1\n1,NaN,1\n".as_bytes(), dims).is_err());
        assert!(read_dataset_csv("t,y_1,u_1\n1,,1\n".as_bytes(), dims).is_err());
        assert!(read_dataset_csv("t,y_1\n1,2\n".as_bytes(), dims).is_err());
        assert!(read_dataset_csv("t,y_1,u_1\n2,1,1\n1,1,1\n".as_bytes(), dims).is_err());
    }

    #[test]
    fn fold_reindexes() {
        let x = DMatrix::from_row_slice(4, 1, &[1.0, 2.0, 3.0, 4.0]);
        let d = fold_series(&x, None, 2).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.y(), &DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let x5 = DMatrix::from_row_slice(5, 1, &[1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(fold_series(&x5, None, 2).unwrap().len(), 2);
        assert!(fold_series(&x, None, 0).is_err());
    }

    #[test]
    fn fold_daily_profile() {
        let x = DMatrix::from_fn(12000, 4, |r, c| (r * 4 + c) as f64);
        let d = fold_series(&x, None, 24).unwrap();
        assert_eq!(d.len(), 500);
        assert_eq!(d.dims(), Dims::new(24, 4, 0).unwrap());
        // channel (h, k) at t is x[t * 24 + h, k]
        assert_eq!(d.y()[(3, d.dims().channel(5, 2))], x[(3 * 24 + 5, 2)]);
    }

    #[test]
    fn fold_inputs() {
        let x = DMatrix::from_fn(6, 1, |r, _| r as f64);
        let w = DMatrix::from_fn(6, 1, |r, _| 10.0 + r as f64);
        let d = fold_series(&x, Some(&w), 3).unwrap();
        assert_eq!(d.dims(), Dims::new(3, 1, 3).unwrap());
        assert_eq!(d.u()[(1, 2)], 15.0);
    }

    #[test]
    fn toeplitz_hand_unrolled() {
        let dims = Dims::new(1, 1, 0).unwrap();
        let (a, b, c) = (1.5, -2.0, 4.0);
        let d = dataset(&[a, b, c], 1, &[], dims);
        let regs = build_regressors(&d, 2, RegressionMode::Standard, 0).unwrap();
        let am = regs.a(0);
        assert_eq!(am.row(0).iter().copied().collect::<Vec<_>>(), vec![b, a]);
        assert_eq!(am.row(1).iter().copied().collect::<Vec<_>>(), vec![a, 0.0]);
        assert_eq!(am.row(2).iter().copied().collect::<Vec<_>>(), vec![0.0, 0.0]);
        assert_eq!(regs.y_plus(0).as_slice(), &[c, b, a]);
        assert!(build_regressors(&d, 0, RegressionMode::Standard, 0).is_err());
    }

    #[test]
    fn standard_mode_shares_regressors() {
        let dims = Dims::new(2, 2, 1).unwrap();
        let y: Vec<f64> = (0..40).map(|v| (v as f64 * 0.37).sin()).collect();
        let u: Vec<f64> = (0..10).map(|v| v as f64).collect();
        let d = dataset(&y, 4, &u, dims);
        let regs = build_regressors(&d, 3, RegressionMode::Standard, 0).unwrap();
        for c in 1..4 {
            assert_eq!(regs.a(c), regs.a(0));
            assert_eq!(regs.b(c), regs.b(0));
        }
    }

    #[test]
    fn discard_drops_earliest_rows() {
        let dims = Dims::new(1, 1, 0).unwrap();
        let d = dataset(&[1.0, 2.0, 3.0, 4.0], 1, &[], dims);
        let regs = build_regressors(&d, 2, RegressionMode::Standard, 2).unwrap();
        assert_eq!(regs.rows(), 2);
        assert_eq!(regs.y_plus(0).as_slice(), &[4.0, 3.0]);
        assert_eq!(regs.a(0).row(1).iter().copied().collect::<Vec<_>>(), vec![2.0, 1.0]);
    }

    #[test]
    fn spatio_temporal_lag_zero_for_earlier_positions() {
        // x = [x1..x4] folded with p1 = 2: y(1) = (x1, x2), y(2) = (x3, x4)
        let x = DMatrix::from_row_slice(4, 1, &[1.0, 2.0, 3.0, 4.0]);
        let d = fold_series(&x, None, 2).unwrap();
        let regs = build_regressors(&d, 2, RegressionMode::SpatioTemporal, 0).unwrap();
        // position h = 0 (x at odd samples): all sources delayed
        let a0 = regs.a(0);
        assert_eq!(a0.row(0).iter().copied().collect::<Vec<_>>(), vec![1.0, 0.0, 2.0, 0.0]);
        // position h = 1 predicting y_2(2) = x4: source channel 0 undelayed (x3)
        let a1 = regs.a(1);
        assert_eq!(a1.row(0).iter().copied().collect::<Vec<_>>(), vec![3.0, 1.0, 2.0, 0.0]);
        assert_eq!(a1.row(1).iter().copied().collect::<Vec<_>>(), vec![1.0, 0.0, 0.0, 0.0]);
    }

    /// Direct convolution `yhat(t) = sum_tau G_tau y(t - tau) + F_tau u(t - tau)`.
    fn convolve(d: &Dataset, theta_g: &[f64], theta_f: &[f64], channel: usize, lags: usize) -> Vec<f64> {
        let p = d.dims().outputs();
        let n = d.len();
        (0..n)
            .map(|t| {
                let mut acc = 0.0;
                for src in 0..p {
                    for tau in 1..=lags {
                        if t >= tau {
                            acc += theta_g[src * lags + tau - 1] * d.y()[(t - tau, src)];
                        }
                    }
                }
                for i in 0..d.dims().m {
                    for tau in 1..=lags {
                        if t >= tau {
                            acc += theta_f[i * lags + tau - 1] * d.u()[(t - tau, i)];
                        }
                    }
                }
                let _ = channel;
                acc
            })
            .rev()
            .collect()
    }

    proptest! {
        #[test]
        fn predictor_matches_convolution(
            seed in 0u64..1000,
            lags in 1usize..5,
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let dims = Dims::new(2, 1, 1).unwrap();
            let n = 12;
            let y: Vec<f64> = (0..n * 2).map(|_| rng.random_range(-1.0..1.0)).collect();
            let u: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let d = dataset(&y, 2, &u, dims);
            let regs = build_regressors(&d, lags, RegressionMode::Standard, 0).unwrap();
            let tg: Vec<f64> = (0..2 * lags).map(|_| rng.random_range(-1.0..1.0)).collect();
            let tf: Vec<f64> = (0..lags).map(|_| rng.random_range(-1.0..1.0)).collect();
            let pred = regs.a(0) * DVector::from_row_slice(&tg) + regs.b(0) * DVector::from_row_slice(&tf);
            let want = convolve(&d, &tg, &tf, 0, lags);
            for (p, w) in pred.iter().zip(&want) {
                prop_assert!((p - w).abs() < 1e-12);
            }
        }

        #[test]
        fn csv_round_trip(values in proptest::collection::vec(-1e6f64..1e6, 6)) {
            let dims = Dims::new(1, 2, 1).unwrap();
            let d = dataset(&values[..4], 2, &values[4..], dims);
            let mut buf = Vec::new();
            write_dataset(&mut buf, &d).unwrap();
            let back = read_dataset_csv(buf.as_slice(), dims).unwrap();
            prop_assert_eq!(back, d);
        }
    }

    #[test]
    fn strict_causality() {
        let dims = Dims::new(1, 1, 0).unwrap();
        let y: Vec<f64> = (1..=6).map(|v| v as f64).collect();
        let d = dataset(&y, 1, &[], dims);
        let regs = build_regressors(&d, 6, RegressionMode::Standard, 0).unwrap();
        // row predicting y(N) never contains y(N)
        assert!(regs.a(0).row(0).iter().all(|&v| v != 6.0));
    }
}
