//! File formats: fit reports, binary coefficient dumps, ground-truth
//! archives and DOT network graphs.
//!
//! Binary dumps start with one JSON header line
//! `{"T":..,"p1":..,"p2":..,"m":..,"layout":"t-major"}` followed by
//! little-endian `f64` values: for each lag `t = 1..T`, `G_t` row-major
//! (`p x p`), then `F_t` row-major (`p x m`).

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::dims::Dims;
use crate::error::{KronError, Result};
use crate::hyperopt::{EdgeMask, FitDiagnostics, FitResult, NetworkSupport, ShapeEstimate};
use crate::kernel::{KroneckerScales, Variant};
use crate::likelihood::{ImpulseEstimate, NoiseModel};
use crate::netgen::GroundTruth;

/// JSON view of a [`FitResult`]; coefficients go to the binary dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitReport {
    pub variant: Variant,
    pub dims: Dims,
    pub lags: usize,
    pub nll: f64,
    pub params: Vec<f64>,
    pub kronecker: Option<KroneckerScales>,
    pub support: Option<NetworkSupport>,
    pub edges: EdgeMask,
    pub noise: Vec<f64>,
    pub shapes: ShapeEstimate,
    pub output_scale: Vec<f64>,
    pub input_scale: Vec<f64>,
    pub diagnostics: FitDiagnostics,
}

impl From<&FitResult> for FitReport {
    fn from(r: &FitResult) -> Self {
        FitReport {
            variant: r.variant,
            dims: r.dims,
            lags: r.estimate.lags(),
            nll: r.nll,
            params: r.params.clone(),
            kronecker: r.kronecker.clone(),
            support: r.support.clone(),
            edges: r.edges.clone(),
            noise: r.noise.sigma2().to_vec(),
            shapes: r.shapes,
            output_scale: r.output_scale.clone(),
            input_scale: r.input_scale.clone(),
            diagnostics: r.diagnostics.clone(),
        }
    }
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| KronError::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| KronError::io(path, e))
}

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_file(path.as_ref(), text)
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    Ok(serde_json::from_slice(&read_file(path.as_ref())?)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DumpHeader {
    #[serde(rename = "T")]
    lags: usize,
    p1: usize,
    p2: usize,
    m: usize,
    layout: Layout,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
enum Layout {
    #[serde(rename = "t-major")]
    TMajor,
}

/// Encodes coefficient sequences in the binary dump format.
pub fn encode_coefficients(dims: Dims, g: &[DMatrix<f64>], f: &[DMatrix<f64>]) -> Result<Vec<u8>> {
    let p = dims.outputs();
    if g.len() != f.len()
        || g.iter().any(|m| m.shape() != (p, p))
        || f.iter().any(|m| m.shape() != (p, dims.m))
    {
        return Err(KronError::Dimension("coefficients do not match dims".into()));
    }
    let header = DumpHeader {
        lags: g.len(),
        p1: dims.p1,
        p2: dims.p2,
        m: dims.m,
        layout: Layout::TMajor,
    };
    let mut out = serde_json::to_vec(&header)?;
    out.push(b'\n');
    out.reserve(8 * g.len() * p * (p + dims.m));
    for (gt, ft) in g.iter().zip(f) {
        for mat in [gt, ft] {
            for r in 0..mat.nrows() {
                for c in 0..mat.ncols() {
                    out.extend_from_slice(&mat[(r, c)].to_le_bytes());
                }
            }
        }
    }
    Ok(out)
}

type Coefficients = (Dims, Vec<DMatrix<f64>>, Vec<DMatrix<f64>>);

/// Inverse of [`encode_coefficients`].
pub fn decode_coefficients(bytes: &[u8]) -> Result<Coefficients> {
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| KronError::InvalidArgument("binary dump lacks a header line".into()))?;
    let header: DumpHeader = serde_json::from_slice(&bytes[..newline])?;
    let dims = Dims::new(header.p1, header.p2, header.m)?;
    let p = dims.outputs();
    let body = &bytes[newline + 1..];
    let expected = 8 * header.lags * p * (p + dims.m);
    if body.len() != expected {
        return Err(KronError::Dimension(format!(
            "binary dump holds {} bytes, header implies {expected}",
            body.len()
        )));
    }
    let mut values = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
    let mut read = |rows: usize, cols: usize| {
        let mut m = DMatrix::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                m[(r, c)] = values.next().expect("length checked");
            }
        }
        m
    };
    let mut g = Vec::with_capacity(header.lags);
    let mut f = Vec::with_capacity(header.lags);
    for _ in 0..header.lags {
        g.push(read(p, p));
        f.push(read(p, dims.m));
    }
    Ok((dims, g, f))
}

pub fn write_impulse(path: impl AsRef<Path>, est: &ImpulseEstimate) -> Result<()> {
    write_file(path.as_ref(), encode_coefficients(est.dims, &est.g, &est.f)?)
}

pub fn read_impulse(path: impl AsRef<Path>) -> Result<ImpulseEstimate> {
    let (dims, g, f) = decode_coefficients(&read_file(path.as_ref())?)?;
    Ok(ImpulseEstimate { dims, g, f })
}

/// Reference from `truth.json` to its coefficient dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruthHeader {
    pub dims: Dims,
    pub lags: usize,
    pub seed: u64,
    pub scale: f64,
    pub support: NetworkSupport,
    pub noise: Vec<f64>,
    /// Binary dump, relative to the directory of the JSON file.
    pub coefficients: String,
}

/// Writes `<stem>.json` and `<stem>.bin` into `dir`.
pub fn write_truth(dir: impl AsRef<Path>, stem: &str, gt: &GroundTruth) -> Result<()> {
    let dir = dir.as_ref();
    let bin = format!("{stem}.bin");
    write_file(&dir.join(&bin), encode_coefficients(gt.dims, &gt.g, &gt.f)?)?;
    let header = TruthHeader {
        dims: gt.dims,
        lags: gt.lags(),
        seed: gt.seed,
        scale: gt.scale,
        support: gt.support.clone(),
        noise: gt.noise.sigma2().to_vec(),
        coefficients: bin,
    };
    write_json(dir.join(format!("{stem}.json")), &header)
}

pub fn read_truth(json_path: impl AsRef<Path>) -> Result<GroundTruth> {
    let json_path = json_path.as_ref();
    let header: TruthHeader = read_json(json_path)?;
    let bin = json_path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(&header.coefficients);
    let (dims, g, f) = decode_coefficients(&read_file(&bin)?)?;
    if dims != header.dims || g.len() != header.lags {
        return Err(KronError::Dimension(format!(
            "{} does not match {}",
            bin.display(),
            json_path.display()
        )));
    }
    header.support.check(dims)?;
    Ok(GroundTruth {
        dims,
        g,
        f,
        support: header.support,
        noise: NoiseModel::new(header.noise)?,
        seed: header.seed,
        scale: header.scale,
    })
}

/// Directed graph of an edge mask: one cluster per module holding its
/// `p2` nodes, input nodes outside the clusters, an arrow `j -> h` per
/// nonzero block from source `j` to target `h`.
pub fn support_dot(dims: Dims, edges: &EdgeMask) -> Result<String> {
    let p = dims.outputs();
    if edges.outputs() != p || edges.g.iter().any(|r| r.len() != p) || edges.f.iter().any(|r| r.len() != dims.m) {
        return Err(KronError::Dimension("edge mask does not match dims".into()));
    }
    let node = |c: usize| {
        let (h, k) = dims.split_channel(c);
        format!("y{}_{}", h + 1, k + 1)
    };
    let mut s = String::from("digraph network {\n  rankdir=LR;\n  node [shape=circle];\n");
    for h in 0..dims.p1 {
        let _ = writeln!(s, "  subgraph cluster_module{} {{", h + 1);
        let _ = writeln!(s, "    label=\"module {}\";", h + 1);
        for k in 0..dims.p2 {
            let c = dims.channel(h, k);
            let _ = writeln!(s, "    {} [label=\"y({},{})\"];", node(c), h + 1, k + 1);
        }
        s.push_str("  }\n");
    }
    for i in 0..dims.m {
        let _ = writeln!(s, "  u{} [shape=box, label=\"u{}\"];", i + 1, i + 1);
    }
    for (row, targets) in edges.g.iter().enumerate() {
        for (col, &on) in targets.iter().enumerate() {
            if on == 1 {
                let _ = writeln!(s, "  {} -> {};", node(col), node(row));
            }
        }
    }
    for (row, inputs) in edges.f.iter().enumerate() {
        for (i, &on) in inputs.iter().enumerate() {
            if on == 1 {
                let _ = writeln!(s, "  u{} -> {} [style=dashed];", i + 1, node(row));
            }
        }
    }
    s.push_str("}\n");
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netgen::{random_support, random_system};

    #[test]
    fn coefficient_dump_round_trips() {
        let dims = Dims::new(2, 1, 1).unwrap();
        let g: Vec<DMatrix<f64>> = (0..3).map(|t| DMatrix::from_fn(2, 2, |r, c| (t * 4 + r * 2 + c) as f64 + 0.1)).collect();
        let f: Vec<DMatrix<f64>> = (0..3).map(|t| DMatrix::from_fn(2, 1, |r, _| -(t as f64) - r as f64 / 3.0)).collect();
        let bytes = encode_coefficients(dims, &g, &f).unwrap();
        let header_end = bytes.iter().position(|&b| b == b'\n').unwrap();
        let header: serde_json::Value = serde_json::from_slice(&bytes[..header_end]).unwrap();
        assert_eq!(header["T"], 3);
        assert_eq!(header["layout"], "t-major");
        // layout: G_1 row-major first
        let first: Vec<f64> = bytes[header_end + 1..]
            .chunks_exact(8)
            .take(6)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        assert_eq!(first, vec![0.1, 1.1, 2.1, 3.1, -0.0, -1.0 / 3.0]);
        let (d2, g2, f2) = decode_coefficients(&bytes).unwrap();
        assert_eq!((d2, g2, f2), (dims, g, f));
        assert!(decode_coefficients(&bytes[..bytes.len() - 8]).is_err());
    }

    #[test]
    fn truth_archive_round_trips() {
        let dims = Dims::new(2, 2, 1).unwrap();
        let sup = random_support(dims, 0.6, false, 1).unwrap();
        let gt = random_system(&sup, 4, 0.9, NoiseModel::constant(4, 1.0).unwrap(), 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_truth(dir.path(), "truth", &gt).unwrap();
        assert_eq!(read_truth(dir.path().join("truth.json")).unwrap(), gt);
    }

    #[test]
    fn dot_has_one_cluster_per_module() {
        // lower-shift E1 over 3 modules of dense 2-node modules
        let dims = Dims::new(3, 2, 1).unwrap();
        let mut sup = NetworkSupport::empty(dims);
        sup.e1[1][0] = 1;
        sup.e1[2][1] = 1;
        sup.e2 = vec![vec![1; 2]; 2];
        sup.a1[0] = 1;
        sup.a2 = vec![vec![1]; 2];
        let dot = support_dot(dims, &sup.edges()).unwrap();
        assert_eq!(dot.matches("subgraph cluster_").count(), 3);
        assert_eq!(dot.matches(" -> ").count(), 8 + 2);
        assert!(dot.contains("y1_2 -> y2_1;"));
        assert!(!dot.contains("y2_1 -> y1_1;"));
        assert!(dot.contains("u1 -> y1_1 [style=dashed];"));
    }
}
