//! Readers and writers for the on-disk formats: angle and marker CSVs,
//! camera calibration JSON, and row-major f64 tensors with a JSON sidecar.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3x4, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geomcam::CameraProjection;
use crate::kinmodel::{MarkerFrame, MarkerSequence};
use crate::rotmath::{AngleSet, EulerConvention, EulerTriple};

const AXES: [&str; 3] = ["x", "y", "z"];

pub fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn parse_f64(path: &Path, line: usize, field: &str, s: &str) -> Result<f64> {
    match s.trim().parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        Ok(v) => Err(Error::parse(path, line, field, format!("non-finite value {v}"))),
        Err(_) => Err(Error::parse(path, line, field, format!("`{s}` is not a number"))),
    }
}

/// Splits `<name>_x,<name>_y,<name>_z` triples off a header.
fn header_triples(path: &Path, cols: &[&str]) -> Result<Vec<String>> {
    if cols.first().map(|c| c.trim()) != Some("time") {
        return Err(Error::parse(path, 0, "time", "first column must be `time`"));
    }
    let rest = &cols[1..];
    if rest.len() % 3 != 0 {
        return Err(Error::parse(path, 0, "header", "columns after `time` must come in x,y,z triples"));
    }
    rest.chunks(3)
        .map(|t| {
            let base = t[0].trim().strip_suffix("_x").ok_or_else(|| {
                Error::parse(path, 0, t[0].trim(), "expected a column ending in `_x`")
            })?;
            for (col, ax) in t.iter().zip(AXES) {
                if col.trim() != format!("{base}_{ax}") {
                    return Err(Error::parse(path, 0, col.trim(), format!("expected `{base}_{ax}`")));
                }
            }
            Ok(base.to_string())
        })
        .collect()
}

pub fn angle_csv_string(set: &AngleSet, convention: EulerConvention) -> String {
    let mut s = format!("# euler_convention={}\ntime", convention.tag());
    for j in &set.joints {
        for ax in AXES {
            let _ = write!(s, ",{j}_{ax}");
        }
    }
    s.push('\n');
    for (t, frame) in set.times.iter().zip(&set.frames) {
        let _ = write!(s, "{t}");
        for e in frame {
            let _ = write!(s, ",{},{},{}", e.x, e.y, e.z);
        }
        s.push('\n');
    }
    s
}

pub fn write_angle_csv(path: &Path, set: &AngleSet) -> Result<()> {
    write_text(path, &angle_csv_string(set, EulerConvention::XYZ))
}

/// Parses an angle CSV. `path` is only used in error messages.
pub fn parse_angle_csv(path: &Path, text: &str) -> Result<AngleSet> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let mut header = None;
    for (n, line) in lines.by_ref() {
        if let Some(comment) = line.strip_prefix('#') {
            if let Some(tag) = comment.trim().strip_prefix("euler_convention=") {
                let conv: EulerConvention = tag
                    .trim()
                    .parse()
                    .map_err(|e: Error| Error::parse(path, n, "euler_convention", e.to_string()))?;
                if conv != EulerConvention::XYZ {
                    return Err(Error::parse(path, n, "euler_convention", "only XYZ_intrinsic is supported"));
                }
            }
            continue;
        }
        header = Some((n, line));
        break;
    }
    let (hn, header) = header.ok_or_else(|| Error::parse(path, 1, "header", "file has no header"))?;
    let cols: Vec<&str> = header.split(',').collect();
    let joints = header_triples(path, &cols).map_err(|e| relocate(e, hn))?;
    let mut times = Vec::new();
    let mut frames = Vec::new();
    for (n, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != cols.len() {
            return Err(Error::parse(
                path,
                n,
                "row",
                format!("expected {} fields, found {}", cols.len(), fields.len()),
            ));
        }
        times.push(parse_f64(path, n, "time", fields[0])?);
        let mut frame = Vec::with_capacity(joints.len());
        for (j, chunk) in fields[1..].chunks(3).enumerate() {
            let mut v = [0.0; 3];
            for k in 0..3 {
                v[k] = parse_f64(path, n, cols[1 + 3 * j + k].trim(), chunk[k])?;
            }
            frame.push(EulerTriple { x: v[0], y: v[1], z: v[2] });
        }
        frames.push(frame);
    }
    AngleSet::new(joints, times, frames).map_err(|e| Error::parse(path, hn, "rows", e.to_string()))
}

pub fn read_angle_csv(path: &Path) -> Result<AngleSet> {
    parse_angle_csv(path, &read_text(path)?)
}

fn relocate(e: Error, line: usize) -> Error {
    match e {
        Error::Parse {
            path, field, message, ..
        } => Error::Parse {
            path,
            line,
            field,
            message,
        },
        other => other,
    }
}

pub fn marker_csv_string(seq: &MarkerSequence) -> String {
    let mut s = String::from("time");
    for m in &seq.names {
        for ax in AXES {
            let _ = write!(s, ",{m}_{ax}");
        }
    }
    s.push('\n');
    for f in &seq.frames {
        let _ = write!(s, "{}", f.time);
        for m in &seq.names {
            match f.get(m) {
                Some(p) => {
                    let _ = write!(s, ",{},{},{}", p.x, p.y, p.z);
                }
                None => s.push_str(",,,"),
            }
        }
        s.push('\n');
    }
    s
}

pub fn write_marker_csv(path: &Path, seq: &MarkerSequence) -> Result<()> {
    write_text(path, &marker_csv_string(seq))
}

/// Parses a marker CSV. A marker with any empty coordinate is missing for
/// that frame.
pub fn parse_marker_csv(path: &Path, text: &str) -> Result<MarkerSequence> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l))
        .filter(|(_, l)| !l.starts_with('#'));
    let (hn, header) = lines
        .next()
        .ok_or_else(|| Error::parse(path, 1, "header", "file has no header"))?;
    let cols: Vec<&str> = header.split(',').collect();
    let names = header_triples(path, &cols).map_err(|e| relocate(e, hn))?;
    let mut frames = Vec::new();
    for (n, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != cols.len() {
            return Err(Error::parse(
                path,
                n,
                "row",
                format!("expected {} fields, found {}", cols.len(), fields.len()),
            ));
        }
        let time = parse_f64(path, n, "time", fields[0])?;
        let mut markers = BTreeMap::new();
        for (m, chunk) in names.iter().zip(fields[1..].chunks(3)) {
            if chunk.iter().any(|f| f.trim().is_empty()) {
                continue;
            }
            let mut v = [0.0; 3];
            for k in 0..3 {
                v[k] = parse_f64(path, n, &format!("{m}_{}", AXES[k]), chunk[k])?;
            }
            markers.insert(m.clone(), Vector3::new(v[0], v[1], v[2]));
        }
        frames.push(MarkerFrame { time, markers });
    }
    Ok(MarkerSequence { names, frames })
}

pub fn read_marker_csv(path: &Path) -> Result<MarkerSequence> {
    parse_marker_csv(path, &read_text(path)?)
}

#[derive(Debug, Serialize, Deserialize)]
struct CalibrationFile {
    cameras: Vec<CameraEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CameraEntry {
    name: String,
    #[serde(rename = "P")]
    p: [[f64; 4]; 3],
    width: usize,
    height: usize,
}

pub fn calibration_json(cameras: &[CameraProjection]) -> String {
    let file = CalibrationFile {
        cameras: cameras
            .iter()
            .map(|c| CameraEntry {
                name: c.name.clone(),
                p: std::array::from_fn(|r| std::array::from_fn(|k| c.p[(r, k)])),
                width: c.width,
                height: c.height,
            })
            .collect(),
    };
    let mut s = serde_json::to_string_pretty(&file).expect("calibration serializes");
    s.push('\n');
    s
}

pub fn write_calibration(path: &Path, cameras: &[CameraProjection]) -> Result<()> {
    write_text(path, &calibration_json(cameras))
}

pub fn parse_calibration(path: &Path, text: &str) -> Result<Vec<CameraProjection>> {
    let file: CalibrationFile = serde_json::from_str(text).map_err(|e| {
        Error::parse(path, e.line(), "cameras", e.to_string())
    })?;
    if file.cameras.is_empty() {
        return Err(Error::parse(path, 1, "cameras", "no cameras"));
    }
    file.cameras
        .into_iter()
        .enumerate()
        .map(|(i, c)| {
            let p = Matrix3x4::from_fn(|r, k| c.p[r][k]);
            CameraProjection::new(c.name, p, c.width, c.height)
                .map_err(|e| Error::parse(path, 1, format!("cameras[{i}]"), e.to_string()))
        })
        .collect()
}

pub fn read_calibration(path: &Path) -> Result<Vec<CameraProjection>> {
    parse_calibration(path, &read_text(path)?)
}

/// Dense row-major f64 tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    /// Optional labels for the leading axis (camera names for heatmaps).
    pub views: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorSidecar {
    shape: Vec<usize>,
    dtype: String,
    order: String,
    views: Vec<String>,
}

const TENSOR_MAGIC: &[u8; 8] = b"KMTENSOR";

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>, views: Vec<String>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != values.len() {
            return Err(Error::shape(format!(
                "tensor shape {shape:?} holds {n} values, got {}",
                values.len()
            )));
        }
        Ok(Tensor { shape, values, views })
    }

    pub fn sidecar_path(path: &Path) -> PathBuf {
        let mut s = path.as_os_str().to_owned();
        s.push(".json");
        PathBuf::from(s)
    }

    /// Binary layout: magic, u64 rank, u64 dims, then little-endian f64 values.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 8 * (self.shape.len() + self.values.len()));
        out.extend_from_slice(TENSOR_MAGIC);
        out.extend_from_slice(&(self.shape.len() as u64).to_le_bytes());
        for &d in &self.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(path: &Path, bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::parse(path, 1, "tensor", msg.to_string());
        let word = |i: usize| -> Result<u64> {
            bytes
                .get(i..i + 8)
                .map(|b| u64::from_le_bytes(b.try_into().unwrap()))
                .ok_or_else(|| bad("truncated header"))
        };
        if bytes.get(..8) != Some(TENSOR_MAGIC.as_slice()) {
            return Err(bad("bad magic"));
        }
        let rank = word(8)? as usize;
        if rank > 16 {
            return Err(bad("rank too large"));
        }
        let shape: Vec<usize> = (0..rank).map(|i| word(16 + 8 * i).map(|d| d as usize)).collect::<Result<_>>()?;
        let start = 16 + 8 * rank;
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| bad("shape overflows"))?;
        if bytes.len() != start + 8 * n {
            return Err(bad("payload length does not match shape"));
        }
        let values = bytes[start..]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        Ok(Tensor {
            shape,
            values,
            views: Vec::new(),
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))?;
        let side = TensorSidecar {
            shape: self.shape.clone(),
            dtype: "f64".into(),
            order: "row-major".into(),
            views: self.views.clone(),
        };
        let mut s = serde_json::to_string(&side).expect("sidecar serializes");
        s.push('\n');
        write_text(&Self::sidecar_path(path), &s)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut t = Self::from_bytes(path, &bytes)?;
        let sp = Self::sidecar_path(path);
        if sp.exists() {
            let side: TensorSidecar = serde_json::from_str(&read_text(&sp)?)
                .map_err(|e| Error::parse(&sp, e.line(), "sidecar", e.to_string()))?;
            if side.shape != t.shape {
                return Err(Error::parse(&sp, 1, "shape", "sidecar shape disagrees with tensor header"));
            }
            if side.dtype != "f64" || side.order != "row-major" {
                return Err(Error::parse(&sp, 1, "dtype", "only row-major f64 tensors are supported"));
            }
            t.views = side.views;
        }
        Ok(t)
    }
}
