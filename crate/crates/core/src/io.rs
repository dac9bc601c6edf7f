//! File formats and preprocessing.
//!
//! Volumes are raw little-endian `f32` payloads in z-major, then y, then x
//! order, next to a JSON sidecar:
//!
//! ```json
//! { "dims": [nz, ny, nx], "spacing": [sz, sy, sx], "dtype": "f32le" }
//! ```
//!
//! The sidecar of `name.raw` is `name.json`. Landmarks are CSV with a
//! `label,z,y,x` header.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{RegError, Result};
use crate::optimizer::OptimConfig;
use crate::volume::{
    AffineParams, DeformationGrid, Dims, GradientField, Landmark, LandmarkSet, Mask3, Volume3,
};
use crate::warp::resample;

pub const DTYPE: &str = "f32le";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sidecar {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub dtype: String,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

fn format_err(path: &Path, reason: impl Into<String>) -> RegError {
    RegError::Format {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

/// Writes `bytes` to `path` through a temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Encodes voxel values as `f32le`.
pub fn encode_f32le(values: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 4);
    for &v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn sidecar_bytes(v: &Volume3) -> Result<Vec<u8>> {
    let sc = Sidecar {
        dims: v.dims().0,
        spacing: v.spacing(),
        dtype: DTYPE.into(),
    };
    let mut s = serde_json::to_vec_pretty(&sc)?;
    s.push(b'\n');
    Ok(s)
}

/// Writes the payload and its sidecar. Values are narrowed to `f32`, so the
/// round trip is bit-exact for volumes whose values are `f32`-representable
/// (in particular anything previously read from disk).
pub fn write_volume(path: &Path, v: &Volume3) -> Result<()> {
    write_atomic(path, &encode_f32le(v.data()))?;
    write_atomic(&sidecar_path(path), &sidecar_bytes(v)?)
}

pub fn read_sidecar(path: &Path) -> Result<Sidecar> {
    let sc_path = sidecar_path(path);
    let text = fs::read_to_string(&sc_path)?;
    let sc: Sidecar =
        serde_json::from_str(&text).map_err(|e| format_err(&sc_path, e.to_string()))?;
    if sc.dtype != DTYPE {
        return Err(format_err(&sc_path, format!("unsupported dtype {:?}", sc.dtype)));
    }
    Ok(sc)
}

pub fn read_volume(path: &Path) -> Result<Volume3> {
    let sc = read_sidecar(path)?;
    let dims = Dims(sc.dims);
    dims.validate()?;
    let bytes = fs::read(path)?;
    let expected = dims.len() * 4;
    if bytes.len() != expected {
        return Err(format_err(
            path,
            format!("payload has {} bytes, sidecar implies {expected}", bytes.len()),
        ));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    Volume3::from_vec(dims, sc.spacing, data)
}

pub fn read_mask(path: &Path) -> Result<Mask3> {
    Mask3::from_volume(read_volume(path)?)
}

pub fn write_mask(path: &Path, m: &Mask3) -> Result<()> {
    write_volume(path, m.as_volume())
}

const AXIS_SUFFIX: [&str; 3] = ["z", "y", "x"];

/// Channel file paths `{stem}_z.raw`, `{stem}_y.raw`, `{stem}_x.raw` in `dir`.
pub fn channel_paths(dir: &Path, stem: &str) -> [PathBuf; 3] {
    AXIS_SUFFIX.map(|a| dir.join(format!("{stem}_{a}.raw")))
}

fn write_channels(dir: &Path, stem: &str, dims: Dims, channels: &[Vec<f64>; 3]) -> Result<()> {
    for (path, c) in channel_paths(dir, stem).iter().zip(channels) {
        write_volume(path, &Volume3::from_vec(dims, [1.0; 3], c.clone())?)?;
    }
    Ok(())
}

fn read_channels(dir: &Path, stem: &str) -> Result<(Dims, [Vec<f64>; 3])> {
    let mut out: [Vec<f64>; 3] = Default::default();
    let mut dims = None;
    for (d, path) in channel_paths(dir, stem).iter().enumerate() {
        let v = read_volume(path)?;
        match dims {
            None => dims = Some(v.dims()),
            Some(prev) if prev != v.dims() => {
                return Err(RegError::ShapeMismatch {
                    left: prev.0,
                    right: v.dims().0,
                })
            }
            _ => {}
        }
        out[d] = v.into_data();
    }
    Ok((dims.expect("three channels"), out))
}

/// A grid or displacement field as three channel volumes.
pub fn write_grid(dir: &Path, stem: &str, g: &DeformationGrid) -> Result<()> {
    write_channels(dir, stem, g.dims(), g.channels())
}

pub fn read_grid(dir: &Path, stem: &str) -> Result<DeformationGrid> {
    let (dims, ch) = read_channels(dir, stem)?;
    DeformationGrid::from_channels(dims, ch)
}

pub fn write_gradient_field(dir: &Path, stem: &str, phi: &GradientField) -> Result<()> {
    write_channels(dir, stem, phi.dims(), phi.channels())
}

pub fn read_gradient_field(dir: &Path, stem: &str) -> Result<GradientField> {
    let (dims, ch) = read_channels(dir, stem)?;
    GradientField::from_channels(dims, ch)
}

/// Grid path given as `dir/stem` (as printed by the CLI), split into its parts.
pub fn split_grid_path(path: &Path) -> (PathBuf, String) {
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let stem = path
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    (dir, stem)
}

pub fn write_affine(path: &Path, a: &AffineParams) -> Result<()> {
    write_atomic(path, &json_bytes(a)?)
}

pub fn read_affine(path: &Path) -> Result<AffineParams> {
    let a: AffineParams = serde_json::from_str(&fs::read_to_string(path)?)
        .map_err(|e| format_err(path, e.to_string()))?;
    a.validate()?;
    Ok(a)
}

pub fn read_config(path: &Path) -> Result<OptimConfig> {
    let c: OptimConfig = serde_json::from_str(&fs::read_to_string(path)?)
        .map_err(|e| format_err(path, e.to_string()))?;
    c.validate()?;
    Ok(c)
}

/// Pretty JSON with a trailing newline.
pub fn json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut s = serde_json::to_vec_pretty(value)?;
    s.push(b'\n');
    Ok(s)
}

#[derive(Debug, Serialize, Deserialize)]
struct LandmarkRow {
    label: String,
    z: f64,
    y: f64,
    x: f64,
}

pub fn parse_landmarks(text: &str) -> Result<LandmarkSet> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["label", "z", "y", "x"] {
        return Err(RegError::Landmark(format!(
            "expected header label,z,y,x, got {}",
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut points = Vec::new();
    for row in reader.deserialize() {
        let row: LandmarkRow = row?;
        points.push(Landmark {
            label: row.label,
            position: [row.z, row.y, row.x],
        });
    }
    LandmarkSet::new(points)
}

pub fn read_landmarks(path: &Path) -> Result<LandmarkSet> {
    parse_landmarks(&fs::read_to_string(path)?)
}

pub fn landmarks_csv(set: &LandmarkSet) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for l in set.points() {
        w.serialize(LandmarkRow {
            label: l.label.clone(),
            z: l.position[0],
            y: l.position[1],
            x: l.position[2],
        })?;
    }
    w.into_inner()
        .map_err(|e| RegError::Io(e.into_error()))
}

pub fn write_landmarks(path: &Path, set: &LandmarkSet) -> Result<()> {
    write_atomic(path, &landmarks_csv(set)?)
}

/// Default intensity window and scale used for MRI inputs.
pub const DEFAULT_WINDOW: (f64, f64) = (0.0, 1300.0);
pub const DEFAULT_SCALE: f64 = 2.0 / 3.0;

/// Clamps to `[lo, hi]`, maps that window affinely onto `[0, 1]`, then
/// resamples every axis by `scale` (new size `round(n · scale)`, at least 2)
/// with corner-aligned trilinear interpolation.
pub fn preprocess(v: &Volume3, window_lo: f64, window_hi: f64, scale: f64) -> Result<Volume3> {
    if !(window_lo.is_finite() && window_hi.is_finite() && window_hi > window_lo) {
        return Err(RegError::InvalidParam(format!(
            "invalid intensity window [{window_lo}, {window_hi}]"
        )));
    }
    if !(scale > 0.0 && scale <= 1.0) {
        return Err(RegError::InvalidParam(format!("scale must lie in (0, 1], got {scale}")));
    }
    let width = window_hi - window_lo;
    let windowed = Volume3::from_vec(
        v.dims(),
        v.spacing(),
        v.data()
            .iter()
            .map(|&x| (x.clamp(window_lo, window_hi) - window_lo) / width)
            .collect(),
    )?;
    if scale == 1.0 {
        return Ok(windowed);
    }
    let dims = Dims(v.dims().0.map(|n| ((n as f64 * scale).round() as usize).max(2)));
    resample(&windowed, dims)
}
