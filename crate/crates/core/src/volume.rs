//! Dense voxel containers: scalar volumes, binary masks, 3-channel grids and
//! gradient fields, and landmark sets.
//!
//! Every triple in this crate is ordered `(z, y, x)`. Voxel `(z, y, x)` lives
//! at linear index `(z * ny + y) * nx + x`. Grid coordinates are 0-based voxel
//! indices of the source frame; physical spacing is carried as metadata only.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{RegError, Result};

/// Axis index of z in every `(z, y, x)` triple.
pub const Z: usize = 0;
/// Axis index of y.
pub const Y: usize = 1;
/// Axis index of x.
pub const X: usize = 2;

/// Voxel counts `(nz, ny, nx)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims(pub [usize; 3]);

impl Dims {
    /// Validated constructor: every axis needs at least two samples for trilinear sampling.
    pub fn new(nz: usize, ny: usize, nx: usize) -> Result<Self> {
        let d = Dims([nz, ny, nx]);
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        if self.0.iter().any(|&n| n < 2) {
            return Err(RegError::InvalidDims(self.0));
        }
        Ok(())
    }

    #[inline]
    pub fn nz(&self) -> usize {
        self.0[Z]
    }

    #[inline]
    pub fn ny(&self) -> usize {
        self.0[Y]
    }

    #[inline]
    pub fn nx(&self) -> usize {
        self.0[X]
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.0.iter().product()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.0[Y] + y) * self.0[X] + x
    }

    /// Inverse of [`Dims::index`].
    #[inline]
    pub fn coords(&self, i: usize) -> [usize; 3] {
        let nx = self.0[X];
        let ny = self.0[Y];
        [i / (ny * nx), (i / nx) % ny, i % nx]
    }

    /// Linear-index distance between neighbours along `axis`.
    #[inline]
    pub fn stride(&self, axis: usize) -> usize {
        match axis {
            Z => self.0[Y] * self.0[X],
            Y => self.0[X],
            _ => 1,
        }
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        p.iter()
            .zip(self.0.iter())
            .all(|(&c, &n)| c.is_finite() && c >= 0.0 && c <= (n - 1) as f64)
    }
}

impl std::fmt::Display for Dims {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.0[Z], self.0[Y], self.0[X])
    }
}

fn check_finite(values: &[f64], what: &'static str) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(RegError::NonFinite { what, index: i }),
        None => Ok(()),
    }
}

fn check_len(dims: Dims, len: usize) -> Result<()> {
    if len != dims.len() {
        return Err(RegError::LengthMismatch {
            expected: dims.len(),
            actual: len,
        });
    }
    Ok(())
}

pub(crate) fn ensure_same(a: Dims, b: Dims) -> Result<()> {
    if a != b {
        return Err(RegError::ShapeMismatch { left: a.0, right: b.0 });
    }
    Ok(())
}

/// Dense scalar volume.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3 {
    dims: Dims,
    spacing: [f64; 3],
    data: Vec<f64>,
}

impl Volume3 {
    /// Volume of the given shape filled with `fill`.
    pub fn new(dims: Dims, spacing: [f64; 3], fill: f64) -> Result<Self> {
        dims.validate()?;
        check_finite(&[fill], "fill value")?;
        check_finite(&spacing, "spacing")?;
        Ok(Self {
            dims,
            spacing,
            data: vec![fill; dims.len()],
        })
    }

    pub fn from_vec(dims: Dims, spacing: [f64; 3], data: Vec<f64>) -> Result<Self> {
        dims.validate()?;
        check_len(dims, data.len())?;
        check_finite(&data, "volume intensity")?;
        check_finite(&spacing, "spacing")?;
        Ok(Self {
            dims,
            spacing,
            data,
        })
    }

    /// Evaluates `f(z, y, x)` at every voxel.
    pub fn from_fn(
        dims: Dims,
        spacing: [f64; 3],
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        dims.validate()?;
        let mut data = Vec::with_capacity(dims.len());
        for z in 0..dims.nz() {
            for y in 0..dims.ny() {
                for x in 0..dims.nx() {
                    data.push(f(z, y, x));
                }
            }
        }
        Self::from_vec(dims, spacing, data)
    }

    /// Builds a volume whose data is already known to satisfy the invariants.
    pub(crate) fn from_parts_unchecked(dims: Dims, spacing: [f64; 3], data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), dims.len());
        Self {
            dims,
            spacing,
            data,
        }
    }

    #[inline]
    pub fn dims(&self) -> Dims {
        self.dims
    }

    #[inline]
    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Bounds-checked voxel read.
    pub fn get(&self, z: usize, y: usize, x: usize) -> Option<f64> {
        let [nz, ny, nx] = self.dims.0;
        (z < nz && y < ny && x < nx).then(|| self.data[self.dims.index(z, y, x)])
    }

    #[inline]
    pub fn at(&self, z: usize, y: usize, x: usize) -> f64 {
        self.data[self.dims.index(z, y, x)]
    }

    /// Elementwise `a * self + b * other`.
    pub fn lin_comb(&self, a: f64, other: &Volume3, b: f64) -> Result<Volume3> {
        ensure_same(self.dims, other.dims)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&u, &v)| a * u + b * v)
            .collect();
        Volume3::from_vec(self.dims, self.spacing, data)
    }

    pub fn sub(&self, other: &Volume3) -> Result<Volume3> {
        self.lin_comb(1.0, other, -1.0)
    }

    pub fn scale(&self, c: f64) -> Result<Volume3> {
        Volume3::from_vec(
            self.dims,
            self.spacing,
            self.data.iter().map(|v| v * c).collect(),
        )
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }
}

/// Binary mask stored as a scalar volume with values in `{0, 1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask3(Volume3);

impl Mask3 {
    pub fn from_volume(v: Volume3) -> Result<Self> {
        if let Some(i) = v.data.iter().position(|&x| x != 0.0 && x != 1.0) {
            return Err(RegError::NotBinary { index: i });
        }
        Ok(Self(v))
    }

    pub fn from_fn(
        dims: Dims,
        spacing: [f64; 3],
        mut f: impl FnMut(usize, usize, usize) -> bool,
    ) -> Result<Self> {
        let v = Volume3::from_fn(dims, spacing, |z, y, x| if f(z, y, x) { 1.0 } else { 0.0 })?;
        Ok(Self(v))
    }

    /// Thresholds a scalar volume: voxels `>= threshold` become 1.
    pub fn threshold(v: &Volume3, threshold: f64) -> Self {
        let data = v
            .data
            .iter()
            .map(|&x| if x >= threshold { 1.0 } else { 0.0 })
            .collect();
        Self(Volume3::from_parts_unchecked(v.dims, v.spacing, data))
    }

    #[inline]
    pub fn dims(&self) -> Dims {
        self.0.dims
    }

    pub fn as_volume(&self) -> &Volume3 {
        &self.0
    }

    pub fn into_volume(self) -> Volume3 {
        self.0
    }

    pub fn count(&self) -> usize {
        self.0.data.iter().filter(|&&v| v == 1.0).count()
    }

    pub fn is_set(&self, z: usize, y: usize, x: usize) -> bool {
        self.0.at(z, y, x) == 1.0
    }
}

/// Dense deformation: per-voxel sampling coordinates in the source frame.
///
/// `channels[d][i]` is the `d`-coordinate (z, y or x) sampled by output voxel `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformationGrid {
    dims: Dims,
    channels: [Vec<f64>; 3],
}

impl DeformationGrid {
    pub fn from_channels(dims: Dims, channels: [Vec<f64>; 3]) -> Result<Self> {
        dims.validate()?;
        for c in &channels {
            check_len(dims, c.len())?;
            check_finite(c, "grid coordinate")?;
        }
        Ok(Self { dims, channels })
    }

    pub(crate) fn from_channels_unchecked(dims: Dims, channels: [Vec<f64>; 3]) -> Self {
        Self { dims, channels }
    }

    /// `G(p) = p`.
    pub fn identity(dims: Dims) -> Result<Self> {
        dims.validate()?;
        let mut channels: [Vec<f64>; 3] = Default::default();
        for c in channels.iter_mut() {
            c.reserve_exact(dims.len());
        }
        for z in 0..dims.nz() {
            for y in 0..dims.ny() {
                for x in 0..dims.nx() {
                    channels[Z].push(z as f64);
                    channels[Y].push(y as f64);
                    channels[X].push(x as f64);
                }
            }
        }
        Ok(Self { dims, channels })
    }

    #[inline]
    pub fn dims(&self) -> Dims {
        self.dims
    }

    #[inline]
    pub fn channel(&self, axis: usize) -> &[f64] {
        &self.channels[axis]
    }

    pub fn channels(&self) -> &[Vec<f64>; 3] {
        &self.channels
    }

    pub fn into_channels(self) -> [Vec<f64>; 3] {
        self.channels
    }

    /// Sampling coordinate `(z, y, x)` of output voxel `i`.
    #[inline]
    pub fn point(&self, i: usize) -> [f64; 3] {
        [self.channels[Z][i], self.channels[Y][i], self.channels[X][i]]
    }

    /// `G - G_I`: per-voxel displacement. The result is a displacement field,
    /// not a sampling grid, so it carries no monotonicity guarantee.
    pub fn residual(&self) -> DeformationGrid {
        let mut out = self.clone();
        for (i, _) in self.channels[Z].iter().enumerate() {
            let p = self.dims.coords(i);
            for d in 0..3 {
                out.channels[d][i] -= p[d] as f64;
            }
        }
        out
    }

    /// Inverse of [`DeformationGrid::residual`]: adds `G_I` back.
    pub fn add_identity(&self) -> DeformationGrid {
        let mut out = self.clone();
        for (i, _) in self.channels[Z].iter().enumerate() {
            let p = self.dims.coords(i);
            for d in 0..3 {
                out.channels[d][i] += p[d] as f64;
            }
        }
        out
    }
}

/// `G - G_I` for any grid.
pub fn residual_deformation(g: &DeformationGrid) -> DeformationGrid {
    g.residual()
}

/// The identity deformation for `dims`.
pub fn identity_grid(dims: Dims) -> Result<DeformationGrid> {
    DeformationGrid::identity(dims)
}

/// Spatial gradients of the deformable component, one channel per axis.
/// Every value lies strictly inside `(0, 2)`; the identity field is all ones.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientField {
    dims: Dims,
    channels: [Vec<f64>; 3],
}

impl GradientField {
    pub fn from_channels(dims: Dims, channels: [Vec<f64>; 3]) -> Result<Self> {
        dims.validate()?;
        for (axis, c) in channels.iter().enumerate() {
            check_len(dims, c.len())?;
            if let Some(i) = c.iter().position(|&v| !(v > 0.0 && v < 2.0)) {
                return Err(RegError::InvalidPhi {
                    axis,
                    index: i,
                    value: c[i],
                });
            }
        }
        Ok(Self { dims, channels })
    }

    /// `Φ_I`: every value exactly 1.
    pub fn identity(dims: Dims) -> Result<Self> {
        dims.validate()?;
        let c = vec![1.0; dims.len()];
        Ok(Self {
            dims,
            channels: [c.clone(), c.clone(), c],
        })
    }

    #[inline]
    pub fn dims(&self) -> Dims {
        self.dims
    }

    #[inline]
    pub fn channel(&self, axis: usize) -> &[f64] {
        &self.channels[axis]
    }

    pub fn channels(&self) -> &[Vec<f64>; 3] {
        &self.channels
    }
}

/// 3×4 affine matrix acting on augmented normalized coordinates.
///
/// Rows and the first three columns follow the crate-wide `(z, y, x)` order;
/// column 3 is the translation. Normalized coordinates span `[-1, 1]` across
/// each axis, so the entries do not depend on the volume size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineParams {
    pub matrix: [[f64; 4]; 3],
}

impl AffineParams {
    pub const IDENTITY: AffineParams = AffineParams {
        matrix: [
            [1.0, 0.0, 0.0, 0.0],
            [0.0, 1.0, 0.0, 0.0],
            [0.0, 0.0, 1.0, 0.0],
        ],
    };

    pub fn new(matrix: [[f64; 4]; 3]) -> Result<Self> {
        let a = Self { matrix };
        a.validate()?;
        Ok(a)
    }

    pub fn validate(&self) -> Result<()> {
        check_finite(&self.to_flat(), "affine entry")
    }

    pub fn identity() -> Self {
        Self::IDENTITY
    }

    /// Pure translation in normalized coordinates, `(tz, ty, tx)`.
    pub fn translation(t: [f64; 3]) -> Result<Self> {
        let mut a = Self::IDENTITY;
        for d in 0..3 {
            a.matrix[d][3] = t[d];
        }
        a.validate()?;
        Ok(a)
    }

    /// Row-major flattening.
    pub fn to_flat(&self) -> [f64; 12] {
        let mut out = [0.0; 12];
        for r in 0..3 {
            out[r * 4..r * 4 + 4].copy_from_slice(&self.matrix[r]);
        }
        out
    }

    pub fn from_flat(v: &[f64; 12]) -> Self {
        let mut matrix = [[0.0; 4]; 3];
        for r in 0..3 {
            matrix[r].copy_from_slice(&v[r * 4..r * 4 + 4]);
        }
        Self { matrix }
    }

    /// `A - A_I`, flattened row-major.
    pub fn deviation(&self) -> [f64; 12] {
        let mut out = self.to_flat();
        for (o, i) in out.iter_mut().zip(Self::IDENTITY.to_flat()) {
            *o -= i;
        }
        out
    }
}

impl Default for AffineParams {
    fn default() -> Self {
        Self::IDENTITY
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Landmark {
    pub label: String,
    /// `(z, y, x)` in voxel coordinates.
    pub position: [f64; 3],
}

/// Labelled points with unique labels.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LandmarkSet {
    points: Vec<Landmark>,
}

impl LandmarkSet {
    pub fn new(points: Vec<Landmark>) -> Result<Self> {
        let mut seen = HashSet::new();
        for p in &points {
            if !seen.insert(p.label.as_str()) {
                return Err(RegError::Landmark(format!("duplicate label {:?}", p.label)));
            }
            if p.position.iter().any(|v| !v.is_finite()) {
                return Err(RegError::Landmark(format!(
                    "non-finite coordinate for {:?}",
                    p.label
                )));
            }
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[Landmark] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn get(&self, label: &str) -> Option<&Landmark> {
        self.points.iter().find(|p| p.label == label)
    }

    /// Labels of points lying outside `[0, n - 1]` on some axis.
    pub fn out_of_bounds(&self, dims: Dims) -> Vec<String> {
        self.points
            .iter()
            .filter(|p| !dims.contains(p.position))
            .map(|p| p.label.clone())
            .collect()
    }

    pub fn check_bounds(&self, dims: Dims) -> Result<()> {
        match self.out_of_bounds(dims).first() {
            Some(l) => Err(RegError::Landmark(format!(
                "landmark {l:?} lies outside the {dims} volume"
            ))),
            None => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d(n: usize) -> Dims {
        Dims::new(n, n, n).unwrap()
    }

    #[test]
    fn constant_fill() {
        let v = Volume3::new(d(4), [1.0; 3], 0.0).unwrap();
        assert_eq!(v.data().len(), 64);
        assert!(v.data().iter().all(|&x| x == 0.0));
        let v = Volume3::new(d(2), [1.0; 3], 1.5).unwrap();
        assert_eq!(v.data(), &[1.5; 8]);
    }

    #[test]
    fn rejects_small_dims_and_nan() {
        assert!(matches!(
            Volume3::new(Dims([1, 4, 4]), [1.0; 3], 0.0),
            Err(RegError::InvalidDims(_))
        ));
        assert!(Dims::new(4, 1, 4).is_err());
        assert!(Volume3::new(d(2), [1.0; 3], f64::NAN).is_err());
        assert!(Volume3::from_vec(d(2), [1.0; 3], vec![0.0; 7]).is_err());
        let mut data = vec![0.0; 8];
        data[3] = f64::INFINITY;
        assert!(Volume3::from_vec(d(2), [1.0; 3], data).is_err());
        assert!(DeformationGrid::from_channels(d(2), [vec![0.0; 8], vec![f64::NAN; 8], vec![0.0; 8]]).is_err());
        assert!(AffineParams::new([[f64::NAN; 4]; 3]).is_err());
        assert!(identity_grid(Dims([2, 2, 1])).is_err());
    }

    #[test]
    fn index_round_trip() {
        let dims = Dims::new(3, 4, 5).unwrap();
        for i in 0..dims.len() {
            let [z, y, x] = dims.coords(i);
            assert_eq!(dims.index(z, y, x), i);
        }
        let v = Volume3::from_fn(dims, [1.0; 3], |z, y, x| (100 * z + 10 * y + x) as f64).unwrap();
        assert_eq!(v.get(2, 3, 4), Some(234.0));
        assert_eq!(v.get(3, 0, 0), None);
    }

    #[test]
    fn identity_grid_values() {
        let g = identity_grid(d(2)).unwrap();
        let i = g.dims().index(0, 0, 1);
        assert_eq!(g.channel(X)[i], 1.0);
        assert_eq!(g.channel(Y)[i], 0.0);
        assert_eq!(g.channel(Z)[i], 0.0);
    }

    #[test]
    fn residual_of_identity_is_zero() {
        for dims in [Dims([2, 2, 2]), Dims([3, 5, 4]), Dims([7, 2, 9])] {
            let r = residual_deformation(&identity_grid(dims).unwrap());
            assert!(r.channels().iter().flatten().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn residual_of_constant_shift() {
        let dims = Dims([3, 4, 5]);
        let mut ch = identity_grid(dims).unwrap().into_channels();
        ch[X].iter_mut().for_each(|v| *v += 0.5);
        let g = DeformationGrid::from_channels(dims, ch).unwrap();
        let r = g.residual();
        assert!(r.channel(X).iter().all(|&v| v == 0.5));
        assert!(r.channel(Y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mask_rejects_non_binary() {
        let v = Volume3::new(d(2), [1.0; 3], 0.5).unwrap();
        assert!(matches!(Mask3::from_volume(v), Err(RegError::NotBinary { .. })));
    }

    #[test]
    fn gradient_field_open_interval() {
        let dims = d(2);
        let ok = [vec![1.0; 8], vec![1.9; 8], vec![0.1; 8]];
        assert!(GradientField::from_channels(dims, ok).is_ok());
        for bad in [0.0, 2.0, -0.5, f64::NAN] {
            let mut c = vec![1.0; 8];
            c[5] = bad;
            assert!(GradientField::from_channels(dims, [vec![1.0; 8], c, vec![1.0; 8]]).is_err());
        }
        let id = GradientField::identity(dims).unwrap();
        assert!(id.channels().iter().flatten().all(|&v| v == 1.0));
    }

    #[test]
    fn landmark_labels_unique() {
        let lm = |l: &str| Landmark {
            label: l.into(),
            position: [1.0, 1.0, 1.0],
        };
        assert!(LandmarkSet::new(vec![lm("a"), lm("b")]).is_ok());
        assert!(LandmarkSet::new(vec![lm("a"), lm("a")]).is_err());
        let s = LandmarkSet::new(vec![lm("a"), Landmark { label: "far".into(), position: [9.0, 0.0, 0.0] }]).unwrap();
        assert_eq!(s.out_of_bounds(d(4)), vec!["far".to_string()]);
        assert!(s.check_bounds(d(4)).is_err());
    }

    #[test]
    fn affine_flat_round_trip() {
        let mut a = AffineParams::IDENTITY;
        a.matrix[1][3] = 0.25;
        assert_eq!(AffineParams::from_flat(&a.to_flat()), a);
        let dev = a.deviation();
        assert_eq!(dev[7], 0.25);
        assert_eq!(dev.iter().filter(|v| **v != 0.0).count(), 1);
    }
}
