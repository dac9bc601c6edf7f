//! Deformation grids from the two parameterizations and their composition.
//!
//! The deformable part `G_N` is the per-line cumulative sum of the spatial
//! gradient field `Φ`; the linear part `G_A` comes from a 3×4 affine matrix in
//! normalized coordinates. Images are warped by `G_N` first, then by `G_A`.

use rayon::prelude::*;

use crate::error::Result;
use crate::volume::{
    ensure_same, AffineParams, DeformationGrid, Dims, GradientField, Volume3, X, Y, Z,
};
use crate::warp::warp_raw;

/// Visits every line of voxels parallel to `axis`, passing the linear index
/// of its first voxel.
pub(crate) fn for_each_line(dims: Dims, axis: usize, mut f: impl FnMut(usize)) {
    let [nz, ny, nx] = dims.0;
    match axis {
        Z => (0..ny * nx).for_each(&mut f),
        Y => {
            for z in 0..nz {
                for x in 0..nx {
                    f(dims.index(z, 0, x));
                }
            }
        }
        _ => (0..nz * ny).for_each(|r| f(r * nx)),
    }
}

/// Inclusive prefix sum along `axis`, minus one.
pub(crate) fn cumsum_axis(values: &[f64], dims: Dims, axis: usize) -> Vec<f64> {
    let stride = dims.stride(axis);
    let n = dims.0[axis];
    let mut out = vec![0.0; values.len()];
    for_each_line(dims, axis, |start| {
        let mut acc = 0.0;
        for k in 0..n {
            let i = start + k * stride;
            acc += values[i];
            out[i] = acc - 1.0;
        }
    });
    out
}

/// Transpose of [`cumsum_axis`] (without the constant): inclusive suffix sum.
pub(crate) fn suffix_sum_axis(values: &[f64], dims: Dims, axis: usize) -> Vec<f64> {
    let stride = dims.stride(axis);
    let n = dims.0[axis];
    let mut out = vec![0.0; values.len()];
    for_each_line(dims, axis, |start| {
        let mut acc = 0.0;
        for k in (0..n).rev() {
            let i = start + k * stride;
            acc += values[i];
            out[i] = acc;
        }
    });
    out
}

pub(crate) fn integrate_raw(channels: &[Vec<f64>; 3], dims: Dims) -> DeformationGrid {
    let out: Vec<Vec<f64>> = (0..3)
        .into_par_iter()
        .map(|d| cumsum_axis(&channels[d], dims, d))
        .collect();
    let [gz, gy, gx]: [Vec<f64>; 3] = out.try_into().expect("three channels");
    DeformationGrid::from_channels_unchecked(dims, [gz, gy, gx])
}

/// Integrates spatial gradients into sampling coordinates:
/// `G_d(p) = Σ_{k ≤ p_d} Φ_d(…, k, …) − 1` along each line parallel to axis `d`.
///
/// `Φ ≡ 1` yields the identity grid; any field in `(0, 2)` gives coordinates
/// strictly increasing along each channel's own axis with steps in `(0, 2)`.
pub fn integrate_gradients(phi: &GradientField) -> DeformationGrid {
    integrate_raw(phi.channels(), phi.dims())
}

/// Half-extent `(n − 1) / 2` of each axis: the voxel/normalized scale factor.
#[inline]
pub(crate) fn half_extent(dims: Dims) -> [f64; 3] {
    std::array::from_fn(|d| (dims.0[d] - 1) as f64 / 2.0)
}

/// Normalized coordinate `2 p / (n − 1) − 1` of each axis of voxel `p`.
#[inline]
pub(crate) fn normalized(dims: Dims, p: [usize; 3]) -> [f64; 3] {
    std::array::from_fn(|d| 2.0 * p[d] as f64 / (dims.0[d] - 1) as f64 - 1.0)
}

/// Sampling grid of an affine map in normalized coordinates.
///
/// Voxel `p` is mapped to `n = 2 p / (dims − 1) − 1`, transformed by `A`, and
/// mapped back to voxel units. The map is evaluated as `p + h · (A − A_I) [n; 1]`
/// with `h = (dims − 1) / 2`, which is the same quantity but returns the
/// identity grid exactly when `A = A_I`.
pub fn affine_grid(a: &AffineParams, dims: Dims) -> Result<DeformationGrid> {
    dims.validate()?;
    a.validate()?;
    let dev = a.deviation();
    let h = half_extent(dims);
    let mut channels: [Vec<f64>; 3] = std::array::from_fn(|_| Vec::with_capacity(dims.len()));
    for i in 0..dims.len() {
        let p = dims.coords(i);
        let n = normalized(dims, p);
        for d in 0..3 {
            let row = &dev[d * 4..d * 4 + 4];
            let disp = row[0] * n[Z] + row[1] * n[Y] + row[2] * n[X] + row[3];
            channels[d].push(p[d] as f64 + h[d] * disp);
        }
    }
    DeformationGrid::from_channels(dims, channels)
}

/// Trilinear interpolation of a coordinate channel at `c`, extrapolating
/// linearly from the border cell outside the volume.
#[inline]
pub(crate) fn sample_extrapolated(values: &[f64], dims: Dims, c: [f64; 3]) -> f64 {
    let mut idx = [0usize; 3];
    let mut f = [0.0; 3];
    for d in 0..3 {
        let n = dims.0[d];
        let i0 = c[d].floor().clamp(0.0, (n - 2) as f64);
        idx[d] = i0 as usize;
        f[d] = c[d] - i0;
    }
    let mut acc = 0.0;
    for a in 0..2 {
        let wz = if a == 0 { 1.0 - f[Z] } else { f[Z] };
        for b in 0..2 {
            let wy = if b == 0 { 1.0 - f[Y] } else { f[Y] };
            for e in 0..2 {
                let wx = if e == 0 { 1.0 - f[X] } else { f[X] };
                acc += wz * wy * wx * values[dims.index(idx[Z] + a, idx[Y] + b, idx[X] + e)];
            }
        }
    }
    acc
}

/// Single-pass equivalent of warping by `inner` and then by `outer`:
/// `G_eff(p) = inner(outer(p))`, with `inner` interpolated trilinearly.
///
/// Outside the volume `inner` is extended linearly rather than zero-padded,
/// since it holds coordinates rather than intensities.
pub fn compose_grids(inner: &DeformationGrid, outer: &DeformationGrid) -> Result<DeformationGrid> {
    ensure_same(inner.dims(), outer.dims())?;
    let dims = inner.dims();
    let channels: Vec<Vec<f64>> = (0..3)
        .into_par_iter()
        .map(|d| {
            (0..dims.len())
                .map(|i| sample_extrapolated(inner.channel(d), dims, outer.point(i)))
                .collect()
        })
        .collect();
    let [gz, gy, gx]: [Vec<f64>; 3] = channels.try_into().expect("three channels");
    DeformationGrid::from_channels(dims, [gz, gy, gx])
}

/// Every intermediate of the composed transform.
#[derive(Debug, Clone)]
pub struct ComposedTransform {
    /// Deformable component, integrated from `Φ`.
    pub deformable: DeformationGrid,
    /// Linear component, built from `A`.
    pub affine: DeformationGrid,
    /// Single-pass equivalent grid.
    pub effective: DeformationGrid,
}

impl ComposedTransform {
    pub fn new(phi: &GradientField, a: &AffineParams) -> Result<Self> {
        let deformable = integrate_gradients(phi);
        let affine = affine_grid(a, phi.dims())?;
        let effective = compose_grids(&deformable, &affine)?;
        Ok(Self {
            deformable,
            affine,
            effective,
        })
    }
}

/// Two-pass warp `W(W(S, G_N), G_A)`, plus the effective single-pass grid.
pub fn compose_and_warp(
    s: &Volume3,
    phi: &GradientField,
    a: &AffineParams,
) -> Result<(Volume3, DeformationGrid)> {
    ensure_same(s.dims(), phi.dims())?;
    let t = ComposedTransform::new(phi, a)?;
    let warped = warp_two_pass(s, &t)?;
    Ok((warped, t.effective))
}

/// Applies an already-built transform in two passes.
pub fn warp_two_pass(s: &Volume3, t: &ComposedTransform) -> Result<Volume3> {
    ensure_same(s.dims(), t.deformable.dims())?;
    let dims = s.dims();
    let intermediate = warp_raw(s.data(), dims, &t.deformable);
    let out = warp_raw(&intermediate, dims, &t.affine);
    Volume3::from_vec(dims, s.spacing(), out)
}
