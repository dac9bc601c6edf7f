//! Backward trilinear warping.
//!
//! Output voxel `p` reads the source at the coordinate `G(p)`:
//!
//! `D(p) = Σ_q S(q) · Π_d max(0, 1 − |G_d(p) − q_d|)`
//!
//! Only the eight integer neighbours of `G(p)` carry nonzero weight, and
//! neighbours outside the volume contribute zero (implicit zero padding).
//! The derivative of the hat kernel is `−sign(t)` for `0 < |t| < 1` and `0`
//! at `t = 0` and `|t| ≥ 1`, so derivatives vanish at integer coordinates.

use rayon::prelude::*;

use crate::error::Result;
use crate::volume::{ensure_same, DeformationGrid, Dims, Mask3, Volume3, X, Y, Z};

/// How the derivative of the hat kernel is taken at integer coordinates,
/// where it has a kink.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KinkRule {
    /// Derivative 0 at the kink.
    Zero,
    /// Mean of the left and right derivatives: a central difference of the
    /// neighbours. Used inside the loss gradient, where the zero rule would
    /// leave every integer-valued grid (the identity in particular) stationary.
    Centered,
}

/// Per-axis neighbours (possibly out of range), hat weights and hat-weight
/// derivatives with respect to the coordinate. Only the first `len` entries
/// are used.
#[derive(Debug, Clone, Copy)]
struct AxisStencil {
    idx: [i64; 3],
    w: [f64; 3],
    dw: [f64; 3],
    len: usize,
}

#[inline]
fn axis_stencil(c: f64, rule: KinkRule) -> AxisStencil {
    let fl = c.floor();
    let f = c - fl;
    let i0 = fl as i64;
    if f > 0.0 {
        AxisStencil {
            idx: [i0, i0 + 1, 0],
            w: [1.0 - f, f, 0.0],
            dw: [-1.0, 1.0, 0.0],
            len: 2,
        }
    } else if rule == KinkRule::Centered {
        AxisStencil {
            idx: [i0 - 1, i0, i0 + 1],
            w: [0.0, 1.0, 0.0],
            dw: [-0.5, 0.0, 0.5],
            len: 3,
        }
    } else {
        AxisStencil {
            idx: [i0, i0 + 1, 0],
            w: [1.0, 0.0, 0.0],
            dw: [0.0, 0.0, 0.0],
            len: 2,
        }
    }
}

#[inline]
fn stencils(c: [f64; 3], rule: KinkRule) -> [AxisStencil; 3] {
    [axis_stencil(c[Z], rule), axis_stencil(c[Y], rule), axis_stencil(c[X], rule)]
}

#[inline]
fn in_range(i: i64, n: usize) -> bool {
    i >= 0 && (i as usize) < n
}

/// Zero-padded trilinear sample of `src` at `c = (z, y, x)`.
#[inline]
pub(crate) fn sample(src: &[f64], dims: Dims, c: [f64; 3]) -> f64 {
    let s = stencils(c, KinkRule::Zero);
    let mut acc = 0.0;
    for a in 0..s[Z].len {
        let iz = s[Z].idx[a];
        if !in_range(iz, dims.nz()) {
            continue;
        }
        for b in 0..s[Y].len {
            let iy = s[Y].idx[b];
            if !in_range(iy, dims.ny()) {
                continue;
            }
            let wzy = s[Z].w[a] * s[Y].w[b];
            for e in 0..s[X].len {
                let ix = s[X].idx[e];
                if !in_range(ix, dims.nx()) {
                    continue;
                }
                let v = src[dims.index(iz as usize, iy as usize, ix as usize)];
                acc += wzy * s[X].w[e] * v;
            }
        }
    }
    acc
}

/// Sample plus the partial derivatives with respect to each coordinate.
#[inline]
pub(crate) fn sample_with_grad(
    src: &[f64],
    dims: Dims,
    c: [f64; 3],
    rule: KinkRule,
) -> (f64, [f64; 3]) {
    let s = stencils(c, rule);
    let mut acc = 0.0;
    let mut grad = [0.0; 3];
    for a in 0..s[Z].len {
        let iz = s[Z].idx[a];
        if !in_range(iz, dims.nz()) {
            continue;
        }
        for b in 0..s[Y].len {
            let iy = s[Y].idx[b];
            if !in_range(iy, dims.ny()) {
                continue;
            }
            for e in 0..s[X].len {
                let ix = s[X].idx[e];
                if !in_range(ix, dims.nx()) {
                    continue;
                }
                let v = src[dims.index(iz as usize, iy as usize, ix as usize)];
                let (wz, wy, wx) = (s[Z].w[a], s[Y].w[b], s[X].w[e]);
                acc += wz * wy * wx * v;
                grad[Z] += s[Z].dw[a] * wy * wx * v;
                grad[Y] += wz * s[Y].dw[b] * wx * v;
                grad[X] += wz * wy * s[X].dw[e] * v;
            }
        }
    }
    (acc, grad)
}

/// Scatters `u` into `dst` with the trilinear weights of coordinate `c`:
/// the transpose of [`sample`].
#[inline]
fn splat(dst: &mut [f64], dims: Dims, c: [f64; 3], u: f64) {
    let s = stencils(c, KinkRule::Zero);
    for a in 0..s[Z].len {
        let iz = s[Z].idx[a];
        if !in_range(iz, dims.nz()) {
            continue;
        }
        for b in 0..s[Y].len {
            let iy = s[Y].idx[b];
            if !in_range(iy, dims.ny()) {
                continue;
            }
            for e in 0..s[X].len {
                let ix = s[X].idx[e];
                if !in_range(ix, dims.nx()) {
                    continue;
                }
                let w = s[Z].w[a] * s[Y].w[b] * s[X].w[e];
                dst[dims.index(iz as usize, iy as usize, ix as usize)] += w * u;
            }
        }
    }
}

/// Trilinear weights of the eight neighbours of `c`, used by tests to check
/// partition of unity.
pub fn trilinear_weights(c: [f64; 3]) -> [([i64; 3], f64); 8] {
    let s = stencils(c, KinkRule::Zero);
    let mut out = [([0i64; 3], 0.0); 8];
    let mut k = 0;
    for a in 0..2 {
        for b in 0..2 {
            for e in 0..2 {
                out[k] = (
                    [s[Z].idx[a], s[Y].idx[b], s[X].idx[e]],
                    s[Z].w[a] * s[Y].w[b] * s[X].w[e],
                );
                k += 1;
            }
        }
    }
    out
}

/// Evaluates `f(voxel_index)` for every voxel of `dims`, one z-slice per task.
fn map_voxels(dims: Dims, f: impl Fn(usize) -> f64 + Sync) -> Vec<f64> {
    let slice = dims.ny() * dims.nx();
    let mut out = vec![0.0; dims.len()];
    out.par_chunks_mut(slice).enumerate().for_each(|(z, chunk)| {
        for (k, o) in chunk.iter_mut().enumerate() {
            *o = f(z * slice + k);
        }
    });
    out
}

pub(crate) fn warp_raw(src: &[f64], dims: Dims, g: &DeformationGrid) -> Vec<f64> {
    map_voxels(dims, |i| sample(src, dims, g.point(i)))
}

pub(crate) fn warp_with_grad_raw(
    src: &[f64],
    dims: Dims,
    g: &DeformationGrid,
    rule: KinkRule,
) -> (Vec<f64>, [Vec<f64>; 3]) {
    let slice = dims.ny() * dims.nx();
    let mut value = vec![0.0; dims.len()];
    let mut grads: [Vec<f64>; 3] = [vec![0.0; dims.len()], vec![0.0; dims.len()], vec![0.0; dims.len()]];
    let [gz, gy, gx] = &mut grads;
    value
        .par_chunks_mut(slice)
        .zip(gz.par_chunks_mut(slice))
        .zip(gy.par_chunks_mut(slice))
        .zip(gx.par_chunks_mut(slice))
        .enumerate()
        .for_each(|(z, (((v, dz), dy), dx))| {
            for k in 0..slice {
                let (s, d) = sample_with_grad(src, dims, g.point(z * slice + k), rule);
                v[k] = s;
                dz[k] = d[Z];
                dy[k] = d[Y];
                dx[k] = d[X];
            }
        });
    (value, grads)
}

/// Adjoint of warping with respect to the source intensities:
/// `out(q) = Σ_p u(p) · w(G(p), q)`.
///
/// Accumulates sequentially so the floating-point result does not depend on
/// the thread count.
pub(crate) fn warp_adjoint(u: &[f64], dims: Dims, g: &DeformationGrid) -> Vec<f64> {
    let mut out = vec![0.0; dims.len()];
    for (i, &ui) in u.iter().enumerate() {
        if ui != 0.0 {
            splat(&mut out, dims, g.point(i), ui);
        }
    }
    out
}

/// Backward-warps `s` under `g`.
pub fn warp(s: &Volume3, g: &DeformationGrid) -> Result<Volume3> {
    ensure_same(s.dims(), g.dims())?;
    let data = warp_raw(s.data(), s.dims(), g);
    Ok(Volume3::from_parts_unchecked(s.dims(), s.spacing(), data))
}

/// Warped volume together with `∂D(p)/∂G_d(p)` for each axis `d`.
pub fn warp_with_grad(s: &Volume3, g: &DeformationGrid) -> Result<(Volume3, [Vec<f64>; 3])> {
    ensure_same(s.dims(), g.dims())?;
    let (data, grads) = warp_with_grad_raw(s.data(), s.dims(), g, KinkRule::Zero);
    Ok((
        Volume3::from_parts_unchecked(s.dims(), s.spacing(), data),
        grads,
    ))
}

/// Warps a mask as a scalar volume and re-binarizes it at 0.5.
pub fn warp_mask(m: &Mask3, g: &DeformationGrid) -> Result<Mask3> {
    let warped = warp(m.as_volume(), g)?;
    Ok(Mask3::threshold(&warped, 0.5))
}

/// Resamples `v` onto `dims` with corner-aligned trilinear interpolation:
/// output voxel `i` along an axis of length `m` reads input coordinate
/// `i · (n − 1) / (m − 1)`.
pub fn resample(v: &Volume3, dims: Dims) -> Result<Volume3> {
    dims.validate()?;
    let src = v.dims();
    let ratio: [f64; 3] =
        std::array::from_fn(|d| (src.0[d] - 1) as f64 / (dims.0[d] - 1) as f64);
    let data = map_voxels(dims, |i| {
        let p = dims.coords(i);
        let c = std::array::from_fn(|d| {
            let x = p[d] as f64 * ratio[d];
            // keep the last sample exactly on the last source voxel
            if p[d] == dims.0[d] - 1 {
                (src.0[d] - 1) as f64
            } else {
                x
            }
        });
        sample(v.data(), src, c)
    });
    let spacing = std::array::from_fn(|d| v.spacing()[d] * ratio[d]);
    Volume3::from_vec(dims, spacing, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::identity_grid;

    fn ramp_x(dims: Dims) -> Volume3 {
        Volume3::from_fn(dims, [1.0; 3], |_, _, x| 10.0 * x as f64).unwrap()
    }

    fn shifted_x(dims: Dims, shift: f64) -> DeformationGrid {
        let mut ch = identity_grid(dims).unwrap().into_channels();
        ch[X].iter_mut().for_each(|v| *v += shift);
        DeformationGrid::from_channels(dims, ch).unwrap()
    }

    #[test]
    fn identity_reproduces_input() {
        let dims = Dims([3, 4, 5]);
        let v = Volume3::from_fn(dims, [1.0; 3], |z, y, x| ((z * 31 + y * 7 + x) as f64).sin()).unwrap();
        let out = warp(&v, &identity_grid(dims).unwrap()).unwrap();
        assert_eq!(out, v);
    }

    #[test]
    fn half_voxel_shift_on_ramp() {
        let dims = Dims([3, 3, 6]);
        let out = warp(&ramp_x(dims), &shifted_x(dims, 0.5)).unwrap();
        for z in 0..3 {
            for y in 0..3 {
                for x in 0..5 {
                    assert!((out.at(z, y, x) - 10.0 * (x as f64 + 0.5)).abs() < 1e-12);
                }
                // last column reads half of the last voxel and half of padding
                assert!((out.at(z, y, 5) - 0.5 * 50.0).abs() < 1e-12);
            }
        }
        assert_eq!(out.at(0, 0, 0), 5.0);
    }

    #[test]
    fn derivative_on_constant_and_ramp() {
        let dims = Dims([4, 4, 4]);
        let c = Volume3::new(dims, [1.0; 3], 3.0).unwrap();
        let (_, g) = warp_with_grad(&c, &identity_grid(dims).unwrap()).unwrap();
        assert!(g.iter().flatten().all(|&v| v == 0.0));

        let (_, g) = warp_with_grad(&ramp_x(dims), &shifted_x(dims, 0.3)).unwrap();
        for i in 0..dims.len() {
            let [_, _, x] = dims.coords(i);
            if x < 2 {
                assert!((g[X][i] - 10.0).abs() < 1e-12);
                assert_eq!(g[Y][i], 0.0);
                assert_eq!(g[Z][i], 0.0);
            }
        }
    }

    #[test]
    fn derivative_is_zero_at_integer_coordinates() {
        let dims = Dims([4, 4, 4]);
        let (_, g) = warp_with_grad(&ramp_x(dims), &shifted_x(dims, 1.0)).unwrap();
        assert!(g[X].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn out_of_bounds_reads_zero() {
        let dims = Dims([2, 2, 2]);
        let v = Volume3::new(dims, [1.0; 3], 1.0).unwrap();
        let out = warp(&v, &shifted_x(dims, -5.0)).unwrap();
        assert!(out.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let v = Volume3::new(Dims([2, 2, 2]), [1.0; 3], 1.0).unwrap();
        let g = identity_grid(Dims([2, 2, 3])).unwrap();
        assert!(warp(&v, &g).is_err());
        assert!(warp_with_grad(&v, &g).is_err());
    }

    #[test]
    fn mask_warps() {
        let dims = Dims([4, 4, 4]);
        let ones = Mask3::from_fn(dims, [1.0; 3], |_, _, _| true).unwrap();
        let m = Mask3::from_fn(dims, [1.0; 3], |z, y, x| (z + y + x) % 2 == 0).unwrap();
        let id = identity_grid(dims).unwrap();
        assert_eq!(warp_mask(&m, &id).unwrap(), m);
        let g = shifted_x(dims, 0.3);
        // in-bounds grid: keep x in [0, 3]
        let mut ch = g.into_channels();
        ch[X].iter_mut().for_each(|v| *v = v.min(3.0));
        let g = DeformationGrid::from_channels(dims, ch).unwrap();
        assert_eq!(warp_mask(&ones, &g).unwrap(), ones);
    }

    #[test]
    fn adjoint_matches_inner_product() {
        // <warp(s), u> == <s, warp_adjoint(u)>
        let dims = Dims([3, 4, 5]);
        let s: Vec<f64> = (0..dims.len()).map(|i| ((i * 7919) % 13) as f64 - 6.0).collect();
        let u: Vec<f64> = (0..dims.len()).map(|i| ((i * 104_729) % 11) as f64 * 0.1).collect();
        let mut ch = identity_grid(dims).unwrap().into_channels();
        for (k, c) in ch.iter_mut().enumerate() {
            for (i, v) in c.iter_mut().enumerate() {
                *v += 0.37 * (((i + k) % 5) as f64 - 2.0);
            }
        }
        let g = DeformationGrid::from_channels(dims, ch).unwrap();
        let ws = warp_raw(&s, dims, &g);
        let au = warp_adjoint(&u, dims, &g);
        let lhs: f64 = ws.iter().zip(&u).map(|(a, b)| a * b).sum();
        let rhs: f64 = s.iter().zip(&au).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));
    }

    #[test]
    fn resample_identity_and_halving() {
        let dims = Dims([5, 5, 9]);
        let v = ramp_x(dims);
        assert_eq!(resample(&v, dims).unwrap(), v);
        let half = resample(&v, Dims([3, 3, 5])).unwrap();
        for x in 0..5 {
            assert!((half.at(1, 1, x) - 20.0 * x as f64).abs() < 1e-12);
        }
    }
}
