//! Synthetic registration problems with known ground truth.
//!
//! Ground-truth transforms are drawn from the model class itself (a spatial
//! gradient field plus an affine matrix), so every generated pair is exactly
//! solvable by the optimizer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::deform::{compose_and_warp, for_each_line, ComposedTransform};
use crate::error::{RegError, Result};
use crate::volume::{
    AffineParams, DeformationGrid, Dims, GradientField, Landmark, LandmarkSet, Mask3, Volume3, X,
    Y, Z,
};
use crate::deform::sample_extrapolated;
use crate::warp::warp_mask;

/// Number of landmarks placed on every phantom.
pub const LANDMARK_COUNT: usize = 11;

#[derive(Debug, Clone)]
pub struct Phantom {
    pub volume: Volume3,
    pub mask: Mask3,
    pub landmarks: LandmarkSet,
}

#[derive(Debug, Clone)]
struct Blob {
    center: [f64; 3],
    sigma: f64,
    amplitude: f64,
}

/// Smooth phantom: 3 to 6 Gaussian blobs plus a soft ellipsoid whose
/// 0.5 level set is the mask. Intensities are min-max normalized to `[0, 1]`.
///
/// Landmarks sit at the six ellipsoid axis extremes (just inside the surface),
/// then at blob centers, then at the ellipsoid center and midpoints between it
/// and the blobs until there are [`LANDMARK_COUNT`].
pub fn make_phantom(dims: Dims, seed: u64) -> Result<Phantom> {
    if dims.0.iter().any(|&n| n < 8) {
        return Err(RegError::InvalidParam(format!(
            "phantoms need at least 8 voxels per axis, got {dims}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ext: [f64; 3] = dims.0.map(|n| (n - 1) as f64);
    let min_ext = ext.iter().cloned().fold(f64::INFINITY, f64::min);

    let center: [f64; 3] = std::array::from_fn(|d| ext[d] * rng.gen_range(0.45..0.55));
    let semi: [f64; 3] = std::array::from_fn(|d| ext[d] * rng.gen_range(0.22..0.30));
    let softness = 0.08;

    let n_blobs = rng.gen_range(3..=6);
    let blobs: Vec<Blob> = (0..n_blobs)
        .map(|_| Blob {
            center: std::array::from_fn(|d| ext[d] * rng.gen_range(0.25..0.75)),
            sigma: min_ext * rng.gen_range(0.05..0.10),
            amplitude: rng.gen_range(0.3..0.8),
        })
        .collect();

    let radius = |p: [f64; 3]| {
        (0..3)
            .map(|d| ((p[d] - center[d]) / semi[d]).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    let raw = Volume3::from_fn(dims, [1.0; 3], |z, y, x| {
        let p = [z as f64, y as f64, x as f64];
        let organ = 1.0 / (1.0 + ((radius(p) - 1.0) / softness).exp());
        let blobs: f64 = blobs
            .iter()
            .map(|b| {
                let r2: f64 = (0..3).map(|d| (p[d] - b.center[d]).powi(2)).sum();
                b.amplitude * (-r2 / (2.0 * b.sigma * b.sigma)).exp()
            })
            .sum();
        0.6 * organ + blobs
    })?;
    let (lo, hi) = raw.min_max();
    let volume = Volume3::from_vec(
        dims,
        [1.0; 3],
        raw.data().iter().map(|v| ((v - lo) / (hi - lo)).clamp(0.0, 1.0)).collect(),
    )?;
    let mask = Mask3::from_fn(dims, [1.0; 3], |z, y, x| radius([z as f64, y as f64, x as f64]) <= 1.0)?;

    let mut points: Vec<[f64; 3]> = Vec::with_capacity(LANDMARK_COUNT);
    for d in 0..3 {
        for s in [-1.0, 1.0] {
            let mut p = center;
            p[d] += s * 0.9 * semi[d];
            points.push(p);
        }
    }
    points.extend(blobs.iter().take(LANDMARK_COUNT - points.len()).map(|b| b.center));
    if points.len() < LANDMARK_COUNT {
        points.push(center);
    }
    for b in blobs.iter().cycle().take(LANDMARK_COUNT - points.len()) {
        points.push(std::array::from_fn(|d| 0.5 * (center[d] + b.center[d])));
    }
    let landmarks = LandmarkSet::new(
        points
            .into_iter()
            .enumerate()
            .map(|(i, position)| Landmark {
                label: format!("L{:02}", i + 1),
                position,
            })
            .collect(),
    )?;

    Ok(Phantom {
        volume,
        mask,
        landmarks,
    })
}

/// Separable box blur of the given radius along every axis, averaging only
/// over in-bounds samples.
fn box_blur(values: &mut [f64], dims: Dims, radius: usize) {
    let mut line = Vec::new();
    for axis in [Z, Y, X] {
        let stride = dims.stride(axis);
        let n = dims.0[axis];
        for_each_line(dims, axis, |start| {
            line.clear();
            line.extend((0..n).map(|k| values[start + k * stride]));
            for k in 0..n {
                let lo = k.saturating_sub(radius);
                let hi = (k + radius).min(n - 1);
                let sum: f64 = line[lo..=hi].iter().sum();
                values[start + k * stride] = sum / (hi - lo + 1) as f64;
            }
        });
    }
}

/// Smooth zero-mean noise with unit RMS.
fn smooth_noise(dims: Dims, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut v: Vec<f64> = (0..dims.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let radius = dims.0.iter().min().map(|&n| n.div_ceil(8)).unwrap_or(1);
    box_blur(&mut v, dims, radius);
    box_blur(&mut v, dims, radius);
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.iter_mut().for_each(|x| *x -= mean);
    let rms = (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt();
    if rms > 0.0 {
        v.iter_mut().for_each(|x| *x /= rms);
    }
    v
}

fn check_strength(strength: f64) -> Result<()> {
    if !(0.0..1.0).contains(&strength) {
        return Err(RegError::InvalidParam(format!(
            "strength must lie in [0, 1), got {strength}"
        )));
    }
    Ok(())
}

/// Ground-truth `Φ* = 1 + strength · noise` (clipped to `[1 − strength, 1 + strength]`)
/// and `A* = A_I + δ` with `δ` uniform in `±0.05·strength` on the linear block and
/// `±0.1·strength` on the translation. Strength 0 gives the identity exactly.
pub fn make_ground_truth(dims: Dims, strength: f64, seed: u64) -> Result<(GradientField, AffineParams)> {
    check_strength(strength)?;
    dims.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5E_ED0F_D1FF);
    let channels: [Vec<f64>; 3] = std::array::from_fn(|_| {
        smooth_noise(dims, &mut rng)
            .into_iter()
            .map(|n| (1.0 + strength * n).clamp(1.0 - strength, 1.0 + strength))
            .collect()
    });
    let phi = GradientField::from_channels(dims, channels)?;
    let a = random_affine(strength, &mut rng)?;
    Ok((phi, a))
}

/// Ground truth with only the affine part perturbed (`Φ* = 1`).
pub fn make_affine_ground_truth(dims: Dims, strength: f64, seed: u64) -> Result<(GradientField, AffineParams)> {
    check_strength(strength)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xAF_F14E);
    Ok((GradientField::identity(dims)?, random_affine(strength, &mut rng)?))
}

fn random_affine(strength: f64, rng: &mut ChaCha8Rng) -> Result<AffineParams> {
    let mut a = AffineParams::IDENTITY;
    for row in a.matrix.iter_mut() {
        for (c, v) in row.iter_mut().enumerate() {
            let span = if c == 3 { 0.1 } else { 0.05 } * strength;
            if span > 0.0 {
                *v += rng.gen_range(-span..span);
            }
        }
    }
    a.validate()?;
    Ok(a)
}

/// A complete synthetic problem: register `moving` onto `reference`.
#[derive(Debug, Clone)]
pub struct SyntheticPair {
    pub reference: Volume3,
    pub moving: Volume3,
    pub reference_mask: Mask3,
    pub moving_mask: Mask3,
    /// Landmarks in the reference frame.
    pub reference_landmarks: LandmarkSet,
    /// The same landmarks mapped into the moving frame by the ground truth.
    pub moving_landmarks: LandmarkSet,
    pub phi: GradientField,
    pub affine: AffineParams,
    /// Effective ground-truth grid.
    pub grid: DeformationGrid,
}

fn solve3(m: [[f64; 3]; 3], b: [f64; 3]) -> Option<[f64; 3]> {
    let det = |m: [[f64; 3]; 3]| {
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    };
    let d = det(m);
    if d.abs() < 1e-12 {
        return None;
    }
    Some(std::array::from_fn(|c| {
        let mut mc = m;
        for r in 0..3 {
            mc[r][c] = b[r];
        }
        det(mc) / d
    }))
}

/// Finds the reference-frame point that `grid` maps onto `target` with Newton
/// iterations on the trilinearly interpolated grid.
pub fn invert_point(grid: &DeformationGrid, target: [f64; 3]) -> Result<[f64; 3]> {
    let dims = grid.dims();
    let eval = |p: [f64; 3]| -> [f64; 3] {
        std::array::from_fn(|d| sample_extrapolated(grid.channel(d), dims, p))
    };
    let mut p = target;
    for _ in 0..100 {
        let g = eval(p);
        let r: [f64; 3] = std::array::from_fn(|d| target[d] - g[d]);
        if r.iter().all(|v| v.abs() < 1e-11) {
            return Ok(p);
        }
        let h = 1e-6;
        let mut jac = [[0.0; 3]; 3];
        for c in 0..3 {
            let mut hi = p;
            let mut lo = p;
            hi[c] += h;
            lo[c] -= h;
            let (gh, gl) = (eval(hi), eval(lo));
            for r in 0..3 {
                jac[r][c] = (gh[r] - gl[r]) / (2.0 * h);
            }
        }
        let step = solve3(jac, r)
            .ok_or_else(|| RegError::InvalidParam("singular grid Jacobian while inverting".into()))?;
        for d in 0..3 {
            p[d] += step[d];
        }
    }
    Err(RegError::InvalidParam(format!(
        "could not invert the grid at {target:?}"
    )))
}

/// Builds the reference by warping the phantom with the ground truth; the
/// phantom itself is the moving image.
///
/// Moving-frame landmarks are the phantom's landmarks (which sit on image
/// structure). Reference-frame landmarks are their preimages under the
/// ground-truth grid, so sampling the grid at a reference landmark returns its
/// moving annotation.
pub fn make_pair(phantom: &Phantom, gt: &(GradientField, AffineParams)) -> Result<SyntheticPair> {
    let (phi, affine) = gt;
    let (reference, grid) = compose_and_warp(&phantom.volume, phi, affine)?;
    let reference_mask = warp_mask(&phantom.mask, &grid)?;
    let dims = grid.dims();
    let mut reference_points = Vec::with_capacity(phantom.landmarks.len());
    for l in phantom.landmarks.points() {
        let position = invert_point(&grid, l.position)?;
        if !dims.contains(position) {
            return Err(RegError::Landmark(format!(
                "landmark {:?} maps outside the reference volume",
                l.label
            )));
        }
        reference_points.push(Landmark {
            label: l.label.clone(),
            position,
        });
    }
    Ok(SyntheticPair {
        reference,
        moving: phantom.volume.clone(),
        reference_mask,
        moving_mask: phantom.mask.clone(),
        reference_landmarks: LandmarkSet::new(reference_points)?,
        moving_landmarks: phantom.landmarks.clone(),
        phi: phi.clone(),
        affine: *affine,
        grid,
    })
}

/// Convenience: phantom + ground truth + pair from one seed.
pub fn make_case(dims: Dims, strength: f64, seed: u64) -> Result<SyntheticPair> {
    let phantom = make_phantom(dims, seed)?;
    let gt = make_ground_truth(dims, strength, seed)?;
    make_pair(&phantom, &gt)
}

/// Ground-truth transform as a [`ComposedTransform`].
pub fn ground_truth_transform(pair: &SyntheticPair) -> Result<ComposedTransform> {
    ComposedTransform::new(&pair.phi, &pair.affine)
}

/// Literal evaluation of the backward-warping sum over every source voxel:
/// `D(p) = Σ_q S(q) Π_d max(0, 1 − |G_d(p) − q_d|)`. Quadratic cost; a test oracle.
pub fn brute_force_warp(s: &Volume3, g: &DeformationGrid) -> Volume3 {
    let dims = s.dims();
    let hat = |t: f64| (1.0 - t.abs()).max(0.0);
    let data = (0..dims.len())
        .map(|p| {
            let c = g.point(p);
            let mut acc = 0.0;
            for q in 0..dims.len() {
                let qc = dims.coords(q);
                let w = hat(c[0] - qc[0] as f64) * hat(c[1] - qc[1] as f64) * hat(c[2] - qc[2] as f64);
                acc += s.data()[q] * w;
            }
            acc
        })
        .collect();
    Volume3::from_parts_unchecked(dims, s.spacing(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::warp::sample;
    use crate::evaluate::{dice, fold_check};
    use crate::deform::integrate_gradients;
    use crate::objective::{loss, PhiLogits};
    use crate::volume::identity_grid;

    #[test]
    fn phantom_is_deterministic_and_normalized() {
        let dims = Dims([12, 14, 16]);
        let a = make_phantom(dims, 7).unwrap();
        let b = make_phantom(dims, 7).unwrap();
        assert_eq!(a.volume, b.volume);
        assert_eq!(a.landmarks, b.landmarks);
        let (lo, hi) = a.volume.min_max();
        assert_eq!((lo, hi), (0.0, 1.0));
        assert!(a.mask.count() > 0);
        assert_eq!(a.landmarks.len(), LANDMARK_COUNT);
        assert!(a.landmarks.out_of_bounds(dims).is_empty());
        // mask strictly inside: nothing on the outer faces
        for i in 0..dims.len() {
            let p = dims.coords(i);
            let on_face = (0..3).any(|d| p[d] == 0 || p[d] == dims.0[d] - 1);
            if on_face {
                assert_eq!(a.mask.as_volume().data()[i], 0.0);
            }
        }
        assert!(make_phantom(Dims([7, 8, 8]), 0).is_err());
    }

    #[test]
    fn every_seed_gets_eleven_landmarks() {
        for seed in 0..30 {
            let p = make_phantom(Dims([8, 8, 8]), seed).unwrap();
            assert_eq!(p.landmarks.len(), LANDMARK_COUNT);
        }
    }

    #[test]
    fn zero_strength_is_identity() {
        let dims = Dims([8, 9, 10]);
        let (phi, a) = make_ground_truth(dims, 0.0, 3).unwrap();
        assert_eq!(phi, GradientField::identity(dims).unwrap());
        assert_eq!(a, AffineParams::IDENTITY);
        assert!(make_ground_truth(dims, 1.0, 3).is_err());
        assert!(make_ground_truth(dims, -0.1, 3).is_err());
    }

    #[test]
    fn ground_truth_is_valid_and_fold_free() {
        let dims = Dims([10, 10, 10]);
        for seed in 0..5 {
            let (phi, a) = make_ground_truth(dims, 0.4, seed).unwrap();
            assert!(phi.channels().iter().flatten().all(|&v| (0.6..=1.4).contains(&v)));
            assert!(fold_check(&integrate_gradients(&phi)).is_fold_free());
            for (r, row) in a.deviation().chunks(4).enumerate() {
                assert!(row[..3].iter().all(|v| v.abs() <= 0.02), "row {r}");
                assert!(row[3].abs() <= 0.04);
            }
        }
    }

    #[test]
    fn identity_ground_truth_reproduces_phantom() {
        let dims = Dims([10, 10, 10]);
        let ph = make_phantom(dims, 1).unwrap();
        let pair = make_pair(&ph, &make_ground_truth(dims, 0.0, 1).unwrap()).unwrap();
        assert_eq!(pair.reference, ph.volume);
        assert_eq!(pair.grid, identity_grid(dims).unwrap());
        for (m, r) in pair.moving_landmarks.points().iter().zip(pair.reference_landmarks.points()) {
            assert_eq!(m.position, ph.landmarks.get(&m.label).unwrap().position);
            assert_eq!(m.label, r.label);
            for d in 0..3 {
                assert!((m.position[d] - r.position[d]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn reference_landmarks_map_onto_moving_annotations() {
        let pair = make_case(Dims([20, 20, 20]), 0.2, 5).unwrap();
        let dims = pair.grid.dims();
        for (r, m) in pair.reference_landmarks.points().iter().zip(pair.moving_landmarks.points()) {
            for d in 0..3 {
                let mapped = sample(pair.grid.channel(d), dims, r.position);
                assert!((mapped - m.position[d]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn deformation_moves_the_mask() {
        let pair = make_case(Dims([24, 24, 24]), 0.2, 2).unwrap();
        assert!(dice(&pair.reference_mask, &pair.moving_mask).unwrap() < 1.0);
    }

    #[test]
    fn ground_truth_hits_the_regularizer_floor() {
        let pair = make_case(Dims([12, 12, 12]), 0.2, 4).unwrap();
        let theta = PhiLogits::from_phi(&pair.phi);
        let l = loss(&pair.reference, &pair.moving, &theta, &pair.affine, 1e-6, 1e-6).unwrap();
        assert!(l.mse < 1e-20, "mse {}", l.mse);
        let floor = 1e-6 * (l.affine_reg + l.phi_reg);
        assert!((l.total - floor).abs() < 1e-18);
    }

    #[test]
    fn brute_force_edge_cases() {
        let dims = Dims([3, 3, 3]);
        let v = Volume3::from_fn(dims, [1.0; 3], |z, y, x| (z * 9 + y * 3 + x) as f64).unwrap();
        assert_eq!(brute_force_warp(&v, &identity_grid(dims).unwrap()), v);
        let far = DeformationGrid::from_channels(dims, std::array::from_fn(|_| vec![-3.0; 27])).unwrap();
        assert!(brute_force_warp(&v, &far).data().iter().all(|&x| x == 0.0));
    }
}
