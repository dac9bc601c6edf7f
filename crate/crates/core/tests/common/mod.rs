//! Random instances shared by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use volreg::{AffineParams, DeformationGrid, Dims, GradientField, PhiLogits, Volume3};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_volume(dims: Dims, rng: &mut impl Rng) -> Volume3 {
    Volume3::from_vec(dims, [1.0; 3], (0..dims.len()).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
}

/// Grid coordinates drawn uniformly from `[lo, hi]` on every axis.
pub fn random_grid(dims: Dims, lo: f64, hi: f64, rng: &mut impl Rng) -> DeformationGrid {
    let channels = std::array::from_fn(|d| {
        let n = dims.0[d] as f64 - 1.0;
        (0..dims.len())
            .map(|_| rng.gen_range(lo..=hi) * n)
            .collect()
    });
    DeformationGrid::from_channels(dims, channels).unwrap()
}

/// Identity grid plus uniform jitter of at most `amp` voxels.
pub fn jittered_grid(dims: Dims, amp: f64, rng: &mut impl Rng) -> DeformationGrid {
    let channels = std::array::from_fn(|d| {
        (0..dims.len())
            .map(|i| dims.coords(i)[d] as f64 + rng.gen_range(-amp..=amp))
            .collect()
    });
    DeformationGrid::from_channels(dims, channels).unwrap()
}

pub fn random_phi(dims: Dims, lo: f64, hi: f64, rng: &mut impl Rng) -> GradientField {
    let channels = std::array::from_fn(|_| (0..dims.len()).map(|_| rng.gen_range(lo..hi)).collect());
    GradientField::from_channels(dims, channels).unwrap()
}

pub fn random_logits(dims: Dims, amp: f64, rng: &mut impl Rng) -> PhiLogits {
    let channels = std::array::from_fn(|_| (0..dims.len()).map(|_| rng.gen_range(-amp..amp)).collect());
    PhiLogits::from_channels(dims, channels).unwrap()
}

/// `A_I` plus uniform noise of `lin` on the linear block and `trans` on the translation.
pub fn random_affine(lin: f64, trans: f64, rng: &mut impl Rng) -> AffineParams {
    let mut a = AffineParams::IDENTITY;
    for row in a.matrix.iter_mut() {
        for (c, v) in row.iter_mut().enumerate() {
            let span = if c == 3 { trans } else { lin };
            *v += rng.gen_range(-span..=span);
        }
    }
    a
}

/// Smooth unit-range volume: a sum of Gaussian blobs.
pub fn blob_volume(dims: Dims, blobs: &[([f64; 3], f64, f64)]) -> Volume3 {
    let v = Volume3::from_fn(dims, [1.0; 3], |z, y, x| {
        let p = [z as f64, y as f64, x as f64];
        blobs
            .iter()
            .map(|(c, sigma, amp)| {
                let r2: f64 = (0..3).map(|d| (p[d] - c[d]).powi(2)).sum();
                amp * (-r2 / (2.0 * sigma * sigma)).exp()
            })
            .sum()
    })
    .unwrap();
    let (_, hi) = v.min_max();
    v.scale(1.0 / hi).unwrap()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Result of comparing the analytic loss gradient with central differences.
#[derive(Debug, Clone, Copy)]
pub struct FdCheck {
    pub max_rel: f64,
    pub checked: usize,
    pub skipped: usize,
}

fn near_integer(v: f64, within: f64) -> bool {
    (v - v.round()).abs() <= within
}

/// Central differences of the loss along every parameter coordinate, skipping
/// coordinates whose perturbation could move some sampling coordinate across
/// an integer (a kink of the interpolation kernel) or cross an L1 kink.
pub fn fd_check_loss(
    r: &Volume3,
    s: &Volume3,
    theta: &PhiLogits,
    a: &AffineParams,
    alpha: f64,
    beta: f64,
    h: f64,
) -> FdCheck {
    use volreg::{affine_grid, integrate_gradients, loss, loss_grad, phi_from_logits};

    let dims = r.dims();
    let n = dims.len();
    let grad = loss_grad(r, s, theta, a, alpha, beta).unwrap();
    let g_n = integrate_gradients(&phi_from_logits(theta));
    let g_a = affine_grid(a, dims).unwrap();
    let total = |t: &PhiLogits, a: &AffineParams| loss(r, s, t, a, alpha, beta).unwrap().total;
    let rel = |an: f64, fd: f64| (an - fd).abs() / an.abs().max(fd.abs()).max(1e-8);

    let mut out = FdCheck { max_rel: 0.0, checked: 0, skipped: 0 };
    let margin = 2.0;

    for axis in 0..3 {
        for i in 0..n {
            let t = theta.channel(axis)[i];
            let sig = 1.0 / (1.0 + (-t).exp());
            let reach = margin * 2.0 * sig * (1.0 - sig) * h;
            // Every voxel at or after i along this axis line shifts by up to `reach`.
            let c = dims.coords(i);
            let stride = dims.stride(axis);
            let hits_kink = (c[axis]..dims.0[axis])
                .map(|k| i + (k - c[axis]) * stride)
                .any(|j| near_integer(g_n.channel(axis)[j], reach));
            if hits_kink || (beta > 0.0 && t.abs() <= margin * h) {
                out.skipped += 1;
                continue;
            }
            let mut plus = theta.channels().clone();
            let mut minus = theta.channels().clone();
            plus[axis][i] += h;
            minus[axis][i] -= h;
            let fd = (total(&PhiLogits::from_channels(dims, plus).unwrap(), a)
                - total(&PhiLogits::from_channels(dims, minus).unwrap(), a))
                / (2.0 * h);
            out.max_rel = out.max_rel.max(rel(grad.d_theta.channel(axis)[i], fd));
            out.checked += 1;
        }
    }

    let flat = a.to_flat();
    let dev = a.deviation();
    for k in 0..12 {
        let (row, col) = (k / 4, k % 4);
        let half = (dims.0[row] as f64 - 1.0) / 2.0;
        // Normalized coordinates lie in [-1, 1]; the translation column is 1.
        let reach = margin * half * h;
        let hits_kink = (0..n).any(|j| {
            let scale = if col == 3 {
                1.0
            } else {
                let p = dims.coords(j)[col] as f64;
                (p / ((dims.0[col] as f64 - 1.0) / 2.0) - 1.0).abs()
            };
            scale > 0.0 && near_integer(g_a.channel(row)[j], reach * scale)
        });
        if hits_kink || (alpha > 0.0 && dev[k].abs() <= margin * h) {
            out.skipped += 1;
            continue;
        }
        let mut plus = flat;
        let mut minus = flat;
        plus[k] += h;
        minus[k] -= h;
        let fd = (total(theta, &AffineParams::from_flat(&plus)) - total(theta, &AffineParams::from_flat(&minus)))
            / (2.0 * h);
        out.max_rel = out.max_rel.max(rel(grad.d_affine[k], fd));
        out.checked += 1;
    }
    out
}
