#![allow(clippy::needless_range_loop)]

mod common;

use common::*;
use rand::Rng;
use volreg::{
    identity_grid, loss_grad, warp, warp_with_grad, AffineParams, DeformationGrid, Dims, PhiLogits, Volume3,
};

#[test]
fn loss_gradient_matches_central_differences() {
    let dims = Dims([6, 6, 6]);
    let mut total_checked = 0;
    for seed in 0..12 {
        let mut rng = rng(seed);
        let r = random_volume(dims, &mut rng);
        let s = random_volume(dims, &mut rng);
        let theta = random_logits(dims, 1.0, &mut rng);
        let a = random_affine(0.05, 0.1, &mut rng);
        let fd = fd_check_loss(&r, &s, &theta, &a, 1e-3, 1e-3, 1e-4);
        assert!(fd.max_rel < 1e-3, "seed {seed}: {fd:?}");
        total_checked += fd.checked;
    }
    assert!(total_checked > 1000, "only {total_checked} coordinates were away from kinks");
}

#[test]
fn affine_only_and_deformable_only_gradients() {
    let dims = Dims([5, 6, 7]);
    let mut rng = rng(99);
    let r = random_volume(dims, &mut rng);
    let s = random_volume(dims, &mut rng);
    // Deformable part only: affine at a non-integer translation.
    let theta = random_logits(dims, 1.5, &mut rng);
    let shifted = AffineParams::translation([0.013, -0.021, 0.017]).unwrap();
    let fd = fd_check_loss(&r, &s, &theta, &shifted, 0.0, 1e-2, 1e-4);
    assert!(fd.max_rel < 1e-3, "{fd:?}");
    // Affine part only, with Φ at one.
    let fd = fd_check_loss(&r, &s, &PhiLogits::zeros(dims).unwrap(), &random_affine(0.1, 0.1, &mut rng), 1e-2, 0.0, 1e-4);
    assert!(fd.max_rel < 1e-3, "{fd:?}");
}

#[test]
fn identity_is_a_stationary_point() {
    let dims = Dims([6, 5, 4]);
    let mut rng = rng(3);
    let r = random_volume(dims, &mut rng);
    let g = loss_grad(&r, &r, &PhiLogits::zeros(dims).unwrap(), &AffineParams::IDENTITY, 1e-3, 1e-3).unwrap();
    assert!(g.d_theta.channels().iter().flatten().all(|&v| v == 0.0));
    assert!(g.d_affine.iter().all(|&v| v == 0.0));
    assert_eq!(g.breakdown.total, 0.0);
}

#[test]
fn single_affine_entry_gradient_is_the_penalty_sign() {
    // A constant image is unchanged by any in-bounds motion away from the
    // border, so only the L1 term contributes.
    let dims = Dims([6, 6, 6]);
    let r = Volume3::new(dims, [1.0; 3], 0.0).unwrap();
    let alpha = 0.3;
    for (k, delta) in [(1, 0.2), (5, -0.1), (11, 0.05)] {
        let mut flat = AffineParams::IDENTITY.to_flat();
        flat[k] += delta;
        let g = loss_grad(&r, &r, &PhiLogits::zeros(dims).unwrap(), &AffineParams::from_flat(&flat), alpha, 0.0).unwrap();
        for (j, v) in g.d_affine.iter().enumerate() {
            let expected = if j == k { alpha * f64::signum(delta) } else { 0.0 };
            assert_eq!(*v, expected, "entry {j}");
        }
    }
}

#[test]
fn warp_derivative_matches_central_differences() {
    let dims = Dims([6, 6, 6]);
    let h = 1e-4;
    let mut checked = 0;
    for seed in 0..10 {
        let mut rng = rng(seed + 100);
        let s = random_volume(dims, &mut rng);
        let g = random_grid(dims, -0.1, 1.1, &mut rng);
        let (_, grads) = warp_with_grad(&s, &g).unwrap();
        for axis in 0..3 {
            let shifted = |delta: f64| {
                let mut ch = g.channels().clone();
                ch[axis].iter_mut().for_each(|v| *v += delta);
                warp(&s, &DeformationGrid::from_channels(dims, ch).unwrap()).unwrap()
            };
            let (plus, minus) = (shifted(h), shifted(-h));
            for i in 0..dims.len() {
                let c = g.channel(axis)[i];
                if (c - c.round()).abs() <= 2.0 * h {
                    continue;
                }
                let fd = (plus.data()[i] - minus.data()[i]) / (2.0 * h);
                let an = grads[axis][i];
                let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-8);
                assert!(rel < 1e-4, "seed {seed} axis {axis} voxel {i}: {an} vs {fd}");
                checked += 1;
            }
        }
    }
    assert!(checked > 5000);
}

#[test]
fn warp_derivative_on_ramp_and_constant() {
    let dims = Dims([4, 5, 6]);
    let ramp = Volume3::from_fn(dims, [1.0; 3], |_, _, x| 10.0 * x as f64).unwrap();
    let mut rng = rng(5);
    let id = identity_grid(dims).unwrap();
    let mut ch = id.channels().clone();
    for v in ch[2].iter_mut() {
        *v = (*v + rng.gen_range(0.05..0.95)).min(4.9);
    }
    let g = DeformationGrid::from_channels(dims, ch).unwrap();
    let (_, grads) = warp_with_grad(&ramp, &g).unwrap();
    for v in &grads[2] {
        assert!((v - 10.0).abs() < 1e-9);
    }
    let flat = Volume3::new(dims, [1.0; 3], 0.7).unwrap();
    let (_, grads) = warp_with_grad(&flat, &id).unwrap();
    assert!(grads.iter().flatten().all(|&v| v == 0.0));
}
