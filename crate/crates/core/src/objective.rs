//! Registration loss and its analytic gradient.
//!
//! `total = mse(R, W(W(S, G_N), G_A)) + α · Σ|A − A_I| + β · mean|Φ − 1|`
//!
//! The optimizer works on unconstrained logits `θ` with `Φ = 2 σ(θ)`, so every
//! iterate keeps `Φ` inside `(0, 2)` and `θ = 0` is the identity.

use serde::{Deserialize, Serialize};

use crate::deform::{affine_grid, half_extent, integrate_raw, normalized, suffix_sum_axis};
use crate::error::{RegError, Result};
use crate::volume::{ensure_same, AffineParams, Dims, GradientField, Volume3};
use crate::warp::{warp_adjoint, warp_raw, warp_with_grad_raw, KinkRule};

/// Components of the loss. `affine_reg` and `phi_reg` are unweighted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub mse: f64,
    pub affine_reg: f64,
    pub phi_reg: f64,
    pub total: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl LossBreakdown {
    pub(crate) fn new(mse: f64, affine_reg: f64, phi_reg: f64, alpha: f64, beta: f64) -> Self {
        Self {
            mse,
            affine_reg,
            phi_reg,
            total: mse + alpha * affine_reg + beta * phi_reg,
            alpha,
            beta,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite() && self.mse.is_finite()
    }
}

/// Unconstrained parameters of the deformable component, one channel per axis.
#[derive(Debug, Clone, PartialEq)]
pub struct PhiLogits {
    dims: Dims,
    channels: [Vec<f64>; 3],
}

impl PhiLogits {
    pub fn zeros(dims: Dims) -> Result<Self> {
        dims.validate()?;
        Ok(Self {
            dims,
            channels: std::array::from_fn(|_| vec![0.0; dims.len()]),
        })
    }

    pub fn from_channels(dims: Dims, channels: [Vec<f64>; 3]) -> Result<Self> {
        dims.validate()?;
        for c in &channels {
            if c.len() != dims.len() {
                return Err(RegError::LengthMismatch {
                    expected: dims.len(),
                    actual: c.len(),
                });
            }
            if let Some(i) = c.iter().position(|v| !v.is_finite()) {
                return Err(RegError::NonFinite {
                    what: "phi logit",
                    index: i,
                });
            }
        }
        Ok(Self { dims, channels })
    }

    /// Logits reproducing a given gradient field exactly up to rounding.
    pub fn from_phi(phi: &GradientField) -> Self {
        let channels = phi
            .channels()
            .clone()
            .map(|c| c.into_iter().map(|v| logit(v / 2.0)).collect());
        Self {
            dims: phi.dims(),
            channels,
        }
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

    pub(crate) fn channels_mut(&mut self) -> &mut [Vec<f64>; 3] {
        &mut self.channels
    }

    pub fn into_channels(self) -> [Vec<f64>; 3] {
        self.channels
    }
}

#[inline]
fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Largest double below 2.
const PHI_MAX: f64 = 2.0 - f64::EPSILON;

/// `2 σ(θ)`, kept strictly inside `(0, 2)` even where the logistic saturates.
#[inline]
fn phi_of(t: f64) -> f64 {
    (2.0 * sigmoid(t)).clamp(f64::MIN_POSITIVE, PHI_MAX)
}

/// `dΦ/dθ = 2 σ(θ) (1 − σ(θ))`.
#[inline]
fn dphi_dtheta(t: f64) -> f64 {
    let s = sigmoid(t);
    2.0 * s * (1.0 - s)
}

/// `Φ = 2 σ(θ)` elementwise.
pub fn phi_from_logits(theta: &PhiLogits) -> GradientField {
    let channels = theta
        .channels
        .clone()
        .map(|c| c.into_iter().map(phi_of).collect());
    GradientField::from_channels(theta.dims, channels).expect("2σ(θ) lies in (0, 2)")
}

/// Mean squared error and its derivative with respect to `warped`.
///
/// This is the only similarity-specific piece of the objective.
fn mean_squared_error(warped: &[f64], reference: &[f64]) -> (f64, Vec<f64>) {
    let n = warped.len() as f64;
    let mut sum = 0.0;
    let grad = warped
        .iter()
        .zip(reference)
        .map(|(&d, &r)| {
            let e = d - r;
            sum += e * e;
            2.0 * e / n
        })
        .collect();
    (sum / n, grad)
}

fn mse_value(warped: &[f64], reference: &[f64]) -> f64 {
    let sum: f64 = warped
        .iter()
        .zip(reference)
        .map(|(&d, &r)| (d - r) * (d - r))
        .sum();
    sum / warped.len() as f64
}

#[inline]
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn check_inputs(r: &Volume3, s: &Volume3, theta: &PhiLogits, alpha: f64, beta: f64) -> Result<()> {
    ensure_same(r.dims(), s.dims())?;
    ensure_same(r.dims(), theta.dims())?;
    for (name, w) in [("alpha", alpha), ("beta", beta)] {
        if !(w >= 0.0 && w.is_finite()) {
            return Err(RegError::InvalidParam(format!(
                "{name} must be finite and non-negative, got {w}"
            )));
        }
    }
    Ok(())
}

fn affine_reg(a: &AffineParams) -> f64 {
    a.deviation().iter().map(|v| v.abs()).sum()
}

fn phi_reg(phi: &GradientField) -> f64 {
    let n = 3 * phi.dims().len();
    let sum: f64 = phi.channels().iter().flatten().map(|v| (v - 1.0).abs()).sum();
    sum / n as f64
}

/// Evaluates the loss.
pub fn loss(
    r: &Volume3,
    s: &Volume3,
    theta: &PhiLogits,
    a: &AffineParams,
    alpha: f64,
    beta: f64,
) -> Result<LossBreakdown> {
    check_inputs(r, s, theta, alpha, beta)?;
    let dims = r.dims();
    let phi = phi_from_logits(theta);
    let g_n = integrate_raw(phi.channels(), dims);
    let g_a = affine_grid(a, dims)?;
    let intermediate = warp_raw(s.data(), dims, &g_n);
    let warped = warp_raw(&intermediate, dims, &g_a);
    Ok(LossBreakdown::new(
        mse_value(&warped, r.data()),
        affine_reg(a),
        phi_reg(&phi),
        alpha,
        beta,
    ))
}

/// Loss together with its gradient.
#[derive(Debug, Clone)]
pub struct LossGradient {
    pub d_theta: PhiLogits,
    /// Row-major, same layout as [`AffineParams::to_flat`].
    pub d_affine: [f64; 12],
    pub breakdown: LossBreakdown,
}

/// Loss and its exact analytic gradient with respect to `θ` and `A`.
///
/// Chain: the MSE residual is pulled back through the second warp twice, once
/// to the affine coordinates via the hat-kernel derivative and once to the
/// intermediate image via the transposed sampling weights. The latter is then
/// pulled back to `G_N` through the first warp, to `Φ` through a suffix sum
/// (the transpose of the prefix sum), and to `θ` through `2 σ (1 − σ)`.
/// L1 terms use `sign(0) = 0`. At integer sampling coordinates the hat-kernel
/// derivative is the centered one (see [`KinkRule::Centered`]).
pub fn loss_grad(
    r: &Volume3,
    s: &Volume3,
    theta: &PhiLogits,
    a: &AffineParams,
    alpha: f64,
    beta: f64,
) -> Result<LossGradient> {
    check_inputs(r, s, theta, alpha, beta)?;
    let dims = r.dims();
    let n = dims.len();
    let phi = phi_from_logits(theta);
    let g_n = integrate_raw(phi.channels(), dims);
    let g_a = affine_grid(a, dims)?;

    let (intermediate, d_int_d_gn) = warp_with_grad_raw(s.data(), dims, &g_n, KinkRule::Centered);
    let (warped, d_out_d_ga) = warp_with_grad_raw(&intermediate, dims, &g_a, KinkRule::Centered);
    let (mse, d_warped) = mean_squared_error(&warped, r.data());

    // affine branch
    let h = half_extent(dims);
    let mut d_affine = [0.0; 12];
    for i in 0..n {
        let u = d_warped[i];
        if u == 0.0 {
            continue;
        }
        let nc = normalized(dims, dims.coords(i));
        for d in 0..3 {
            let g = u * d_out_d_ga[d][i] * h[d];
            let row = &mut d_affine[d * 4..d * 4 + 4];
            row[0] += g * nc[0];
            row[1] += g * nc[1];
            row[2] += g * nc[2];
            row[3] += g;
        }
    }
    for (g, dev) in d_affine.iter_mut().zip(a.deviation()) {
        *g += alpha * sign(dev);
    }

    // deformable branch
    let d_intermediate = warp_adjoint(&d_warped, dims, &g_a);
    let reg_scale = beta / (3 * n) as f64;
    let mut d_theta = PhiLogits::zeros(dims)?;
    for axis in 0..3 {
        let d_gn: Vec<f64> = d_intermediate
            .iter()
            .zip(&d_int_d_gn[axis])
            .map(|(u, g)| u * g)
            .collect();
        let d_phi = suffix_sum_axis(&d_gn, dims, axis);
        let out = &mut d_theta.channels_mut()[axis];
        for i in 0..n {
            let p = phi.channel(axis)[i];
            let dp = d_phi[i] + reg_scale * sign(p - 1.0);
            out[i] = dp * dphi_dtheta(theta.channel(axis)[i]);
        }
    }

    Ok(LossGradient {
        d_theta,
        d_affine,
        breakdown: LossBreakdown::new(mse, affine_reg(a), phi_reg(&phi), alpha, beta),
    })
}
