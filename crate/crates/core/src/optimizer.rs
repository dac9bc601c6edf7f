//! Adam minimization of the registration loss over `(θ, A)`.
//!
//! Progress is judged once per evaluation round of `eval_every` iterations.
//! The learning rate drops by `lr_drop_factor` every `patience_drop` rounds
//! without a new best loss, and the run stops after `patience_stop` such
//! rounds or `max_iters` iterations. The best checkpoint is returned, not the
//! last iterate.

use serde::{Deserialize, Serialize};

use crate::deform::ComposedTransform;
use crate::error::{RegError, Result};
use crate::objective::{loss, loss_grad, phi_from_logits, LossBreakdown, PhiLogits};
use crate::volume::{ensure_same, AffineParams, DeformationGrid, Dims, Volume3};
use crate::warp::resample;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr0: f64,
    pub lr_drop_factor: f64,
    pub patience_drop: usize,
    pub patience_stop: usize,
    pub eval_every: usize,
    pub alpha: f64,
    pub beta: f64,
    pub max_iters: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Downsampling factors, coarsest first; the last must be 1.
    pub pyramid_levels: Vec<usize>,
    /// Optimize the affine component. When off, `A` stays at identity.
    pub use_affine: bool,
    /// Optimize the deformable component. When off, `Φ` stays at one.
    pub use_deformable: bool,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr0: 1e-3,
            lr_drop_factor: 10.0,
            patience_drop: 50,
            patience_stop: 100,
            eval_every: 10,
            alpha: 1e-6,
            beta: 1e-6,
            max_iters: 5000,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            pyramid_levels: vec![1],
            use_affine: true,
            use_deformable: true,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(RegError::InvalidParam(m));
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad(format!("lr0 must be positive, got {}", self.lr0));
        }
        if !(self.lr_drop_factor >= 1.0 && self.lr_drop_factor.is_finite()) {
            return bad(format!("lr_drop_factor must be >= 1, got {}", self.lr_drop_factor));
        }
        if self.patience_drop < 1 || self.patience_stop <= self.patience_drop {
            return bad(format!(
                "need patience_stop > patience_drop >= 1, got {} and {}",
                self.patience_stop, self.patience_drop
            ));
        }
        if self.eval_every == 0 || self.max_iters == 0 {
            return bad("eval_every and max_iters must be positive".into());
        }
        for (name, w) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !(w >= 0.0 && w.is_finite()) {
                return bad(format!("{name} must be non-negative, got {w}"));
            }
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("adam betas must lie in [0, 1)".into());
        }
        if self.adam_eps.is_nan() || self.adam_eps <= 0.0 {
            return bad("adam_eps must be positive".into());
        }
        if self.pyramid_levels.is_empty() || self.pyramid_levels.contains(&0) {
            return bad("pyramid_levels must be non-empty positive integers".into());
        }
        if self.pyramid_levels.last() != Some(&1) {
            return bad("the last pyramid level must be 1 (full resolution)".into());
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Parameters with their Adam moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub params: Vec<f64>,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: Vec<f64>) -> Self {
        let n = params.len();
        Self {
            params,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    /// One bias-corrected Adam update in place.
    pub fn step(&mut self, cfg: &AdamConfig, grads: &[f64], lr: f64) -> Result<()> {
        if grads.len() != self.params.len() {
            return Err(RegError::LengthMismatch {
                expected: self.params.len(),
                actual: grads.len(),
            });
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(RegError::NonFinite {
                what: "gradient",
                index: i,
            });
        }
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let c2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for (((p, m), v), &g) in self
            .params
            .iter_mut()
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
            .zip(grads)
        {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
        Ok(())
    }
}

/// Functional form of [`AdamState::step`].
pub fn adam_step(mut state: AdamState, cfg: &AdamConfig, grads: &[f64], lr: f64) -> Result<AdamState> {
    state.step(cfg, grads, lr)?;
    Ok(state)
}

#[derive(Debug, Clone)]
pub struct RegistrationResult {
    pub a: AffineParams,
    pub theta: PhiLogits,
    /// Effective single-pass grid of the returned parameters.
    pub grid: DeformationGrid,
    /// Loss at every evaluation round, across all pyramid levels.
    pub loss_trace: Vec<LossBreakdown>,
    /// Loss of the returned parameters at full resolution.
    pub best: LossBreakdown,
    pub iterations_run: usize,
    /// True when the run stopped on patience rather than `max_iters`.
    pub converged: bool,
    /// Indices into `loss_trace` of the rounds after which the learning rate dropped.
    pub lr_drops: Vec<usize>,
}

struct LevelOutcome {
    theta: PhiLogits,
    a: AffineParams,
    iterations: usize,
    converged: bool,
}

fn pack(theta: &PhiLogits, a: &AffineParams) -> Vec<f64> {
    let mut v: Vec<f64> = theta.channels().iter().flatten().copied().collect();
    v.extend_from_slice(&a.to_flat());
    v
}

fn unpack(params: &[f64], dims: Dims) -> (PhiLogits, AffineParams) {
    let n = dims.len();
    let channels = std::array::from_fn(|d| params[d * n..(d + 1) * n].to_vec());
    let theta = PhiLogits::from_channels(dims, channels).expect("finite logits");
    let mut flat = [0.0; 12];
    flat.copy_from_slice(&params[3 * n..]);
    (theta, AffineParams::from_flat(&flat))
}

/// Placeholder round for parameters that overflowed before a loss could be formed.
fn non_finite(cfg: &OptimConfig) -> LossBreakdown {
    LossBreakdown::new(f64::NAN, f64::NAN, f64::NAN, cfg.alpha, cfg.beta)
}

fn diverged(iterations: usize, last: LossBreakdown, trace: &mut Vec<LossBreakdown>) -> RegError {
    trace.push(last);
    RegError::Divergence {
        iterations,
        trace: std::mem::take(trace),
    }
}

fn optimize_level(
    r: &Volume3,
    s: &Volume3,
    theta: PhiLogits,
    a: AffineParams,
    cfg: &OptimConfig,
    trace: &mut Vec<LossBreakdown>,
    lr_drops: &mut Vec<usize>,
) -> Result<LevelOutcome> {
    let dims = r.dims();
    let n_theta = 3 * dims.len();
    let adam = cfg.adam();
    let mut state = AdamState::new(pack(&theta, &a));
    let mut best_params = state.params.clone();
    let mut best = f64::INFINITY;
    let mut lr = cfg.lr0;
    let mut since_improve = 0usize;
    let mut converged = false;
    let mut iterations = 0usize;

    let mut round = |loss: &LossBreakdown, params: &[f64], trace: &mut Vec<LossBreakdown>| -> (bool, bool) {
        trace.push(*loss);
        if loss.total < best {
            best = loss.total;
            best_params.clear();
            best_params.extend_from_slice(params);
            since_improve = 0;
            return (false, false);
        }
        since_improve += 1;
        if since_improve >= cfg.patience_stop {
            return (true, false);
        }
        (false, since_improve.is_multiple_of(cfg.patience_drop))
    };

    for it in 0..cfg.max_iters {
        let (theta, a) = unpack(&state.params, dims);
        let lg = match loss_grad(r, s, &theta, &a, cfg.alpha, cfg.beta) {
            Ok(lg) if lg.breakdown.is_finite() => lg,
            Ok(lg) => return Err(diverged(it, lg.breakdown, trace)),
            Err(RegError::NonFinite { .. }) => return Err(diverged(it, non_finite(cfg), trace)),
            Err(e) => return Err(e),
        };
        if it % cfg.eval_every == 0 {
            let (stop, drop) = round(&lg.breakdown, &state.params, trace);
            if stop {
                converged = true;
                break;
            }
            if drop {
                lr /= cfg.lr_drop_factor;
                lr_drops.push(trace.len() - 1);
                log::debug!("iteration {it}: learning rate dropped to {lr:e}");
            }
        }
        let mut grads = Vec::with_capacity(n_theta + 12);
        if cfg.use_deformable {
            grads.extend(lg.d_theta.channels().iter().flatten().copied());
        } else {
            grads.resize(n_theta, 0.0);
        }
        if cfg.use_affine {
            grads.extend_from_slice(&lg.d_affine);
        } else {
            grads.extend_from_slice(&[0.0; 12]);
        }
        state.step(&adam, &grads, lr)?;
        iterations += 1;
    }

    if !converged {
        let (theta, a) = unpack(&state.params, dims);
        let l = match loss(r, s, &theta, &a, cfg.alpha, cfg.beta) {
            Ok(l) if l.is_finite() => l,
            Ok(l) => return Err(diverged(iterations, l, trace)),
            Err(RegError::NonFinite { .. }) => return Err(diverged(iterations, non_finite(cfg), trace)),
            Err(e) => return Err(e),
        };
        round(&l, &state.params, trace);
    }

    let (theta, a) = unpack(&best_params, dims);
    Ok(LevelOutcome {
        theta,
        a,
        iterations,
        converged,
    })
}

/// Dimensions of a pyramid level: `round((n − 1) / factor) + 1`, at least 2.
pub fn level_dims(dims: Dims, factor: usize) -> Dims {
    Dims(dims.0.map(|n| (((n - 1) as f64 / factor as f64).round() as usize + 1).max(2)))
}

fn resample_logits(theta: &PhiLogits, dims: Dims) -> Result<PhiLogits> {
    if theta.dims() == dims {
        return Ok(theta.clone());
    }
    let mut channels: [Vec<f64>; 3] = Default::default();
    for (d, c) in theta.channels().iter().enumerate() {
        let v = Volume3::from_vec(theta.dims(), [1.0; 3], c.clone())?;
        channels[d] = resample(&v, dims)?.into_data();
    }
    PhiLogits::from_channels(dims, channels)
}

/// Registers `s` (moving) onto `r` (reference).
///
/// Starts from the identity transform (`θ = 0`, `A = A_I`). With several
/// pyramid levels, `θ` is upsampled trilinearly between levels and `A` carries
/// over unchanged.
pub fn register(r: &Volume3, s: &Volume3, cfg: &OptimConfig) -> Result<RegistrationResult> {
    ensure_same(r.dims(), s.dims())?;
    cfg.validate()?;
    let full = r.dims();
    let mut trace = Vec::new();
    let mut lr_drops = Vec::new();
    let mut theta = PhiLogits::zeros(level_dims(full, cfg.pyramid_levels[0]))?;
    let mut a = AffineParams::IDENTITY;
    let mut iterations_run = 0;
    let mut converged = false;

    for &factor in &cfg.pyramid_levels {
        let dims = level_dims(full, factor);
        let (r_l, s_l) = if dims == full {
            (r.clone(), s.clone())
        } else {
            (resample(r, dims)?, resample(s, dims)?)
        };
        theta = resample_logits(&theta, dims)?;
        let out = optimize_level(&r_l, &s_l, theta, a, cfg, &mut trace, &mut lr_drops)?;
        theta = out.theta;
        a = out.a;
        iterations_run += out.iterations;
        converged = out.converged;
    }

    let best = loss(r, s, &theta, &a, cfg.alpha, cfg.beta)?;
    let grid = ComposedTransform::new(&phi_from_logits(&theta), &a)?.effective;
    Ok(RegistrationResult {
        a,
        theta,
        grid,
        loss_trace: trace,
        best,
        iterations_run,
        converged,
        lr_drops,
    })
}
