//! Coupled affine + deformable registration of 3D volumes.
//!
//! The deformable component is parameterized by per-axis spatial gradients
//! `Φ ∈ (0, 2)` that are integrated by cumulative sums, which makes every
//! deformation monotone along each axis (no self-crossings). The affine
//! component is a 3×4 matrix in normalized coordinates applied after the
//! deformable warp. Both are fitted jointly with Adam on a mean-squared-error
//! loss with L1 pulls towards the identity.
//!
//! Conventions: every triple is `(z, y, x)`; grid coordinates are 0-based voxel
//! indices of the moving (source) volume; sampling outside the volume reads 0.

// Per-axis loops index several parallel arrays at once.
#![allow(clippy::needless_range_loop)]

pub mod deform;
pub mod error;
pub mod evaluate;
pub mod io;
pub mod objective;
pub mod optimizer;
pub mod synth;
pub mod volume;
pub mod warp;

pub use deform::{affine_grid, compose_and_warp, compose_grids, integrate_gradients, ComposedTransform};
pub use error::{RegError, Result};
pub use evaluate::{dice, fold_check, landmark_error, FoldReport, LandmarkReport};
pub use objective::{loss, loss_grad, phi_from_logits, LossBreakdown, LossGradient, PhiLogits};
pub use optimizer::{adam_step, register, AdamConfig, AdamState, OptimConfig, RegistrationResult};
pub use volume::{
    identity_grid, residual_deformation, AffineParams, DeformationGrid, Dims, GradientField,
    Landmark, LandmarkSet, Mask3, Volume3,
};
pub use warp::{warp, warp_mask, warp_with_grad};
