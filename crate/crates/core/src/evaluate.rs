//! Overlap, landmark and folding diagnostics.

use serde::{Deserialize, Serialize};

use crate::deform::for_each_line;
use crate::error::{RegError, Result};
use crate::volume::{ensure_same, DeformationGrid, LandmarkSet, Mask3};
use crate::warp::sample;

/// `2 |A ∩ B| / (|A| + |B|)`; two empty masks score 1.
pub fn dice(a: &Mask3, b: &Mask3) -> Result<f64> {
    ensure_same(a.dims(), b.dims())?;
    let (mut inter, mut total) = (0usize, 0usize);
    for (&u, &v) in a.as_volume().data().iter().zip(b.as_volume().data()) {
        let (u, v) = (u == 1.0, v == 1.0);
        inter += (u && v) as usize;
        total += u as usize + v as usize;
    }
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkError {
    pub label: String,
    /// Moving-frame location predicted by the grid, `(z, y, x)`.
    pub predicted: [f64; 3],
    pub dx: f64,
    pub dy: f64,
    pub dz: f64,
    pub ds: f64,
}

/// Per-landmark errors and their means. `dx`, `dy`, `dz` are mean absolute
/// per-axis errors; `ds` is the mean Euclidean distance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkReport {
    pub per_landmark: Vec<LandmarkError>,
    pub dx: f64,
    pub dy: f64,
    pub dz: f64,
    pub ds: f64,
}

/// Maps each reference landmark through `g` (trilinear sample of the backward
/// grid at the reference point) and compares it with the annotated moving point
/// of the same label.
pub fn landmark_error(
    g: &DeformationGrid,
    ref_pts: &LandmarkSet,
    mov_pts: &LandmarkSet,
) -> Result<LandmarkReport> {
    let dims = g.dims();
    if ref_pts.len() != mov_pts.len() {
        return Err(RegError::Landmark(format!(
            "{} reference points but {} moving points",
            ref_pts.len(),
            mov_pts.len()
        )));
    }
    if ref_pts.is_empty() {
        return Err(RegError::Landmark("no landmarks".into()));
    }
    ref_pts.check_bounds(dims)?;
    let mut per_landmark = Vec::with_capacity(ref_pts.len());
    for r in ref_pts.points() {
        let m = mov_pts
            .get(&r.label)
            .ok_or_else(|| RegError::Landmark(format!("label {:?} missing from moving set", r.label)))?;
        let predicted: [f64; 3] = std::array::from_fn(|d| sample(g.channel(d), dims, r.position));
        let e: [f64; 3] = std::array::from_fn(|d| predicted[d] - m.position[d]);
        per_landmark.push(LandmarkError {
            label: r.label.clone(),
            predicted,
            dz: e[0].abs(),
            dy: e[1].abs(),
            dx: e[2].abs(),
            ds: (e[0] * e[0] + e[1] * e[1] + e[2] * e[2]).sqrt(),
        });
    }
    let k = per_landmark.len() as f64;
    let mean = |f: fn(&LandmarkError) -> f64| per_landmark.iter().map(f).sum::<f64>() / k;
    Ok(LandmarkReport {
        dx: mean(|e| e.dx),
        dy: mean(|e| e.dy),
        dz: mean(|e| e.dz),
        ds: mean(|e| e.ds),
        per_landmark,
    })
}

/// Consecutive-voxel gap statistics of a grid along each channel's own axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    /// Smallest gap per axis `(z, y, x)`.
    pub min_gap: [f64; 3],
    pub max_gap: [f64; 3],
    /// Gaps `<= 0` per axis.
    pub violations: [usize; 3],
    pub total_violations: usize,
}

impl FoldReport {
    pub fn is_fold_free(&self) -> bool {
        self.total_violations == 0
    }

    /// Whether every gap lies in the open interval `(0, 2)`.
    pub fn gaps_within_unit_band(&self) -> bool {
        self.is_fold_free() && self.max_gap.iter().all(|&g| g < 2.0)
    }
}

pub fn fold_check(g: &DeformationGrid) -> FoldReport {
    let dims = g.dims();
    let mut min_gap = [f64::INFINITY; 3];
    let mut max_gap = [f64::NEG_INFINITY; 3];
    let mut violations = [0usize; 3];
    for axis in 0..3 {
        let c = g.channel(axis);
        let stride = dims.stride(axis);
        let n = dims.0[axis];
        for_each_line(dims, axis, |start| {
            for k in 1..n {
                let i = start + k * stride;
                let gap = c[i] - c[i - stride];
                min_gap[axis] = min_gap[axis].min(gap);
                max_gap[axis] = max_gap[axis].max(gap);
                // Written so that a NaN gap counts as a violation.
                #[allow(clippy::neg_cmp_op_on_partial_ord)]
                if !(gap > 0.0) {
                    violations[axis] += 1;
                }
            }
        });
    }
    FoldReport {
        min_gap,
        max_gap,
        violations,
        total_violations: violations.iter().sum(),
    }
}
