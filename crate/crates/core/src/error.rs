use thiserror::Error;

use crate::objective::LossBreakdown;

pub type Result<T> = std::result::Result<T, RegError>;

#[derive(Debug, Error)]
pub enum RegError {
    #[error("every axis needs at least 2 voxels, got {0:?}")]
    InvalidDims([usize; 3]),

    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch { left: [usize; 3], right: [usize; 3] },

    #[error("expected {expected} values, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("non-finite {what} at index {index}")]
    NonFinite { what: &'static str, index: usize },

    #[error("mask value at index {index} is not 0 or 1")]
    NotBinary { index: usize },

    #[error("spatial gradient {value} on axis {axis} at index {index} is outside (0, 2)")]
    InvalidPhi { axis: usize, index: usize, value: f64 },

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("landmarks: {0}")]
    Landmark(String),

    #[error("loss became non-finite after {iterations} iterations")]
    Divergence {
        iterations: usize,
        trace: Vec<LossBreakdown>,
    },

    #[error("malformed file {path}: {reason}")]
    Format { path: String, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl RegError {
    /// Stable machine-readable identifier.
    pub fn code(&self) -> &'static str {
        match self {
            RegError::InvalidDims(_) => "invalid_dims",
            RegError::ShapeMismatch { .. } => "shape_mismatch",
            RegError::LengthMismatch { .. } => "length_mismatch",
            RegError::NonFinite { .. } => "non_finite",
            RegError::NotBinary { .. } => "not_binary",
            RegError::InvalidPhi { .. } => "invalid_phi",
            RegError::InvalidParam(_) => "invalid_param",
            RegError::Landmark(_) => "landmarks",
            RegError::Divergence { .. } => "divergence",
            RegError::Format { .. } => "format",
            RegError::Io(_) => "io",
            RegError::Json(_) => "json",
            RegError::Csv(_) => "csv",
        }
    }
}
