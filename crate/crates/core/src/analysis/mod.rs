//! Attention-dynamics diagnostics: inter-layer feature stability and the
//! attention rise ratio (ARR), with smoothing and bootstrap intervals.

mod arr;
mod bootstrap;
mod savgol;
mod stability;

pub use arr::{aggregate_arr, arr_curve, ArrCurve, ArrReport, ArrRow};
pub use bootstrap::{bootstrap_ci, BootstrapCi, DEFAULT_RESAMPLES, DEFAULT_SEED};
pub use savgol::{savgol_coefficients, savgol_smooth, DEFAULT_POLYORDER, DEFAULT_WINDOW};
pub use stability::{stability_curve, stability_report, StabilityReport};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AnalysisError {
    #[error("ShapeMismatch: {0}")]
    ShapeMismatch(String),
    #[error("SingleLayer: stability needs at least two layers, got {0}")]
    SingleLayer(usize),
    #[error("BadWindow: {0}")]
    BadWindow(String),
    #[error("BudgetOutOfRange: budget {k} must lie in [1, {n_visual})")]
    BudgetOutOfRange { k: usize, n_visual: usize },
    #[error("LayerMissing: {0}")]
    LayerMissing(String),
    #[error("EmptyInput: {0}")]
    EmptyInput(String),
}

impl AnalysisError {
    pub fn kind(&self) -> &'static str {
        match self {
            AnalysisError::ShapeMismatch(_) => "ShapeMismatch",
            AnalysisError::SingleLayer(_) => "SingleLayer",
            AnalysisError::BadWindow(_) => "BadWindow",
            AnalysisError::BudgetOutOfRange { .. } => "BudgetOutOfRange",
            AnalysisError::LayerMissing(_) => "LayerMissing",
            AnalysisError::EmptyInput(_) => "EmptyInput",
        }
    }
}
