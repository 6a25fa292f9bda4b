use serde::{Deserialize, Serialize};

use super::{savgol_smooth, AnalysisError};
use crate::numeric::{compensated_sum, cosine, Matrix};

/// Mean per-token cosine between consecutive layers' visual hidden states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    /// `raw[l]` compares layer `l` with layer `l + 1`.
    pub raw: Vec<f64>,
    /// Savitzky-Golay smoothed `raw`; empty until smoothing is applied.
    pub smoothed: Vec<f64>,
    /// Population std of the per-token cosines (across tokens, not samples).
    pub std: Vec<f64>,
}

/// Raw stability curve and its across-token dispersion.
pub fn stability_curve(hidden_by_layer: &[Matrix]) -> Result<StabilityReport, AnalysisError> {
    if hidden_by_layer.len() < 2 {
        return Err(AnalysisError::SingleLayer(hidden_by_layer.len()));
    }
    let (n, d) = (hidden_by_layer[0].rows(), hidden_by_layer[0].cols());
    if n == 0 {
        return Err(AnalysisError::ShapeMismatch("layer 0 has no visual tokens".into()));
    }
    for (l, h) in hidden_by_layer.iter().enumerate() {
        if h.rows() != n || h.cols() != d {
            return Err(AnalysisError::ShapeMismatch(format!(
                "layer {l} is {}x{}, layer 0 is {n}x{d}",
                h.rows(),
                h.cols()
            )));
        }
    }

    let mut raw = Vec::with_capacity(hidden_by_layer.len() - 1);
    let mut std = Vec::with_capacity(hidden_by_layer.len() - 1);
    for pair in hidden_by_layer.windows(2) {
        let cos: Vec<f64> = (0..n).map(|i| cosine(pair[0].row(i), pair[1].row(i))).collect();
        let mean = compensated_sum(cos.iter().copied()) / n as f64;
        let var = compensated_sum(cos.iter().map(|c| (c - mean) * (c - mean))) / n as f64;
        raw.push(mean);
        std.push(var.sqrt());
    }
    Ok(StabilityReport {
        raw,
        smoothed: Vec::new(),
        std,
    })
}

/// [`stability_curve`] followed by Savitzky-Golay smoothing of the raw curve.
pub fn stability_report(
    hidden_by_layer: &[Matrix],
    window: usize,
    polyorder: usize,
) -> Result<StabilityReport, AnalysisError> {
    let mut report = stability_curve(hidden_by_layer)?;
    report.smoothed = savgol_smooth(&report.raw, window, polyorder)?;
    Ok(report)
}
