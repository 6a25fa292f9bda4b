//! Savitzky-Golay smoothing with odd-reflection edges.
//!
//! Each output sample is the value at the window centre of the least-squares
//! polynomial of degree `polyorder` fitted to the `window` surrounding
//! samples. The series is extended by `(window - 1) / 2` samples on each side
//! by point reflection through the end samples (`2 x[0] - x[k]`), which keeps
//! constant and linear series unchanged all the way to the edges.

use nalgebra::DMatrix;

use super::AnalysisError;

pub const DEFAULT_WINDOW: usize = 7;
pub const DEFAULT_POLYORDER: usize = 2;

fn check(window: usize, polyorder: usize) -> Result<(), AnalysisError> {
    if window.is_multiple_of(2) {
        return Err(AnalysisError::BadWindow(format!("window {window} must be odd")));
    }
    if window <= polyorder {
        return Err(AnalysisError::BadWindow(format!(
            "window {window} must exceed polyorder {polyorder}"
        )));
    }
    Ok(())
}

/// Convolution weights for smoothing (zeroth derivative), centre-aligned.
pub fn savgol_coefficients(window: usize, polyorder: usize) -> Result<Vec<f64>, AnalysisError> {
    check(window, polyorder)?;
    let half = (window / 2) as f64;
    let vander = DMatrix::from_fn(window, polyorder + 1, |i, k| (i as f64 - half).powi(k as i32));
    let pinv = vander
        .pseudo_inverse(1e-13)
        .map_err(|e| AnalysisError::BadWindow(format!("ill-conditioned window: {e}")))?;
    // Row 0 of the pseudo-inverse maps the window to the constant term,
    // i.e. the fitted value at the centre.
    Ok(pinv.row(0).iter().copied().collect())
}

pub fn savgol_smooth(series: &[f64], window: usize, polyorder: usize) -> Result<Vec<f64>, AnalysisError> {
    check(window, polyorder)?;
    if series.len() < window {
        return Err(AnalysisError::BadWindow(format!(
            "series of length {} is shorter than window {window}",
            series.len()
        )));
    }
    let coeffs = savgol_coefficients(window, polyorder)?;
    let half = window / 2;
    let n = series.len();
    let (first, last) = (series[0], series[n - 1]);

    let mut padded = Vec::with_capacity(n + 2 * half);
    padded.extend((1..=half).rev().map(|k| 2.0 * first - series[k]));
    padded.extend_from_slice(series);
    padded.extend((1..=half).map(|k| 2.0 * last - series[n - 1 - k]));

    Ok(padded
        .windows(window)
        .map(|w| w.iter().zip(&coeffs).map(|(x, c)| x * c).sum())
        .collect())
}
