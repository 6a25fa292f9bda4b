//! Percentile bootstrap for the mean.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::AnalysisError;
use crate::numeric::{compensated_sum, mean};

pub const DEFAULT_RESAMPLES: usize = 1000;
pub const DEFAULT_SEED: u64 = 42;

const LOWER_Q: f64 = 0.025;
const UPPER_Q: f64 = 0.975;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapCi {
    pub mean: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

/// Sample mean with a 95% percentile-bootstrap interval.
///
/// Resample `b` draws from its own ChaCha stream (`seed`, stream `b`), so
/// the result does not depend on how resamples are spread over threads.
/// Percentiles interpolate linearly between order statistics. The interval
/// is widened if needed so that it always contains the sample mean.
pub fn bootstrap_ci(values: &[f64], resamples: usize, seed: u64) -> Result<BootstrapCi, AnalysisError> {
    let Some(m) = mean(values) else {
        return Err(AnalysisError::EmptyInput("bootstrap needs at least one value".into()));
    };
    if resamples == 0 {
        return Err(AnalysisError::EmptyInput(
            "bootstrap needs at least one resample".into(),
        ));
    }
    if values.iter().all(|&v| v == values[0]) {
        let c = values[0];
        return Ok(BootstrapCi {
            mean: c,
            ci_low: c,
            ci_high: c,
        });
    }

    let n = values.len();
    let mut means: Vec<f64> = (0..resamples as u64)
        .into_par_iter()
        .map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(b);
            compensated_sum((0..n).map(|_| values[rng.random_range(0..n as u64) as usize])) / n as f64
        })
        .collect();
    means.sort_by(f64::total_cmp);

    Ok(BootstrapCi {
        mean: m,
        ci_low: percentile(&means, LOWER_Q).min(m),
        ci_high: percentile(&means, UPPER_Q).max(m),
    })
}

/// Linear interpolation at rank `q * (len - 1)` of sorted data.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}
