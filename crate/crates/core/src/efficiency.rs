//! Layer-wise decoder FLOPs model.
//!
//! A decoder layer over `n` tokens costs `8 n d^2 + 4 n^2 d + 6 n d m`
//! (attention projections, attention scores/values, gated FFN). Totals sum
//! this over every layer using the visual count that layer actually sees
//! plus the text tokens.

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Flops = u128;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EfficiencyError {
    #[error("LengthMismatch: {got} per-layer counts for {expected} layers")]
    LengthMismatch { expected: usize, got: usize },
    #[error("UnknownPreset: {0}")]
    UnknownPreset(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDims {
    /// Hidden size.
    pub d: u64,
    /// Feed-forward intermediate size.
    pub m: u64,
    pub n_layers: usize,
    /// Text tokens present at every layer.
    pub n_text: u64,
}

impl ModelDims {
    /// LLaVA-1.5-7B. `n_text = 64` is an assumed prompt length.
    pub const LLAVA_1_5_7B: ModelDims = ModelDims {
        d: 4096,
        m: 11008,
        n_layers: 32,
        n_text: 64,
    };

    pub fn preset(name: &str) -> Result<ModelDims, EfficiencyError> {
        match name {
            "llava-1.5-7b" => Ok(Self::LLAVA_1_5_7B),
            other => Err(EfficiencyError::UnknownPreset(other.to_string())),
        }
    }
}

impl Default for ModelDims {
    fn default() -> Self {
        Self::LLAVA_1_5_7B
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub per_layer: Vec<Flops>,
    pub total: Flops,
    pub dense_total: Flops,
    /// `dense_total / total`.
    pub reduction_ratio: f64,
}

impl FlopsReport {
    pub fn total_tflops(&self) -> f64 {
        round3(self.total as f64 / 1e12)
    }

    pub fn dense_tflops(&self) -> f64 {
        round3(self.dense_total as f64 / 1e12)
    }
}

fn round3(x: f64) -> f64 {
    (x * 1000.0).round() / 1000.0
}

/// `8 n d^2 + 4 n^2 d + 6 n d m`, exact.
pub fn layer_flops(n: u64, dims: &ModelDims) -> Flops {
    let (n, d, m) = (n as u128, dims.d as u128, dims.m as u128);
    8 * n * d * d + 4 * n * n * d + 6 * n * d * m
}

/// Per-layer and total FLOPs, with the dense reference taken at `counts[0]`
/// visual tokens on every layer.
pub fn total_flops(counts: &[usize], dims: &ModelDims) -> Result<FlopsReport, EfficiencyError> {
    let dense_visual = counts.first().copied().unwrap_or(0);
    total_flops_against(counts, dense_visual, dims)
}

/// Like [`total_flops`] with an explicit dense visual count.
pub fn total_flops_against(
    counts: &[usize],
    dense_visual: usize,
    dims: &ModelDims,
) -> Result<FlopsReport, EfficiencyError> {
    if counts.len() != dims.n_layers {
        return Err(EfficiencyError::LengthMismatch {
            expected: dims.n_layers,
            got: counts.len(),
        });
    }
    let per_layer: Vec<Flops> = counts
        .iter()
        .map(|&c| layer_flops(c as u64 + dims.n_text, dims))
        .collect();
    let total: Flops = per_layer.iter().sum();
    let dense_total = layer_flops(dense_visual as u64 + dims.n_text, dims) * dims.n_layers as u128;
    let reduction_ratio = if total == 0 {
        if dense_total == 0 {
            1.0
        } else {
            f64::INFINITY
        }
    } else {
        dense_total as f64 / total as f64
    };
    Ok(FlopsReport {
        per_layer,
        total,
        dense_total,
        reduction_ratio,
    })
}

/// Similarity cost of one routing event: one multiply-add per dimension for
/// each candidate/(anchor or reference) pair, counted as 2 FLOPs.
pub fn routing_overhead_flops(pool: u64, k_a: u64, k_r: u64, d: u64) -> Flops {
    2 * pool as u128 * (k_a as u128 + k_r as u128) * d as u128
}
