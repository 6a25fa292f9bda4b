//! Pooled text-to-visual attention signals and normalized attention entropy.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numeric::{compensated_sum, Matrix};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PoolingError {
    #[error("EmptyMatrix: attention matrix is {rows}x{cols}")]
    EmptyMatrix { rows: usize, cols: usize },
}

/// The two pooled signals taken from one layer's attention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PooledAttention {
    pub s_glo: Vec<f64>,
    pub s_last: Vec<f64>,
    pub layer: usize,
}

impl PooledAttention {
    pub fn from_matrix(attn: &Matrix, layer: usize) -> Result<Self, PoolingError> {
        Ok(Self {
            s_glo: pool_global(attn)?,
            s_last: pool_last(attn)?,
            layer,
        })
    }

    /// Restricts both signals to `indices` (in the given order).
    pub fn restrict(&self, indices: &[usize]) -> Self {
        Self {
            s_glo: indices.iter().map(|&i| self.s_glo[i]).collect(),
            s_last: indices.iter().map(|&i| self.s_last[i]).collect(),
            layer: self.layer,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyResult {
    /// Normalized entropy in `[0, 1]`.
    pub h: f64,
    /// Normalized distribution the entropy was taken over.
    pub p: Vec<f64>,
}

fn check_nonempty(attn: &Matrix) -> Result<(), PoolingError> {
    if attn.rows() == 0 || attn.cols() == 0 {
        return Err(PoolingError::EmptyMatrix {
            rows: attn.rows(),
            cols: attn.cols(),
        });
    }
    Ok(())
}

/// Column-wise max over text tokens.
pub fn pool_global(attn: &Matrix) -> Result<Vec<f64>, PoolingError> {
    check_nonempty(attn)?;
    let mut out = attn.row(0).to_vec();
    for row in attn.iter_rows().skip(1) {
        for (o, &v) in out.iter_mut().zip(row) {
            if v > *o {
                *o = v;
            }
        }
    }
    Ok(out)
}

/// Attention row of the final text position.
pub fn pool_last(attn: &Matrix) -> Result<Vec<f64>, PoolingError> {
    check_nonempty(attn)?;
    Ok(attn.row(attn.rows() - 1).to_vec())
}

/// Shannon entropy of `s_glo / sum(s_glo)` divided by `ln(N_v)`.
///
/// A single token gives `h = 0`. An all-zero vector is treated as uniform
/// (`h = 1`).
pub fn normalized_entropy(s_glo: &[f64]) -> EntropyResult {
    let n = s_glo.len();
    if n == 0 {
        return EntropyResult { h: 0.0, p: Vec::new() };
    }
    let total = compensated_sum(s_glo.iter().copied());
    if total <= 0.0 {
        let u = 1.0 / n as f64;
        return EntropyResult {
            h: if n > 1 { 1.0 } else { 0.0 },
            p: vec![u; n],
        };
    }
    let p: Vec<f64> = s_glo.iter().map(|&s| s / total).collect();
    if n == 1 {
        return EntropyResult { h: 0.0, p };
    }
    let raw = -compensated_sum(p.iter().filter(|&&q| q > 0.0).map(|&q| q * q.ln()));
    let h = (raw / (n as f64).ln()).clamp(0.0, 1.0);
    EntropyResult { h, p }
}
