//! Entropy-driven split of a token budget into anchors, semantic evidence
//! and spatial context.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numeric::floor_tolerant;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BudgetError {
    #[error("InfeasibleBudget: target {k_target} must lie in [1, {n_visual}]")]
    InfeasibleBudget { n_visual: usize, k_target: usize },
    #[error("InvalidHyperparams: {0}")]
    InvalidHyperparams(String),
}

/// Routing hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyperparams {
    /// Anchor ratio, relative to the current visual count.
    pub rho_a: f64,
    /// Reference ratio, relative to the current visual count.
    pub rho_r: f64,
    /// Cap on anchors as a fraction of the target budget.
    pub eta: f64,
    /// Context fraction of the remaining budget at zero entropy.
    pub alpha_min: f64,
    /// Context fraction of the remaining budget at unit entropy.
    pub alpha_max: f64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            rho_a: 0.30,
            rho_r: 0.05,
            eta: 0.80,
            alpha_min: 0.05,
            alpha_max: 0.60,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<(), BudgetError> {
        let unit = |name: &str, v: f64| {
            if v > 0.0 && v <= 1.0 {
                Ok(())
            } else {
                Err(BudgetError::InvalidHyperparams(format!(
                    "{name} = {v} must be in (0, 1]"
                )))
            }
        };
        unit("rho_a", self.rho_a)?;
        unit("rho_r", self.rho_r)?;
        unit("eta", self.eta)?;
        if !(0.0 <= self.alpha_min && self.alpha_min <= self.alpha_max && self.alpha_max <= 1.0) {
            return Err(BudgetError::InvalidHyperparams(format!(
                "need 0 <= alpha_min ({}) <= alpha_max ({}) <= 1",
                self.alpha_min, self.alpha_max
            )));
        }
        Ok(())
    }
}

/// Budget partition for one pruning event.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BudgetSplit {
    pub k_a: usize,
    pub k_rest: usize,
    pub n1: usize,
    pub n2: usize,
    pub k_r: usize,
    pub h: f64,
}

impl BudgetSplit {
    /// `k_a + n1 + n2`.
    pub fn total(&self) -> usize {
        self.k_a + self.n1 + self.n2
    }
}

/// Splits `k_target` retained tokens out of `n_visual` given entropy `h`.
///
/// `k_a = floor(min(rho_a * n_visual, eta * k_target))` clamped to
/// `[1, k_target]`, `n2 = floor(k_rest * (alpha_min + (alpha_max - alpha_min) * h))`,
/// `n1 = k_rest - n2`, `k_r = max(1, floor(rho_r * n_visual))`.
pub fn split_budget(n_visual: usize, k_target: usize, h: f64, hp: &Hyperparams) -> Result<BudgetSplit, BudgetError> {
    if k_target < 1 || k_target > n_visual {
        return Err(BudgetError::InfeasibleBudget { n_visual, k_target });
    }
    hp.validate()?;
    let h = if h.is_finite() { h.clamp(0.0, 1.0) } else { 1.0 };

    let raw_anchor = (hp.rho_a * n_visual as f64).min(hp.eta * k_target as f64);
    let k_a = (floor_tolerant(raw_anchor).max(0.0) as usize).clamp(1, k_target);
    let k_rest = k_target - k_a;

    let context_frac = hp.alpha_min + (hp.alpha_max - hp.alpha_min) * h;
    let n2 = (floor_tolerant(k_rest as f64 * context_frac).max(0.0) as usize).min(k_rest);
    let n1 = k_rest - n2;

    let k_r = (floor_tolerant(hp.rho_r * n_visual as f64).max(0.0) as usize).max(1);

    Ok(BudgetSplit {
        k_a,
        k_rest,
        n1,
        n2,
        k_r,
        h,
    })
}
