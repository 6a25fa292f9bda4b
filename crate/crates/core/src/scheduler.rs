//! Progressive multi-layer pruning over a bundle.
//!
//! Pruning at layer `l` consumes the pooled attention of layer `l - 1` and
//! the hidden states entering layer `l`. Layer `l` still runs at the
//! pre-pruning length; layers after it see the reduced set.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::budgeting::{split_budget, BudgetError, Hyperparams};
use crate::bundle::{TensorBundle, TensorKind};
use crate::efficiency::ModelDims;
use crate::numeric::floor_tolerant;
use crate::pooling::{normalized_entropy, PooledAttention, PoolingError};
use crate::routing::{route_layer, LayerRoutingResult, RoutingError};

#[derive(Debug, Error)]
pub enum ScheduleError {
    #[error("MissingTensor: {name} (needed for pruning at layer {layer})")]
    MissingTensor { name: String, layer: usize },
    #[error("InvalidConfig: {0}")]
    InvalidConfig(String),
    #[error("{0}")]
    Budget(#[from] BudgetError),
    #[error("{0}")]
    Routing(#[from] RoutingError),
    #[error("{0}")]
    Pooling(#[from] PoolingError),
}

impl ScheduleError {
    pub fn kind(&self) -> &'static str {
        match self {
            ScheduleError::MissingTensor { .. } => "MissingTensor",
            ScheduleError::InvalidConfig(_) => "InvalidConfig",
            ScheduleError::Budget(BudgetError::InfeasibleBudget { .. }) => "InfeasibleBudget",
            ScheduleError::Budget(BudgetError::InvalidHyperparams(_)) => "InvalidHyperparams",
            ScheduleError::Routing(e) => match e {
                RoutingError::KTooLarge { .. } => "KTooLarge",
                RoutingError::EmptyAnchorSet => "EmptyAnchorSet",
                RoutingError::EmptyReferenceSet => "EmptyReferenceSet",
                RoutingError::DimensionMismatch { .. } => "DimensionMismatch",
                RoutingError::InfeasibleSplit(_) => "InfeasibleSplit",
            },
            ScheduleError::Pooling(_) => "EmptyMatrix",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleMode {
    Explicit,
    #[default]
    Geometric,
}

fn default_prune_layers() -> Vec<usize> {
    vec![2, 12, 22, 28]
}

fn default_final_budget() -> usize {
    128
}

/// Pruning schedule plus routing hyperparameters and model dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruneConfig {
    #[serde(default = "default_prune_layers")]
    pub prune_layers: Vec<usize>,
    #[serde(default = "default_final_budget")]
    pub final_budget: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage_targets: Option<Vec<usize>>,
    #[serde(default)]
    pub hyperparams: Hyperparams,
    #[serde(default)]
    pub model_dims: ModelDims,
    #[serde(default)]
    pub schedule_mode: ScheduleMode,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self {
            prune_layers: default_prune_layers(),
            final_budget: default_final_budget(),
            stage_targets: None,
            hyperparams: Hyperparams::default(),
            model_dims: ModelDims::default(),
            schedule_mode: ScheduleMode::Geometric,
        }
    }
}

impl PruneConfig {
    pub fn from_json(text: &str) -> Result<Self, ScheduleError> {
        serde_json::from_str(text).map_err(|e| ScheduleError::InvalidConfig(e.to_string()))
    }

    /// Per-stage retained counts for a bundle with `n_visual` tokens and
    /// `n_layers` decoder layers.
    pub fn resolve_targets(&self, n_visual: usize, n_layers: usize) -> Result<Vec<usize>, ScheduleError> {
        if self.final_budget < 1 || self.final_budget > n_visual {
            return Err(BudgetError::InfeasibleBudget {
                n_visual,
                k_target: self.final_budget,
            }
            .into());
        }
        let layers = &self.prune_layers;
        if layers.is_empty() {
            return Err(ScheduleError::InvalidConfig("prune_layers is empty".into()));
        }
        if !layers.windows(2).all(|w| w[0] < w[1]) {
            return Err(ScheduleError::InvalidConfig(format!(
                "prune_layers {layers:?} must be strictly ascending"
            )));
        }
        if layers[0] == 0 {
            return Err(ScheduleError::InvalidConfig(
                "layer 0 cannot be a pruning layer: it has no preceding attention".into(),
            ));
        }
        if let Some(&last) = layers.last() {
            if last >= n_layers {
                return Err(ScheduleError::InvalidConfig(format!(
                    "pruning layer {last} is not below n_layers {n_layers}"
                )));
            }
        }
        self.hyperparams.validate()?;

        match (self.schedule_mode, &self.stage_targets) {
            (ScheduleMode::Geometric, None) => geometric_targets(n_visual, self.final_budget, layers.len()),
            (ScheduleMode::Geometric, Some(_)) => Err(ScheduleError::InvalidConfig(
                "stage_targets given with schedule_mode \"geometric\"".into(),
            )),
            (ScheduleMode::Explicit, None) => Err(ScheduleError::InvalidConfig(
                "schedule_mode \"explicit\" requires stage_targets".into(),
            )),
            (ScheduleMode::Explicit, Some(t)) => {
                if t.len() != layers.len() {
                    return Err(ScheduleError::InvalidConfig(format!(
                        "{} stage_targets for {} prune_layers",
                        t.len(),
                        layers.len()
                    )));
                }
                if !t.windows(2).all(|w| w[0] > w[1]) {
                    return Err(ScheduleError::InvalidConfig(format!(
                        "stage_targets {t:?} must be strictly decreasing"
                    )));
                }
                if t.last() != Some(&self.final_budget) {
                    return Err(ScheduleError::InvalidConfig(format!(
                        "last stage target {:?} differs from final_budget {}",
                        t.last(),
                        self.final_budget
                    )));
                }
                if t[0] > n_visual {
                    return Err(BudgetError::InfeasibleBudget {
                        n_visual,
                        k_target: t[0],
                    }
                    .into());
                }
                Ok(t.clone())
            }
        }
    }

    /// Visual tokens seen by each layer if every stage meets its target:
    /// `n_visual` through each prune layer, the stage target after it.
    pub fn planned_layer_counts(&self, n_visual: usize, n_layers: usize) -> Result<Vec<usize>, ScheduleError> {
        let targets = self.resolve_targets(n_visual, n_layers)?;
        let mut counts = vec![n_visual; n_layers];
        for (&layer, &target) in self.prune_layers.iter().zip(&targets) {
            for c in counts.iter_mut().skip(layer + 1) {
                *c = target;
            }
        }
        Ok(counts)
    }
}

/// Geometric interim counts ending exactly at `final_budget`.
///
/// `K_s = floor(n_visual * r^s)` with `r = (final_budget / n_visual)^(1 / stages)`,
/// then coerced to be strictly decreasing below `n_visual`. When
/// `final_budget == n_visual` every stage keeps everything.
pub fn geometric_targets(n_visual: usize, final_budget: usize, stages: usize) -> Result<Vec<usize>, ScheduleError> {
    if stages == 0 {
        return Err(ScheduleError::InvalidConfig("at least one stage is required".into()));
    }
    if final_budget < 1 || final_budget > n_visual {
        return Err(BudgetError::InfeasibleBudget {
            n_visual,
            k_target: final_budget,
        }
        .into());
    }
    if final_budget == n_visual {
        return Ok(vec![n_visual; stages]);
    }
    if stages > n_visual - final_budget {
        return Err(BudgetError::InfeasibleBudget {
            n_visual,
            k_target: final_budget,
        }
        .into());
    }
    let r = (final_budget as f64 / n_visual as f64).powf(1.0 / stages as f64);
    let mut t: Vec<usize> = (1..stages)
        .map(|s| floor_tolerant(n_visual as f64 * r.powi(s as i32)) as usize)
        .collect();
    t.push(final_budget);

    let mut prev = n_visual;
    for k in t.iter_mut().take(stages - 1) {
        *k = (*k).min(prev - 1);
        prev = *k;
    }
    for s in (0..stages - 1).rev() {
        t[s] = t[s].max(t[s + 1] + 1);
    }
    Ok(t)
}

/// One executed pruning stage, indices in original coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTrace {
    pub layer: usize,
    pub n_before: usize,
    pub target: usize,
    pub entropy: f64,
    /// `k_rest == 0`: only anchors were retained.
    pub anchors_only: bool,
    pub routing: LayerRoutingResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleTrace {
    pub sample_id: String,
    pub stages: Vec<StageTrace>,
    pub survivors: Vec<usize>,
    /// Visual tokens processed by each decoder layer.
    pub layer_counts: Vec<usize>,
}

/// Pooled signals for pruning at `layer`: the pooled vectors of
/// `layer - 1` when both are stored, otherwise pooling of its matrix.
fn pooled_for(bundle: &TensorBundle, layer: usize) -> Result<PooledAttention, ScheduleError> {
    let src = layer - 1;
    if let (Some(s_glo), Some(s_last)) = (bundle.global_score(src), bundle.last_score(src)) {
        return Ok(PooledAttention {
            s_glo,
            s_last,
            layer: src,
        });
    }
    let attn = bundle.attention(src).ok_or_else(|| ScheduleError::MissingTensor {
        name: TensorKind::Attention.name(src),
        layer,
    })?;
    Ok(PooledAttention::from_matrix(&attn, src)?)
}

/// Runs every configured stage over `bundle`.
pub fn run_schedule(bundle: &TensorBundle, cfg: &PruneConfig) -> Result<ScheduleTrace, ScheduleError> {
    let n_visual = bundle.n_visual;
    let targets = cfg.resolve_targets(n_visual, bundle.n_layers)?;

    let mut survivors: Vec<usize> = (0..n_visual).collect();
    let mut stages = Vec::with_capacity(targets.len());
    let mut layer_counts = vec![n_visual; bundle.n_layers];

    for (&layer, &target) in cfg.prune_layers.iter().zip(&targets) {
        let pooled = pooled_for(bundle, layer)?;
        let hidden = bundle.hidden(layer).ok_or_else(|| ScheduleError::MissingTensor {
            name: TensorKind::Hidden.name(layer),
            layer,
        })?;
        if pooled.s_glo.len() != n_visual || pooled.s_last.len() != n_visual || hidden.rows() != n_visual {
            return Err(RoutingError::DimensionMismatch {
                expected: n_visual,
                actual: hidden.rows().min(pooled.s_glo.len()).min(pooled.s_last.len()),
            }
            .into());
        }

        let local = pooled.restrict(&survivors);
        let local_hidden = hidden.select_rows(&survivors);
        let n_before = survivors.len();
        let entropy = normalized_entropy(&local.s_glo).h;
        let split = split_budget(n_before, target, entropy, &cfg.hyperparams)?;
        let routed = route_layer(&local_hidden, &local.s_glo, &local.s_last, &split)?;
        let routing = routed.remap(&survivors);

        survivors = routing.kept.clone();
        for c in layer_counts.iter_mut().skip(layer + 1) {
            *c = survivors.len();
        }
        stages.push(StageTrace {
            layer,
            n_before,
            target,
            entropy,
            anchors_only: split.k_rest == 0,
            routing,
        });
    }

    Ok(ScheduleTrace {
        sample_id: bundle.sample_id.clone(),
        stages,
        survivors,
        layer_counts,
    })
}
