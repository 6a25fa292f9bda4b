//! Contrastive, entropy-adaptive visual-token routing for multimodal
//! decoders, plus the tooling around it: a binary tensor container, a
//! FLOPs model, diagnostics and a synthetic data generator.

pub mod analysis;
pub mod budgeting;
pub mod bundle;
pub mod efficiency;
pub mod numeric;
pub mod pooling;
pub mod routing;
pub mod scheduler;
pub mod synth;

pub use budgeting::{split_budget, BudgetError, BudgetSplit, Hyperparams};
pub use bundle::{
    decode_bundle, encode_bundle, read_bundle, validate_bundle, write_bundle, BundleError, DenseTensor, TensorBundle,
    TensorKind, Violation,
};
pub use efficiency::{layer_flops, total_flops, total_flops_against, EfficiencyError, FlopsReport, ModelDims};
pub use numeric::Matrix;
pub use pooling::{normalized_entropy, pool_global, pool_last, PooledAttention, PoolingError};
pub use routing::{route_layer, select_bottom_k, select_top_k, LayerRoutingResult, RoutingError};
pub use scheduler::{geometric_targets, run_schedule, PruneConfig, ScheduleError, ScheduleMode, ScheduleTrace};
pub use synth::{generate, SynthError, SynthSpec};
