//! Search loop, losses, genotypes, retraining and the width grid.

mod config;
mod dual;
mod genotype;
mod grid;
mod loss;
pub mod network;
mod retrain;

pub use config::{RetrainConfig, SearchConfig};
pub use dual::{
    dual_search, EpochPlan, EpochRecord, MetricsLog, SearchOutcome, SearchRun, UpdateCounts,
};
pub use genotype::Genotype;
pub use grid::{grid_search_hidden, GridResult};
pub use loss::{compute_loss, evaluate, micro_f1};
pub use network::{NetworkShape, StandaloneNet, Supernet};
pub use retrain::{evaluate_splits, retrain_genotype, RetrainReport, SplitMetrics, TrainedModel};
