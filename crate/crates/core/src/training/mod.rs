//! Training loop, held-out metrics, cross-validation and the ablation grid.

mod ablation;
mod cv;
mod metrics;
mod trainer;

pub use ablation::{config_diff, reference_config, run_ablation, AblationReport, AblationRow, AblationTable};
pub use cv::{assign_folds, fold_splits, kfold_cv, mean_std, CVResult, FoldSummary};
pub use metrics::{ClassMetrics, Metrics};
pub use trainer::{
    evaluate, evaluate_model, train, train_with_store, EpochRecord, Evaluation, Timing, TrainConfig, TrainHistory,
};
