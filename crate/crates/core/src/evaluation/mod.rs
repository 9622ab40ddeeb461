//! Metrics, splits, cross-validation, two-stage evaluation, ablation and reports.

pub mod cv;
pub mod metrics;
pub mod report;
pub mod splits;

pub use cv::{grid_search, GridSearch};
pub use metrics::{
    binary_metrics, macro_auc, macro_metrics, roc_auc, summarize, ConfusionMatrix, MetricReport, Scope, Summary,
    METRIC_NAMES,
};
pub use report::{
    ablation_from_cache, evaluate_baseline, evaluate_cached, evaluate_two_stage, predict_cache, run_ablation,
    write_reports, AblationRow, PatientEvaluation, PredictionCache, TwoStageEvaluation,
};
pub use splits::{grouped_stratified_folds, make_splits, PatientSplit, SplitPlan};
