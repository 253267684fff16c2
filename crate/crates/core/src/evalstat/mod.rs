//! Classification metrics, bootstrap replication of the train/evaluate loop,
//! paired permutation tests and site-holdout studies.

mod bootstrap;
mod dataset;
mod holdout;
mod metrics;
mod permtest;
pub mod report;

pub use bootstrap::{
    bootstrap_run, parallel_map, percentile, predict_cases, replicate_configs, replicate_plans,
    retrain_replicate, select_median, train_replicate, BootstrapConfig, BootstrapReport, ClassF1,
    MetricSummaries, MetricSummary, ProtocolEcho, ReplicateResult, DEFAULT_REPLICATES,
};
pub use dataset::{DataCase, Dataset};
pub use holdout::{holdout_run, HoldoutReport, MetricDrop, DEFAULT_HOLDOUT_REPLICATES};
pub use metrics::{
    auroc, balanced_accuracy, binary_auroc, confusion, mcc, metric_vector, per_class_f1, weighted_f1,
    Confusion, MetricVector, Prediction, PredictionSet, METRIC_NAMES,
};
pub use permtest::{perm_test, PermTestResult, ALPHA, DEFAULT_PERMUTATIONS};

/// Replicate whose test MCC is closest to the median over replicates.
pub fn select_median_model(report: &BootstrapReport) -> crate::Result<usize> {
    report.select_median_model()
}
