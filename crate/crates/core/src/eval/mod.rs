//! Metrics, feature diagnostics and the end-to-end experiment runner.

pub mod divergence;
pub mod experiment;
pub mod metrics;

pub use divergence::{aggregate_feature, feature_divergence, top_k_counts, DivergenceCounts, FeatureDivergence};
pub use metrics::{auroc, ks_statistic, mann_whitney, roc_curve, roc_summary, tpr_at_fpr, RankTest, RocSummary, ScoredSet};
