//! Dataset-quality metrics and face-verification protocols.

mod attributes;
mod quality;
mod verify;

pub use attributes::{
    attribute_stats, boxplot_csv, AttributeRow, AttributeStats, AttributeSummary, AttributeTable, AttributeValue,
    FiveNumber,
};
pub use quality::{
    consistency, identity_features, label_index, separability, ConsistencyMode, ConsistencyReport,
    IdentityConsistency, SeparabilityReport, SEPARATION_THRESHOLD,
};
pub use verify::{
    accuracy, best_threshold, candidate_thresholds, demographic_breakdown, fold_bounds, kfold_accuracy,
    threshold_at_fpr, tpr_at_fpr, DemographicTable, GroupKey, GroupRate, KFoldReport, LabeledScore,
    RateAtThreshold, ScoreSet,
};
