//! Competence-based selection, weighted voting, baselines and evaluation.

mod decision;
pub mod metrics;
mod report;

pub use decision::{
    decide, decide_and_vote, uniform_vote, vote, EnsembleDecision, Selection, SELECTION_THRESHOLD,
};
pub use metrics::{
    accuracy, balanced_accuracy, effective_ensemble_size, mean_std, per_class_recall, spearman, win_rate, Metric,
};
pub use report::{
    run_baselines, selection_frequency_correlation, Baselines, ClientEvaluation, ClientRow, CorrelationPair,
    CorrelationReport, EssSummary, FederationReport, MethodSummary, ReportSummary, ESS_FORMULA, METHODS,
};
