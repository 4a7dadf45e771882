//! Experiment configuration, orchestration and report output.

mod config;
mod data;
mod manifest;
mod pipeline;
mod sweep;

pub use config::{
    ArchitectureAssignment, BaseSpec, DatasetSpec, EvaluationSpec, ExperimentConfig, FeatureRows, GraphSpec,
    MetaSpec, MetricChoice, PartitionSpec, SplitChoice, AUTO_METRIC_IMBALANCE,
};
pub use data::{export_csv, load_external_csv};
pub use manifest::{FileRecord, RunManifest, StageRecord, StageStatus};
pub use pipeline::{
    emit_reports, ensure_writable, load_dataset, partition_dataset, run_experiment, ClientGraph, ClientMeta,
    LocalTraining, RunOptions, RunOutcome, CACHE_FILES, DECISIONS_HEADER, STAGE_DATA, STAGE_EVALUATION,
    STAGE_EXCHANGE, STAGE_GRAPH, STAGE_LOCAL, STAGE_META, STAGE_REPORTS,
};
pub use sweep::{render_summaries, run_sweep, seed_dir, SweepMethod, SweepStat, SweepSummary};
