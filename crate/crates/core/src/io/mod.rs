//! Embedding containers, run configuration, checkpoint caching and the
//! end-to-end pipeline with its report files.

mod cache;
mod config;
mod container;
mod npy;
mod pipeline;
mod report;

pub use cache::DirCache;
pub use config::{read_ground_truth, AnalysisConfig, Preset, RunConfig, StageOverrides, SubsampleTarget, SEED_ENV};
pub use container::{
    decode_embeddings, encode_embeddings, read_embeddings, read_pool, write_embeddings, EmbeddingHeader,
    EMBEDDING_MAGIC, EMBEDDING_SCHEMA_VERSION,
};
pub use npy::{import_npy, import_npy_bytes};
pub use pipeline::{
    run_pipeline, run_pipeline_on, AmplificationSummary, BoundEntry, CorrelationSummary, FlowDiagnostics, JobEntry,
    JobTiming, PerturbationEntry, Provenance, RunReport, RunStatus, ScoreVariant, ARTIFACT_VERSION,
    REPORT_SCHEMA_VERSION,
};
pub use report::{bounds_csv, perturbation_csv, report_files, report_json, scores_csv, write_report};

pub(crate) use report::write_atomic;

/// Schema of `report.json`.
pub const REPORT_SCHEMA: &str = include_str!("../../schema/report.schema.json");
