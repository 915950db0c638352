//! Staged end-to-end workflow: configuration, manifest-gated stages and
//! the synthetic corpus used for desk-scale runs.

pub mod config;
pub mod manifest;
pub mod stages;
pub mod synthetic;

pub use config::{PipelineConfig, CACHE_DIR_ENV};
pub use manifest::{RunManifest, Stage};
pub use stages::{agreement_report, annotate, dry_run, run_all, run_stage, Layout, RunOptions, StageOutcome};
