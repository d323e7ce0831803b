//! Pipeline toolkit for open-vocabulary video emotion recognition.
//!
//! The crate is organised bottom-up:
//!
//! - [`model`]: sample records, manifests and their validation
//! - [`sampler`]: segment-balanced, seeded frame selection
//! - [`labelspace`]: label parsing, normalization and synonym grouping
//! - [`metrics`]: per-sample and macro accuracy / recall / avg
//! - [`fusion`]: merging label sets from several models
//! - [`backend`]: prompt templates and inference clients (HTTP and scripted mock)
//! - [`caption`]: caption-pair generation, judging and threshold filtering
//! - [`config`]: run configuration and backend registry construction
//! - [`runflow`]: end-to-end orchestration that persists every artifact
//! - [`ingest`]: external frame-extraction adapter

pub mod backend;
pub mod caption;
pub mod config;
pub mod fusion;
pub mod ingest;
pub mod jsonl;
pub mod labelspace;
pub mod metrics;
pub mod model;
pub mod parallel;
pub mod runflow;
pub mod sampler;
pub mod seed;

pub use labelspace::{LabelSet, SynonymLexicon};
pub use metrics::{MetricReport, SampleMetrics};
pub use model::{DatasetManifest, SampleRecord};
