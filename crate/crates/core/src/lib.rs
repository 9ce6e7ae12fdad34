//! Multitask lung nodule segmentation.
//!
//! Data ingestion ([`imaging_io`], [`roi_pipeline`]), the soft threshold
//! dynamics activation ([`std_activation`]), the dual-branch model
//! ([`network`]), losses ([`objectives`]), evaluation ([`metrics`]) and
//! training ([`trainer`]), configured through [`config::RunConfig`].

// `!(x > 0.0)` is how NaN gets rejected along with the out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod error;
pub mod imaging_io;
pub mod metrics;
pub mod network;
pub mod objectives;
pub mod roi_pipeline;
pub mod std_activation;
pub mod trainer;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use imaging_io::{NoduleAnnotation, PatchManifest, ScanVolume, PATCH_SIZE};
pub use metrics::{Aggregation, CaseMetrics, MetricSummary, MetricsReport};
pub use network::{ForwardOutputs, Mode, Model, ModelConfig};
pub use objectives::{LossTerms, LossValues, LossWeights};
pub use roi_pipeline::SlicePatch;
pub use std_activation::StdParams;
pub use trainer::{EvalConfig, EpochLog, FreezeSpec, Phase, Split, TrainConfig};
