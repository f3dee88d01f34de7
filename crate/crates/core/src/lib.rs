//! Dyadic joint visual attention analysis from egocentric video and gaze.
//!
//! Stages: gaze ingestion and projection ([`gaze`]), gaze-centred tubes
//! ([`tube`]), patch embeddings and similarity ([`embed`]), JVA detection and
//! epoch analysis ([`analytics`]), fixation/saccade events and coefficient K
//! ([`oculomotor`]), reports ([`report`]) and the end-to-end run
//! ([`pipeline`]). [`synth`] generates synthetic sessions with ground truth.

// `!(x > 0.0)` is used on purpose so NaN fails range checks.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analytics;
pub mod config;
pub mod embed;
pub mod gaze;
pub mod oculomotor;
pub mod pipeline;
pub mod report;
pub mod synth;
pub mod tube;

pub use config::RunConfig;
pub use pipeline::{analyze, run, PipelineError, SessionInputs, Stage};
pub use report::{ReportFormat, SessionReport};
