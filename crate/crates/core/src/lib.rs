//! Time-series reasoning over a merged text + temporal-token vocabulary.
//!
//! The crate covers the whole pipeline: a white-box AC circuit produces
//! labeled multivariate windows ([`circuit`], [`dataset`]); a VQ-VAE turns each
//! patch of each channel into a discrete token ([`vq`]); a small decoder-only
//! transformer reads text and temporal tokens through one shared embedding
//! table ([`lm`]) and is trained in two stages ([`train`]); [`eval`] scores
//! conclusions and aggregates human review.

pub mod circuit;
pub mod config;
pub mod container;
pub mod dataset;
pub mod eval;
pub mod gradcheck;
pub mod lm;
pub mod nn;
pub mod params;
pub mod pipeline;
pub mod real;
pub mod train;
pub mod util;
pub mod vq;

pub use circuit::{Channel, CircuitConfig, FaultScenario, FaultTarget, TimeSeriesWindow, CHANNELS};
pub use config::RunConfig;
pub use dataset::{DatasetBundle, DatasetSpec, QaSample, Split, TaskKind};
pub use eval::{CaReport, EvalRecord, ReviewRow};
pub use lm::{Checkpoint, LanguageModel, TemporalEncoding, TransformerConfig, Vocabulary};
pub use pipeline::{Layout, PipelineError};
pub use train::{Stage, StageConfig};
pub use vq::{Tokenizer, TokenizerConfig, VqTrainConfig};
