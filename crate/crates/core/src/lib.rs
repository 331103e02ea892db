//! Cause-effect-signal (CES) triplet extraction by iterative prompting of a
//! sequence-to-sequence generator.
//!
//! The crate covers corpus ingestion ([`dataset`]), prompt construction
//! ([`prompt`]), mapping generations back onto the sentence ([`matcher`]),
//! scoring ([`eval`]) and the extraction loop with its backends
//! ([`pipeline`]). Model training and serving live elsewhere; the
//! [`pipeline::HttpBackend`] speaks to such a server.

pub mod dataset;
pub mod eval;
pub mod matcher;
pub mod pipeline;
pub mod prompt;
pub mod text;

pub use dataset::{AnnotatedExample, CorpusFormat};
pub use eval::{F1Mode, MetricsReport, ScoreConfig, SignalAbsence};
pub use pipeline::{ExtractionConfig, Extractor, GeneratorBackend};
pub use text::{CesTriplet, Component, GenerationOrder, Sentence, Span};
