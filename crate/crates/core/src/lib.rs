//! Expert-guided decoding for autoregressive models.
//!
//! The pipeline: decode an answer, score its predictive entropy, route
//! uncertain answers to review with retrieved reference captions, turn the
//! expert's highlights into a token mask, and regenerate with two-branch
//! classifier-free guidance that amplifies the highlighted tokens.
//!
//! Numeric code is generic over [`Scalar`] (`f32`, `f64`); metrics that need
//! only field arithmetic accept any [`Field`], including exact rationals.

// `!(x > 0.0)` is how NaN gets rejected along with the out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod annotation;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod guidance;
pub mod model;
pub mod retrieval;
pub mod scalar;
pub mod scenario;
pub mod text;
pub mod uncertainty;

pub use error::{Error, Result};
pub use guidance::{guided_decode, GuidanceConfig, GuidedDecode, GuidedStep, HighlightMask};
pub use model::{greedy_decode, GuidableModel, MicroTransformer, OneLayerToy, Prompt, StepDistribution, TokenSequence, Vocab};
pub use scalar::{Field, Scalar};
pub use uncertainty::{gate, predictive_entropy, EntropyReport, GateDecision, GatePolicy, Verdict};

pub type MicroTransformerF64 = model::MicroTransformer<f64>;
pub type MicroTransformerF32 = model::MicroTransformer<f32>;
pub type OneLayerToyF64 = model::OneLayerToy<f64>;
pub type GuidanceConfigF64 = guidance::GuidanceConfig<f64>;
pub type EntropyReportF64 = uncertainty::EntropyReport<f64>;
pub type KnowledgeStoreF64 = retrieval::KnowledgeStore<f64>;
pub type KnowledgeRecordF64 = retrieval::KnowledgeRecord<f64>;
pub type ScoredSampleF64 = evaluation::ScoredSample<f64>;
