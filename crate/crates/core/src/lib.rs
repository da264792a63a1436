//! Caption quality evaluation with a vision-language model as the judge,
//! plus the statistics used to compare judges against human ratings.
//!
//! The crate is organized around a two-stage pipeline: an optional visual
//! context extraction call per image, then a scoring call per candidate
//! caption. Everything a call depends on is content-addressed, so repeated
//! runs hit an on-disk cache instead of the endpoint.

pub mod baseline;
pub mod cache;
pub mod dataset;
pub mod gateway;
pub mod model;
pub mod parse;
pub mod pipeline;
pub mod prompt;
pub mod report;
pub mod stats;

pub use baseline::{bleu4, cider_d, rouge_l, tokenize, BaselineScores, CiderInput};
pub use cache::{CacheKey, CacheMode, EvalCache};
pub use dataset::{DatasetKind, JudgedItem, Judgment, PascalCategory, PreferredSide};
pub use gateway::{EndpointConfig, Gateway, HttpBackend, MockBackend, MockScript, VlmExchange};
pub use model::{
    CaptionCandidate, CaptionOrigin, ContentDigest, EvalScore, GenerationParams, ImageRef,
    LoadedImage, ParseStatus, ReferenceSet,
};
pub use parse::{parse_score, parse_visual_context, VisualContext};
pub use pipeline::{
    baseline_score_table, compute_baselines, score_table, BaselineMetric, BaselineRecord,
    EvalRecord, Pipeline, PipelineMode, RunConfig, RunOutcome,
};
pub use prompt::{render, PromptInputs, PromptMode, RenderedPrompt};
pub use report::{meta_eval, MetaEvalOptions, MetaEvalReport, ScoreTable, SliceReport};
pub use stats::{
    heatmap, kendall_tau, pascal_accuracy, pearson, Heatmap, KendallResult, PascalAccuracy,
    ScorePairSeries, ScoredPair, TauVariant, TiePolicy,
};
