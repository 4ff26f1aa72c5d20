//! Short-video engagement prediction.
//!
//! The pipeline predicts four engagement counts (comment, heart, play, share)
//! from two views of a video:
//!
//! * tabular metadata, turned into a fixed 22-column [`features::FeatureMatrix`]
//!   and fed to a second-order gradient-boosted tree learner ([`gbdt`]);
//! * up to six precomputed embedding vectors (four video encoders, two
//!   description-text encoders), fused by a multi-branch network ([`fusion`]).
//!
//! The two model families are averaged in raw count space ([`evaluate`]), and
//! [`ablate`] trains the fusion network over subsets of embedding sources.
//! [`pipeline`] wires everything behind the `popfusion` command line tool.
//!
//! Data-parallel loops (split search, cross-validation folds, search
//! candidates, ablation cells, per-row feature assembly) go through
//! [`par::Exec`]; with the `parallel` feature disabled every loop runs
//! sequentially and produces identical results.

pub mod ablate;
pub mod evaluate;
pub mod features;
pub mod fusion;
pub mod gbdt;
pub mod ingest;
pub mod par;
pub mod pipeline;
pub mod textfmt;

pub use ingest::{SourceId, Target};
