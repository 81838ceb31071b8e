//! Mining of temporal semantic-shift tuples `(pivot, anchor@T1, anchor@T2)`
//! from two corpus snapshots, likelihood-driven template induction, and
//! generation of prompts and masked training instances for time-adapting a
//! masked language model.
//!
//! The pipeline, bottom-up:
//!
//! - [`corpus`]: load, tokenize, deduplicate and split snapshots.
//! - [`stats`]: sentence-level frequency and co-occurrence counts, PMI.
//! - [`tuples`]: pivot selection, anchor sets and the three tuple scorers.
//! - [`embeddings`]: per-snapshot averaged contextual embeddings.
//! - [`lm_oracle`]: token likelihood oracles (reference n-gram, external peer).
//! - [`templates`]: template parsing, filling and beam-search induction.
//! - [`prompts`]: prompt expansion and masked training instances.
//! - [`pipeline`] and [`report`]: end-to-end orchestration and result charts.

pub mod corpus;
pub mod embeddings;
pub mod error;
pub mod fixtures;
pub mod lm_oracle;
pub mod pipeline;
pub mod prompts;
pub mod report;
pub mod stats;
pub mod templates;
pub mod tuples;

pub use corpus::{load_snapshot, preprocess, split, InputFormat, Snapshot, SplitSpec, TokenId, Vocab};
pub use embeddings::{cosine, EmbeddingTable};
pub use error::{Error, Result};
pub use lm_oracle::{ExternalOracle, LikelihoodOracle, NGramLM, OracleError};
pub use pipeline::{run_pipeline, Manifest, PipelineConfig};
pub use prompts::{MaskedInstance, Prompt};
pub use stats::{count, SnapshotStats};
pub use templates::{SlotKind, Template};
pub use tuples::{AnchorSet, Method, ScoredTuple, TupleSet};
