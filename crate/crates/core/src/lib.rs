//! Comment-aware cross-modal retrieval and self-training over precomputed
//! embedding vectors.
//!
//! The pipeline, bottom-up:
//!
//! - [`corpus`]: posts, comments and embedding matrices; ingestion, validation,
//!   normalization and a synthetic generator.
//! - [`vecindex`]: a from-scratch IVFPQ index (k-means coarse quantizer, product
//!   quantization of residuals, ADC scan) and an exact brute-force scan.
//! - [`xsearch`]: fusion-weight estimation and two-modality candidate retrieval
//!   ranked by the fused score.
//! - [`consensus`]: comment pools and consensus-comment selection.
//! - [`neural`]: a small classifier with comment attention (early and late
//!   fusion), losses, AdamW and finite-difference gradient checking.
//! - [`pipeline`]: per-query retrieval plus consensus, feeding training.
//! - [`selftrain`]: teacher-student self-training with comment dropout.
//! - [`metrics`]: precision / recall / F1 / accuracy.

pub mod consensus;
pub mod corpus;
mod error;
pub mod metrics;
pub mod neural;
pub mod pipeline;
pub mod selftrain;
pub mod vecindex;
pub mod vector;
pub mod xsearch;

pub use consensus::{CommentPool, ConsensusEntry, ConsensusSet};
pub use corpus::{CommentRecord, Corpus, Dims, PostRecord, Split, SynthConfig};
pub use error::{Error, ErrorKind, Result};
pub use metrics::{compute_metrics, MetricsReport, ValidationMetric};
pub use neural::{FusionClassifier, ModelConfig, Scheme, SoftLabel};
pub use pipeline::QueryContext;
pub use selftrain::{EvalSet, LabeledSet, SelfTrainConfig, UnlabeledSet};
pub use vecindex::{IvfPqIndex, IvfPqParams, SearchHit};
pub use xsearch::{FusionWeights, RetrievalIndex, RetrievalResult, SearchParams};
