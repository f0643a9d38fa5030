//! Semantic uncertainty toolkit for sampled language-model responses.
//!
//! The pipeline for one query is:
//!
//! 1. sample N responses with per-token log-probabilities ([`clients`]),
//! 2. group them into semantic equivalence classes with a sequential
//!    CRP-style assignment over NLI entailment scores ([`clustering`]),
//! 3. turn cluster probability mass into a semantic-entropy uncertainty
//!    score ([`uq`]),
//! 4. use `-log p(c|x)` as an inductive conformal nonconformity score to
//!    build prediction sets with marginal coverage `>= 1 - eps`
//!    ([`conformal`]).
//!
//! [`metrics`] evaluates UQ scores (AUROC, AUARC, AURAC), [`simulator`]
//! provides Monte-Carlo coverage checks and synthetic corpora, and
//! [`ingest`] owns the JSONL corpus format.

pub mod clients;
pub mod clustering;
pub mod conformal;
mod error;
pub mod ingest;
pub mod logspace;
pub mod metrics;
pub mod record;
pub mod rng;
pub mod simulator;
pub mod uq;

pub use error::{Error, Result};
pub use logspace::{log_sum_exp, normalized_sequence_logprob, sequence_logprob, softmax, LogProb};
pub use record::{EntailmentMatrix, GenerationRecord, Response};
