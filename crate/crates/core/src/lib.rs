//! Harness for benchmarking visual mathematical problem solving.
//!
//! The library is organized around a small set of moving parts:
//!
//! - [`corpus`]: the annotated problem dataset (JSONL schema, validation,
//!   statistics, next-step training-pair generation).
//! - [`versioning`]: deterministic composition of a problem into the six
//!   benchmark versions that shift information between text and diagram.
//! - [`grading`]: answer extraction from free-text model output and grading
//!   against the expected answer.
//! - [`client`]: uniform access to chat-completion backends (HTTP or a
//!   scripted test double) with caching, retry, and rate limiting.
//! - [`pipeline`]: the two-stage perception/inference orchestration that
//!   extracts essential information and reasoned properties from a diagram
//!   and fuses them into an enriched textual problem.
//! - [`cot_eval`]: step-guided chain-of-thought scoring with the weighted
//!   aggregate over progressive solution-step prompts.
//! - [`reporting`]: per-version accuracy tables and error-distribution
//!   breakdowns rendered as markdown, CSV, or JSON.

pub mod client;
pub mod corpus;
pub mod cot_eval;
pub mod grading;
pub mod pipeline;
pub mod reporting;
pub mod versioning;

pub use corpus::{load_corpus, validate_record, ProblemRecord};
pub use versioning::{compose_all, compose_version, RenderedProblem, VersionTag};
