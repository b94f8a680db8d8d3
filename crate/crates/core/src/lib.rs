//! Multi-source retrieve-then-select RAG engine.
//!
//! Every registered source is queried for each sub-query, the merged pool is
//! trimmed by per-source quotas conditioned on an LLM routing preference, and
//! a pluggable selector picks the final evidence under an item budget. When the
//! generator flags the evidence as insufficient, the chain is retried with the
//! failed routing preference fed back to the router.
//!
//! The crate is `no_std` (it needs `alloc`). File formats, the HTTP LLM
//! client, threaded fan-out and the service live in the `sourcecap` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod corpus;
pub mod eval;
pub mod generation;
pub mod llm;
pub mod pipeline;
pub mod planner;
pub mod prompts;
pub mod retrieval;
pub mod router;
pub mod selection;
pub mod text;
pub mod trace;

pub use corpus::{Bm25Index, Document, Hit, Retriever, SourceProfile, SourceRegistry};
pub use llm::{CallKind, Llm, LlmError, LlmReply, LlmRequest, LlmUsage, Session};
pub use pipeline::{Pipeline, PipelineConfig, PipelineFault};
pub use retrieval::{CandidatePool, FanOut, ScoredCandidate, Sequential};
pub use selection::{BudgetConfig, EvidenceSet, Mode, Selector};
