//! Std companion for `sourcecap-core`: corpus file formats, manifests, LLM
//! backends, the comparison runner, layered configuration and the HTTP service.

pub mod compare;
pub mod config;
pub mod fanout;
pub mod ingest;
pub mod llm;
pub mod manifest;
pub mod service;
