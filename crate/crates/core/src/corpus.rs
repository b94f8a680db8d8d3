//! Documents, per-source lexical indexes and the ordered source registry.
//!
//! The built-in retriever is Okapi BM25 over [`tokenize`](crate::text::tokenize)
//! tokens of `title + text`:
//!
//! ```text
//! score(D, Q) = sum over query tokens t of
//!     idf(t) * tf(t, D) * (k1 + 1) / (tf(t, D) + k1 * (1 - b + b * |D| / avgdl))
//! idf(t) = ln(1 + (N - df(t) + 0.5) / (df(t) + 0.5))
//! ```
//!
//! Repeated query tokens contribute once per occurrence.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec::Vec;
use core::cmp::Ordering;
use serde::{Deserialize, Serialize};

use crate::text::tokenize;

pub const BM25_K1: f64 = 1.2;
pub const BM25_B: f64 = 0.75;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CorpusError {
    #[error("document id must be non-empty")]
    EmptyId,
    #[error("document {0} has empty text")]
    EmptyText(String),
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("duplicate document id {0}")]
    DuplicateId(String),
    #[error("duplicate source {0}")]
    DuplicateSource(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub source: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub title: Option<String>,
    pub text: String,
}

impl Document {
    pub fn new(
        id: impl Into<String>,
        source: impl Into<String>,
        title: Option<String>,
        text: impl Into<String>,
    ) -> Result<Self, CorpusError> {
        let id = id.into();
        let text = text.into();
        if id.is_empty() {
            return Err(CorpusError::EmptyId);
        }
        if text.trim().is_empty() {
            return Err(CorpusError::EmptyText(id));
        }
        Ok(Self {
            id,
            source: source.into(),
            title,
            text,
        })
    }

    fn indexed_text(&self) -> Vec<String> {
        let mut tokens = self.title.as_deref().map(tokenize).unwrap_or_default();
        tokens.extend(tokenize(&self.text));
        tokens
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceProfile {
    pub name: String,
    pub description: String,
    pub document_count: usize,
}

/// One scored lookup result.
#[derive(Debug, Clone, PartialEq)]
pub struct Hit {
    pub document: Arc<Document>,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{0}")]
pub struct RetrieveError(pub String);

/// Top-k lookup over one source.
pub trait Retriever: Send + Sync {
    /// At most `k` hits, descending score, ties by ascending document id.
    fn lookup(&self, query: &str, k: usize) -> Result<Vec<Hit>, RetrieveError>;

    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Descending score, then ascending id.
pub fn hit_order(a: &Hit, b: &Hit) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.document.id.cmp(&b.document.id))
}

#[derive(Debug, Clone)]
pub struct Bm25Index {
    docs: Vec<Arc<Document>>,
    doc_len: Vec<u32>,
    avg_len: f64,
    /// term -> (doc position, term frequency)
    postings: BTreeMap<String, Vec<(u32, u32)>>,
    k1: f64,
    b: f64,
}

impl Bm25Index {
    pub fn build(documents: Vec<Document>) -> Result<Self, CorpusError> {
        Self::with_params(documents, BM25_K1, BM25_B)
    }

    pub fn with_params(documents: Vec<Document>, k1: f64, b: f64) -> Result<Self, CorpusError> {
        if documents.is_empty() {
            return Err(CorpusError::EmptyCorpus);
        }
        let mut seen = BTreeMap::new();
        let mut postings: BTreeMap<String, Vec<(u32, u32)>> = BTreeMap::new();
        let mut doc_len = Vec::with_capacity(documents.len());
        let mut docs = Vec::with_capacity(documents.len());
        for (pos, doc) in documents.into_iter().enumerate() {
            if seen.insert(doc.id.clone(), ()).is_some() {
                return Err(CorpusError::DuplicateId(doc.id));
            }
            let tokens = doc.indexed_text();
            doc_len.push(tokens.len() as u32);
            let mut tf: BTreeMap<String, u32> = BTreeMap::new();
            for t in tokens {
                *tf.entry(t).or_insert(0) += 1;
            }
            for (term, count) in tf {
                postings.entry(term).or_default().push((pos as u32, count));
            }
            docs.push(Arc::new(doc));
        }
        let total: u64 = doc_len.iter().map(|&l| u64::from(l)).sum();
        let avg_len = total as f64 / docs.len() as f64;
        Ok(Self {
            docs,
            doc_len,
            avg_len,
            postings,
            k1,
            b,
        })
    }

    pub fn documents(&self) -> &[Arc<Document>] {
        &self.docs
    }

    /// BM25 score of every document, in insertion order.
    pub fn score_all(&self, query: &str) -> Vec<f64> {
        let mut scores = alloc::vec![0.0; self.docs.len()];
        let n = self.docs.len() as f64;
        for term in tokenize(query) {
            let Some(list) = self.postings.get(&term) else {
                continue;
            };
            let df = list.len() as f64;
            let idf = libm::log(1.0 + (n - df + 0.5) / (df + 0.5));
            for &(pos, tf) in list {
                let tf = f64::from(tf);
                let len = f64::from(self.doc_len[pos as usize]);
                let norm = if self.avg_len > 0.0 {
                    1.0 - self.b + self.b * len / self.avg_len
                } else {
                    1.0
                };
                scores[pos as usize] += idf * tf * (self.k1 + 1.0) / (tf + self.k1 * norm);
            }
        }
        scores
    }
}

impl Retriever for Bm25Index {
    fn lookup(&self, query: &str, k: usize) -> Result<Vec<Hit>, RetrieveError> {
        let mut hits: Vec<Hit> = self
            .score_all(query)
            .into_iter()
            .zip(&self.docs)
            .map(|(score, doc)| Hit {
                document: Arc::clone(doc),
                score,
            })
            .collect();
        hits.sort_by(hit_order);
        hits.truncate(k);
        Ok(hits)
    }

    fn len(&self) -> usize {
        self.docs.len()
    }
}

#[derive(Clone)]
pub struct RegisteredSource {
    pub profile: SourceProfile,
    pub retriever: Arc<dyn Retriever>,
}

/// Sources in a fixed order shared by retrieval, capping and reporting.
#[derive(Clone, Default)]
pub struct SourceRegistry {
    entries: Vec<RegisteredSource>,
}

impl core::fmt::Debug for SourceRegistry {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_list()
            .entries(self.entries.iter().map(|e| &e.profile))
            .finish()
    }
}

impl SourceRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(
        &mut self,
        profile: SourceProfile,
        retriever: Arc<dyn Retriever>,
    ) -> Result<(), CorpusError> {
        if self.get(&profile.name).is_some() {
            return Err(CorpusError::DuplicateSource(profile.name));
        }
        self.entries.push(RegisteredSource { profile, retriever });
        Ok(())
    }

    /// Builds a BM25 index over `documents` and registers it under `name`.
    pub fn add_corpus(
        &mut self,
        name: &str,
        description: &str,
        documents: Vec<Document>,
    ) -> Result<SourceProfile, CorpusError> {
        if self.get(name).is_some() {
            return Err(CorpusError::DuplicateSource(name.into()));
        }
        let index = Bm25Index::build(documents)?;
        let profile = SourceProfile {
            name: name.into(),
            description: description.into(),
            document_count: index.len(),
        };
        self.register(profile.clone(), Arc::new(index))?;
        Ok(profile)
    }

    pub fn get(&self, name: &str) -> Option<&RegisteredSource> {
        self.entries.iter().find(|e| e.profile.name == name)
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.profile.name == name)
    }

    pub fn entries(&self) -> &[RegisteredSource] {
        &self.entries
    }

    pub fn profiles(&self) -> Vec<SourceProfile> {
        self.entries.iter().map(|e| e.profile.clone()).collect()
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.iter().map(|e| e.profile.name.as_str()).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// A registry restricted to `names`, in the order given.
    pub fn subset(&self, names: &[&str]) -> Result<Self, String> {
        let mut out = Self::new();
        for name in names {
            let entry = self.get(name).ok_or_else(|| String::from(*name))?;
            out.entries.push(entry.clone());
        }
        Ok(out)
    }
}
