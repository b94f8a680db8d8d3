//! Fan-out of one bound sub-query to every source and the merged candidate pool.

use alloc::string::{String, ToString};
use alloc::sync::Arc;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::corpus::{Document, Hit, RetrieveError, Retriever, SourceRegistry};

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredCandidate {
    pub document: Arc<Document>,
    pub score: f64,
    pub source: String,
    /// 1-based rank within the source's own result list.
    pub source_rank: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceCount {
    pub source: String,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceFailure {
    pub source: String,
    pub message: String,
}

/// Candidates grouped by source in registry order, each group in rank order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CandidatePool {
    pub candidates: Vec<ScoredCandidate>,
    /// Every registry source, in registry order, with its candidate count.
    pub per_source_counts: Vec<SourceCount>,
    pub failures: Vec<SourceFailure>,
}

impl CandidatePool {
    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn count(&self, source: &str) -> usize {
        self.per_source_counts
            .iter()
            .find(|c| c.source == source)
            .map_or(0, |c| c.count)
    }

    /// Registry position of `source`; unknown sources sort last.
    pub fn source_order(&self, source: &str) -> usize {
        self.per_source_counts
            .iter()
            .position(|c| c.source == source)
            .unwrap_or(usize::MAX)
    }

    pub fn sources(&self) -> impl Iterator<Item = &str> {
        self.per_source_counts.iter().map(|c| c.source.as_str())
    }

    /// Keeps candidates for which `keep` holds and recounts.
    pub fn filtered(&self, mut keep: impl FnMut(&ScoredCandidate) -> bool) -> Self {
        let candidates: Vec<ScoredCandidate> =
            self.candidates.iter().filter(|c| keep(c)).cloned().collect();
        let per_source_counts = self
            .per_source_counts
            .iter()
            .map(|c| SourceCount {
                source: c.source.clone(),
                count: candidates.iter().filter(|x| x.source == c.source).count(),
            })
            .collect();
        Self {
            candidates,
            per_source_counts,
            failures: self.failures.clone(),
        }
    }

    /// Merges per-source results given in registry order.
    pub fn merge(results: Vec<(String, Result<Vec<Hit>, RetrieveError>)>) -> Self {
        let mut pool = Self::default();
        for (source, result) in results {
            match result {
                Ok(hits) => {
                    pool.per_source_counts.push(SourceCount {
                        source: source.clone(),
                        count: hits.len(),
                    });
                    pool.candidates.extend(hits.into_iter().enumerate().map(|(i, hit)| {
                        ScoredCandidate {
                            document: hit.document,
                            score: hit.score,
                            source: source.clone(),
                            source_rank: i + 1,
                        }
                    }));
                }
                Err(err) => {
                    pool.per_source_counts.push(SourceCount {
                        source: source.clone(),
                        count: 0,
                    });
                    pool.failures.push(SourceFailure {
                        source,
                        message: err.to_string(),
                    });
                }
            }
        }
        pool
    }
}

/// Runs one lookup per source. Implementations must return results in the
/// order of `sources`.
pub trait FanOut: Send + Sync {
    fn lookup_all(
        &self,
        sources: &[&dyn Retriever],
        query: &str,
        k: usize,
    ) -> Vec<Result<Vec<Hit>, RetrieveError>>;
}

/// In-order, single-threaded fan-out.
#[derive(Debug, Clone, Copy, Default)]
pub struct Sequential;

impl FanOut for Sequential {
    fn lookup_all(
        &self,
        sources: &[&dyn Retriever],
        query: &str,
        k: usize,
    ) -> Vec<Result<Vec<Hit>, RetrieveError>> {
        sources.iter().map(|r| r.lookup(query, k)).collect()
    }
}

/// Queries every registered source for its top `top_k_per_source` documents and
/// merges the annotated results. A failing source contributes no candidates
/// and is listed in `failures`.
pub fn retrieve_multi_source(
    query: &str,
    registry: &SourceRegistry,
    top_k_per_source: usize,
    fanout: &dyn FanOut,
) -> CandidatePool {
    let retrievers: Vec<&dyn Retriever> = registry
        .entries()
        .iter()
        .map(|e| e.retriever.as_ref())
        .collect();
    let mut results = fanout.lookup_all(&retrievers, query, top_k_per_source);
    results.resize_with(retrievers.len(), || {
        Err(RetrieveError("fan-out returned no result".to_string()))
    });
    let merged = registry
        .entries()
        .iter()
        .zip(results)
        .map(|(e, r)| {
            // A misbehaving retriever may not honour k.
            let r = r.map(|mut hits| {
                hits.truncate(top_k_per_source);
                hits
            });
            (e.profile.name.clone(), r)
        })
        .collect();
    CandidatePool::merge(merged)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Bm25Index, SourceProfile};
    use alloc::format;
    use alloc::vec;

    fn docs(source: &str, texts: &[&str]) -> Vec<Document> {
        texts
            .iter()
            .enumerate()
            .map(|(i, t)| Document::new(format!("{source}-{i}"), source, None, *t).unwrap())
            .collect()
    }

    fn corpus(name: &str) -> Vec<Document> {
        match name {
            "wiki" => docs("wiki", &["paris is the capital of france", "berlin is in germany", "rome is old", "france has wine"]),
            "sciq" => docs("sciq", &["water boils at 100 degrees", "france mitochondria", "cells divide", "atoms bond"]),
            _ => docs("bioasq", &["proteins fold", "france genome study", "enzymes catalyse"]),
        }
    }

    fn registry() -> SourceRegistry {
        let mut reg = SourceRegistry::new();
        for (name, profile) in [("wiki", "encyclopedia"), ("sciq", "science"), ("bioasq", "biomedical")] {
            reg.add_corpus(name, profile, corpus(name)).unwrap();
        }
        reg
    }

    struct Broken;

    impl Retriever for Broken {
        fn lookup(&self, _: &str, _: usize) -> Result<Vec<Hit>, RetrieveError> {
            Err(RetrieveError("disk on fire".into()))
        }
        fn len(&self) -> usize {
            1
        }
    }

    #[test]
    fn cardinality_is_forced() {
        let reg = registry().subset(&["wiki", "sciq"]).unwrap();
        let pool = retrieve_multi_source("france", &reg, 4, &Sequential);
        assert_eq!(pool.len(), 8);
        assert_eq!(pool.count("wiki"), 4);
        assert_eq!(pool.count("sciq"), 4);
    }

    #[test]
    fn single_source_equals_lookup() {
        let reg = registry().subset(&["sciq"]).unwrap();
        let pool = retrieve_multi_source("france cells", &reg, 3, &Sequential);
        let direct = reg.get("sciq").unwrap().retriever.lookup("france cells", 3).unwrap();
        let ids: Vec<_> = pool.candidates.iter().map(|c| c.document.id.clone()).collect();
        let want: Vec<_> = direct.iter().map(|h| h.document.id.clone()).collect();
        assert_eq!(ids, want);
    }

    #[test]
    fn concatenation_in_registry_order() {
        let reg = registry();
        let pool = retrieve_multi_source("france", &reg, 2, &Sequential);
        let mut want = Vec::new();
        for name in ["wiki", "sciq", "bioasq"] {
            let idx = Bm25Index::build(corpus(name)).unwrap();
            for (rank, hit) in idx.lookup("france", 2).unwrap().into_iter().enumerate() {
                want.push((name.to_string(), hit.document.id.clone(), rank + 1));
            }
        }
        let got: Vec<_> = pool.candidates.iter().map(|c| (c.source.clone(), c.document.id.clone(), c.source_rank)).collect();
        assert_eq!(got, want);
        for c in &pool.candidates {
            assert_eq!(c.source, c.document.source);
        }
    }

    #[test]
    fn failing_source_degrades_to_partial_pool() {
        let mut reg = registry().subset(&["wiki"]).unwrap();
        reg.register(
            SourceProfile { name: "broken".into(), description: "x".into(), document_count: 1 },
            Arc::new(Broken),
        )
        .unwrap();
        let pool = retrieve_multi_source("france", &reg, 2, &Sequential);
        assert_eq!(pool.len(), 2);
        assert_eq!(pool.count("broken"), 0);
        assert_eq!(pool.failures, vec![SourceFailure { source: "broken".into(), message: "disk on fire".into() }]);
    }
}
