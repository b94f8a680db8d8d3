use sourcecap_core::corpus::{Hit, RetrieveError, Retriever};
use sourcecap_core::FanOut;

/// One scoped thread per source; results come back in source order.
#[derive(Debug, Clone, Copy, Default)]
pub struct Threaded;

impl FanOut for Threaded {
    fn lookup_all(
        &self,
        sources: &[&dyn Retriever],
        query: &str,
        k: usize,
    ) -> Vec<Result<Vec<Hit>, RetrieveError>> {
        if sources.len() <= 1 {
            return sources.iter().map(|r| r.lookup(query, k)).collect();
        }
        std::thread::scope(|scope| {
            let handles: Vec<_> = sources
                .iter()
                .map(|r| scope.spawn(move || r.lookup(query, k)))
                .collect();
            handles
                .into_iter()
                .map(|h| {
                    h.join()
                        .unwrap_or_else(|_| Err(RetrieveError("retriever panicked".into())))
                })
                .collect()
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use sourcecap_core::retrieval::retrieve_multi_source;
    use sourcecap_core::{Document, Sequential, SourceRegistry};

    #[test]
    fn threaded_pool_equals_sequential_pool() {
        let mut reg = SourceRegistry::new();
        for s in 0..4 {
            let docs = (0..10)
                .map(|i| Document::new(format!("d{i}"), format!("s{s}"), None, format!("term{} common word{}", (i * s) % 5, i % 3)).unwrap())
                .collect();
            reg.add_corpus(&format!("s{s}"), "p", docs).unwrap();
        }
        for q in ["common", "term1 word2", "term3", "nothing"] {
            let a = retrieve_multi_source(q, &reg, 3, &Threaded);
            let b = retrieve_multi_source(q, &reg, 3, &Sequential);
            assert_eq!(a, b);
        }
    }
}
