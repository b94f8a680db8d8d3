//! Source/preset manifests and query datasets.
//!
//! ```toml
//! [[source]]
//! name = "wiki"
//! file = "corpora/wiki.json"   # relative to the manifest
//! profile = "General encyclopedic knowledge"
//!
//! [[preset]]
//! name = "three-source"
//! sources = ["wiki", "sciq", "bioasq"]
//! queries = "queries.jsonl"
//! ```
//!
//! Query datasets are JSON lines: `{"id", "question", "answers": [...], "gold_source"?}`.

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use sourcecap_core::eval::EvalQuery;
use sourcecap_core::{Bm25Index, Retriever, SourceProfile, SourceRegistry};

use crate::ingest::{read_corpus, CorpusFormat};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceEntry {
    pub name: String,
    pub file: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub format: Option<CorpusFormat>,
    pub profile: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Preset {
    pub name: String,
    pub sources: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub queries: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    #[serde(default, rename = "source")]
    pub sources: Vec<SourceEntry>,
    #[serde(default, rename = "preset")]
    pub presets: Vec<Preset>,
    /// Directory relative paths resolve against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading manifest {}", path.display()))?;
        let mut manifest: Manifest =
            toml::from_str(&text).with_context(|| format!("parsing manifest {}", path.display()))?;
        manifest.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        manifest.check()?;
        Ok(manifest)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, toml::to_string_pretty(self)?).with_context(|| format!("writing {}", path.display()))
    }

    fn check(&self) -> Result<()> {
        let mut names = HashSet::new();
        for s in &self.sources {
            if !names.insert(s.name.as_str()) {
                bail!("manifest lists source {} twice", s.name);
            }
        }
        // Preset sources are checked when a run is resolved: they may name
        // sources uploaded after the manifest was written.
        let mut presets = HashSet::new();
        for p in &self.presets {
            if !presets.insert(p.name.as_str()) {
                bail!("manifest lists preset {} twice", p.name);
            }
        }
        Ok(())
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.base_dir.join(path)
        }
    }

    pub fn source(&self, name: &str) -> Option<&SourceEntry> {
        self.sources.iter().find(|s| s.name == name)
    }

    pub fn preset(&self, name: &str) -> Option<&Preset> {
        self.presets.iter().find(|p| p.name == name)
    }

    /// Indexes the named sources, one thread per source, and registers them in
    /// the order given.
    pub fn build_registry(&self, names: &[String]) -> Result<SourceRegistry> {
        let entries: Vec<&SourceEntry> = names
            .iter()
            .map(|n| self.source(n).ok_or_else(|| anyhow!("unknown source {n}")))
            .collect::<Result<_>>()?;
        let built: Vec<Result<(SourceProfile, Arc<dyn Retriever>)>> = std::thread::scope(|scope| {
            let handles: Vec<_> = entries
                .iter()
                .map(|entry| scope.spawn(move || self.index_source(entry)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err(anyhow!("indexing thread panicked"))))
                .collect()
        });
        let mut registry = SourceRegistry::new();
        for result in built {
            let (profile, index) = result?;
            registry.register(profile, index)?;
        }
        Ok(registry)
    }

    fn index_source(&self, entry: &SourceEntry) -> Result<(SourceProfile, Arc<dyn Retriever>)> {
        let path = self.resolve(&entry.file);
        let format = entry
            .format
            .or_else(|| CorpusFormat::from_path(&path))
            .ok_or_else(|| anyhow!("cannot infer corpus format of {}", path.display()))?;
        let docs = read_corpus(&path, format, &entry.name)
            .with_context(|| format!("loading source {} from {}", entry.name, path.display()))?;
        let index = Bm25Index::build(docs)?;
        let profile = SourceProfile {
            name: entry.name.clone(),
            description: entry.profile.clone(),
            document_count: index.len(),
        };
        Ok((profile, Arc::new(index)))
    }

    pub fn preset_queries(&self, preset: &Preset) -> Result<Vec<EvalQuery>> {
        let path = preset
            .queries
            .as_ref()
            .ok_or_else(|| anyhow!("preset {} has no query file", preset.name))?;
        load_queries(&self.resolve(path))
    }
}

pub fn parse_queries(text: &str) -> Result<Vec<EvalQuery>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let q: EvalQuery = serde_json::from_str(line).with_context(|| format!("query line {}", i + 1))?;
        if !seen.insert(q.id.clone()) {
            bail!("query line {}: duplicate id {}", i + 1, q.id);
        }
        if q.answers.is_empty() {
            bail!("query line {}: no gold answers", i + 1);
        }
        out.push(q);
    }
    Ok(out)
}

pub fn load_queries(path: &Path) -> Result<Vec<EvalQuery>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_queries(&text).with_context(|| format!("in {}", path.display()))
}
