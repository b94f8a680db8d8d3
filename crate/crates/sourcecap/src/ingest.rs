//! Corpus files: a JSON array of `{id?, title?, text}` objects, or CSV with a
//! header containing `text` and optionally `id` and `title`. Records without an
//! id get `<source>-<record index>`.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sourcecap_core::corpus::CorpusError;
use sourcecap_core::{Document, SourceProfile, SourceRegistry};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusFormat {
    Json,
    Csv,
}

impl CorpusFormat {
    pub fn from_path(path: &Path) -> Option<Self> {
        path.extension()
            .and_then(|e| e.to_str())
            .and_then(|e| e.parse().ok())
    }
}

impl FromStr for CorpusFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "json" => Ok(Self::Json),
            "csv" => Ok(Self::Csv),
            other => Err(format!("unknown corpus format {other:?} (expected json or csv)")),
        }
    }
}

impl fmt::Display for CorpusFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Json => "json",
            Self::Csv => "csv",
        })
    }
}

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed {format} input: {message}")]
    Malformed { format: CorpusFormat, message: String },
    /// `record` is the 0-based record index; `line` is set for CSV.
    #[error("record {record}{}: {message}", line.map(|l| format!(" (line {l})")).unwrap_or_default())]
    Record {
        record: usize,
        line: Option<u64>,
        message: String,
    },
    #[error("missing required column `{0}`")]
    MissingColumn(String),
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("duplicate source {0}")]
    DuplicateSource(String),
    #[error("invalid source name {0:?}")]
    InvalidName(String),
}

impl IngestError {
    pub fn record(&self) -> Option<usize> {
        match self {
            Self::Record { record, .. } => Some(*record),
            _ => None,
        }
    }
}

fn field_string(value: &Value) -> Option<String> {
    match value {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

fn make_document(
    source: &str,
    record: usize,
    line: Option<u64>,
    id: Option<String>,
    title: Option<String>,
    text: Option<String>,
    seen: &mut HashSet<String>,
) -> Result<Document, IngestError> {
    let err = |message: String| IngestError::Record { record, line, message };
    let text = text.ok_or_else(|| err("missing field `text`".into()))?;
    let id = match id {
        Some(id) if !id.trim().is_empty() => id.trim().to_string(),
        _ => format!("{source}-{record}"),
    };
    let title = title.filter(|t| !t.trim().is_empty());
    let doc = Document::new(id, source, title, text).map_err(|e| match e {
        CorpusError::EmptyText(_) => err("field `text` is empty".into()),
        other => err(other.to_string()),
    })?;
    if !seen.insert(doc.id.clone()) {
        return Err(err(format!("duplicate id {:?}", doc.id)));
    }
    Ok(doc)
}

fn parse_json(bytes: &[u8], source: &str) -> Result<Vec<Document>, IngestError> {
    let value: Value = serde_json::from_slice(bytes).map_err(|e| IngestError::Malformed {
        format: CorpusFormat::Json,
        message: e.to_string(),
    })?;
    let Value::Array(records) = value else {
        return Err(IngestError::Malformed {
            format: CorpusFormat::Json,
            message: "expected a top-level array of records".into(),
        });
    };
    let mut seen = HashSet::new();
    records
        .iter()
        .enumerate()
        .map(|(i, rec)| {
            let Value::Object(obj) = rec else {
                return Err(IngestError::Record {
                    record: i,
                    line: None,
                    message: "expected an object".into(),
                });
            };
            let get = |k: &str| obj.get(k).filter(|v| !v.is_null());
            if let Some(v) = get("text").filter(|v| !v.is_string()) {
                return Err(IngestError::Record {
                    record: i,
                    line: None,
                    message: format!("field `text` must be a string, found {v}"),
                });
            }
            make_document(
                source,
                i,
                None,
                get("id").and_then(field_string),
                get("title").and_then(field_string),
                get("text").and_then(field_string),
                &mut seen,
            )
        })
        .collect()
}

fn parse_csv(bytes: &[u8], source: &str) -> Result<Vec<Document>, IngestError> {
    let mut reader = csv::ReaderBuilder::new().flexible(false).from_reader(bytes);
    let malformed = |e: csv::Error| IngestError::Malformed {
        format: CorpusFormat::Csv,
        message: e.to_string(),
    };
    let headers = reader.headers().map_err(malformed)?.clone();
    let col = |name: &str| headers.iter().position(|h| h.trim().eq_ignore_ascii_case(name));
    let text_col = col("text").ok_or_else(|| IngestError::MissingColumn("text".into()))?;
    let (id_col, title_col) = (col("id"), col("title"));
    let mut seen = HashSet::new();
    let mut docs = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row = row.map_err(|e| IngestError::Record {
            record: i,
            line: e.position().map(|p| p.line()),
            message: e.to_string(),
        })?;
        let line = row.position().map(|p| p.line());
        let cell = |c: Option<usize>| c.and_then(|c| row.get(c)).map(String::from);
        docs.push(make_document(
            source,
            i,
            line,
            cell(id_col),
            cell(title_col),
            cell(Some(text_col)),
            &mut seen,
        )?);
    }
    Ok(docs)
}

/// Parses a corpus held in memory.
pub fn parse_corpus(bytes: &[u8], format: CorpusFormat, source: &str) -> Result<Vec<Document>, IngestError> {
    let docs = match format {
        CorpusFormat::Json => parse_json(bytes, source)?,
        CorpusFormat::Csv => parse_csv(bytes, source)?,
    };
    if docs.is_empty() {
        return Err(IngestError::EmptyCorpus);
    }
    Ok(docs)
}

pub fn read_corpus(path: &Path, format: CorpusFormat, source: &str) -> Result<Vec<Document>, IngestError> {
    let bytes = std::fs::read(path).map_err(|e| IngestError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    parse_corpus(&bytes, format, source)
}

pub fn check_source_name(name: &str) -> Result<(), IngestError> {
    let ok = !name.is_empty()
        && name.len() <= 64
        && name.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'));
    if ok {
        Ok(())
    } else {
        Err(IngestError::InvalidName(name.into()))
    }
}

/// Parses, indexes and registers a corpus held in memory.
pub fn ingest_bytes(
    registry: &mut SourceRegistry,
    bytes: &[u8],
    format: CorpusFormat,
    source_name: &str,
    profile_text: &str,
) -> Result<SourceProfile, IngestError> {
    check_source_name(source_name)?;
    if registry.get(source_name).is_some() {
        return Err(IngestError::DuplicateSource(source_name.into()));
    }
    let docs = parse_corpus(bytes, format, source_name)?;
    registry
        .add_corpus(source_name, profile_text, docs)
        .map_err(|e| match e {
            CorpusError::DuplicateSource(n) => IngestError::DuplicateSource(n),
            CorpusError::EmptyCorpus => IngestError::EmptyCorpus,
            other => IngestError::Malformed {
                format,
                message: other.to_string(),
            },
        })
}

/// Reads, indexes and registers a corpus file.
pub fn ingest_corpus(
    registry: &mut SourceRegistry,
    path: &Path,
    format: CorpusFormat,
    source_name: &str,
    profile_text: &str,
) -> Result<SourceProfile, IngestError> {
    let bytes = std::fs::read(path).map_err(|e| IngestError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    ingest_bytes(registry, &bytes, format, source_name, profile_text)
}
