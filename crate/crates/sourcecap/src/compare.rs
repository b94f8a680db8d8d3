//! Runs several pipeline arms over the same sampled queries and reports
//! EM / F1 / prompt tokens per arm.
//!
//! `report.json` is a pure function of the inputs and the backend replies, so
//! two runs against the scripted backend produce identical bytes. Wall-clock
//! latency lives in the separate `timings.json`.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sourcecap_core::eval::{sample_indices, Arm, ArmSummary, EvalQuery, RunRecord};
use sourcecap_core::selection::FieldError;
use sourcecap_core::{FanOut, Llm, Pipeline, PipelineConfig, SourceRegistry};

/// What to evaluate. Sources and queries come from `preset` unless given
/// explicitly; `extra_sources` are appended (e.g. an uploaded corpus).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sources: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub extra_sources: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub queries: Option<Vec<EvalQuery>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample_size: Option<usize>,
    pub arms: Vec<Arm>,
}

impl EvalConfig {
    /// Checks everything that does not need the registry or the dataset.
    pub fn validate(&self) -> Result<(), Vec<FieldError>> {
        let mut errors = Vec::new();
        if self.arms.is_empty() {
            errors.push(FieldError {
                field: "arms".into(),
                message: "at least one arm is required".into(),
            });
        }
        let mut names = HashSet::new();
        for (i, arm) in self.arms.iter().enumerate() {
            if arm.name.trim().is_empty() {
                errors.push(FieldError {
                    field: format!("arms[{i}].name"),
                    message: "arm name must be non-empty".into(),
                });
            } else if !names.insert(arm.name.as_str()) {
                errors.push(FieldError {
                    field: format!("arms[{i}].name"),
                    message: format!("duplicate arm name {}", arm.name),
                });
            }
            if let Err(errs) = arm.config.validate() {
                errors.extend(errs.into_iter().map(|e| FieldError {
                    field: format!("arms[{i}].budget.{}", e.field),
                    message: e.message,
                }));
            }
        }
        if self.sample_size == Some(0) {
            errors.push(FieldError {
                field: "sample_size".into(),
                message: "sample_size must be ≥ 1".into(),
            });
        }
        if self.preset.is_none() && self.queries.is_none() {
            errors.push(FieldError {
                field: "queries".into(),
                message: "either preset or queries is required".into(),
            });
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(errors)
        }
    }
}

/// A fully resolved evaluation: concrete sources and the sampled queries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedEval {
    pub sources: Vec<String>,
    pub dataset_size: usize,
    pub sample_indices: Vec<usize>,
    pub queries: Vec<EvalQuery>,
    pub arms: Vec<Arm>,
}

impl ResolvedEval {
    /// Samples `sample_size` evenly spaced queries (all when `None`).
    pub fn new(sources: Vec<String>, dataset: Vec<EvalQuery>, sample_size: Option<usize>, arms: Vec<Arm>) -> Result<Self, FieldError> {
        let n = sample_size.unwrap_or(dataset.len());
        if dataset.is_empty() {
            return Err(FieldError {
                field: "queries".into(),
                message: "dataset has no queries".into(),
            });
        }
        if n > dataset.len() {
            return Err(FieldError {
                field: "sample_size".into(),
                message: format!("sample_size {n} exceeds dataset size {}", dataset.len()),
            });
        }
        let idx = sample_indices(dataset.len(), n);
        let queries = idx.iter().map(|&i| dataset[i].clone()).collect();
        Ok(Self {
            sources,
            dataset_size: dataset.len(),
            sample_indices: idx,
            queries,
            arms,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmReport {
    pub name: String,
    pub config: PipelineConfig,
    pub summary: ArmSummary,
    pub records: Vec<RunRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub sources: Vec<String>,
    pub dataset_size: usize,
    pub sample_indices: Vec<usize>,
    pub query_ids: Vec<String>,
    pub arms: Vec<ArmReport>,
}

impl ComparisonReport {
    pub fn arm(&self, name: &str) -> Option<&ArmReport> {
        self.arms.iter().find(|a| a.name == name)
    }

    pub fn record(&self, arm: Option<&str>, query_id: &str) -> Option<&RunRecord> {
        let arm = match arm {
            Some(name) => self.arm(name)?,
            None => self.arms.first()?,
        };
        arm.records.iter().find(|r| r.query_id == query_id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryTiming {
    pub query_id: String,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmTiming {
    pub arm: String,
    pub mean_latency_ms: f64,
    pub queries: Vec<QueryTiming>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub arms: Vec<ArmTiming>,
}

impl Timings {
    pub fn wall_ms(&self, arm: &str, query_id: &str) -> Option<f64> {
        self.arms
            .iter()
            .find(|a| a.arm == arm)?
            .queries
            .iter()
            .find(|q| q.query_id == query_id)
            .map(|q| q.wall_ms)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRun {
    pub report: ComparisonReport,
    pub timings: Timings,
}

/// Progress hook; `completed` counts finished (arm, query) pairs.
pub trait Observer: Sync {
    fn record_done(&self, _record: &RunRecord, _wall_ms: f64, _completed: usize, _total: usize) {}
}

pub struct Silent;

impl Observer for Silent {}

pub struct RunOptions<'a> {
    pub fanout: &'a dyn FanOut,
    /// Queries of one arm evaluated concurrently.
    pub jobs: usize,
}

fn run_one(arm: &Arm, query: &EvalQuery, registry: &SourceRegistry, llm: &dyn Llm, fanout: &dyn FanOut) -> (RunRecord, f64) {
    let started = Instant::now();
    let pipeline = Pipeline::new(registry, fanout, arm.config);
    let outcome = catch_unwind(AssertUnwindSafe(|| pipeline.answer(&query.question, llm)));
    let record = match outcome {
        Ok(Ok(trace)) => RunRecord::scored(&arm.name, query, trace),
        Ok(Err(fault)) => RunRecord::faulted(&arm.name, query, fault.to_string()),
        Err(panic) => {
            let msg = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "pipeline panicked".into());
            RunRecord::faulted(&arm.name, query, format!("panic: {msg}"))
        }
    };
    (record, started.elapsed().as_secs_f64() * 1000.0)
}

/// Evaluates every arm on the same sampled queries. Per-query faults are
/// recorded as zero-scored records; the sweep never aborts.
pub fn run_comparison(
    eval: &ResolvedEval,
    registry: &SourceRegistry,
    llm: &dyn Llm,
    options: &RunOptions<'_>,
    observer: &dyn Observer,
) -> ComparisonRun {
    let total = eval.arms.len() * eval.queries.len();
    let completed = AtomicUsize::new(0);
    let mut arms = Vec::with_capacity(eval.arms.len());
    let mut timings = Vec::with_capacity(eval.arms.len());
    for arm in &eval.arms {
        let slots: Mutex<Vec<Option<(RunRecord, f64)>>> = Mutex::new(vec![None; eval.queries.len()]);
        let next = AtomicUsize::new(0);
        let worker = || loop {
            let i = next.fetch_add(1, Ordering::SeqCst);
            let Some(query) = eval.queries.get(i) else { break };
            let (record, ms) = run_one(arm, query, registry, llm, options.fanout);
            let done = completed.fetch_add(1, Ordering::SeqCst) + 1;
            observer.record_done(&record, ms, done, total);
            slots.lock().unwrap()[i] = Some((record, ms));
        };
        let jobs = options.jobs.clamp(1, eval.queries.len().max(1));
        if jobs == 1 {
            worker();
        } else {
            std::thread::scope(|s| {
                for _ in 0..jobs {
                    s.spawn(worker);
                }
            });
        }
        let (records, ms): (Vec<RunRecord>, Vec<f64>) =
            slots.into_inner().unwrap().into_iter().map(|s| s.expect("every query evaluated")).unzip();
        let mean_latency_ms = if ms.is_empty() { 0.0 } else { ms.iter().sum::<f64>() / ms.len() as f64 };
        timings.push(ArmTiming {
            arm: arm.name.clone(),
            mean_latency_ms,
            queries: records
                .iter()
                .zip(&ms)
                .map(|(r, &wall_ms)| QueryTiming {
                    query_id: r.query_id.clone(),
                    wall_ms,
                })
                .collect(),
        });
        arms.push(ArmReport {
            name: arm.name.clone(),
            config: arm.config,
            summary: ArmSummary::from_records(&arm.name, &records),
            records,
        });
    }
    ComparisonRun {
        report: ComparisonReport {
            sources: eval.sources.clone(),
            dataset_size: eval.dataset_size,
            sample_indices: eval.sample_indices.clone(),
            query_ids: eval.queries.iter().map(|q| q.id.clone()).collect(),
            arms,
        },
        timings: Timings { arms: timings },
    }
}

/// Plain-text table with the columns Method, EM, F1, Avg Tokens (EM and F1 in percent).
pub fn render_table(report: &ComparisonReport) -> String {
    let width = report
        .arms
        .iter()
        .map(|a| a.name.len())
        .chain(std::iter::once("Method".len()))
        .max()
        .unwrap_or(6);
    let mut out = String::new();
    let _ = writeln!(out, "{:<width$}  {:>6}  {:>6}  {:>10}", "Method", "EM", "F1", "Avg Tokens");
    for arm in &report.arms {
        let s = &arm.summary;
        let _ = writeln!(
            out,
            "{:<width$}  {:>6.2}  {:>6.2}  {:>10.1}",
            arm.name,
            s.mean_em * 100.0,
            s.mean_f1 * 100.0,
            s.mean_prompt_tokens
        );
    }
    out
}

pub fn report_json(report: &ComparisonReport) -> Result<String> {
    Ok(serde_json::to_string_pretty(report)? + "\n")
}

/// Writes `report.json`, `records.jsonl`, `timings.json` and `table.txt` into `dir`.
pub fn write_run(dir: &Path, run: &ComparisonRun) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    std::fs::write(dir.join("report.json"), report_json(&run.report)?)?;
    let mut lines = String::new();
    for arm in &run.report.arms {
        for r in &arm.records {
            lines.push_str(&serde_json::to_string(r)?);
            lines.push('\n');
        }
    }
    std::fs::write(dir.join("records.jsonl"), lines)?;
    std::fs::write(dir.join("timings.json"), serde_json::to_string_pretty(&run.timings)? + "\n")?;
    std::fs::write(dir.join("table.txt"), render_table(&run.report))?;
    Ok(())
}

pub fn read_report(path: &Path) -> Result<ComparisonReport> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::ScriptedLlm;
    use sourcecap_core::{CallKind, Document, Mode, Sequential};

    fn registry() -> SourceRegistry {
        let mut reg = SourceRegistry::new();
        let d = |id: &str, s: &str, t: &str| Document::new(id, s, None, t).unwrap();
        reg.add_corpus("a", "alpha", vec![d("a1", "a", "paris is in france"), d("a2", "a", "rome is in italy")]).unwrap();
        reg.add_corpus("b", "beta", vec![d("b1", "b", "madrid is in spain"), d("b2", "b", "lisbon is in portugal")]).unwrap();
        reg
    }

    fn queries(n: usize) -> Vec<EvalQuery> {
        (0..n)
            .map(|i| EvalQuery { id: format!("q{i}"), question: format!("question {i}?"), answers: vec!["Paris".into()], gold_source: None })
            .collect()
    }

    fn arm(name: &str, mode: Mode) -> Arm {
        Arm { name: name.into(), config: PipelineConfig { mode, decompose: false, ..Default::default() } }
    }

    #[test]
    fn two_arms_share_queries_and_ceiling_metrics() {
        let reg = registry();
        let llm = ScriptedLlm::new().on(CallKind::Route, "", "a").on(CallKind::Generate, "", "ANSWER: Paris\nSUFFICIENT: yes");
        let eval = ResolvedEval::new(vec!["a".into(), "b".into()], queries(4), None, vec![arm("hard", Mode::Hard), arm("adaptive", Mode::Adaptive)]).unwrap();
        let run = run_comparison(&eval, &reg, &llm, &RunOptions { fanout: &Sequential, jobs: 2 }, &Silent);
        assert_eq!(run.report.arms.len(), 2);
        for a in &run.report.arms {
            let ids: Vec<_> = a.records.iter().map(|r| r.query_id.clone()).collect();
            assert_eq!(ids, run.report.query_ids);
            assert_eq!(a.summary.mean_em, 1.0);
            assert_eq!(a.summary.mean_f1, 1.0);
        }
        let table = render_table(&run.report);
        assert_eq!(table.lines().count(), 3);
        assert!(table.starts_with("Method"));
        assert!(table.contains("100.00"));
    }

    #[test]
    fn faults_score_zero_without_aborting() {
        let reg = SourceRegistry::new();
        let llm = ScriptedLlm::new();
        let eval = ResolvedEval::new(vec![], queries(2), None, vec![arm("x", Mode::Adaptive)]).unwrap();
        let run = run_comparison(&eval, &reg, &llm, &RunOptions { fanout: &Sequential, jobs: 1 }, &Silent);
        let recs = &run.report.arms[0].records;
        assert_eq!(recs.len(), 2);
        assert!(recs.iter().all(|r| r.em == 0 && r.f1 == 0.0 && r.fault.as_deref() == Some("no sources registered")));
        assert_eq!(run.report.arms[0].summary.faults, 2);
    }

    #[test]
    fn sampling_and_validation() {
        let eval = ResolvedEval::new(vec![], queries(10), Some(3), vec![]).unwrap();
        assert_eq!(eval.sample_indices, [0, 3, 6]);
        assert_eq!(eval.queries.iter().map(|q| q.id.as_str()).collect::<Vec<_>>(), ["q0", "q3", "q6"]);
        assert_eq!(ResolvedEval::new(vec![], queries(2), Some(3), vec![]).unwrap_err().field, "sample_size");

        let mut cfg = EvalConfig { queries: Some(queries(1)), arms: vec![arm("x", Mode::Hard)], ..Default::default() };
        cfg.arms[0].config.budget.keep_k = 0;
        let errs = cfg.validate().unwrap_err();
        assert_eq!(errs[0].field, "arms[0].budget.keep_k");
        assert_eq!(errs[0].message, "keep_k must be ≥ 1");
    }
}
