use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};
use sourcecap::compare::{render_table, run_comparison, write_run, ResolvedEval, RunOptions, Silent};
use sourcecap::config::{self, CliConfig, ConfigLayer};
use sourcecap::fanout::Threaded;
use sourcecap::ingest::{ingest_corpus, CorpusFormat};
use sourcecap::llm::build_backend;
use sourcecap::manifest::{load_queries, Manifest, SourceEntry};
use sourcecap::service::{serve, AppState, ServiceConfig};
use sourcecap_core::eval::{Arm, EvalQuery};
use sourcecap_core::pipeline::summarize;
use sourcecap_core::{Mode, Pipeline, SourceRegistry};

/// Multi-source retrieve-then-select question answering.
#[derive(Parser)]
#[command(name = "sourcecap", version)]
struct Cli {
    /// TOML configuration file (flags and SOURCECAP_* variables override it).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse and index a corpus file, optionally recording it in a manifest.
    Ingest {
        #[arg(long)]
        file: PathBuf,
        #[arg(long)]
        name: String,
        /// One-line description the router sees.
        #[arg(long)]
        profile: String,
        /// json or csv; inferred from the extension when omitted.
        #[arg(long)]
        format: Option<CorpusFormat>,
        /// Manifest to add the source to (created if missing).
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Answer one question.
    Ask {
        question: String,
        /// Print the per-sub-query routing, evidence and attempt trace.
        #[arg(long)]
        trace: bool,
        /// Comma-separated sources (default: the preset's, else all in the manifest).
        #[arg(long, value_delimiter = ',')]
        sources: Vec<String>,
        #[command(flatten)]
        settings: ConfigLayer,
    },
    /// Compare pipeline configurations on the same sampled queries.
    Compare {
        /// JSON array of arms; replaces the configured arm and the baseline.
        #[arg(long)]
        arms_file: Option<PathBuf>,
        /// Skip the hard-routing baseline arm.
        #[arg(long)]
        no_baseline: bool,
        /// Comma-separated sources (default: the preset's, else all in the manifest).
        #[arg(long, value_delimiter = ',')]
        sources: Vec<String>,
        /// Directory for report.json, records.jsonl, timings.json and table.txt.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        settings: ConfigLayer,
    },
    /// Run the HTTP service.
    Serve {
        #[command(flatten)]
        settings: ConfigLayer,
    },
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn settings(layer: ConfigLayer, file: Option<&Path>) -> Result<CliConfig> {
    Ok(config::load(layer, file, |k| std::env::var(k).ok())?)
}

fn run(cli: Cli) -> Result<ExitCode> {
    let file = cli.config.as_deref();
    match cli.command {
        Command::Ingest { file: path, name, profile, format, manifest } => {
            cmd_ingest(&path, &name, &profile, format, manifest.as_deref())
        }
        Command::Ask { question, trace, sources, settings: layer } => cmd_ask(&settings(layer, file)?, &question, trace, &sources),
        Command::Compare { arms_file, no_baseline, sources, out, settings: layer } => {
            cmd_compare(&settings(layer, file)?, arms_file.as_deref(), no_baseline, &sources, out)
        }
        Command::Serve { settings: layer } => cmd_serve(settings(layer, file)?),
    }
}

fn cmd_ingest(path: &Path, name: &str, profile: &str, format: Option<CorpusFormat>, manifest: Option<&Path>) -> Result<ExitCode> {
    let format = format
        .or_else(|| CorpusFormat::from_path(path))
        .ok_or_else(|| anyhow!("cannot infer the format of {}; pass --format json|csv", path.display()))?;
    let mut existing = match manifest {
        Some(m) if m.exists() => Some(Manifest::load(m)?),
        Some(_) => Some(Manifest::default()),
        None => None,
    };
    if existing.as_ref().is_some_and(|m| m.source(name).is_some()) {
        bail!("duplicate source {name}");
    }
    let mut registry = SourceRegistry::new();
    let source = ingest_corpus(&mut registry, path, format, name, profile)?;
    println!("{}: {} documents", source.name, source.document_count);
    if let (Some(m), Some(manifest_path)) = (existing.as_mut(), manifest) {
        let file = std::path::absolute(path).with_context(|| format!("resolving {}", path.display()))?;
        m.sources.push(SourceEntry { name: name.into(), file, format: Some(format), profile: profile.into() });
        m.save(manifest_path)?;
        println!("recorded in {}", manifest_path.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn load_manifest(cfg: &CliConfig) -> Result<Manifest> {
    match &cfg.manifest {
        Some(path) => Manifest::load(path),
        None => bail!("no manifest configured (--manifest, SOURCECAP_MANIFEST or the config file)"),
    }
}

fn source_names(cfg: &CliConfig, manifest: &Manifest, explicit: &[String]) -> Result<Vec<String>> {
    if !explicit.is_empty() {
        return Ok(explicit.to_vec());
    }
    if let Some(name) = &cfg.preset {
        let preset = manifest.preset(name).ok_or_else(|| anyhow!("unknown preset {name}"))?;
        return Ok(preset.sources.clone());
    }
    Ok(manifest.sources.iter().map(|s| s.name.clone()).collect())
}

fn cmd_ask(cfg: &CliConfig, question: &str, show_trace: bool, sources: &[String]) -> Result<ExitCode> {
    cfg.pipeline
        .validate()
        .map_err(|errs| anyhow!(errs.iter().map(|e| e.message.clone()).collect::<Vec<_>>().join("; ")))?;
    let manifest = load_manifest(cfg)?;
    let registry = manifest.build_registry(&source_names(cfg, &manifest, sources)?)?;
    let llm = build_backend(&cfg.backend)?;
    let pipeline = Pipeline::new(&registry, &Threaded, cfg.pipeline);
    match pipeline.answer(question, llm.as_ref()) {
        Ok(trace) => {
            println!("{}", trace.final_answer);
            if show_trace {
                for line in summarize(&trace) {
                    println!("{line}");
                }
                println!(
                    "tokens prompt={} completion={}",
                    trace.usage.prompt_tokens, trace.usage.completion_tokens
                );
            }
            Ok(ExitCode::SUCCESS)
        }
        Err(fault) => {
            eprintln!("error: pipeline fault: {fault}");
            eprintln!("trace: question={question:?} sources={:?} config={}", registry.names(), serde_json::to_string(&cfg.pipeline)?);
            Ok(ExitCode::FAILURE)
        }
    }
}

fn arms(cfg: &CliConfig, arms_file: Option<&Path>, no_baseline: bool) -> Result<Vec<Arm>> {
    if let Some(path) = arms_file {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        return serde_json::from_str(&text).with_context(|| format!("parsing arms in {}", path.display()));
    }
    let configured = Arm { name: cfg.pipeline.mode.to_string(), config: cfg.pipeline };
    let mut out = Vec::new();
    if !no_baseline && cfg.pipeline.mode != Mode::Hard {
        out.push(Arm { name: Mode::Hard.to_string(), config: sourcecap_core::PipelineConfig { mode: Mode::Hard, ..cfg.pipeline } });
    }
    out.push(configured);
    Ok(out)
}

fn queries(cfg: &CliConfig, manifest: &Manifest) -> Result<Vec<EvalQuery>> {
    if let Some(path) = &cfg.queries {
        return load_queries(path);
    }
    let Some(name) = &cfg.preset else {
        bail!("no queries configured (--queries or a --preset with a query file)");
    };
    let preset = manifest.preset(name).ok_or_else(|| anyhow!("unknown preset {name}"))?;
    manifest.preset_queries(preset)
}

fn cmd_compare(cfg: &CliConfig, arms_file: Option<&Path>, no_baseline: bool, sources: &[String], out: Option<PathBuf>) -> Result<ExitCode> {
    let arms = arms(cfg, arms_file, no_baseline)?;
    for arm in &arms {
        arm.config.validate().map_err(|errs| {
            anyhow!("arm {}: {}", arm.name, errs.iter().map(|e| e.message.clone()).collect::<Vec<_>>().join("; "))
        })?;
    }
    let manifest = load_manifest(cfg)?;
    let names = source_names(cfg, &manifest, sources)?;
    let registry = manifest.build_registry(&names)?;
    let eval = ResolvedEval::new(names, queries(cfg, &manifest)?, cfg.sample_size, arms)
        .map_err(|e| anyhow!("{}: {}", e.field, e.message))?;
    let llm = build_backend(&cfg.backend)?;
    let run = run_comparison(
        &eval,
        &registry,
        llm.as_ref(),
        &RunOptions { fanout: &Threaded, jobs: cfg.query_concurrency },
        &Silent,
    );
    let out = out.unwrap_or_else(|| cfg.data_dir.join("compare"));
    write_run(&out, &run)?;
    print!("{}", render_table(&run.report));
    println!("queries: {}", run.report.query_ids.join(", "));
    println!("report: {}", out.join("report.json").display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_serve(cfg: CliConfig) -> Result<ExitCode> {
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&cfg.bind)
            .await
            .with_context(|| format!("cannot bind {}", cfg.bind))?;
        let llm: Arc<dyn sourcecap_core::Llm> = build_backend(&cfg.backend)?;
        let service = ServiceConfig {
            data_dir: cfg.data_dir.clone(),
            manifest: cfg.manifest.clone(),
            run_concurrency: cfg.run_concurrency,
            query_concurrency: cfg.query_concurrency,
            ui_dir: cfg.ui_dir.clone(),
        };
        let state = Arc::new(tokio::task::spawn_blocking(move || AppState::open(&service, llm)).await??);
        let addr = listener.local_addr()?;
        println!("listening on http://{addr}");
        serve(listener, state, async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
        println!("shut down");
        Ok(ExitCode::SUCCESS)
    })
}
