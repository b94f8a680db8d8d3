//! Layered configuration: command-line flags over `SOURCECAP_*` environment
//! variables over a TOML file over built-in defaults.
//!
//! Every field has the same name in all three layers: `keep_k` in the file,
//! `SOURCECAP_KEEP_K` in the environment, `--keep-k` on the command line.
//! The LLM API key itself is never a setting; only the *name* of the variable
//! holding it is (`api_key_env`).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sourcecap_core::{BudgetConfig, Mode, PipelineConfig, Selector};

use crate::llm::{BackendConfig, BackendKind};

pub const ENV_PREFIX: &str = "SOURCECAP_";
pub const DEFAULT_BIND: &str = "127.0.0.1:8080";
pub const DEFAULT_DATA_DIR: &str = "sourcecap-data";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("reading config file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config file {path}: {message}")]
    File { path: String, message: String },
    #[error("environment variable {var}: {message}")]
    Env { var: String, message: String },
}

/// Parses a boolean setting; accepts true/false, yes/no, on/off, 1/0.
pub fn parse_bool(raw: &str) -> Result<bool, String> {
    match raw.trim().to_ascii_lowercase().as_str() {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        other => Err(format!("expected a boolean, got {other:?}")),
    }
}

/// Values that can be read from an environment variable.
pub trait EnvValue: Sized {
    fn parse_env(raw: &str) -> Result<Self, String>;
}

impl EnvValue for bool {
    fn parse_env(raw: &str) -> Result<Self, String> {
        parse_bool(raw)
    }
}

macro_rules! env_via_from_str {
    ($($ty:ty),*) => {$(
        impl EnvValue for $ty {
            fn parse_env(raw: &str) -> Result<Self, String> {
                raw.trim().parse::<$ty>().map_err(|e| e.to_string())
            }
        }
    )*};
}

env_via_from_str!(usize, u32, f64, String, PathBuf, Mode, Selector, BackendKind);

pub fn env_key(field: &str) -> String {
    format!("{ENV_PREFIX}{}", field.to_ascii_uppercase())
}

macro_rules! config_layer {
    ($( $(#[$meta:meta])* $field:ident : $ty:ty ),* $(,)?) => {
        /// One configuration layer; `None` means "not set here".
        #[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize, clap::Args)]
        #[serde(deny_unknown_fields)]
        pub struct ConfigLayer {
            $(
                $(#[$meta])*
                #[serde(default, skip_serializing_if = "Option::is_none")]
                pub $field: Option<$ty>,
            )*
        }

        impl ConfigLayer {
            pub const FIELDS: &'static [&'static str] = &[$(stringify!($field)),*];

            /// Fields set in `self` win; the rest come from `lower`.
            pub fn over(self, lower: Self) -> Self {
                Self { $($field: self.$field.or(lower.$field)),* }
            }

            /// Reads `SOURCECAP_<FIELD>` variables through `lookup`.
            pub fn from_env(lookup: impl Fn(&str) -> Option<String>) -> Result<Self, ConfigError> {
                let mut layer = Self::default();
                $(
                    let var = env_key(stringify!($field));
                    if let Some(raw) = lookup(&var) {
                        let value = <$ty as EnvValue>::parse_env(&raw)
                            .map_err(|message| ConfigError::Env { var: var.clone(), message })?;
                        layer.$field = Some(value);
                    }
                )*
                Ok(layer)
            }
        }
    };
}

config_layer! {
    /// Pipeline mode: adaptive (caps) or hard (preferred source only).
    #[arg(long)]
    mode: Mode,
    /// Candidates retrieved from each source.
    #[arg(long)]
    top_k_per_source: usize,
    /// Evidence items kept after selection.
    #[arg(long)]
    keep_k: usize,
    /// Evidence selector: score, rrf or judge.
    #[arg(long)]
    selector: Selector,
    /// Cap on candidates from the routed-to source.
    #[arg(long)]
    preferred_cap: usize,
    /// Cap on candidates from each other source.
    #[arg(long)]
    other_cap: usize,
    /// RRF smoothing constant.
    #[arg(long)]
    rrf_constant: f64,
    /// Decompose questions into dependent sub-queries.
    #[arg(long, num_args = 0..=1, default_missing_value = "true", value_parser = parse_bool)]
    decompose: bool,
    /// Retry with a new route when the generator reports insufficient evidence.
    #[arg(long, num_args = 0..=1, default_missing_value = "true", value_parser = parse_bool)]
    use_reflection: bool,
    /// Maximum number of reflection retries per sub-query.
    #[arg(long)]
    max_reflexion_times: u32,
    /// Number of evenly spaced queries to evaluate.
    #[arg(long)]
    sample_size: usize,
    /// Source/preset manifest (TOML).
    #[arg(long)]
    manifest: PathBuf,
    /// Preset from the manifest selecting sources and queries.
    #[arg(long)]
    preset: String,
    /// Query dataset (JSON lines), overriding the preset's.
    #[arg(long)]
    queries: PathBuf,
    /// LLM backend: stub or openai.
    #[arg(long)]
    backend: BackendKind,
    /// Base URL of an OpenAI-compatible API.
    #[arg(long)]
    endpoint: String,
    /// Model name sent to the API.
    #[arg(long)]
    model: String,
    /// Name of the environment variable holding the API key.
    #[arg(long)]
    api_key_env: String,
    /// Scripted replies for the stub backend (JSON).
    #[arg(long)]
    stub_script: PathBuf,
    /// Address the HTTP service listens on.
    #[arg(long)]
    bind: String,
    /// Directory for uploaded sources and run outputs.
    #[arg(long)]
    data_dir: PathBuf,
    /// Comparison runs executed at the same time by the service.
    #[arg(long)]
    run_concurrency: usize,
    /// Queries of one arm evaluated at the same time.
    #[arg(long)]
    query_concurrency: usize,
    /// Directory of static UI assets to serve at `/`.
    #[arg(long)]
    ui_dir: PathBuf,
}

impl ConfigLayer {
    pub fn parse_toml(text: &str, origin: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::File {
            path: origin.into(),
            message: e.to_string(),
        })
    }

    /// Loads a TOML file; relative paths inside it resolve against its directory.
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut layer = Self::parse_toml(&text, &path.display().to_string())?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [
            &mut layer.manifest,
            &mut layer.queries,
            &mut layer.stub_script,
            &mut layer.data_dir,
            &mut layer.ui_dir,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(layer)
    }

    pub fn resolve(self) -> CliConfig {
        let d = BudgetConfig::default();
        let p = PipelineConfig::default();
        let b = BackendConfig::default();
        CliConfig {
            pipeline: PipelineConfig {
                mode: self.mode.unwrap_or(p.mode),
                budget: BudgetConfig {
                    top_k_per_source: self.top_k_per_source.unwrap_or(d.top_k_per_source),
                    keep_k: self.keep_k.unwrap_or(d.keep_k),
                    preferred_cap: self.preferred_cap.unwrap_or(d.preferred_cap),
                    other_cap: self.other_cap.unwrap_or(d.other_cap),
                    selector: self.selector.unwrap_or(d.selector),
                    rrf_constant: self.rrf_constant.unwrap_or(d.rrf_constant),
                },
                decompose: self.decompose.unwrap_or(p.decompose),
                use_reflection: self.use_reflection.unwrap_or(p.use_reflection),
                max_reflexion_times: self.max_reflexion_times.unwrap_or(p.max_reflexion_times),
            },
            sample_size: self.sample_size,
            manifest: self.manifest,
            preset: self.preset,
            queries: self.queries,
            backend: BackendConfig {
                kind: self.backend.unwrap_or(b.kind),
                endpoint: self.endpoint.unwrap_or(b.endpoint),
                model: self.model.unwrap_or(b.model),
                api_key_env: self.api_key_env.unwrap_or(b.api_key_env),
                stub_script: self.stub_script,
            },
            bind: self.bind.unwrap_or_else(|| DEFAULT_BIND.into()),
            data_dir: self.data_dir.unwrap_or_else(|| DEFAULT_DATA_DIR.into()),
            run_concurrency: self.run_concurrency.unwrap_or(1).max(1),
            query_concurrency: self.query_concurrency.unwrap_or(1).max(1),
            ui_dir: self.ui_dir,
        }
    }
}

/// The merged configuration every command works from.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CliConfig {
    pub pipeline: PipelineConfig,
    pub sample_size: Option<usize>,
    pub manifest: Option<PathBuf>,
    pub preset: Option<String>,
    pub queries: Option<PathBuf>,
    pub backend: BackendConfig,
    pub bind: String,
    pub data_dir: PathBuf,
    pub run_concurrency: usize,
    pub query_concurrency: usize,
    pub ui_dir: Option<PathBuf>,
}

/// Merges `flags` > environment (via `lookup`) > the optional file > defaults.
pub fn load(
    flags: ConfigLayer,
    config_file: Option<&Path>,
    lookup: impl Fn(&str) -> Option<String>,
) -> Result<CliConfig, ConfigError> {
    let env = ConfigLayer::from_env(lookup)?;
    let file = match config_file {
        Some(path) => ConfigLayer::from_file(path)?,
        None => ConfigLayer::default(),
    };
    Ok(flags.over(env).over(file).resolve())
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::Parser;
    use proptest::prelude::*;
    use std::collections::HashMap;

    #[derive(Parser)]
    struct Cli {
        #[command(flatten)]
        layer: ConfigLayer,
    }

    /// Three distinct spellings of a valid value for each field, as it would
    /// be written on the command line / in the environment.
    fn samples(field: &str) -> [&'static str; 3] {
        match field {
            "mode" => ["hard", "adaptive", "hard"],
            "selector" => ["score", "rrf", "judge"],
            "decompose" | "use_reflection" => ["true", "false", "true"],
            "backend" => ["stub", "openai", "stub"],
            "rrf_constant" => ["10", "20.5", "30"],
            "preset" | "endpoint" | "model" | "api_key_env" | "bind" => ["first", "second", "third"],
            "manifest" | "queries" | "stub_script" | "data_dir" | "ui_dir" => ["/p/one", "/p/two", "/p/three"],
            _ => ["1", "2", "3"],
        }
    }

    fn toml_value(field: &str, raw: &str) -> String {
        match field {
            "decompose" | "use_reflection" => raw.to_string(),
            "rrf_constant" => format!("{}", raw.parse::<f64>().unwrap()),
            f if samples(f)[0] == "1" => raw.to_string(),
            _ => format!("{raw:?}"),
        }
    }

    fn field_json(layer: &ConfigLayer, field: &str) -> Option<serde_json::Value> {
        serde_json::to_value(layer).unwrap().get(field).cloned()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        /// For every field independently set (or not) in each layer, the
        /// merged value comes from the highest-precedence layer that sets it.
        #[test]
        fn precedence_per_field(presence in proptest::collection::vec((any::<bool>(), any::<bool>(), any::<bool>()), ConfigLayer::FIELDS.len())) {
            let mut args = vec!["prog".to_string()];
            let mut env = HashMap::new();
            let mut file = String::new();
            for (field, &(in_flags, in_env, in_file)) in ConfigLayer::FIELDS.iter().zip(&presence) {
                let [f, e, t] = samples(field);
                if in_flags {
                    args.push(format!("--{}={f}", field.replace('_', "-")));
                }
                if in_env {
                    env.insert(env_key(field), e.to_string());
                }
                if in_file {
                    file.push_str(&format!("{field} = {}\n", toml_value(field, t)));
                }
            }
            let flags = Cli::try_parse_from(&args).unwrap().layer;
            let env_layer = ConfigLayer::from_env(|k| env.get(k).cloned()).unwrap();
            let file_layer = ConfigLayer::parse_toml(&file, "test").unwrap();
            let merged = flags.clone().over(env_layer.clone()).over(file_layer.clone());
            for (field, &(in_flags, in_env, in_file)) in ConfigLayer::FIELDS.iter().zip(&presence) {
                let expected = if in_flags {
                    field_json(&flags, field)
                } else if in_env {
                    field_json(&env_layer, field)
                } else if in_file {
                    field_json(&file_layer, field)
                } else {
                    None
                };
                prop_assert_eq!(field_json(&merged, field), expected, "field {}", field);
            }
        }
    }

    #[test]
    fn every_layer_parses_every_field_to_the_same_value() {
        for field in ConfigLayer::FIELDS {
            for raw in samples(field) {
                let flags = Cli::try_parse_from(["prog".to_string(), format!("--{}={raw}", field.replace('_', "-"))]).unwrap().layer;
                let env = ConfigLayer::from_env(|k| (k == env_key(field)).then(|| raw.to_string())).unwrap();
                let file = ConfigLayer::parse_toml(&format!("{field} = {}\n", toml_value(field, raw)), "t").unwrap();
                assert!(field_json(&flags, field).is_some(), "{field}");
                assert_eq!(field_json(&flags, field), field_json(&env, field), "{field}");
                assert_eq!(field_json(&flags, field), field_json(&file, field), "{field}");
            }
        }
    }

    #[test]
    fn defaults_match_the_demo_configuration() {
        let c = ConfigLayer::default().resolve();
        assert_eq!(c.pipeline.mode, Mode::Adaptive);
        assert_eq!(c.pipeline.budget.selector, Selector::Score);
        assert!(c.pipeline.decompose);
        assert!(c.pipeline.use_reflection);
        assert_eq!(c.backend.kind, BackendKind::Stub);
        assert_eq!(c.run_concurrency, 1);
    }

    #[test]
    fn bare_boolean_flag_means_true() {
        let l = Cli::try_parse_from(["prog", "--decompose", "--use-reflection", "off"]).unwrap().layer;
        assert_eq!(l.decompose, Some(true));
        assert_eq!(l.use_reflection, Some(false));
    }

    #[test]
    fn bad_values_are_reported_with_their_source() {
        let err = ConfigLayer::from_env(|k| (k == "SOURCECAP_KEEP_K").then(|| "many".into())).unwrap_err();
        assert!(err.to_string().contains("SOURCECAP_KEEP_K"));
        let err = ConfigLayer::parse_toml("no_such_field = 1", "c.toml").unwrap_err();
        assert!(err.to_string().contains("no_such_field"));
    }

    #[test]
    fn file_paths_resolve_against_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "manifest = \"m.toml\"\nkeep_k = 2\n").unwrap();
        let c = load(ConfigLayer::default(), Some(&path), |_| None).unwrap();
        assert_eq!(c.manifest, Some(dir.path().join("m.toml")));
        assert_eq!(c.pipeline.budget.keep_k, 2);
    }
}
