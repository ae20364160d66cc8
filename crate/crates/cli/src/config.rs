//! The run configuration file and the clients it selects.

use std::path::{Path, PathBuf};

use aspectfuse_core::llm::AuditLog;
use aspectfuse_core::rerank::CrossEncoderConfig;
use aspectfuse_core::{
    CrossEncoder, ExperimentConfig, GeometricBenchConfig, HttpCrossEncoder, HttpLlm,
    LengthCrossEncoder, LlmClient, LlmEndpointConfig, MockLlm,
};
use serde::Deserialize;

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(tag = "provider", rename_all = "lowercase", deny_unknown_fields)]
pub enum LlmProvider {
    Mock {},
    Http {
        #[serde(default)]
        endpoint: LlmEndpointConfig,
    },
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(tag = "provider", rename_all = "lowercase", deny_unknown_fields)]
pub enum CrossEncoderProvider {
    /// Scores passages by length; offline stand-in.
    Length {},
    Http {
        #[serde(default)]
        endpoint: CrossEncoderConfig,
    },
}

impl Default for LlmProvider {
    fn default() -> Self {
        LlmProvider::Mock {}
    }
}

impl Default for CrossEncoderProvider {
    fn default() -> Self {
        CrossEncoderProvider::Length {}
    }
}

/// Everything an `experiment` run needs, in one JSON document.
///
/// Relative paths are resolved against the directory of the config file.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub experiment: ExperimentConfig,
    /// Directory with `items.jsonl`, `reviews.jsonl` and `queries.jsonl`.
    pub corpus_dir: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    /// Generate a geometric bench in memory instead of loading files.
    pub bench: Option<GeometricBenchConfig>,
    #[serde(default)]
    pub llm: LlmProvider,
    #[serde(default)]
    pub cross_encoder: CrossEncoderProvider,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    /// Worker threads; all available cores when absent.
    pub threads: Option<usize>,
    /// JSON-Lines audit log of every model request.
    pub llm_log: Option<PathBuf>,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            CliError::Invalid(format!("cannot read config {}: {e}", path.display()))
        })?;
        let mut config: RunConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::Invalid(format!("invalid config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.resolve_paths(base);
        Ok(config)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for p in [
            &mut self.corpus_dir,
            &mut self.embeddings,
            &mut self.llm_log,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
        fix(&mut self.out_dir);
        if let LlmProvider::Http { endpoint } = &mut self.llm {
            if let Some(p) = &mut endpoint.prompt_dir {
                fix(p);
            }
        }
    }

    /// Checks the whole document before any work starts.
    pub fn validate(&self) -> Result<(), CliError> {
        let invalid = |m: String| Err(CliError::Invalid(m));
        self.experiment
            .validate()
            .map_err(|e| CliError::Invalid(e.to_string()))?;
        match (&self.bench, &self.corpus_dir, &self.embeddings) {
            (Some(bench), None, None) => bench
                .validate()
                .map_err(|e| CliError::Invalid(format!("bench: {e}")))?,
            (None, Some(dir), Some(emb)) => {
                if !dir.is_dir() {
                    return invalid(format!("corpus_dir {} is not a directory", dir.display()));
                }
                if !emb.is_file() {
                    return invalid(format!("embeddings {} does not exist", emb.display()));
                }
            }
            _ => {
                return invalid(
                    "give either `bench` or both `corpus_dir` and `embeddings`".to_string(),
                )
            }
        }
        if let LlmProvider::Http { endpoint } = &self.llm {
            endpoint
                .validate()
                .map_err(|e| CliError::Invalid(format!("llm: {e}")))?;
        }
        if let CrossEncoderProvider::Http { endpoint } = &self.cross_encoder {
            if endpoint.base_url.is_empty() || !(endpoint.timeout_secs > 0.0) {
                return invalid("cross_encoder needs a base_url and a positive timeout".into());
            }
        }
        if self.threads == Some(0) {
            return invalid("threads must be at least 1".into());
        }
        Ok(())
    }
}

/// Builds the language-model client, attaching an audit log when asked.
pub fn build_llm(
    provider: &LlmProvider,
    log_path: Option<&Path>,
) -> Result<Box<dyn LlmClient>, CliError> {
    match provider {
        LlmProvider::Mock {} => {
            if let Some(p) = log_path {
                log::warn!(
                    "--llm-log {} ignored: the mock client sends no requests",
                    p.display()
                );
            }
            Ok(Box::new(MockLlm))
        }
        LlmProvider::Http { endpoint } => {
            let mut llm =
                HttpLlm::new(endpoint.clone()).map_err(|e| CliError::Invalid(e.to_string()))?;
            if let Some(p) = log_path {
                let log = AuditLog::create(p).map_err(|e| {
                    CliError::Runtime(format!("cannot open llm log {}: {e}", p.display()))
                })?;
                llm = llm.with_audit_log(log);
            }
            Ok(Box::new(llm))
        }
    }
}

pub fn build_cross_encoder(provider: &CrossEncoderProvider) -> Box<dyn CrossEncoder> {
    match provider {
        CrossEncoderProvider::Length {} => Box::new(LengthCrossEncoder),
        CrossEncoderProvider::Http { endpoint } => {
            Box::new(HttpCrossEncoder::new(endpoint.clone()))
        }
    }
}

/// Reads an endpoint file given on the command line: `http` when present,
/// mock otherwise.
pub fn llm_from_file(path: Option<&Path>) -> Result<LlmProvider, CliError> {
    let Some(path) = path else {
        return Ok(LlmProvider::default());
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Invalid(format!("cannot read {}: {e}", path.display())))?;
    let endpoint: LlmEndpointConfig = serde_json::from_str(&text).map_err(|e| {
        CliError::Invalid(format!("invalid endpoint config {}: {e}", path.display()))
    })?;
    endpoint
        .validate()
        .map_err(|e| CliError::Invalid(format!("llm: {e}")))?;
    Ok(LlmProvider::Http { endpoint })
}

pub fn cross_encoder_from_file(path: Option<&Path>) -> Result<CrossEncoderProvider, CliError> {
    let Some(path) = path else {
        return Ok(CrossEncoderProvider::default());
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Invalid(format!("cannot read {}: {e}", path.display())))?;
    let endpoint: CrossEncoderConfig = serde_json::from_str(&text).map_err(|e| {
        CliError::Invalid(format!(
            "invalid cross-encoder config {}: {e}",
            path.display()
        ))
    })?;
    Ok(CrossEncoderProvider::Http { endpoint })
}
