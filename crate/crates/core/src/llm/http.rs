use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::{Condvar, Mutex};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::prompts::render;
use super::{
    check_listwise_request, check_review_request, ExtractedAspects, ItemReviews, LlmClient,
    LlmError, PromptSet, ReviewStyle,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LlmEndpointConfig {
    /// Root of an OpenAI-compatible API; `/chat/completions` is appended.
    pub base_url: String,
    /// Model used for aspect extraction and review generation.
    pub model_name: String,
    /// Model used for listwise reranking.
    pub rerank_model_name: String,
    pub api_key_env_var: String,
    pub timeout_secs: f64,
    pub max_retries: u32,
    pub temperature: f64,
    /// Upper bound on requests in flight at once.
    pub max_concurrency: usize,
    /// Directory whose prompt files replace the built-in ones.
    pub prompt_dir: Option<PathBuf>,
}

impl Default for LlmEndpointConfig {
    fn default() -> Self {
        Self {
            base_url: "https://api.openai.com/v1".into(),
            model_name: "gpt-4".into(),
            rerank_model_name: "gpt-3.5-turbo-16k".into(),
            api_key_env_var: "OPENAI_API_KEY".into(),
            timeout_secs: 60.0,
            max_retries: 3,
            temperature: 0.0,
            max_concurrency: 4,
            prompt_dir: None,
        }
    }
}

impl LlmEndpointConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.timeout_secs.is_finite() && self.timeout_secs > 0.0) {
            return Err(format!(
                "timeout_secs must be positive, got {}",
                self.timeout_secs
            ));
        }
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(format!(
                "temperature must be non-negative, got {}",
                self.temperature
            ));
        }
        if self.max_concurrency == 0 {
            return Err("max_concurrency must be at least 1".into());
        }
        if self.base_url.is_empty() {
            return Err("base_url is empty".into());
        }
        Ok(())
    }
}

/// Append-only JSON-Lines record of every request and response.
#[derive(Debug)]
pub struct AuditLog {
    out: Mutex<BufWriter<File>>,
}

impl AuditLog {
    pub fn create(path: &Path) -> std::io::Result<Self> {
        Ok(Self {
            out: Mutex::new(BufWriter::new(File::create(path)?)),
        })
    }

    fn record(&self, entry: &Value) {
        let mut out = self.out.lock().unwrap_or_else(|e| e.into_inner());
        let written = serde_json::to_writer(&mut *out, entry)
            .map_err(std::io::Error::from)
            .and_then(|()| out.write_all(b"\n"))
            .and_then(|()| out.flush());
        if let Err(e) = written {
            log::warn!("audit log write failed: {e}");
        }
    }
}

/// Counting semaphore bounding concurrent requests.
#[derive(Debug)]
struct Gate {
    free: Mutex<usize>,
    freed: Condvar,
}

struct Permit<'a>(&'a Gate);

impl Gate {
    fn new(limit: usize) -> Self {
        Self {
            free: Mutex::new(limit),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().unwrap_or_else(|e| e.into_inner());
        while *free == 0 {
            free = self.freed.wait(free).unwrap_or_else(|e| e.into_inner());
        }
        *free -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap_or_else(|e| e.into_inner()) += 1;
        self.0.freed.notify_one();
    }
}

enum Failure {
    /// Worth another attempt: transport errors, 429 and 5xx.
    Transient(String),
    Fatal(String),
}

/// Client for OpenAI-compatible chat-completions endpoints.
pub struct HttpLlm {
    config: LlmEndpointConfig,
    prompts: PromptSet,
    agent: ureq::Agent,
    api_key: Option<String>,
    gate: Gate,
    memo: Mutex<HashMap<(String, String), String>>,
    log: Option<AuditLog>,
    backoff: Duration,
}

impl HttpLlm {
    pub fn new(config: LlmEndpointConfig) -> Result<Self, LlmError> {
        config.validate().map_err(LlmError::InvalidRequest)?;
        let prompts = match &config.prompt_dir {
            Some(dir) => PromptSet::with_overrides(dir)?,
            None => PromptSet::default(),
        };
        let api_key = std::env::var(&config.api_key_env_var)
            .ok()
            .filter(|k| !k.is_empty());
        if api_key.is_none() {
            log::warn!(
                "`{}` is not set; requests are sent without an API key",
                config.api_key_env_var
            );
        }
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(config.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(Self {
            gate: Gate::new(config.max_concurrency),
            config,
            prompts,
            agent,
            api_key,
            memo: Mutex::new(HashMap::new()),
            log: None,
            backoff: Duration::from_millis(500),
        })
    }

    pub fn with_audit_log(mut self, log: AuditLog) -> Self {
        self.log = Some(log);
        self
    }

    /// First retry waits `base`, each later one twice as long.
    pub fn with_backoff(mut self, base: Duration) -> Self {
        self.backoff = base;
        self
    }

    pub fn config(&self) -> &LlmEndpointConfig {
        &self.config
    }

    fn audit(&self, task: &str, attempt: u32, prompt: &str, outcome: Result<&str, &str>) {
        if let Some(log) = &self.log {
            let ts = SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map_or(0, |d| d.as_millis());
            let (key, value) = match outcome {
                Ok(r) => ("response", r),
                Err(e) => ("error", e),
            };
            log.record(&json!({
                "ts_ms": ts as u64,
                "task": task,
                "attempt": attempt,
                "model": self.model_for(task),
                "prompt": prompt,
                key: value,
            }));
        }
    }

    fn model_for(&self, task: &str) -> &str {
        if task == "listwise" {
            &self.config.rerank_model_name
        } else {
            &self.config.model_name
        }
    }

    fn post_once(&self, task: &str, prompt: &str) -> Result<String, Failure> {
        let body = json!({
            "model": self.model_for(task),
            "temperature": self.config.temperature,
            "messages": [{"role": "user", "content": prompt}],
        });
        let url = format!(
            "{}/chat/completions",
            self.config.base_url.trim_end_matches('/')
        );
        let _permit = self.gate.acquire();
        let mut request = self
            .agent
            .post(&url)
            .header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            request = request.header("Authorization", format!("Bearer {key}"));
        }
        let mut response = request
            .send(body.to_string())
            .map_err(|e| Failure::Transient(e.to_string()))?;
        let status = response.status().as_u16();
        let text = response
            .body_mut()
            .read_to_string()
            .map_err(|e| Failure::Transient(e.to_string()))?;
        match status {
            200..=299 => {}
            429 | 500..=599 => return Err(Failure::Transient(format!("HTTP {status}: {text}"))),
            _ => return Err(Failure::Fatal(format!("HTTP {status}: {text}"))),
        }
        let parsed: Value = serde_json::from_str(&text)
            .map_err(|e| Failure::Fatal(format!("response is not JSON ({e}): {text}")))?;
        parsed["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| Failure::Fatal(format!("response has no message content: {text}")))
    }

    /// One completion, retrying transient failures with exponential backoff.
    fn complete(&self, task: &str, prompt: &str) -> Result<String, LlmError> {
        let mut attempt = 0;
        loop {
            attempt += 1;
            match self.post_once(task, prompt) {
                Ok(content) => {
                    self.audit(task, attempt, prompt, Ok(&content));
                    return Ok(content);
                }
                Err(Failure::Transient(msg)) if attempt <= self.config.max_retries => {
                    self.audit(task, attempt, prompt, Err(&msg));
                    let wait = self.backoff * 2u32.saturating_pow(attempt - 1);
                    log::debug!("{task}: attempt {attempt} failed ({msg}); retrying in {wait:?}");
                    std::thread::sleep(wait);
                }
                Err(Failure::Transient(msg) | Failure::Fatal(msg)) => {
                    self.audit(task, attempt, prompt, Err(&msg));
                    return Err(LlmError::Unreachable {
                        attempts: attempt,
                        message: msg,
                    });
                }
            }
        }
    }

    /// Completes and parses, asking again while the output is rejected.
    /// Accepted outputs are memoized per prompt for the life of the client.
    fn complete_valid<T>(
        &self,
        task: &'static str,
        prompt: &str,
        parse: impl Fn(&str) -> Result<T, String>,
    ) -> Result<T, LlmError> {
        let key = (task.to_string(), prompt.to_string());
        if let Some(raw) = self
            .memo
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .get(&key)
        {
            if let Ok(v) = parse(raw) {
                return Ok(v);
            }
        }
        let attempts = self.config.max_retries + 1;
        let mut last = (String::new(), String::new());
        for _ in 0..attempts {
            let raw = self.complete(task, prompt)?;
            match parse(&raw) {
                Ok(v) => {
                    self.memo
                        .lock()
                        .unwrap_or_else(|e| e.into_inner())
                        .insert(key, raw);
                    return Ok(v);
                }
                Err(reason) => {
                    log::debug!("{task}: rejected output ({reason})");
                    last = (reason, raw);
                }
            }
        }
        Err(LlmError::InvalidOutput {
            task,
            attempts,
            reason: last.0,
            raw: last.1,
        })
    }
}

/// The first JSON array of strings embedded in `raw`.
pub(crate) fn parse_string_array(raw: &str) -> Result<Vec<String>, String> {
    let start = raw.find('[').ok_or("no JSON array in output")?;
    let end = raw.rfind(']').ok_or("no JSON array in output")?;
    if end < start {
        return Err("no JSON array in output".into());
    }
    serde_json::from_str(&raw[start..=end]).map_err(|e| format!("not an array of strings: {e}"))
}

pub(crate) fn item_blocks(items: &[ItemReviews]) -> String {
    items
        .iter()
        .map(|item| {
            let mut block = format!("ID: {}\nReviews:\n", item.item_id);
            for review in &item.reviews {
                block.push_str("- ");
                block.push_str(review);
                block.push('\n');
            }
            block
        })
        .collect::<Vec<_>>()
        .join("\n")
}

impl LlmClient for HttpLlm {
    fn extract_aspects(
        &self,
        query_id: &str,
        query_text: &str,
    ) -> Result<ExtractedAspects, LlmError> {
        if query_text.trim().is_empty() {
            return Err(LlmError::EmptyQuery);
        }
        let prompt = render(&self.prompts.extract, &[("query", query_text)]);
        self.complete_valid("extraction", &prompt, |raw| {
            ExtractedAspects::from_texts(query_id, query_text, &parse_string_array(raw)?)
        })
    }

    fn generate_review_text(
        &self,
        item_id: &str,
        aspect_texts: &[&str],
        style: ReviewStyle,
        nonce: u64,
    ) -> Result<String, LlmError> {
        check_review_request(aspect_texts, style)?;
        let template = match style {
            ReviewStyle::Overlapping => &self.prompts.review_overlapping,
            ReviewStyle::Disjoint => &self.prompts.review_disjoint,
        };
        let aspects = aspect_texts
            .iter()
            .map(|a| format!("- {a}"))
            .collect::<Vec<_>>()
            .join("\n");
        let nonce = nonce.to_string();
        // The nonce keeps otherwise identical requests distinct in the memo.
        let prompt = render(
            template,
            &[
                ("item_id", item_id),
                ("aspects", &aspects),
                ("nonce", &nonce),
            ],
        );
        let prompt = format!("{prompt}\n[request {nonce}]");
        self.complete_valid("generation", &prompt, |raw| {
            let text = raw.trim();
            if text.is_empty() {
                Err("empty review text".to_string())
            } else {
                Ok(text.to_string())
            }
        })
    }

    fn rerank_listwise(
        &self,
        query_text: &str,
        items: &[ItemReviews],
    ) -> Result<Vec<String>, LlmError> {
        check_listwise_request(items)?;
        let prompt = render(
            &self.prompts.listwise,
            &[("query", query_text), ("item_blocks", &item_blocks(items))],
        );
        self.complete_valid("listwise", &prompt, |raw| {
            let ids = parse_string_array(raw)?;
            match ids
                .iter()
                .find(|id| !items.iter().any(|i| &i.item_id == *id))
            {
                Some(foreign) => Err(format!("unknown item id `{foreign}`")),
                None => Ok(ids),
            }
        })
    }
}
