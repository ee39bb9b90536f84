//! LLM backends: scripted fixtures for tests and replay, and a
//! configuration-driven JSON-over-HTTP client.

use std::collections::{BTreeMap, HashMap};
use std::io::BufRead;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::fsm::Module;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum BackendError {
    #[error("no scripted output for {module} prompt sha256:{hash}")]
    FixtureGap { module: Module, hash: String },
    #[error("backend transport error: {0}")]
    Transport(String),
    #[error("backend returned status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("backend response has no text at {path:?}: {body}")]
    Decode { path: String, body: String },
    #[error("bad fixture on line {line}: {message}")]
    Fixture { line: usize, message: String },
}

/// A text-completion backend. Implementations must tolerate concurrent calls.
pub trait LlmBackend: Send + Sync {
    fn complete(&self, module: Module, prompt: &str) -> Result<String, BackendError>;
}

impl<B: LlmBackend + ?Sized> LlmBackend for std::sync::Arc<B> {
    fn complete(&self, module: Module, prompt: &str) -> Result<String, BackendError> {
        (**self).complete(module, prompt)
    }
}

impl<B: LlmBackend + ?Sized> LlmBackend for &B {
    fn complete(&self, module: Module, prompt: &str) -> Result<String, BackendError> {
        (**self).complete(module, prompt)
    }
}

/// Lowercase hex sha256 of the prompt bytes.
pub fn prompt_hash(prompt: &str) -> String {
    let digest = Sha256::digest(prompt.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchKind {
    Exact,
    Hash,
}

/// One line of a scripted fixture file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FixtureEntry {
    pub module: String,
    #[serde(rename = "match")]
    pub match_kind: MatchKind,
    pub input: String,
    pub output: String,
}

/// Immutable `(module, prompt) → output` map. Lookups that miss are errors.
#[derive(Debug, Clone, Default)]
pub struct ScriptedBackend {
    by_hash: HashMap<(Module, String), String>,
}

impl ScriptedBackend {
    pub fn new() -> Self {
        Self::default()
    }

    /// Exact-prompt entries are stored by hash; both match kinds share one map.
    pub fn insert(&mut self, module: Module, prompt: &str, output: impl Into<String>) {
        self.by_hash
            .insert((module, prompt_hash(prompt)), output.into());
    }

    pub fn insert_hash(
        &mut self,
        module: Module,
        hash: impl Into<String>,
        output: impl Into<String>,
    ) {
        self.by_hash
            .insert((module, hash.into().to_ascii_lowercase()), output.into());
    }

    pub fn with(mut self, module: Module, prompt: &str, output: impl Into<String>) -> Self {
        self.insert(module, prompt, output);
        self
    }

    pub fn len(&self) -> usize {
        self.by_hash.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_hash.is_empty()
    }

    pub fn from_entries(
        entries: impl IntoIterator<Item = FixtureEntry>,
    ) -> Result<Self, BackendError> {
        let mut b = Self::new();
        for (i, e) in entries.into_iter().enumerate() {
            b.add_entry(i + 1, e)?;
        }
        Ok(b)
    }

    fn add_entry(&mut self, line: usize, e: FixtureEntry) -> Result<(), BackendError> {
        let module = Module::parse(&e.module)
            .filter(|m| m.is_llm())
            .ok_or_else(|| BackendError::Fixture {
                line,
                message: format!("unknown LLM module {:?}", e.module),
            })?;
        match e.match_kind {
            MatchKind::Exact => self.insert(module, &e.input, e.output),
            MatchKind::Hash => self.insert_hash(module, e.input, e.output),
        }
        Ok(())
    }

    /// Reads line-delimited fixture entries.
    pub fn from_jsonl<R: BufRead>(reader: R) -> Result<Self, BackendError> {
        let mut b = Self::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| BackendError::Fixture {
                line: i + 1,
                message: e.to_string(),
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let e: FixtureEntry =
                serde_json::from_str(&line).map_err(|e| BackendError::Fixture {
                    line: i + 1,
                    message: e.to_string(),
                })?;
            b.add_entry(i + 1, e)?;
        }
        Ok(b)
    }
}

impl LlmBackend for ScriptedBackend {
    fn complete(&self, module: Module, prompt: &str) -> Result<String, BackendError> {
        let hash = prompt_hash(prompt);
        match self.by_hash.get(&(module, hash)) {
            Some(out) => Ok(out.clone()),
            None => Err(BackendError::FixtureGap {
                module,
                hash: prompt_hash(prompt),
            }),
        }
    }
}

/// Adapts a closure into a backend.
pub struct FnBackend<F>(pub F);

impl<F> LlmBackend for FnBackend<F>
where
    F: Fn(Module, &str) -> Result<String, BackendError> + Send + Sync,
{
    fn complete(&self, module: Module, prompt: &str) -> Result<String, BackendError> {
        (self.0)(module, prompt)
    }
}

fn default_prompt_path() -> String {
    "prompt".into()
}

fn default_text_path() -> String {
    "choices.0.text".into()
}

fn default_timeout() -> u64 {
    60
}

/// HTTP backend configuration. The request body is `request_template` with
/// the prompt written at `prompt_path`, `temperature` set, and `model` set
/// when given; the completion is read from `text_path`. Paths are
/// dot-separated object keys and array indices (`messages.0.content`).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HttpConfig {
    pub endpoint: String,
    #[serde(default)]
    pub headers: BTreeMap<String, String>,
    /// Environment variable holding a bearer token for `Authorization`.
    #[serde(default)]
    pub auth_env: Option<String>,
    #[serde(default)]
    pub model: Option<String>,
    #[serde(default)]
    pub request_template: Value,
    #[serde(default = "default_prompt_path")]
    pub prompt_path: String,
    #[serde(default = "default_text_path")]
    pub text_path: String,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default)]
    pub temperature: f64,
}

impl HttpConfig {
    pub fn new(endpoint: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            headers: BTreeMap::new(),
            auth_env: None,
            model: None,
            request_template: Value::Null,
            prompt_path: default_prompt_path(),
            text_path: default_text_path(),
            timeout_secs: default_timeout(),
            temperature: 0.0,
        }
    }
}

pub struct HttpBackend {
    config: HttpConfig,
    agent: ureq::Agent,
    auth: Option<String>,
}

impl HttpBackend {
    pub fn new(config: HttpConfig) -> Self {
        let agent = ureq::AgentBuilder::new()
            .timeout(Duration::from_secs(config.timeout_secs.max(1)))
            .build();
        let auth = config
            .auth_env
            .as_deref()
            .and_then(|v| std::env::var(v).ok())
            .map(|t| format!("Bearer {t}"));
        Self {
            config,
            agent,
            auth,
        }
    }

    pub fn request_body(&self, prompt: &str) -> Value {
        let mut body = match &self.config.request_template {
            Value::Null => Value::Object(Default::default()),
            v => v.clone(),
        };
        set_path(
            &mut body,
            &self.config.prompt_path,
            Value::String(prompt.into()),
        );
        if let Value::Object(map) = &mut body {
            map.insert("temperature".into(), self.config.temperature.into());
            if let Some(model) = &self.config.model {
                map.insert("model".into(), Value::String(model.clone()));
            }
        }
        body
    }

    fn send_once(&self, body: &str) -> Result<String, BackendError> {
        let mut req = self
            .agent
            .post(&self.config.endpoint)
            .set("Content-Type", "application/json");
        for (k, v) in &self.config.headers {
            req = req.set(k, v);
        }
        if let Some(auth) = &self.auth {
            req = req.set("Authorization", auth);
        }
        match req.send_string(body) {
            Ok(resp) => resp
                .into_string()
                .map_err(|e| BackendError::Transport(e.to_string())),
            Err(ureq::Error::Status(status, resp)) => Err(BackendError::Status {
                status,
                body: resp.into_string().unwrap_or_default(),
            }),
            Err(ureq::Error::Transport(t)) => Err(BackendError::Transport(t.to_string())),
        }
    }
}

impl LlmBackend for HttpBackend {
    fn complete(&self, _module: Module, prompt: &str) -> Result<String, BackendError> {
        let body = self.request_body(prompt).to_string();
        let retryable = |e: &BackendError| match e {
            BackendError::Transport(_) => true,
            BackendError::Status { status, .. } => *status >= 500,
            _ => false,
        };
        let text = match self.send_once(&body) {
            Err(e) if retryable(&e) => self.send_once(&body)?,
            other => other?,
        };
        let parsed: Value = serde_json::from_str(&text).map_err(|_| BackendError::Decode {
            path: self.config.text_path.clone(),
            body: text.clone(),
        })?;
        get_path(&parsed, &self.config.text_path)
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or(BackendError::Decode {
                path: self.config.text_path.clone(),
                body: text,
            })
    }
}

fn get_path<'a>(v: &'a Value, path: &str) -> Option<&'a Value> {
    path.split('.')
        .filter(|s| !s.is_empty())
        .try_fold(v, |cur, seg| match cur {
            Value::Array(items) => items.get(seg.parse::<usize>().ok()?),
            Value::Object(map) => map.get(seg),
            _ => None,
        })
}

fn set_path(root: &mut Value, path: &str, value: Value) {
    let segs: Vec<&str> = path.split('.').filter(|s| !s.is_empty()).collect();
    let mut cur = root;
    for (i, seg) in segs.iter().enumerate() {
        let last = i + 1 == segs.len();
        let next_is_index = segs.get(i + 1).is_some_and(|s| s.parse::<usize>().is_ok());
        let fresh = || {
            if next_is_index {
                Value::Array(Vec::new())
            } else {
                Value::Object(Default::default())
            }
        };
        if let Ok(idx) = seg.parse::<usize>() {
            if !cur.is_array() {
                *cur = Value::Array(Vec::new());
            }
            let arr = cur.as_array_mut().expect("array");
            while arr.len() <= idx {
                arr.push(Value::Object(Default::default()));
            }
            if last {
                arr[idx] = value;
                return;
            }
            if !(arr[idx].is_object() || arr[idx].is_array()) {
                arr[idx] = fresh();
            }
            cur = &mut arr[idx];
        } else {
            if !cur.is_object() {
                *cur = Value::Object(Default::default());
            }
            let map = cur.as_object_mut().expect("object");
            if last {
                map.insert(seg.to_string(), value);
                return;
            }
            cur = map.entry(seg.to_string()).or_insert_with(fresh);
        }
    }
}
