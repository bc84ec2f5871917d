//! Abstraction over chat-completion APIs.
//!
//! Two backends exist: a remote OpenAI-compatible endpoint and a stub whose
//! answers are a pure function of `(purpose, content digest)`. Nothing
//! outside this module opens a network connection; the pluggable grammar and
//! NER clients go through [`post_json`].

use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const DEFAULT_CREDENTIAL_ENV: &str = "PWM_LLM_API_KEY";
pub const OFFLINE_ENV: &str = "PWM_OFFLINE";
pub const BASE_URL_ENV: &str = "PWM_LLM_BASE_URL";
pub const MODEL_ENV: &str = "PWM_LLM_MODEL";
pub const CREDENTIAL_NAME_ENV: &str = "PWM_LLM_CREDENTIAL_ENV";
/// Path of a stub fixture table; when set the gateway never leaves the host.
pub const STUB_ENV: &str = "PWM_LLM_STUB";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Purpose {
    Annotate,
    TemplateGen,
    Summarize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MessageRole {
    System,
    User,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: MessageRole,
    pub content: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResponseFormat {
    Text,
    Structured,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatewayRequest {
    pub purpose: Purpose,
    pub messages: Vec<Message>,
    pub response_format: ResponseFormat,
    pub temperature: f64,
}

impl GatewayRequest {
    pub fn structured(purpose: Purpose, system: impl Into<String>, user: impl Into<String>) -> Self {
        GatewayRequest {
            purpose,
            messages: vec![
                Message {
                    role: MessageRole::System,
                    content: system.into(),
                },
                Message {
                    role: MessageRole::User,
                    content: user.into(),
                },
            ],
            response_format: ResponseFormat::Structured,
            temperature: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.messages.iter().any(|m| m.role == MessageRole::User) {
            return Err(Error::InvalidParameter("gateway request has no user message".into()));
        }
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(Error::InvalidParameter(format!("temperature {} must be >= 0", self.temperature)));
        }
        Ok(())
    }

    /// SHA-256 over the ordered `role:content` lines. Stub lookups key on it.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        for m in &self.messages {
            let role = match m.role {
                MessageRole::System => "system",
                MessageRole::User => "user",
            };
            hasher.update(role.as_bytes());
            hasher.update(b":");
            hasher.update(m.content.as_bytes());
            hasher.update(b"\n");
        }
        hex::encode(hasher.finalize())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StubEntry {
    pub purpose: Purpose,
    /// Request digest, or `"*"` to answer every request of this purpose.
    pub digest: String,
    pub response: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StubTable {
    pub entries: Vec<StubEntry>,
}

impl StubTable {
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::from_json(&e))
    }

    pub fn with(mut self, purpose: Purpose, digest: impl Into<String>, response: impl Into<String>) -> Self {
        self.entries.push(StubEntry {
            purpose,
            digest: digest.into(),
            response: response.into(),
        });
        self
    }

    fn lookup(&self, purpose: Purpose, digest: &str) -> Option<&str> {
        let exact = self
            .entries
            .iter()
            .find(|e| e.purpose == purpose && e.digest == digest);
        exact
            .or_else(|| self.entries.iter().find(|e| e.purpose == purpose && e.digest == "*"))
            .map(|e| e.response.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteConfig {
    pub base_url: String,
    pub model: String,
    /// Name of the environment variable holding the API key.
    pub credential_env: String,
    pub timeout_secs: u64,
    pub max_retries: u32,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        RemoteConfig {
            base_url: "https://api.openai.com/v1".into(),
            model: "gpt-4o-mini".into(),
            credential_env: DEFAULT_CREDENTIAL_ENV.into(),
            timeout_secs: 30,
            max_retries: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum GatewayBackend {
    Remote(RemoteConfig),
    Stub(StubTable),
}

struct Limiter {
    in_flight: Mutex<usize>,
    freed: Condvar,
    max: usize,
}

impl Limiter {
    fn new(max: usize) -> Self {
        Limiter {
            in_flight: Mutex::new(0),
            freed: Condvar::new(),
            max: max.max(1),
        }
    }

    fn acquire(&self) -> LimiterGuard<'_> {
        let mut n = self.in_flight.lock().unwrap_or_else(|e| e.into_inner());
        while *n >= self.max {
            n = self.freed.wait(n).unwrap_or_else(|e| e.into_inner());
        }
        *n += 1;
        LimiterGuard(self)
    }
}

struct LimiterGuard<'a>(&'a Limiter);

impl Drop for LimiterGuard<'_> {
    fn drop(&mut self) {
        let mut n = self.0.in_flight.lock().unwrap_or_else(|e| e.into_inner());
        *n -= 1;
        self.0.freed.notify_one();
    }
}

pub struct Gateway {
    backend: GatewayBackend,
    offline: bool,
    limiter: Limiter,
}

impl std::fmt::Debug for Gateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Gateway")
            .field("backend", &self.backend)
            .field("offline", &self.offline)
            .finish()
    }
}

impl Gateway {
    pub fn new(backend: GatewayBackend) -> Self {
        Gateway {
            backend,
            offline: false,
            limiter: Limiter::new(4),
        }
    }

    /// An empty stub: every call reports unavailability, so callers take
    /// their offline paths.
    pub fn offline() -> Self {
        Gateway::stub(StubTable::default())
    }

    pub fn stub(table: StubTable) -> Self {
        let mut gw = Gateway::new(GatewayBackend::Stub(table));
        gw.offline = true;
        gw
    }

    pub fn with_parallelism(mut self, max: usize) -> Self {
        self.limiter = Limiter::new(max);
        self
    }

    /// Remote backend configured from `PWM_LLM_*` variables. `PWM_LLM_STUB`
    /// selects a stub fixture table instead; `PWM_OFFLINE` (anything but
    /// `0`/`false`) without a stub table gives an empty stub.
    pub fn from_env() -> Result<Self> {
        if let Some(path) = std::env::var_os(STUB_ENV).filter(|p| !p.is_empty()) {
            return Ok(Gateway::stub(StubTable::load(std::path::Path::new(&path))?));
        }
        if env_flag(OFFLINE_ENV) {
            return Ok(Gateway::offline());
        }
        let mut remote = RemoteConfig::default();
        if let Ok(url) = std::env::var(BASE_URL_ENV) {
            remote.base_url = url;
        }
        if let Ok(model) = std::env::var(MODEL_ENV) {
            remote.model = model;
        }
        if let Ok(name) = std::env::var(CREDENTIAL_NAME_ENV) {
            remote.credential_env = name;
        }
        Ok(Gateway::new(GatewayBackend::Remote(remote)))
    }

    pub fn is_offline(&self) -> bool {
        self.offline || matches!(self.backend, GatewayBackend::Stub(_))
    }

    pub fn backend(&self) -> &GatewayBackend {
        &self.backend
    }

    pub fn complete(&self, request: &GatewayRequest) -> Result<String> {
        request.validate()?;
        let raw = match &self.backend {
            GatewayBackend::Stub(table) => table
                .lookup(request.purpose, &request.digest())
                .map(str::to_string)
                .ok_or_else(|| {
                    Error::GatewayUnavailable(format!(
                        "no stub fixture for {:?} digest {}",
                        request.purpose,
                        request.digest()
                    ))
                })?,
            GatewayBackend::Remote(_) if self.offline => {
                return Err(Error::GatewayUnavailable("offline mode".into()));
            }
            GatewayBackend::Remote(cfg) => {
                let _slot = self.limiter.acquire();
                remote_complete(cfg, request)?
            }
        };
        if request.response_format == ResponseFormat::Structured {
            parse_structured(&raw)?;
        }
        Ok(raw)
    }

    pub fn complete_json(&self, request: &GatewayRequest) -> Result<Value> {
        let raw = self.complete(request)?;
        parse_structured(&raw)
    }
}

fn env_flag(name: &str) -> bool {
    match std::env::var(name) {
        Ok(v) => !matches!(v.trim().to_ascii_lowercase().as_str(), "" | "0" | "false" | "no"),
        Err(_) => false,
    }
}

/// Parses a structured reply, tolerating a surrounding Markdown code fence.
pub fn parse_structured(raw: &str) -> Result<Value> {
    let mut body = raw.trim();
    if let Some(rest) = body.strip_prefix("```") {
        let rest = rest.strip_prefix("json").unwrap_or(rest);
        body = rest.strip_suffix("```").unwrap_or(rest).trim();
    }
    let value: Value =
        serde_json::from_str(body).map_err(|e| Error::InvalidResponse(format!("not a JSON document: {e}")))?;
    if !value.is_object() {
        return Err(Error::InvalidResponse("expected a JSON object".into()));
    }
    Ok(value)
}

fn agent(timeout: Duration) -> ureq::Agent {
    ureq::Agent::config_builder()
        .timeout_global(Some(timeout))
        .build()
        .into()
}

fn is_transient(err: &ureq::Error) -> bool {
    match err {
        ureq::Error::StatusCode(code) => *code == 429 || *code >= 500,
        ureq::Error::Timeout(_)
        | ureq::Error::Io(_)
        | ureq::Error::ConnectionFailed
        | ureq::Error::HostNotFound => true,
        _ => false,
    }
}

fn remote_complete(cfg: &RemoteConfig, request: &GatewayRequest) -> Result<String> {
    let key = std::env::var(&cfg.credential_env)
        .ok()
        .filter(|k| !k.is_empty())
        .ok_or_else(|| Error::MissingCredential(cfg.credential_env.clone()))?;
    let mut body = json!({
        "model": cfg.model,
        "messages": request.messages,
        "temperature": request.temperature,
    });
    if request.response_format == ResponseFormat::Structured {
        body["response_format"] = json!({ "type": "json_object" });
    }
    let url = format!("{}/chat/completions", cfg.base_url.trim_end_matches('/'));
    let agent = agent(Duration::from_secs(cfg.timeout_secs));
    let mut attempt = 0;
    loop {
        let result = agent
            .post(&url)
            .header("Authorization", &format!("Bearer {key}"))
            .send_json(&body)
            .and_then(|mut resp| resp.body_mut().read_json::<Value>());
        match result {
            Ok(reply) => {
                return reply
                    .pointer("/choices/0/message/content")
                    .and_then(Value::as_str)
                    .map(str::to_string)
                    .ok_or_else(|| Error::InvalidResponse("reply has no choices[0].message.content".into()));
            }
            Err(e) if is_transient(&e) && attempt < cfg.max_retries => {
                attempt += 1;
                log::warn!("gateway attempt {attempt} failed ({e}); retrying");
                std::thread::sleep(Duration::from_millis(250 * u64::from(attempt)));
            }
            Err(e) if is_transient(&e) => return Err(Error::GatewayUnavailable(e.to_string())),
            Err(e) => return Err(Error::InvalidResponse(e.to_string())),
        }
    }
}

/// POSTs a JSON body and decodes a JSON reply. Used by the pluggable
/// grammar and NER clients.
pub fn post_json(url: &str, body: &Value, timeout: Duration) -> Result<Value> {
    agent(timeout)
        .post(url)
        .send_json(body)
        .and_then(|mut resp| resp.body_mut().read_json::<Value>())
        .map_err(|e| Error::GatewayUnavailable(e.to_string()))
}
