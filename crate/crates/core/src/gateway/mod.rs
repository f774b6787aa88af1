//! Uniform access to chat-completion backends.
//!
//! [`Gateway`] wraps a [`ChatBackend`] with request validation, a global
//! in-flight limit, and the choice-count contract. Two backends ship:
//! [`OpenAiBackend`] for any OpenAI-compatible server and [`ScriptedBackend`],
//! a deterministic tag-addressed playbook for offline runs and tests.

mod mock;
mod openai;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use tokio::sync::Semaphore;

use crate::types::GenerationParams;

pub use mock::{ScriptEntry, ScriptedBackend};
pub use openai::OpenAiBackend;

/// Log-probability assigned to a verdict token missing from the top-k map.
pub const LOGPROB_FLOOR: f64 = -13.815_510_557_964_274; // ln(1e-6)

pub const MAX_TOP_LOGPROBS: u8 = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: Role::System,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    pub messages: Vec<ChatMessage>,
    pub params: GenerationParams,
    pub want_logprobs: bool,
    pub top_logprobs_k: u8,
    /// Caller-chosen address such as `critique/doc3/1`. The scripted backend
    /// matches on it; remote backends ignore it.
    pub tag: String,
}

impl ChatRequest {
    pub fn new(
        tag: impl Into<String>,
        prompt: impl Into<String>,
        params: GenerationParams,
    ) -> Self {
        Self {
            messages: vec![ChatMessage::user(prompt)],
            params,
            want_logprobs: false,
            top_logprobs_k: 1,
            tag: tag.into(),
        }
    }

    pub fn with_logprobs(mut self, k: u8) -> Self {
        self.want_logprobs = true;
        self.top_logprobs_k = k;
        self
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        match self.messages.last() {
            None => {
                return Err(GatewayError::InvalidRequest(
                    "messages must be non-empty".into(),
                ))
            }
            Some(m) if m.role != Role::User => {
                return Err(GatewayError::InvalidRequest(
                    "last message must have role user".into(),
                ))
            }
            _ => {}
        }
        if !(1..=MAX_TOP_LOGPROBS).contains(&self.top_logprobs_k) {
            return Err(GatewayError::InvalidRequest(format!(
                "top_logprobs_k must lie in [1, {MAX_TOP_LOGPROBS}]"
            )));
        }
        self.params
            .validate()
            .map_err(|e| GatewayError::InvalidRequest(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionChoice {
    pub text: String,
    /// Natural-log probabilities of the top-k candidates for the first token.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub first_token_top_logprobs: Option<BTreeMap<String, f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub choices: Vec<CompletionChoice>,
    pub backend_id: String,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GatewayError {
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("bad response: {0}")]
    BadResponse(String),
    #[error("scripted backend has no remaining entry for tag '{0}'")]
    ScriptExhausted(String),
    #[error("neither yes nor no verdict token in the top-k logprobs")]
    VerdictTokensAbsent,
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("invalid backend config: {0}")]
    Config(String),
}

impl GatewayError {
    /// True for failures that indicate the backend could not be reached.
    pub fn is_transport(&self) -> bool {
        matches!(self, GatewayError::Transport(_))
    }
}

#[async_trait]
pub trait ChatBackend: Send + Sync {
    fn id(&self) -> &str;

    /// Whether one request may ask for `n > 1` choices.
    fn supports_multiple_choices(&self) -> bool {
        false
    }

    async fn complete(&self, request: &ChatRequest) -> Result<Completion, GatewayError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BackendKind {
    #[serde(rename = "openai_compatible")]
    OpenAiCompatible,
    #[serde(rename = "scripted_mock")]
    ScriptedMock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendKind,
    #[serde(default)]
    pub base_url: Option<String>,
    #[serde(default)]
    pub model: String,
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_s: f64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_backoff")]
    pub retry_base_s: f64,
    #[serde(default)]
    pub script_path: Option<PathBuf>,
    #[serde(default = "default_concurrency")]
    pub max_concurrency: usize,
}

fn default_timeout() -> f64 {
    60.0
}
fn default_retries() -> u32 {
    3
}
fn default_backoff() -> f64 {
    0.5
}
fn default_concurrency() -> usize {
    16
}

impl BackendConfig {
    pub fn scripted(script_path: impl Into<PathBuf>) -> Self {
        Self {
            kind: BackendKind::ScriptedMock,
            base_url: None,
            model: "scripted".into(),
            api_key_env: None,
            timeout_s: default_timeout(),
            max_retries: 0,
            retry_base_s: default_backoff(),
            script_path: Some(script_path.into()),
            max_concurrency: default_concurrency(),
        }
    }

    pub fn openai(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            kind: BackendKind::OpenAiCompatible,
            base_url: Some(base_url.into()),
            model: model.into(),
            api_key_env: None,
            timeout_s: default_timeout(),
            max_retries: default_retries(),
            retry_base_s: default_backoff(),
            script_path: None,
            max_concurrency: default_concurrency(),
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        let bad = |m: &str| Err(GatewayError::Config(m.to_string()));
        if !(self.timeout_s > 0.0 && self.timeout_s.is_finite()) {
            return bad("timeout_s must be > 0");
        }
        if !(self.retry_base_s >= 0.0 && self.retry_base_s.is_finite()) {
            return bad("retry_base_s must be >= 0");
        }
        if self.max_concurrency == 0 {
            return bad("max_concurrency must be >= 1");
        }
        match self.kind {
            BackendKind::OpenAiCompatible => {
                if self.base_url.as_deref().is_none_or(str::is_empty) {
                    return bad("openai_compatible backend requires base_url");
                }
                if self.model.is_empty() {
                    return bad("openai_compatible backend requires model");
                }
            }
            BackendKind::ScriptedMock => {
                if self.script_path.is_none() {
                    return bad("scripted_mock backend requires script_path");
                }
            }
        }
        Ok(())
    }

    /// Builds the configured backend. Reads the script file for the mock
    /// and the API key variable for remote backends.
    pub fn build(&self) -> Result<Arc<dyn ChatBackend>, GatewayError> {
        self.validate()?;
        Ok(match self.kind {
            BackendKind::ScriptedMock => {
                let path = self.script_path.as_ref().expect("validated");
                Arc::new(ScriptedBackend::from_path(path)?)
            }
            BackendKind::OpenAiCompatible => Arc::new(OpenAiBackend::from_config(self)?),
        })
    }
}

/// Shared, concurrency-limited entry point used by every pipeline stage.
pub struct Gateway {
    backend: Arc<dyn ChatBackend>,
    permits: Semaphore,
}

impl std::fmt::Debug for Gateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Gateway")
            .field("backend", &self.backend.id())
            .field("available_permits", &self.permits.available_permits())
            .finish()
    }
}

impl Gateway {
    pub fn new(backend: Arc<dyn ChatBackend>, max_concurrency: usize) -> Self {
        Self {
            backend,
            permits: Semaphore::new(max_concurrency.max(1)),
        }
    }

    pub fn from_config(config: &BackendConfig) -> Result<Self, GatewayError> {
        Ok(Self::new(config.build()?, config.max_concurrency))
    }

    pub fn backend_id(&self) -> &str {
        self.backend.id()
    }

    pub fn supports_multiple_choices(&self) -> bool {
        self.backend.supports_multiple_choices()
    }

    pub async fn complete(&self, request: &ChatRequest) -> Result<Completion, GatewayError> {
        request.validate()?;
        let expected = request.params.effective_n() as usize;
        if expected > 1 && !self.backend.supports_multiple_choices() {
            return Err(GatewayError::InvalidRequest(format!(
                "backend '{}' does not accept n > 1",
                self.backend.id()
            )));
        }
        let completion = {
            let _permit = self
                .permits
                .acquire()
                .await
                .expect("semaphore never closed");
            self.backend.complete(request).await?
        };
        if completion.choices.len() != expected {
            return Err(GatewayError::BadResponse(format!(
                "expected {expected} choices, got {}",
                completion.choices.len()
            )));
        }
        if request.want_logprobs {
            for choice in &completion.choices {
                match &choice.first_token_top_logprobs {
                    None => {
                        return Err(GatewayError::BadResponse(
                            "logprobs requested but missing from choice".into(),
                        ))
                    }
                    Some(map) if map.values().any(|v| v.is_nan() || *v > 0.0) => {
                        return Err(GatewayError::BadResponse(
                            "logprob values must be <= 0".into(),
                        ))
                    }
                    Some(_) => {}
                }
            }
        }
        Ok(completion)
    }

    /// Sends a single-token verdict request and reads the yes/no
    /// log-probabilities off the first-token top-k map.
    pub async fn yes_no_logprobs(&self, request: &ChatRequest) -> Result<(f64, f64), GatewayError> {
        let completion = self.complete(request).await?;
        let map = completion.choices[0]
            .first_token_top_logprobs
            .as_ref()
            .ok_or_else(|| GatewayError::BadResponse("missing logprobs".into()))?;
        yes_no_from_top_logprobs(map)
    }
}

/// Merges case and leading-whitespace variants of `yes`/`no` by maximum and
/// floors a missing side at [`LOGPROB_FLOOR`].
pub fn yes_no_from_top_logprobs(map: &BTreeMap<String, f64>) -> Result<(f64, f64), GatewayError> {
    let mut yes: Option<f64> = None;
    let mut no: Option<f64> = None;
    for (token, &lp) in map {
        let slot = match token.trim_start().to_lowercase().as_str() {
            "yes" => &mut yes,
            "no" => &mut no,
            _ => continue,
        };
        *slot = Some(slot.map_or(lp, |cur| cur.max(lp)));
    }
    match (yes, no) {
        (None, None) => Err(GatewayError::VerdictTokensAbsent),
        (y, n) => Ok((
            y.unwrap_or(LOGPROB_FLOOR).max(LOGPROB_FLOOR),
            n.unwrap_or(LOGPROB_FLOOR).max(LOGPROB_FLOOR),
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    #[test]
    fn floor_is_ln_one_in_a_million() {
        assert!((LOGPROB_FLOOR - (1e-6f64).ln()).abs() < 1e-15);
    }

    #[test]
    fn direct_lookup() {
        let got = yes_no_from_top_logprobs(&map(&[("Yes", -0.2231), ("No", -1.6094)])).unwrap();
        assert_eq!(got, (-0.2231, -1.6094));
    }

    #[test]
    fn missing_side_is_floored() {
        let (y, n) = yes_no_from_top_logprobs(&map(&[(" yes", -0.1054)])).unwrap();
        assert_eq!(y, -0.1054);
        assert!((n - -13.8155).abs() < 1e-4);
    }

    #[test]
    fn neither_side_is_an_error() {
        assert_eq!(
            yes_no_from_top_logprobs(&map(&[("Sure", -0.01)])),
            Err(GatewayError::VerdictTokensAbsent)
        );
    }

    #[test]
    fn variants_merge_by_max() {
        let got = yes_no_from_top_logprobs(&map(&[
            ("Yes", -1.0),
            (" yes", -0.5),
            ("YES", -3.0),
            ("no", -2.0),
            (" No", -0.9),
        ]))
        .unwrap();
        assert_eq!(got, (-0.5, -0.9));
    }

    #[test]
    fn casing_does_not_change_result() {
        let a = yes_no_from_top_logprobs(&map(&[("yes", -0.3), ("no", -1.2)])).unwrap();
        let b = yes_no_from_top_logprobs(&map(&[("YES", -0.3), (" No", -1.2)])).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn request_validation() {
        let mut req = ChatRequest::new("t", "p", GenerationParams::default());
        assert!(req.validate().is_ok());
        req.top_logprobs_k = 21;
        assert!(req.validate().is_err());
        req.top_logprobs_k = 5;
        req.messages.push(ChatMessage::system("s"));
        assert!(req.validate().is_err());
        req.messages.clear();
        assert!(req.validate().is_err());
    }

    #[test]
    fn backend_config_requirements() {
        let mut c = BackendConfig::openai("http://x", "m");
        assert!(c.validate().is_ok());
        c.base_url = None;
        assert!(c.validate().is_err());
        let mut s = BackendConfig::scripted("x.json");
        assert!(s.validate().is_ok());
        s.script_path = None;
        assert!(s.validate().is_err());
    }
}
