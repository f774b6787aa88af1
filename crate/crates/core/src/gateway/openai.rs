use std::collections::BTreeMap;
use std::time::Duration;

use async_trait::async_trait;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{
    BackendConfig, ChatBackend, ChatMessage, ChatRequest, Completion, CompletionChoice,
    GatewayError,
};

/// Client for `POST {base_url}/v1/chat/completions`.
#[derive(Debug)]
pub struct OpenAiBackend {
    client: reqwest::Client,
    endpoint: String,
    model: String,
    api_key: Option<String>,
    max_retries: u32,
    retry_base: Duration,
    id: String,
}

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    messages: &'a [ChatMessage],
    temperature: f64,
    top_p: f64,
    max_tokens: u32,
    n: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    logprobs: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    top_logprobs: Option<u8>,
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireMessage,
    #[serde(default)]
    logprobs: Option<WireLogprobs>,
}

#[derive(Deserialize)]
struct WireMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct WireLogprobs {
    #[serde(default)]
    content: Option<Vec<WireTokenLogprob>>,
}

#[derive(Deserialize)]
struct WireTokenLogprob {
    #[serde(default)]
    top_logprobs: Vec<WireTopLogprob>,
}

#[derive(Deserialize)]
struct WireTopLogprob {
    token: String,
    logprob: f64,
}

enum Attempt {
    Retry(GatewayError),
    Fatal(GatewayError),
}

impl OpenAiBackend {
    pub fn from_config(config: &BackendConfig) -> Result<Self, GatewayError> {
        let base = config
            .base_url
            .as_deref()
            .ok_or_else(|| GatewayError::Config("base_url missing".into()))?;
        let api_key = match &config.api_key_env {
            Some(var) => Some(std::env::var(var).map_err(|_| {
                GatewayError::Config(format!("environment variable {var} is not set"))
            })?),
            None => None,
        };
        let client = reqwest::Client::builder()
            .timeout(Duration::from_secs_f64(config.timeout_s))
            .build()
            .map_err(|e| GatewayError::Config(e.to_string()))?;
        Ok(Self {
            client,
            endpoint: format!("{}/v1/chat/completions", base.trim_end_matches('/')),
            model: config.model.clone(),
            api_key,
            max_retries: config.max_retries,
            retry_base: Duration::from_secs_f64(config.retry_base_s),
            id: format!("openai:{}", config.model),
        })
    }

    /// Exponential backoff, factor 2, with ±20% jitter.
    fn backoff(&self, attempt: u32) -> Duration {
        let base = self.retry_base.as_secs_f64() * 2f64.powi(attempt as i32);
        let jitter = rand::rng().random_range(0.8..=1.2);
        Duration::from_secs_f64(base * jitter)
    }

    async fn attempt(
        &self,
        body: &WireRequest<'_>,
        want_logprobs: bool,
    ) -> Result<Completion, Attempt> {
        let mut req = self.client.post(&self.endpoint).json(body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req
            .send()
            .await
            .map_err(|e| Attempt::Retry(GatewayError::Transport(e.to_string())))?;
        let status = resp.status();
        if status.is_server_error() || status.as_u16() == 429 {
            return Err(Attempt::Retry(GatewayError::Transport(format!(
                "HTTP {status}"
            ))));
        }
        if !status.is_success() {
            let detail = resp.text().await.unwrap_or_default();
            return Err(Attempt::Fatal(GatewayError::BadResponse(format!(
                "HTTP {status}: {detail}"
            ))));
        }
        let bytes = resp
            .bytes()
            .await
            .map_err(|e| Attempt::Retry(GatewayError::Transport(e.to_string())))?;
        parse_response(&bytes, want_logprobs, &self.id).map_err(Attempt::Fatal)
    }
}

fn parse_response(
    bytes: &[u8],
    want_logprobs: bool,
    backend_id: &str,
) -> Result<Completion, GatewayError> {
    let wire: WireResponse =
        serde_json::from_slice(bytes).map_err(|e| GatewayError::BadResponse(e.to_string()))?;
    let choices = wire
        .choices
        .into_iter()
        .map(|c| {
            let text = c.message.content.unwrap_or_default();
            let first_token_top_logprobs = if want_logprobs {
                let first = c
                    .logprobs
                    .and_then(|l| l.content)
                    .and_then(|v| v.into_iter().next())
                    .ok_or_else(|| {
                        GatewayError::BadResponse("missing logprobs.content[0]".into())
                    })?;
                let mut map = BTreeMap::new();
                for t in first.top_logprobs {
                    let slot = map.entry(t.token).or_insert(t.logprob);
                    *slot = slot.max(t.logprob);
                }
                Some(map)
            } else {
                None
            };
            Ok(CompletionChoice {
                text,
                first_token_top_logprobs,
            })
        })
        .collect::<Result<Vec<_>, GatewayError>>()?;
    Ok(Completion {
        choices,
        backend_id: backend_id.to_string(),
    })
}

#[async_trait]
impl ChatBackend for OpenAiBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn supports_multiple_choices(&self) -> bool {
        true
    }

    async fn complete(&self, request: &ChatRequest) -> Result<Completion, GatewayError> {
        let p = &request.params;
        let body = WireRequest {
            model: &self.model,
            messages: &request.messages,
            temperature: p.effective_temperature(),
            top_p: p.top_p,
            max_tokens: p.max_tokens,
            n: p.effective_n(),
            seed: p.seed,
            logprobs: request.want_logprobs,
            top_logprobs: request.want_logprobs.then_some(request.top_logprobs_k),
        };
        let mut attempt = 0;
        loop {
            match self.attempt(&body, request.want_logprobs).await {
                Ok(c) => return Ok(c),
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Retry(e)) if attempt >= self.max_retries => return Err(e),
                Err(Attempt::Retry(e)) => {
                    let wait = self.backoff(attempt);
                    tracing::warn!(tag = %request.tag, attempt, error = %e, ?wait, "retrying chat completion");
                    tokio::time::sleep(wait).await;
                    attempt += 1;
                }
            }
        }
    }
}
