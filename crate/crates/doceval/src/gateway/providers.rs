//! Model providers behind the gateway: the trait, a deterministic stub for
//! offline runs, and a minimal OpenAI-compatible HTTP client.

use base64::Engine as _;
use serde_json::json;

use super::{FinishState, ModelRequest};

/// A transport-level failure; the gateway retries these with backoff.
#[derive(Debug, Clone)]
pub struct TransportError(pub String);

impl std::fmt::Display for TransportError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "transport error: {}", self.0)
    }
}

impl std::error::Error for TransportError {}

/// What a provider returns on success. Latency is measured by the gateway.
#[derive(Debug, Clone)]
pub struct ProviderReply {
    pub raw_text: String,
    pub input_units: u64,
    pub output_units: u64,
    pub finish_state: FinishState,
}

pub trait ModelProvider: Send + Sync {
    fn call(&self, request: &ModelRequest) -> Result<ProviderReply, TransportError>;
}

/// Deterministic offline provider registered under the id `stub`. It
/// answers every extraction request with an empty JSON object, which
/// parses into an all-empty record, so pipelines can be exercised and
/// cassettes recorded with zero cost and no network.
pub struct StubProvider;

impl ModelProvider for StubProvider {
    fn call(&self, request: &ModelRequest) -> Result<ProviderReply, TransportError> {
        Ok(ProviderReply {
            raw_text: "{}".to_string(),
            input_units: (request.prompt_text.chars().count() as u64) / 4,
            output_units: 2,
            finish_state: FinishState::Complete,
        })
    }
}

/// Minimal OpenAI-compatible chat-completions client. Images travel as
/// base64 data URLs; decode parameters map onto `temperature` and
/// `max_tokens`.
pub struct HttpChatProvider {
    base_url: String,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
}

impl HttpChatProvider {
    pub fn new(base_url: impl Into<String>, api_key: Option<String>) -> Self {
        Self {
            base_url: base_url.into(),
            api_key,
            client: reqwest::blocking::Client::new(),
        }
    }

    /// Request body for one model call; split out for testability.
    fn body(request: &ModelRequest) -> serde_json::Value {
        let mut content = vec![json!({"type": "text", "text": request.prompt_text})];
        for image in &request.image_payloads {
            let encoded = base64::engine::general_purpose::STANDARD.encode(&image.bytes);
            content.push(json!({
                "type": "image_url",
                "image_url": {"url": format!("data:{};base64,{}", image.media_type, encoded)},
            }));
        }
        let mut body = json!({
            "model": request.model_id,
            "messages": [{"role": "user", "content": content}],
        });
        if let Some(t) = request.decode_params.get("temperature") {
            if let Ok(t) = t.parse::<f64>() {
                body["temperature"] = json!(t);
            }
        }
        if let Some(m) = request.decode_params.get("max_output") {
            if let Ok(m) = m.parse::<u64>() {
                body["max_tokens"] = json!(m);
            }
        }
        body
    }
}

impl ModelProvider for HttpChatProvider {
    fn call(&self, request: &ModelRequest) -> Result<ProviderReply, TransportError> {
        let url = format!("{}/chat/completions", self.base_url.trim_end_matches('/'));
        let mut http = self.client.post(&url).json(&Self::body(request));
        if let Some(key) = &self.api_key {
            http = http.bearer_auth(key);
        }
        let response = http.send().map_err(|e| TransportError(e.to_string()))?;
        if !response.status().is_success() {
            return Err(TransportError(format!("http status {}", response.status())));
        }
        let payload: serde_json::Value = response
            .json()
            .map_err(|e| TransportError(format!("bad response body: {e}")))?;

        let choice = &payload["choices"][0];
        let text = choice["message"]["content"].as_str().unwrap_or_default();
        let finish_state = match choice["finish_reason"].as_str() {
            Some("length") => FinishState::Truncated,
            Some("content_filter") => FinishState::Refused,
            _ if text.is_empty() => FinishState::Refused,
            _ => FinishState::Complete,
        };
        Ok(ProviderReply {
            raw_text: text.to_string(),
            input_units: payload["usage"]["prompt_tokens"].as_u64().unwrap_or(0),
            output_units: payload["usage"]["completion_tokens"].as_u64().unwrap_or(0),
            finish_state,
        })
    }
}

/// Builds an HTTP provider from environment variables. For provider id
/// `acme` the endpoint comes from `ACME_BASE_URL` and the credential from
/// `ACME_API_KEY`.
pub fn http_provider_from_env(provider_id: &str) -> Option<HttpChatProvider> {
    let env_name = provider_id.to_uppercase().replace('-', "_");
    let base_url = std::env::var(format!("{env_name}_BASE_URL")).ok()?;
    let api_key = std::env::var(format!("{env_name}_API_KEY")).ok();
    Some(HttpChatProvider::new(base_url, api_key))
}
