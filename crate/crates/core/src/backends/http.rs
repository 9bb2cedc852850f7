//! Chat-completion client for hosted model endpoints.
//!
//! Request body: `{"model", "messages": [system, user], "temperature",
//! "max_tokens"}` where the user message content is a list of `text` and
//! `image_url` parts (images inlined as base64 data URLs). The reply text is
//! the first choice's message content.

use std::env;
use std::sync::Arc;
use std::time::{Duration, Instant};

use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use serde_json::{json, Value};

use super::{Backend, BackendError, BackendSpec, ModelRequest, ModelResponse, UserPart};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpReply {
    pub status: u16,
    pub body: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TransportError {
    Timeout,
    Connect(String),
}

/// One POST of a JSON body. Swappable so tests can inject faults without a
/// network.
pub trait HttpTransport: Send + Sync {
    fn post_json(
        &self,
        url: &str,
        bearer: Option<&str>,
        body: &Value,
        timeout: Duration,
    ) -> Result<HttpReply, TransportError>;
}

pub struct ReqwestTransport {
    client: reqwest::blocking::Client,
}

impl ReqwestTransport {
    pub fn new() -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .build()
            .map_err(|e| BackendError::InvalidSpec(format!("http client: {e}")))?;
        Ok(ReqwestTransport { client })
    }
}

impl HttpTransport for ReqwestTransport {
    fn post_json(
        &self,
        url: &str,
        bearer: Option<&str>,
        body: &Value,
        timeout: Duration,
    ) -> Result<HttpReply, TransportError> {
        let mut req = self.client.post(url).json(body).timeout(timeout);
        if let Some(token) = bearer {
            req = req.bearer_auth(token);
        }
        let classify = |e: reqwest::Error| {
            if e.is_timeout() {
                TransportError::Timeout
            } else {
                TransportError::Connect(e.to_string())
            }
        };
        let resp = req.send().map_err(classify)?;
        let status = resp.status().as_u16();
        let body = resp.text().map_err(classify)?;
        Ok(HttpReply { status, body })
    }
}

pub fn chat_request_body(model: &str, request: &ModelRequest) -> Value {
    let content: Vec<Value> = request
        .user_parts
        .iter()
        .map(|part| match part {
            UserPart::Text(text) => json!({"type": "text", "text": text}),
            UserPart::Image(img) => json!({
                "type": "image_url",
                "image_url": {
                    "url": format!("data:{};base64,{}", img.media_type, STANDARD.encode(&img.data))
                }
            }),
        })
        .collect();
    let mut messages = Vec::with_capacity(2);
    if !request.system_text.is_empty() {
        messages.push(json!({"role": "system", "content": request.system_text}));
    }
    messages.push(json!({"role": "user", "content": content}));
    json!({
        "model": model,
        "messages": messages,
        "temperature": request.decoding.temperature,
        "max_tokens": request.decoding.max_tokens,
    })
}

/// Extracts `choices[0].message.content`, accepting either a string or a
/// list of text parts.
pub fn parse_chat_response(body: &str) -> Result<String, BackendError> {
    let value: Value =
        serde_json::from_str(body).map_err(|e| BackendError::MalformedResponse(format!("body is not JSON: {e}")))?;
    let content = value
        .pointer("/choices/0/message/content")
        .ok_or_else(|| BackendError::MalformedResponse("missing choices[0].message.content".into()))?;
    match content {
        Value::String(s) => Ok(s.clone()),
        Value::Null => Ok(String::new()),
        Value::Array(parts) => Ok(parts
            .iter()
            .filter_map(|p| p.get("text").and_then(Value::as_str))
            .collect::<Vec<_>>()
            .join("")),
        other => Err(BackendError::MalformedResponse(format!(
            "unexpected content type: {other}"
        ))),
    }
}

fn snippet(body: &str) -> String {
    body.chars().take(200).collect()
}

pub struct HttpChatBackend {
    spec: BackendSpec,
    transport: Arc<dyn HttpTransport>,
}

impl HttpChatBackend {
    pub fn new(spec: BackendSpec, transport: Arc<dyn HttpTransport>) -> Self {
        HttpChatBackend { spec, transport }
    }

    fn credential(&self) -> Result<Option<String>, BackendError> {
        match &self.spec.api_key_ref {
            None => Ok(None),
            Some(var) => match env::var(var) {
                Ok(v) if !v.is_empty() => Ok(Some(v)),
                _ => Err(BackendError::MissingCredential(var.clone())),
            },
        }
    }
}

impl Backend for HttpChatBackend {
    fn id(&self) -> &str {
        &self.spec.id
    }

    fn supports_images(&self) -> bool {
        self.spec.supports_images
    }

    fn invoke(&self, request: &ModelRequest) -> Result<ModelResponse, BackendError> {
        request.validate()?;
        let token = self.credential()?;
        let body = chat_request_body(&self.spec.model_name, request);
        let timeout = self.spec.timeout();
        let started = Instant::now();
        let reply = self
            .transport
            .post_json(&self.spec.endpoint, token.as_deref(), &body, timeout)
            .map_err(|e| match e {
                TransportError::Timeout => BackendError::Timeout {
                    after_ms: timeout.as_millis() as u64,
                },
                TransportError::Connect(msg) => BackendError::ServerError {
                    status: None,
                    message: msg,
                },
            })?;
        let latency_ms = started.elapsed().as_millis() as u64;
        match reply.status {
            200..=299 => Ok(ModelResponse {
                text: parse_chat_response(&reply.body)?,
                latency_ms,
                backend_id: self.spec.id.clone(),
                from_cache: false,
            }),
            429 => Err(BackendError::RateLimited(snippet(&reply.body))),
            500..=599 => Err(BackendError::ServerError {
                status: Some(reply.status),
                message: snippet(&reply.body),
            }),
            status => Err(BackendError::ClientError {
                status,
                message: snippet(&reply.body),
            }),
        }
    }
}
