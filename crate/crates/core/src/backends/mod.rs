//! Uniform invocation of model backends.
//!
//! Every model call in the pipeline goes through [`Backend::invoke`]. Concrete
//! adapters speak to an HTTP chat-completion endpoint, a local command, or a
//! scripted mock; wrappers layer retries, a concurrency gate, call counting
//! and the content-addressed response cache on top.

mod cache;
mod http;
mod local;
mod mock;
mod retry;
mod wrappers;

use std::fmt;
use std::path::PathBuf;
use std::sync::atomic::AtomicU64;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use cache::{cache_key, sha256_hex, with_cache, CacheStore, CachedBackend};
pub use http::{
    chat_request_body, parse_chat_response, HttpChatBackend, HttpReply, HttpTransport, ReqwestTransport, TransportError,
};
pub use local::LocalCommandBackend;
pub use mock::{MockBackend, MockFault, MockRule};
pub use retry::{RetryPolicy, Retrying, MAX_RETRY_DELAY_MS};
pub use wrappers::{ConcurrencyGate, CountingBackend, GatedBackend};

pub const DEFAULT_TIMEOUT_MS: u64 = 60_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodingParams {
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
}

fn default_max_tokens() -> u32 {
    512
}

impl Default for DecodingParams {
    fn default() -> Self {
        DecodingParams {
            temperature: 0.0,
            max_tokens: default_max_tokens(),
        }
    }
}

#[derive(Clone, PartialEq, Eq)]
pub struct ImagePart {
    pub media_type: String,
    pub data: Vec<u8>,
}

impl fmt::Debug for ImagePart {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ImagePart")
            .field("media_type", &self.media_type)
            .field("bytes", &self.data.len())
            .finish()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum UserPart {
    Text(String),
    Image(ImagePart),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelRequest {
    pub system_text: String,
    pub user_parts: Vec<UserPart>,
    pub decoding: DecodingParams,
}

impl ModelRequest {
    pub fn validate(&self) -> Result<(), BackendError> {
        if self.user_parts.is_empty() {
            return Err(BackendError::InvalidRequest("request has no user parts".into()));
        }
        if self.image_parts().count() > 1 {
            return Err(BackendError::InvalidRequest(
                "request carries more than one image".into(),
            ));
        }
        if self.decoding.temperature.is_nan() || self.decoding.temperature < 0.0 || self.decoding.max_tokens == 0 {
            return Err(BackendError::InvalidRequest(format!(
                "invalid decoding parameters {:?}",
                self.decoding
            )));
        }
        Ok(())
    }

    pub fn image_parts(&self) -> impl Iterator<Item = &ImagePart> {
        self.user_parts.iter().filter_map(|p| match p {
            UserPart::Image(img) => Some(img),
            UserPart::Text(_) => None,
        })
    }

    pub fn has_image(&self) -> bool {
        self.image_parts().next().is_some()
    }

    /// Concatenated text of all user text parts.
    pub fn user_text(&self) -> String {
        self.user_parts
            .iter()
            .filter_map(|p| match p {
                UserPart::Text(t) => Some(t.as_str()),
                UserPart::Image(_) => None,
            })
            .collect::<Vec<_>>()
            .join("\n")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelResponse {
    pub text: String,
    pub latency_ms: u64,
    pub backend_id: String,
    pub from_cache: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    HttpChat,
    LocalCommand,
    Mock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendSpec {
    pub id: String,
    pub kind: BackendKind,
    /// URL for `http_chat`, shell command line for `local_command`.
    #[serde(default)]
    pub endpoint: String,
    #[serde(default)]
    pub model_name: String,
    /// Name of the environment variable holding the bearer token.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key_ref: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default_decoding: Option<DecodingParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retry: Option<RetryPolicy>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timeout_ms: Option<u64>,
    /// Whether image parts are forwarded to this backend.
    #[serde(default = "default_true")]
    pub supports_images: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub script: Vec<MockRule>,
    /// Response cache directory; set through [`with_cache`].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache: Option<PathBuf>,
}

fn default_true() -> bool {
    true
}

impl BackendSpec {
    pub fn mock(id: impl Into<String>, script: Vec<MockRule>) -> Self {
        BackendSpec {
            id: id.into(),
            kind: BackendKind::Mock,
            endpoint: String::new(),
            model_name: String::new(),
            api_key_ref: None,
            default_decoding: None,
            retry: None,
            timeout_ms: None,
            supports_images: true,
            script,
            cache: None,
        }
    }

    pub fn http_chat(id: impl Into<String>, endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        BackendSpec {
            kind: BackendKind::HttpChat,
            endpoint: endpoint.into(),
            model_name: model.into(),
            ..BackendSpec::mock(id, Vec::new())
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        let invalid = |msg: String| Err(BackendError::InvalidSpec(format!("backend `{}`: {msg}", self.id)));
        if self.id.trim().is_empty() {
            return Err(BackendError::InvalidSpec("backend id is empty".into()));
        }
        match self.kind {
            BackendKind::HttpChat => {
                if self.endpoint.trim().is_empty() {
                    return invalid("http_chat requires an endpoint".into());
                }
                if self.model_name.trim().is_empty() {
                    return invalid("http_chat requires a model_name".into());
                }
            }
            BackendKind::LocalCommand => {
                if self.endpoint.trim().is_empty() {
                    return invalid("local_command requires a command in `endpoint`".into());
                }
            }
            BackendKind::Mock => {
                if self.script.is_empty() {
                    return invalid("mock backend has an empty script".into());
                }
            }
        }
        if self.timeout_ms == Some(0) {
            return invalid("timeout_ms must be positive".into());
        }
        if let Some(policy) = &self.retry {
            policy
                .validate()
                .map_err(|e| BackendError::InvalidSpec(format!("backend `{}`: {e}", self.id)))?;
        }
        Ok(())
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_millis(self.timeout_ms.unwrap_or(DEFAULT_TIMEOUT_MS))
    }

    pub fn decoding(&self) -> DecodingParams {
        self.default_decoding.unwrap_or_default()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BackendError {
    #[error("timed out after {after_ms} ms")]
    Timeout { after_ms: u64 },
    #[error("rate limited (HTTP 429): {0}")]
    RateLimited(String),
    #[error("server error{}: {message}", status.map(|s| format!(" (HTTP {s})")).unwrap_or_default())]
    ServerError { status: Option<u16>, message: String },
    #[error("client error (HTTP {status}): {message}")]
    ClientError { status: u16, message: String },
    #[error("credential environment variable `{0}` is not set")]
    MissingCredential(String),
    #[error("mock backend `{backend}` has no rule matching the request")]
    ScriptMiss { backend: String },
    #[error("malformed backend response: {0}")]
    MalformedResponse(String),
    #[error("command failed to start: {0}")]
    CommandFailed(String),
    #[error("invalid backend spec: {0}")]
    InvalidSpec(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("cache I/O error: {0}")]
    CacheIo(String),
}

impl BackendError {
    /// Transient failures worth another attempt.
    pub fn is_retryable(&self) -> bool {
        matches!(
            self,
            BackendError::Timeout { .. } | BackendError::RateLimited(_) | BackendError::ServerError { .. }
        )
    }
}

pub trait Backend: Send + Sync {
    fn id(&self) -> &str;

    /// Whether image parts should be forwarded to this backend.
    fn supports_images(&self) -> bool {
        true
    }

    fn invoke(&self, request: &ModelRequest) -> Result<ModelResponse, BackendError>;
}

impl<B: Backend + ?Sized> Backend for Arc<B> {
    fn id(&self) -> &str {
        (**self).id()
    }

    fn supports_images(&self) -> bool {
        (**self).supports_images()
    }

    fn invoke(&self, request: &ModelRequest) -> Result<ModelResponse, BackendError> {
        (**self).invoke(request)
    }
}

/// Extra plumbing threaded into [`connect_with`].
#[derive(Clone, Default)]
pub struct ConnectOptions {
    /// Incremented once per underlying attempt (below cache and retries).
    pub counter: Option<Arc<AtomicU64>>,
    pub gate: Option<Arc<ConcurrencyGate>>,
    pub transport: Option<Arc<dyn HttpTransport>>,
    /// Retry policy used when the spec carries none.
    pub default_retry: Option<RetryPolicy>,
}

/// Builds the full wrapper stack for a spec:
/// cache → gate → retries → counter → adapter.
pub fn connect_with(spec: &BackendSpec, opts: &ConnectOptions) -> Result<Arc<dyn Backend>, BackendError> {
    spec.validate()?;
    let raw: Arc<dyn Backend> = match spec.kind {
        BackendKind::Mock => Arc::new(MockBackend::new(spec)?),
        BackendKind::LocalCommand => Arc::new(LocalCommandBackend::new(spec)),
        BackendKind::HttpChat => {
            let transport = match &opts.transport {
                Some(t) => t.clone(),
                None => Arc::new(ReqwestTransport::new()?),
            };
            Arc::new(HttpChatBackend::new(spec.clone(), transport))
        }
    };
    let counted: Arc<dyn Backend> = match &opts.counter {
        Some(counter) => Arc::new(CountingBackend::new(raw, counter.clone())),
        None => raw,
    };
    let policy = spec.retry.or(opts.default_retry).unwrap_or_default();
    let retrying: Arc<dyn Backend> = Arc::new(Retrying::new(counted, policy));
    let gated: Arc<dyn Backend> = match &opts.gate {
        Some(gate) => Arc::new(GatedBackend::new(retrying, gate.clone())),
        None => retrying,
    };
    match &spec.cache {
        Some(dir) => {
            let store = CacheStore::open(dir)?;
            Ok(Arc::new(CachedBackend::new(gated, store, spec.model_name.clone())))
        }
        None => Ok(gated),
    }
}

pub fn connect(spec: &BackendSpec) -> Result<Arc<dyn Backend>, BackendError> {
    connect_with(spec, &ConnectOptions::default())
}

/// One-shot invocation of a backend described by `spec`.
pub fn invoke(spec: &BackendSpec, request: &ModelRequest) -> Result<ModelResponse, BackendError> {
    connect(spec)?.invoke(request)
}
