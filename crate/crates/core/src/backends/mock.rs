//! Scripted, deterministic stand-in for a model endpoint.
//!
//! A script is an ordered list of rules; the first rule whose regex matches
//! the request haystack (system text, user text parts, and image bytes read
//! as lossy UTF-8) decides the reply or the injected fault.

use std::thread;
use std::time::{Duration, Instant};

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::{Backend, BackendError, BackendSpec, ModelRequest, ModelResponse, UserPart};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MockFault {
    Timeout,
    RateLimited,
    ServerError,
    ClientError,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockRule {
    pub pattern: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fault: Option<MockFault>,
    /// Simulated latency. A delay at or beyond the backend timeout yields a
    /// timeout after sleeping for the timeout.
    #[serde(default, skip_serializing_if = "is_zero")]
    pub delay_ms: u64,
}

fn is_zero(v: &u64) -> bool {
    *v == 0
}

impl MockRule {
    pub fn reply(pattern: impl Into<String>, response: impl Into<String>) -> Self {
        MockRule {
            pattern: pattern.into(),
            response: Some(response.into()),
            fault: None,
            delay_ms: 0,
        }
    }

    pub fn fail(pattern: impl Into<String>, fault: MockFault) -> Self {
        MockRule {
            pattern: pattern.into(),
            response: None,
            fault: Some(fault),
            delay_ms: 0,
        }
    }

    pub fn delayed(mut self, delay_ms: u64) -> Self {
        self.delay_ms = delay_ms;
        self
    }
}

pub struct MockBackend {
    id: String,
    rules: Vec<(Regex, MockRule)>,
    timeout: Duration,
    supports_images: bool,
}

impl MockBackend {
    pub fn new(spec: &BackendSpec) -> Result<Self, BackendError> {
        let mut rules = Vec::with_capacity(spec.script.len());
        for rule in &spec.script {
            let re = Regex::new(&rule.pattern).map_err(|e| {
                BackendError::InvalidSpec(format!("backend `{}`: bad pattern `{}`: {e}", spec.id, rule.pattern))
            })?;
            if rule.response.is_none() && rule.fault.is_none() {
                return Err(BackendError::InvalidSpec(format!(
                    "backend `{}`: rule `{}` has neither response nor fault",
                    spec.id, rule.pattern
                )));
            }
            rules.push((re, rule.clone()));
        }
        Ok(MockBackend {
            id: spec.id.clone(),
            rules,
            timeout: spec.timeout(),
            supports_images: spec.supports_images,
        })
    }

    fn haystack(request: &ModelRequest) -> String {
        let mut out = request.system_text.clone();
        for part in &request.user_parts {
            out.push('\n');
            match part {
                UserPart::Text(t) => out.push_str(t),
                UserPart::Image(img) => out.push_str(&String::from_utf8_lossy(&img.data)),
            }
        }
        out
    }
}

impl Backend for MockBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn supports_images(&self) -> bool {
        self.supports_images
    }

    fn invoke(&self, request: &ModelRequest) -> Result<ModelResponse, BackendError> {
        request.validate()?;
        let started = Instant::now();
        let haystack = Self::haystack(request);
        let (_, rule) = self
            .rules
            .iter()
            .find(|(re, _)| re.is_match(&haystack))
            .ok_or_else(|| BackendError::ScriptMiss {
                backend: self.id.clone(),
            })?;

        let timeout_ms = self.timeout.as_millis() as u64;
        if rule.delay_ms >= timeout_ms {
            thread::sleep(self.timeout);
            return Err(BackendError::Timeout { after_ms: timeout_ms });
        }
        if rule.delay_ms > 0 {
            thread::sleep(Duration::from_millis(rule.delay_ms));
        }
        if let Some(fault) = rule.fault {
            return Err(match fault {
                MockFault::Timeout => BackendError::Timeout { after_ms: timeout_ms },
                MockFault::RateLimited => BackendError::RateLimited("scripted".into()),
                MockFault::ServerError => BackendError::ServerError {
                    status: Some(500),
                    message: "scripted".into(),
                },
                MockFault::ClientError => BackendError::ClientError {
                    status: 400,
                    message: "scripted".into(),
                },
            });
        }
        Ok(ModelResponse {
            text: rule.response.clone().unwrap_or_default(),
            latency_ms: started.elapsed().as_millis() as u64,
            backend_id: self.id.clone(),
            from_cache: false,
        })
    }
}
