use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use tracing::debug;

use super::{Backend, BackendError, ModelRequest, ModelResponse};

pub const MAX_RETRY_DELAY_MS: u64 = 30_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetryPolicy {
    #[serde(default = "default_attempts")]
    pub max_attempts: u32,
    #[serde(default = "default_base_delay")]
    pub base_delay_ms: u64,
    #[serde(default = "default_backoff")]
    pub backoff_factor: f64,
}

fn default_attempts() -> u32 {
    3
}
fn default_base_delay() -> u64 {
    500
}
fn default_backoff() -> f64 {
    2.0
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: default_attempts(),
            base_delay_ms: default_base_delay(),
            backoff_factor: default_backoff(),
        }
    }
}

impl RetryPolicy {
    pub fn validate(&self) -> Result<(), String> {
        if self.max_attempts == 0 {
            return Err("retry.max_attempts must be at least 1".into());
        }
        if self.base_delay_ms == 0 {
            return Err("retry.base_delay_ms must be positive".into());
        }
        if self.backoff_factor.is_nan() || self.backoff_factor < 1.0 {
            return Err("retry.backoff_factor must be >= 1".into());
        }
        Ok(())
    }

    /// Delay after the given failed attempt (1-based), capped at 30 s.
    pub fn delay_ms(&self, attempt: u32) -> u64 {
        let exp = attempt.saturating_sub(1) as i32;
        let raw = self.base_delay_ms as f64 * self.backoff_factor.powi(exp);
        if raw.is_finite() {
            (raw.round() as u64).min(MAX_RETRY_DELAY_MS)
        } else {
            MAX_RETRY_DELAY_MS
        }
    }
}

/// Re-issues transient failures (timeouts, 429, 5xx) up to `max_attempts`
/// with exponential backoff; everything else surfaces on the first attempt.
pub struct Retrying<B> {
    inner: B,
    policy: RetryPolicy,
}

impl<B: Backend> Retrying<B> {
    pub fn new(inner: B, policy: RetryPolicy) -> Self {
        Retrying { inner, policy }
    }
}

impl<B: Backend> Backend for Retrying<B> {
    fn id(&self) -> &str {
        self.inner.id()
    }

    fn supports_images(&self) -> bool {
        self.inner.supports_images()
    }

    fn invoke(&self, request: &ModelRequest) -> Result<ModelResponse, BackendError> {
        let mut attempt = 1;
        loop {
            match self.inner.invoke(request) {
                Ok(resp) => return Ok(resp),
                Err(err) if err.is_retryable() && attempt < self.policy.max_attempts => {
                    let delay = self.policy.delay_ms(attempt);
                    debug!(backend = self.inner.id(), attempt, delay, %err, "retrying");
                    thread::sleep(Duration::from_millis(delay));
                    attempt += 1;
                }
                Err(err) => return Err(err),
            }
        }
    }
}
