//! Adapter for specialist models wrapped as local commands.
//!
//! The command runs under `sh -c`, receives the chat-completion request body
//! as JSON on stdin and replies with plain text on stdout. A non-zero exit is
//! treated as a transient server error.

use std::io::{Read, Write};
use std::process::{Command, Stdio};
use std::thread;
use std::time::Instant;

use wait_timeout::ChildExt;

use super::{chat_request_body, Backend, BackendError, BackendSpec, ModelRequest, ModelResponse};

pub struct LocalCommandBackend {
    spec: BackendSpec,
}

impl LocalCommandBackend {
    pub fn new(spec: &BackendSpec) -> Self {
        LocalCommandBackend { spec: spec.clone() }
    }
}

impl Backend for LocalCommandBackend {
    fn id(&self) -> &str {
        &self.spec.id
    }

    fn supports_images(&self) -> bool {
        self.spec.supports_images
    }

    fn invoke(&self, request: &ModelRequest) -> Result<ModelResponse, BackendError> {
        request.validate()?;
        let payload = serde_json::to_vec(&chat_request_body(&self.spec.model_name, request))
            .map_err(|e| BackendError::InvalidRequest(e.to_string()))?;
        let started = Instant::now();
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(&self.spec.endpoint)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| BackendError::CommandFailed(format!("{}: {e}", self.spec.endpoint)))?;

        let mut stdin = child.stdin.take().expect("stdin piped");
        let writer = thread::spawn(move || {
            // The command may exit without draining stdin; a broken pipe is fine.
            let _ = stdin.write_all(&payload);
        });
        let mut stdout = child.stdout.take().expect("stdout piped");
        let reader = thread::spawn(move || {
            let mut buf = Vec::new();
            stdout.read_to_end(&mut buf).map(|_| buf)
        });
        let mut stderr = child.stderr.take().expect("stderr piped");
        let err_reader = thread::spawn(move || {
            let mut buf = String::new();
            let _ = stderr.read_to_string(&mut buf);
            buf
        });

        let timeout = self.spec.timeout();
        let status = match child.wait_timeout(timeout) {
            Ok(Some(status)) => status,
            Ok(None) => {
                let _ = child.kill();
                let _ = child.wait();
                return Err(BackendError::Timeout {
                    after_ms: timeout.as_millis() as u64,
                });
            }
            Err(e) => {
                return Err(BackendError::ServerError {
                    status: None,
                    message: e.to_string(),
                })
            }
        };
        let _ = writer.join();
        let out = reader
            .join()
            .expect("stdout reader panicked")
            .map_err(|e| BackendError::ServerError {
                status: None,
                message: e.to_string(),
            })?;
        let err_text = err_reader.join().unwrap_or_default();
        if !status.success() {
            return Err(BackendError::ServerError {
                status: None,
                message: format!("command exited with {status}: {}", err_text.trim()),
            });
        }
        Ok(ModelResponse {
            text: String::from_utf8_lossy(&out).trim().to_string(),
            latency_ms: started.elapsed().as_millis() as u64,
            backend_id: self.spec.id.clone(),
            from_cache: false,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{BackendKind, DecodingParams, UserPart};

    fn spec(cmd: &str) -> BackendSpec {
        BackendSpec {
            kind: BackendKind::LocalCommand,
            endpoint: cmd.into(),
            ..BackendSpec::mock("local", Vec::new())
        }
    }

    fn req() -> ModelRequest {
        ModelRequest {
            system_text: "Extract keywords.".into(),
            user_parts: vec![UserPart::Text("welcome center".into())],
            decoding: DecodingParams::default(),
        }
    }

    #[test]
    fn stdout_is_the_reply() {
        let b = LocalCommandBackend::new(&spec("cat >/dev/null; echo ' welcome, center '"));
        assert_eq!(b.invoke(&req()).unwrap().text, "welcome, center");
    }

    #[test]
    fn request_arrives_on_stdin() {
        let b = LocalCommandBackend::new(&spec("grep -o 'welcome center'"));
        assert_eq!(b.invoke(&req()).unwrap().text, "welcome center");
    }

    #[test]
    fn nonzero_exit_is_server_error() {
        let b = LocalCommandBackend::new(&spec("echo boom >&2; exit 3"));
        match b.invoke(&req()) {
            Err(BackendError::ServerError { message, .. }) => assert!(message.contains("boom")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn slow_command_times_out() {
        let mut s = spec("sleep 5");
        s.timeout_ms = Some(100);
        let b = LocalCommandBackend::new(&s);
        assert_eq!(b.invoke(&req()), Err(BackendError::Timeout { after_ms: 100 }));
    }
}
