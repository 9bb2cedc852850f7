//! Content-addressed response cache.
//!
//! Keys are SHA-256 digests of a canonical JSON rendering of the request:
//!
//! ```text
//! {"backend_id":..,"model_name":..,"system_text":..,
//!  "user_parts":[{"kind":"text","text":..} | {"kind":"image","media_type":..,"sha256":..}],
//!  "decoding":{"temperature":..,"max_tokens":..}}
//! ```
//!
//! compact, keys in exactly that order, UTF-8 unescaped. Each entry lives in
//! `<dir>/<key>.resp`. Writes go through a temp file and a no-clobber rename,
//! so the first persisted response for a key is the one every later reader
//! sees.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use super::{Backend, BackendError, BackendSpec, ModelRequest, ModelResponse, UserPart};

#[derive(Serialize)]
struct CanonicalRequest<'a> {
    backend_id: &'a str,
    model_name: &'a str,
    system_text: &'a str,
    user_parts: Vec<CanonicalPart<'a>>,
    decoding: CanonicalDecoding,
}

#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum CanonicalPart<'a> {
    Text { text: &'a str },
    Image { media_type: &'a str, sha256: String },
}

#[derive(Serialize)]
struct CanonicalDecoding {
    temperature: f64,
    max_tokens: u32,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// 64-char lowercase hex key for a request sent to a given backend/model.
pub fn cache_key(backend_id: &str, model_name: &str, request: &ModelRequest) -> String {
    let canonical = CanonicalRequest {
        backend_id,
        model_name,
        system_text: &request.system_text,
        user_parts: request
            .user_parts
            .iter()
            .map(|p| match p {
                UserPart::Text(text) => CanonicalPart::Text { text },
                UserPart::Image(img) => CanonicalPart::Image {
                    media_type: &img.media_type,
                    sha256: sha256_hex(&img.data),
                },
            })
            .collect(),
        decoding: CanonicalDecoding {
            temperature: request.decoding.temperature,
            max_tokens: request.decoding.max_tokens,
        },
    };
    let text = serde_json::to_string(&canonical).expect("canonical request serializes");
    sha256_hex(text.as_bytes())
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> BackendError {
    BackendError::CacheIo(format!("{}: {e}", path.display()))
}

#[derive(Debug, Clone)]
pub struct CacheStore {
    dir: PathBuf,
}

impl CacheStore {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self, BackendError> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        Ok(CacheStore { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn entry_path(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.resp"))
    }

    pub fn get(&self, key: &str) -> Result<Option<ModelResponse>, BackendError> {
        let path = self.entry_path(key);
        match fs::read(&path) {
            Ok(bytes) => serde_json::from_slice(&bytes).map(Some).map_err(|e| io_err(&path, e)),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(io_err(&path, e)),
        }
    }

    /// Persists `response` unless an entry already exists; returns whichever
    /// response ends up stored.
    pub fn put(&self, key: &str, response: &ModelResponse) -> Result<ModelResponse, BackendError> {
        let path = self.entry_path(key);
        let mut stored = response.clone();
        stored.from_cache = false;
        let bytes = serde_json::to_vec(&stored).map_err(|e| io_err(&path, e))?;
        let mut tmp = tempfile::Builder::new()
            .prefix(".tmp-")
            .tempfile_in(&self.dir)
            .map_err(|e| io_err(&self.dir, e))?;
        tmp.write_all(&bytes).map_err(|e| io_err(tmp.path(), e))?;
        tmp.as_file().sync_all().map_err(|e| io_err(tmp.path(), e))?;
        match tmp.persist_noclobber(&path) {
            Ok(_) => Ok(stored),
            Err(e) if e.error.kind() == io::ErrorKind::AlreadyExists => self
                .get(key)?
                .ok_or_else(|| io_err(&path, "entry vanished after collision")),
            Err(e) => Err(io_err(&path, e.error)),
        }
    }

    pub fn keys(&self) -> Result<Vec<String>, BackendError> {
        let mut keys = Vec::new();
        for entry in fs::read_dir(&self.dir).map_err(|e| io_err(&self.dir, e))? {
            let entry = entry.map_err(|e| io_err(&self.dir, e))?;
            let name = entry.file_name();
            if let Some(key) = name.to_str().and_then(|n| n.strip_suffix(".resp")) {
                keys.push(key.to_string());
            }
        }
        keys.sort();
        Ok(keys)
    }

    pub fn len(&self) -> Result<usize, BackendError> {
        self.keys().map(|k| k.len())
    }

    pub fn is_empty(&self) -> Result<bool, BackendError> {
        self.len().map(|n| n == 0)
    }

    /// Removes every entry; returns how many were removed.
    pub fn clear(&self) -> Result<usize, BackendError> {
        let keys = self.keys()?;
        for key in &keys {
            let path = self.entry_path(key);
            fs::remove_file(&path).map_err(|e| io_err(&path, e))?;
        }
        Ok(keys.len())
    }
}

/// Returns a copy of `spec` whose connections consult `store` first.
pub fn with_cache(spec: &BackendSpec, store: &CacheStore) -> BackendSpec {
    BackendSpec {
        cache: Some(store.dir().to_path_buf()),
        ..spec.clone()
    }
}

pub struct CachedBackend<B> {
    inner: B,
    store: CacheStore,
    model_name: String,
}

impl<B: Backend> CachedBackend<B> {
    pub fn new(inner: B, store: CacheStore, model_name: String) -> Self {
        CachedBackend {
            inner,
            store,
            model_name,
        }
    }
}

impl<B: Backend> Backend for CachedBackend<B> {
    fn id(&self) -> &str {
        self.inner.id()
    }

    fn supports_images(&self) -> bool {
        self.inner.supports_images()
    }

    fn invoke(&self, request: &ModelRequest) -> Result<ModelResponse, BackendError> {
        let key = cache_key(self.inner.id(), &self.model_name, request);
        if let Some(mut hit) = self.store.get(&key)? {
            hit.from_cache = true;
            return Ok(hit);
        }
        let fresh = self.inner.invoke(request)?;
        let mut stored = self.store.put(&key, &fresh)?;
        stored.latency_ms = fresh.latency_ms;
        stored.from_cache = false;
        Ok(stored)
    }
}
