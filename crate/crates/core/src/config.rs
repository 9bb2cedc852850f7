//! Run configuration, read from a single TOML file.
//!
//! ```toml
//! commander = "commander"          # backend id for routing
//! classifier = "classifier"        # backend id for the final verdict
//! subtask_backend = "specialist"   # default binding for every sub-task
//! workers = 4                      # in-flight model calls (execution only)
//! timeout_ms = 60000               # per call, for backends without their own
//! cache_dir = "cache"              # response cache (execution only)
//! commander_sees_image = true
//! classifier_sees_image = true
//! text_only = false
//! ablate = ["Rhetoric"]
//! mandatory = ["Keyword", "Sentiment", "Img-sum"]   # optional override
//! forced_plan = ["Keyword"]                         # optional, skips routing
//!
//! [decoding]
//! temperature = 0.0
//! max_tokens = 512
//!
//! [retry]
//! max_attempts = 3
//! base_delay_ms = 500
//! backoff_factor = 2.0
//!
//! [subtasks.Rhetoric]
//! backend = "rhetoric-model"
//! description = "..."
//! mandatory = false
//! template = "... {description} ..."
//!
//! [[backends]]
//! id = "commander"
//! kind = "http_chat"
//! endpoint = "https://host/v1/chat/completions"
//! model_name = "gpt-4o"
//! api_key_ref = "OPENAI_API_KEY"
//! ```
//!
//! Credentials are never stored here; `api_key_ref` names an environment
//! variable that is read at call time.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{sha256_hex, BackendError, BackendSpec, DecodingParams, RetryPolicy};
use crate::commander::RoutingOptions;
use crate::dispatch::SubtaskPrompts;
use crate::registry::{apply_ablation, default_registry, Registry, RegistryError, RoleClass, SubTaskKind};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid configuration: {0}")]
    Parse(String),
    #[error("backend `{id}` referenced by {referenced_by} is not defined")]
    UndefinedBackend { id: String, referenced_by: String },
    #[error("backend `{0}` is defined more than once")]
    DuplicateBackend(String),
    #[error("workers must be at least 1")]
    InvalidWorkers,
    #[error("timeout_ms must be positive")]
    InvalidTimeout,
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Registry(#[from] RegistryError),
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubtaskBinding {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backend: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mandatory: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template: Option<String>,
}

fn default_true() -> bool {
    true
}

fn default_workers() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub commander: String,
    pub classifier: String,
    #[serde(default)]
    pub subtask_backend: Option<String>,
    #[serde(default)]
    pub subtasks: BTreeMap<SubTaskKind, SubtaskBinding>,
    #[serde(default)]
    pub mandatory: Option<BTreeSet<SubTaskKind>>,
    #[serde(default)]
    pub forced_plan: Option<BTreeSet<SubTaskKind>>,
    #[serde(default = "default_true")]
    pub commander_sees_image: bool,
    #[serde(default = "default_true")]
    pub classifier_sees_image: bool,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default)]
    pub timeout_ms: Option<u64>,
    #[serde(default)]
    pub retry: Option<RetryPolicy>,
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
    #[serde(default)]
    pub ablate: BTreeSet<SubTaskKind>,
    #[serde(default)]
    pub text_only: bool,
    #[serde(default)]
    pub decoding: DecodingParams,
    #[serde(default)]
    pub backends: Vec<BackendSpec>,
}

/// Position and message only. The default rendering quotes the offending
/// source line, which may hold a pasted credential.
fn parse_message(text: &str, e: &toml::de::Error) -> String {
    match e.span() {
        Some(span) => {
            let before = &text[..span.start.min(text.len())];
            let line = before.matches('\n').count() + 1;
            let column = before.len() - before.rfind('\n').map_or(0, |i| i + 1) + 1;
            format!("line {line}, column {column}: {}", e.message())
        }
        None => e.message().to_string(),
    }
}

impl RunConfig {
    /// A config with the given commander/classifier/sub-task bindings and no
    /// optional settings.
    pub fn new(commander: impl Into<String>, classifier: impl Into<String>, backends: Vec<BackendSpec>) -> Self {
        RunConfig {
            commander: commander.into(),
            classifier: classifier.into(),
            subtask_backend: None,
            subtasks: BTreeMap::new(),
            mandatory: None,
            forced_plan: None,
            commander_sees_image: true,
            classifier_sees_image: true,
            workers: default_workers(),
            timeout_ms: None,
            retry: None,
            cache_dir: None,
            ablate: BTreeSet::new(),
            text_only: false,
            decoding: DecodingParams::default(),
            backends,
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let config: RunConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(parse_message(text, &e)))?;
        config.validate()?;
        Ok(config)
    }

    /// Loads and validates; a relative `cache_dir` is resolved against the
    /// config file's directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut config = Self::from_toml_str(&text)?;
        if let (Some(dir), Some(base)) = (&config.cache_dir, path.parent()) {
            if dir.is_relative() {
                config.cache_dir = Some(base.join(dir));
            }
        }
        Ok(config)
    }

    pub fn backend(&self, id: &str) -> Option<&BackendSpec> {
        self.backends.iter().find(|b| b.id == id)
    }

    /// Backend id bound to a sub-task kind.
    pub fn subtask_backend_id(&self, kind: SubTaskKind) -> String {
        self.subtasks
            .get(&kind)
            .and_then(|b| b.backend.clone())
            .or_else(|| self.subtask_backend.clone())
            .unwrap_or_else(|| kind.slug().to_string())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.workers == 0 {
            return Err(ConfigError::InvalidWorkers);
        }
        if self.timeout_ms == Some(0) {
            return Err(ConfigError::InvalidTimeout);
        }
        if let Some(policy) = &self.retry {
            policy
                .validate()
                .map_err(|e| ConfigError::Parse(format!("retry: {e}")))?;
        }
        let mut seen = BTreeSet::new();
        for spec in &self.backends {
            if !seen.insert(spec.id.as_str()) {
                return Err(ConfigError::DuplicateBackend(spec.id.clone()));
            }
            spec.validate()?;
        }
        let mut references = vec![
            (self.commander.clone(), "commander".to_string()),
            (self.classifier.clone(), "classifier".to_string()),
        ];
        for kind in self.registry()?.kinds() {
            references.push((self.subtask_backend_id(kind), format!("sub-task {kind}")));
        }
        for (id, referenced_by) in references {
            if self.backend(&id).is_none() {
                return Err(ConfigError::UndefinedBackend { id, referenced_by });
            }
        }
        Ok(())
    }

    /// The active registry: bindings and overrides applied, then ablation,
    /// then the text-only restriction.
    pub fn registry(&self) -> Result<Registry, ConfigError> {
        let mut cards = Vec::new();
        for base in default_registry().cards() {
            let mut card = base.clone();
            card.backend_id = self.subtask_backend_id(card.kind);
            if let Some(binding) = self.subtasks.get(&card.kind) {
                if let Some(d) = &binding.description {
                    card.description = d.clone();
                }
                if let Some(m) = binding.mandatory {
                    card.mandatory = m;
                }
            }
            if let Some(set) = &self.mandatory {
                card.mandatory = set.contains(&card.kind);
            }
            cards.push(card);
        }
        let full = Registry::from_cards(cards)?;
        let ablated = apply_ablation(&full, &self.ablate);
        Ok(if self.text_only {
            ablated.restrict_to(RoleClass::Text)
        } else {
            ablated
        })
    }

    pub fn prompts(&self) -> SubtaskPrompts {
        self.subtasks
            .iter()
            .filter_map(|(kind, b)| b.template.as_ref().map(|t| (*kind, t)))
            .fold(SubtaskPrompts::default(), |p, (kind, t)| {
                p.with_override(kind, t.clone())
            })
    }

    pub fn routing_options(&self) -> RoutingOptions {
        RoutingOptions {
            commander_sees_image: self.commander_sees_image,
            decoding: self.decoding,
            forced: self.forced_plan.clone(),
        }
    }

    /// Backend specs with the run-wide timeout and cache applied.
    pub fn effective_backends(&self) -> Vec<BackendSpec> {
        self.backends
            .iter()
            .map(|spec| {
                let mut spec = spec.clone();
                if spec.timeout_ms.is_none() {
                    spec.timeout_ms = self.timeout_ms;
                }
                if let Some(dir) = &self.cache_dir {
                    spec.cache = Some(dir.clone());
                }
                spec
            })
            .collect()
    }

    pub fn with_ablation(&self, disabled: BTreeSet<SubTaskKind>) -> Self {
        RunConfig {
            ablate: disabled,
            ..self.clone()
        }
    }

    /// SHA-256 over the canonical JSON form of every field that can affect
    /// results. `workers` and `cache_dir` only change how a run executes, so
    /// they are left out.
    pub fn digest(&self) -> String {
        let mut canonical = self.clone();
        canonical.workers = 0;
        canonical.cache_dir = None;
        let value = serde_json::to_value(&canonical).expect("config serializes");
        sha256_hex(value.to_string().as_bytes())
    }
}
