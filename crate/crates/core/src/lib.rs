//! Routed sub-task pipeline for multimodal sarcasm detection: a commander
//! model picks analysis sub-tasks per sample, specialist backends produce
//! clues, and a classifier reads the assembled evidence.
//!
//! Most callers need [`RunConfig`], a [`DatasetManifest`] and
//! [`run_experiment`]; the modules expose the individual stages.

pub mod backends;
pub mod commander;
pub mod config;
pub mod datasets;
pub mod dispatch;
pub mod evaluation;
pub mod evidence;
pub mod experiment;
pub mod registry;
pub mod sample;

pub use backends::{Backend, BackendError, BackendKind, BackendSpec, DecodingParams, ModelRequest, ModelResponse};
pub use commander::{PlanSource, RoutingError, RoutingPlan};
pub use config::{ConfigError, RunConfig};
pub use datasets::{load_samples, DatasetError, DatasetManifest, LoadOptions, Split, SplitExpectation, SplitStats};
pub use dispatch::{CallCounts, Clue, ClueStatus, InvocationRecord};
pub use evaluation::{AblationConfig, ConfusionCounts, ExperimentReport, MetricsReport, ResultRow};
pub use evidence::{parse_label, EvidenceChain, ParseStatus, Prediction, PredictionRecord};
pub use experiment::{run_ablation_suite, run_experiment, ExperimentError, ExperimentRun};
pub use registry::{CapabilityCard, Registry, RoleClass, SubTaskKind};
pub use sample::{ImageRef, Label, Sample};
