//! End-to-end runs: route, dispatch, classify and score every sample.
//!
//! Samples are processed by `workers` threads; every model call, including
//! sub-task fan-out, passes through one shared gate of the same size. Results
//! are gathered by manifest position, so output never depends on scheduling.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Instant;

use thiserror::Error;

use crate::backends::{connect_with, Backend, ConcurrencyGate, ConnectOptions, HttpTransport};
use crate::commander::{route, PlanSource, RoutingError, RoutingOptions, RoutingPlan};
use crate::config::{ConfigError, RunConfig};
use crate::datasets::{strip_images, DatasetManifest};
use crate::dispatch::{call_stats, execute_plan, BackendMap, DispatchContext, InvocationRecord, SubtaskPrompts};
use crate::evaluation::{metrics, score, AblationConfig, ExperimentReport, SampleFailure};
use crate::evidence::{assemble_chain, classify, EvidenceError, ParseStatus, Prediction, PredictionRecord};
use crate::registry::Registry;
use crate::sample::Sample;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
}

/// Optional hooks for tests and embedding.
#[derive(Clone, Default)]
pub struct ExperimentOptions {
    pub transport: Option<Arc<dyn HttpTransport>>,
}

/// A finished run: the report plus the artifacts written next to it.
#[derive(Debug, Clone)]
pub struct ExperimentRun {
    pub report: ExperimentReport,
    pub plans: Vec<RoutingPlan>,
    pub calls: Vec<InvocationRecord>,
    /// Attempts that reached an adapter (below cache and retries).
    pub underlying_invocations: u64,
}

impl ExperimentRun {
    pub fn has_backend_exhaustion(&self) -> bool {
        self.report.failures.iter().any(|f| f.cause == "backend_exhausted")
    }
}

struct Pipeline<'a> {
    registry: Registry,
    backends: BackendMap,
    commander: Arc<dyn Backend>,
    classifier: Arc<dyn Backend>,
    prompts: SubtaskPrompts,
    routing: RoutingOptions,
    config: &'a RunConfig,
}

#[derive(Default)]
struct SampleOutcome {
    plan: Option<RoutingPlan>,
    calls: Vec<InvocationRecord>,
    prediction: Option<Prediction>,
    failure: Option<SampleFailure>,
}

fn failure(sample: &Sample, stage: &str, cause: &str, reason: String) -> SampleFailure {
    SampleFailure {
        sample_id: sample.id.clone(),
        stage: stage.into(),
        cause: cause.into(),
        reason,
    }
}

impl Pipeline<'_> {
    fn run_sample(&self, sample: &Sample) -> SampleOutcome {
        let mut out = SampleOutcome::default();
        let plan = match route(sample, &self.registry, self.commander.as_ref(), &self.routing) {
            Ok(plan) => plan,
            Err(e) => {
                let cause = match e {
                    RoutingError::BackendExhausted(_) => "backend_exhausted",
                    RoutingError::ImageUnavailable { .. } => "image_unavailable",
                    _ => "invalid_input",
                };
                out.failure = Some(failure(sample, "routing", cause, e.to_string()));
                return out;
            }
        };
        let ctx = DispatchContext {
            registry: &self.registry,
            backends: &self.backends,
            prompts: &self.prompts,
            decoding: self.config.decoding,
            log: None,
        };
        let clues = execute_plan(sample, &plan, &ctx);
        out.calls = clues
            .iter()
            .map(|c| InvocationRecord::from_clue(&sample.id, c))
            .collect();
        out.plan = Some(plan);
        let result = assemble_chain(sample, clues).and_then(|chain| {
            classify(
                &chain,
                self.classifier.as_ref(),
                self.config.classifier_sees_image,
                self.config.decoding,
            )
        });
        match result {
            Ok(p) => out.prediction = Some(p),
            Err(e) => {
                let cause = match e {
                    EvidenceError::BackendExhausted(_) => "backend_exhausted",
                    EvidenceError::ImageUnavailable { .. } => "image_unavailable",
                    _ => "invalid_input",
                };
                out.failure = Some(failure(sample, "classification", cause, e.to_string()));
            }
        }
        out
    }
}

fn connect_all(
    config: &RunConfig,
    opts: &ExperimentOptions,
    counter: &Arc<AtomicU64>,
) -> Result<BTreeMap<String, Arc<dyn Backend>>, ConfigError> {
    let connect = ConnectOptions {
        counter: Some(counter.clone()),
        gate: Some(Arc::new(ConcurrencyGate::new(config.workers))),
        transport: opts.transport.clone(),
        default_retry: config.retry,
    };
    let mut map = BTreeMap::new();
    for spec in config.effective_backends() {
        map.insert(spec.id.clone(), connect_with(&spec, &connect)?);
    }
    Ok(map)
}

pub fn run_experiment(manifest: &DatasetManifest, config: &RunConfig) -> Result<ExperimentRun, ExperimentError> {
    run_experiment_with(manifest, config, &ExperimentOptions::default())
}

pub fn run_experiment_with(
    manifest: &DatasetManifest,
    config: &RunConfig,
    opts: &ExperimentOptions,
) -> Result<ExperimentRun, ExperimentError> {
    config.validate()?;
    let started = Instant::now();
    let stripped;
    let manifest = if config.text_only {
        stripped = strip_images(manifest);
        &stripped
    } else {
        manifest
    };

    let counter = Arc::new(AtomicU64::new(0));
    let all = connect_all(config, opts, &counter)?;
    let pipeline = Pipeline {
        registry: config.registry()?,
        commander: all[&config.commander].clone(),
        classifier: all[&config.classifier].clone(),
        backends: all,
        prompts: config.prompts(),
        routing: config.routing_options(),
        config,
    };

    let samples = &manifest.samples;
    let slots: Vec<Mutex<Option<SampleOutcome>>> = samples.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    thread::scope(|s| {
        for _ in 0..config.workers.min(samples.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(sample) = samples.get(i) else { break };
                let outcome = pipeline.run_sample(sample);
                *slots[i].lock().expect("slot poisoned") = Some(outcome);
            });
        }
    });

    let mut plans = Vec::new();
    let mut calls = Vec::new();
    let mut predictions = Vec::new();
    let mut failures = Vec::new();
    for slot in slots {
        let outcome = slot.into_inner().expect("slot poisoned").unwrap_or_default();
        plans.extend(outcome.plan);
        calls.extend(outcome.calls);
        predictions.extend(outcome.prediction);
        failures.extend(outcome.failure);
    }

    let golds: BTreeMap<String, _> = samples
        .iter()
        .filter_map(|s| s.gold.map(|g| (s.id.clone(), g)))
        .collect();
    let scored: Vec<&Prediction> = predictions
        .iter()
        .filter(|p| golds.contains_key(&p.sample_id))
        .collect();
    let confusion = score(scored.iter().copied(), &golds).expect("scored predictions all have golds");

    let report = ExperimentReport {
        config_digest: config.digest(),
        label: AblationConfig {
            disabled: config.ablate.clone(),
        }
        .label(),
        dataset: manifest.name.clone(),
        split: manifest.split,
        n_samples: samples.len(),
        n_scored: scored.len(),
        predictions_file: "predictions.jsonl".into(),
        confusion,
        metrics: metrics(&confusion),
        call_counts: call_stats(&calls),
        fallback_routings: plans.iter().filter(|p| p.source == PlanSource::Fallback).count(),
        defaulted_parses: predictions
            .iter()
            .filter(|p| p.parse_status == ParseStatus::DefaultedNonSarcastic)
            .count(),
        failures,
        wall_clock_ms: started.elapsed().as_millis() as u64,
        predictions: predictions.iter().map(PredictionRecord::from).collect(),
    };
    Ok(ExperimentRun {
        report,
        plans,
        calls,
        underlying_invocations: counter.load(Ordering::SeqCst),
    })
}

/// The seven standard ablation rows. Whatever the base config disables is
/// replaced by each row's own disabled set.
pub fn run_ablation_suite(
    manifest: &DatasetManifest,
    base: &RunConfig,
) -> Result<Vec<(AblationConfig, ExperimentRun)>, ExperimentError> {
    AblationConfig::standard_suite()
        .into_iter()
        .map(|ablation| {
            let config = base.with_ablation(ablation.disabled.clone());
            run_experiment(manifest, &config).map(|run| (ablation, run))
        })
        .collect()
}
