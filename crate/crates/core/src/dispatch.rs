//! Runs a routing plan: one specialist call per selected kind, fanned out
//! concurrently and gathered back in canonical order.

use std::collections::{BTreeMap, BTreeSet};
use std::ops::{Add, AddAssign};
use std::sync::{Arc, Mutex};
use std::thread;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{Backend, DecodingParams, ModelRequest, UserPart};
use crate::commander::RoutingPlan;
use crate::registry::{CapabilityCard, Registry, SubTaskKind};
use crate::sample::Sample;

pub const DEFAULT_SUBTASK_TEMPLATE: &str = "You are a specialist. Task: {description} \
Perform only this task and give no opinion on whether the content is sarcastic. \
Respond with only the result.";

pub type BackendMap = BTreeMap<String, Arc<dyn Backend>>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", content = "reason", rename_all = "snake_case")]
pub enum ClueStatus {
    Ok,
    Failed(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Clue {
    pub kind: SubTaskKind,
    pub content: String,
    pub status: ClueStatus,
    pub latency_ms: u64,
    pub backend_id: String,
    pub from_cache: bool,
}

impl Clue {
    pub fn is_ok(&self) -> bool {
        self.status == ClueStatus::Ok
    }

    pub fn ok(kind: SubTaskKind, content: impl Into<String>) -> Self {
        Clue {
            kind,
            content: content.into(),
            status: ClueStatus::Ok,
            latency_ms: 0,
            backend_id: kind.slug().to_string(),
            from_cache: false,
        }
    }

    pub fn failed(kind: SubTaskKind, reason: impl Into<String>) -> Self {
        let reason = reason.into();
        Clue {
            kind,
            content: String::new(),
            status: ClueStatus::Failed(if reason.is_empty() {
                "unknown failure".into()
            } else {
                reason
            }),
            latency_ms: 0,
            backend_id: kind.slug().to_string(),
            from_cache: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DispatchError {
    #[error("{kind} needs an image but sample `{sample}` has none")]
    MissingImage { kind: SubTaskKind, sample: String },
    #[error("image for sample `{sample}` is unavailable: {reason}")]
    ImageUnavailable { sample: String, reason: String },
}

/// Per-kind system-prompt templates; `{description}` is replaced by the
/// capability description.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SubtaskPrompts {
    overrides: BTreeMap<SubTaskKind, String>,
}

impl SubtaskPrompts {
    pub fn with_override(mut self, kind: SubTaskKind, template: impl Into<String>) -> Self {
        self.overrides.insert(kind, template.into());
        self
    }

    pub fn template(&self, kind: SubTaskKind) -> &str {
        self.overrides
            .get(&kind)
            .map(String::as_str)
            .unwrap_or(DEFAULT_SUBTASK_TEMPLATE)
    }

    pub fn render(
        &self,
        card: &CapabilityCard,
        sample: &Sample,
        decoding: DecodingParams,
    ) -> Result<ModelRequest, DispatchError> {
        let system_text = self.template(card.kind).replace("{description}", &card.description);
        let user_parts = if card.kind.is_image() {
            let image = sample.image.as_ref().ok_or_else(|| DispatchError::MissingImage {
                kind: card.kind,
                sample: sample.id.clone(),
            })?;
            let part = image.load().map_err(|e| DispatchError::ImageUnavailable {
                sample: sample.id.clone(),
                reason: e.to_string(),
            })?;
            vec![
                UserPart::Text("Input: the attached image.".into()),
                UserPart::Image(part),
            ]
        } else {
            vec![UserPart::Text(format!("Input: {}", sample.text))]
        };
        Ok(ModelRequest {
            system_text,
            user_parts,
            decoding,
        })
    }
}

/// Prompt for one specialist with the stock description and template.
pub fn subtask_prompt(kind: SubTaskKind, sample: &Sample) -> Result<ModelRequest, DispatchError> {
    SubtaskPrompts::default().render(&CapabilityCard::new(kind), sample, DecodingParams::default())
}

/// One executed specialist call, as persisted to `calls.jsonl`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InvocationRecord {
    pub sample_id: String,
    pub kind: SubTaskKind,
    pub backend_id: String,
    pub status: String,
    pub latency_ms: u64,
    pub cache_hit: bool,
}

impl InvocationRecord {
    pub fn from_clue(sample_id: &str, clue: &Clue) -> Self {
        InvocationRecord {
            sample_id: sample_id.to_string(),
            kind: clue.kind,
            backend_id: clue.backend_id.clone(),
            status: if clue.is_ok() { "ok" } else { "failed" }.to_string(),
            latency_ms: clue.latency_ms,
            cache_hit: clue.from_cache,
        }
    }
}

/// Append-only, thread-safe sink for invocation records.
#[derive(Debug, Default)]
pub struct InvocationLog {
    records: Mutex<Vec<InvocationRecord>>,
}

impl InvocationLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn append(&self, record: InvocationRecord) {
        self.records.lock().expect("log poisoned").push(record);
    }

    pub fn snapshot(&self) -> Vec<InvocationRecord> {
        self.records.lock().expect("log poisoned").clone()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallCounts(BTreeMap<SubTaskKind, u64>);

impl Default for CallCounts {
    fn default() -> Self {
        CallCounts(SubTaskKind::ALL.iter().map(|k| (*k, 0)).collect())
    }
}

impl CallCounts {
    pub fn get(&self, kind: SubTaskKind) -> u64 {
        self.0.get(&kind).copied().unwrap_or(0)
    }

    pub fn record(&mut self, kind: SubTaskKind) {
        *self.0.entry(kind).or_insert(0) += 1;
    }

    pub fn total(&self) -> u64 {
        self.0.values().sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (SubTaskKind, u64)> + '_ {
        self.0.iter().map(|(k, v)| (*k, *v))
    }
}

impl AddAssign<&CallCounts> for CallCounts {
    fn add_assign(&mut self, rhs: &CallCounts) {
        for (kind, n) in rhs.iter() {
            *self.0.entry(kind).or_insert(0) += n;
        }
    }
}

impl Add for CallCounts {
    type Output = CallCounts;

    fn add(mut self, rhs: CallCounts) -> CallCounts {
        self += &rhs;
        self
    }
}

pub fn call_stats<'a>(log: impl IntoIterator<Item = &'a InvocationRecord>) -> CallCounts {
    let mut counts = CallCounts::default();
    for record in log {
        counts.record(record.kind);
    }
    counts
}

/// Everything `execute_plan` needs besides the plan itself.
pub struct DispatchContext<'a> {
    pub registry: &'a Registry,
    pub backends: &'a BackendMap,
    pub prompts: &'a SubtaskPrompts,
    pub decoding: DecodingParams,
    pub log: Option<&'a InvocationLog>,
}

fn run_one(ctx: &DispatchContext<'_>, kind: SubTaskKind, sample: &Sample) -> Clue {
    let Some(card) = ctx.registry.card(kind) else {
        return Clue::failed(kind, format!("{kind} is not in the active registry"));
    };
    let Some(backend) = ctx.backends.get(&card.backend_id) else {
        let mut clue = Clue::failed(kind, format!("backend `{}` is not configured", card.backend_id));
        clue.backend_id = card.backend_id.clone();
        return clue;
    };
    let request = match ctx.prompts.render(card, sample, ctx.decoding) {
        Ok(req) => req,
        Err(e) => {
            let mut clue = Clue::failed(kind, e.to_string());
            clue.backend_id = card.backend_id.clone();
            return clue;
        }
    };
    match backend.invoke(&request) {
        Ok(resp) if resp.text.trim().is_empty() => Clue {
            kind,
            content: String::new(),
            status: ClueStatus::Failed("empty response".into()),
            latency_ms: resp.latency_ms,
            backend_id: resp.backend_id,
            from_cache: resp.from_cache,
        },
        Ok(resp) => Clue {
            kind,
            content: resp.text.trim().to_string(),
            status: ClueStatus::Ok,
            latency_ms: resp.latency_ms,
            backend_id: resp.backend_id,
            from_cache: resp.from_cache,
        },
        Err(e) => {
            let mut clue = Clue::failed(kind, e.to_string());
            clue.backend_id = card.backend_id.clone();
            clue
        }
    }
}

/// Executes every selected specialist. Failures become `Failed` clues; the
/// result is always in canonical kind order with one clue per selected kind.
pub fn execute_plan(sample: &Sample, plan: &RoutingPlan, ctx: &DispatchContext<'_>) -> Vec<Clue> {
    let kinds: BTreeSet<SubTaskKind> = plan.selected.clone();
    let mut clues: Vec<Clue> = if kinds.len() <= 1 {
        kinds.iter().map(|&k| run_one(ctx, k, sample)).collect()
    } else {
        thread::scope(|s| {
            let handles: Vec<_> = kinds
                .iter()
                .map(|&k| s.spawn(move || run_one(ctx, k, sample)))
                .collect();
            handles
                .into_iter()
                .zip(&kinds)
                .map(|(h, &k)| h.join().unwrap_or_else(|_| Clue::failed(k, "sub-task panicked")))
                .collect()
        })
    };
    clues.sort_by_key(|c| c.kind);
    if let Some(log) = ctx.log {
        for clue in &clues {
            log.append(InvocationRecord::from_clue(&sample.id, clue));
        }
    }
    clues
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{connect, BackendSpec, MockFault, MockRule};
    use crate::commander::PlanSource;
    use crate::registry::default_registry;
    use crate::sample::ImageRef;
    use proptest::prelude::*;
    use SubTaskKind::*;

    fn imaged() -> Sample {
        Sample::text_only("s1", "the pa welcome center is hopping today .").with_image(ImageRef::Inline {
            media_type: "image/jpeg".into(),
            data: b"IMG-s1".to_vec(),
        })
    }

    fn plan(kinds: &[SubTaskKind]) -> RoutingPlan {
        RoutingPlan {
            sample_id: "s1".into(),
            selected: kinds.iter().copied().collect(),
            rationale: String::new(),
            source: PlanSource::Model,
        }
    }

    fn mocks(delays: [u64; 6], texext_fault: bool) -> BackendMap {
        SubTaskKind::ALL
            .iter()
            .zip(delays)
            .map(|(k, d)| {
                let rule = if *k == TexExt && texext_fault {
                    MockRule::fail(".*", MockFault::Timeout)
                } else {
                    MockRule::reply(".*", format!("{} result", k.slug())).delayed(d)
                };
                let mut spec = BackendSpec::mock(k.slug(), vec![rule]);
                spec.retry = Some(crate::backends::RetryPolicy {
                    max_attempts: 1,
                    ..Default::default()
                });
                (k.slug().to_string(), connect(&spec).unwrap())
            })
            .collect()
    }

    fn ctx<'a>(
        reg: &'a Registry,
        backends: &'a BackendMap,
        prompts: &'a SubtaskPrompts,
        log: Option<&'a InvocationLog>,
    ) -> DispatchContext<'a> {
        DispatchContext {
            registry: reg,
            backends,
            prompts,
            decoding: DecodingParams::default(),
            log,
        }
    }

    #[test]
    fn keyword_prompt_embeds_text() {
        let req = subtask_prompt(Keyword, &imaged()).unwrap();
        assert!(req.system_text.contains("Extract keywords"));
        assert!(req.user_text().contains("hopping today"));
        assert!(!req.has_image());
    }

    #[test]
    fn image_summary_prompt_attaches_image() {
        let req = subtask_prompt(ImgSum, &imaged()).unwrap();
        assert_eq!(req.image_parts().count(), 1);
        assert!(req.system_text.contains("Describe the content of the image"));
        assert!(!req.user_text().contains("hopping"));
    }

    #[test]
    fn image_kind_without_image_is_rejected() {
        assert_eq!(
            subtask_prompt(FacExp, &Sample::text_only("s", "x")),
            Err(DispatchError::MissingImage {
                kind: FacExp,
                sample: "s".into()
            })
        );
    }

    #[test]
    fn template_override() {
        let prompts = SubtaskPrompts::default().with_override(Rhetoric, "Name devices: {description}");
        let req = prompts
            .render(&CapabilityCard::new(Rhetoric), &imaged(), DecodingParams::default())
            .unwrap();
        assert_eq!(
            req.system_text,
            "Name devices: Identify the rhetorical devices used in the text."
        );
    }

    #[test]
    fn clues_come_back_in_canonical_order() {
        let reg = default_registry();
        let backends = mocks([30, 20, 0, 10, 0, 0], false);
        let prompts = SubtaskPrompts::default();
        let log = InvocationLog::new();
        let clues = execute_plan(
            &imaged(),
            &plan(&[TexExt, ImgSum, Sentiment, Keyword]),
            &ctx(&reg, &backends, &prompts, Some(&log)),
        );
        let kinds: Vec<_> = clues.iter().map(|c| c.kind).collect();
        assert_eq!(kinds, vec![Keyword, Sentiment, ImgSum, TexExt]);
        assert!(clues.iter().all(Clue::is_ok));
        assert_eq!(clues[0].content, "keyword result");
        assert_eq!(log.snapshot().len(), 4);
    }

    #[test]
    fn failing_subtask_is_encoded_not_fatal() {
        let reg = default_registry();
        let backends = mocks([0; 6], true);
        let prompts = SubtaskPrompts::default();
        let clues = execute_plan(
            &imaged(),
            &plan(&[Keyword, Sentiment, ImgSum, TexExt]),
            &ctx(&reg, &backends, &prompts, None),
        );
        assert_eq!(clues.len(), 4);
        assert_eq!(clues.iter().filter(|c| c.is_ok()).count(), 3);
        assert_eq!(clues[3].kind, TexExt);
        assert!(matches!(&clues[3].status, ClueStatus::Failed(r) if r.contains("timed out")));
    }

    #[test]
    fn empty_plan_and_missing_backend() {
        let reg = default_registry();
        let backends = BackendMap::new();
        let prompts = SubtaskPrompts::default();
        assert!(execute_plan(&imaged(), &plan(&[]), &ctx(&reg, &backends, &prompts, None)).is_empty());
        let clues = execute_plan(&imaged(), &plan(&[Keyword]), &ctx(&reg, &backends, &prompts, None));
        assert!(matches!(&clues[0].status, ClueStatus::Failed(r) if r.contains("not configured")));
    }

    fn record(kind: SubTaskKind) -> InvocationRecord {
        InvocationRecord {
            sample_id: "s".into(),
            kind,
            backend_id: kind.slug().into(),
            status: "ok".into(),
            latency_ms: 0,
            cache_hit: false,
        }
    }

    #[test]
    fn call_stats_replays_published_pattern() {
        // 2,409 samples, mandatory trio every time, Rhetoric on a 1,461 subset.
        let mut log = Vec::new();
        for i in 0..2409 {
            for k in [Keyword, Sentiment, ImgSum] {
                log.push(record(k));
            }
            if i < 1461 {
                log.push(record(Rhetoric));
            }
        }
        let counts = call_stats(&log);
        assert_eq!(counts.get(Keyword), 2409);
        assert_eq!(counts.get(Sentiment), 2409);
        assert_eq!(counts.get(ImgSum), 2409);
        assert_eq!(counts.get(Rhetoric), 1461);
        assert_eq!(counts.get(FacExp), 0);
    }

    #[test]
    fn call_stats_small_cases() {
        assert_eq!(call_stats(&[]).total(), 0);
        let log: Vec<_> = (0..10).flat_map(|_| [Keyword, Sentiment, ImgSum].map(record)).collect();
        let counts = call_stats(&log);
        for k in SubTaskKind::ALL {
            assert_eq!(
                counts.get(k),
                if [Keyword, Sentiment, ImgSum].contains(&k) {
                    10
                } else {
                    0
                }
            );
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn ordering_is_independent_of_completion_order(mask in 1u8..64, delays in proptest::array::uniform6(0u64..8)) {
            let reg = default_registry();
            let backends = mocks(delays, false);
            let prompts = SubtaskPrompts::default();
            let kinds: Vec<SubTaskKind> = SubTaskKind::ALL.iter().enumerate()
                .filter(|(i, _)| mask & (1 << i) != 0).map(|(_, k)| *k).collect();
            let p = plan(&kinds);
            let clues = execute_plan(&imaged(), &p, &ctx(&reg, &backends, &prompts, None));
            prop_assert_eq!(clues.len(), p.selected.len());
            let got: Vec<_> = clues.iter().map(|c| c.kind).collect();
            let want: Vec<_> = p.selected.iter().copied().collect();
            prop_assert_eq!(got, want);
        }

        #[test]
        fn call_stats_is_additive(a in proptest::collection::vec(0usize..6, 0..40), b in proptest::collection::vec(0usize..6, 0..40)) {
            let la: Vec<_> = a.iter().map(|i| record(SubTaskKind::ALL[*i])).collect();
            let lb: Vec<_> = b.iter().map(|i| record(SubTaskKind::ALL[*i])).collect();
            let joined: Vec<_> = la.iter().chain(&lb).cloned().collect();
            prop_assert_eq!(call_stats(&joined), call_stats(&la) + call_stats(&lb));
        }
    }
}
