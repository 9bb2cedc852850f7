//! Routing: the commander model reads the sample and the capability brief
//! and picks which specialists to run.
//!
//! The reply format is `{"selected": [<display names>], "rationale": <text>}`.
//! Whatever the commander answers, the plan is normalized: mandatory kinds
//! are added, kinds outside the active registry are dropped, and image-side
//! kinds are dropped for samples without an image.

use std::collections::BTreeSet;

use serde::Serialize;
use serde_json::Value;
use thiserror::Error;

use crate::backends::{Backend, BackendError, DecodingParams, ModelRequest, UserPart};
use crate::registry::{render_capability_brief, Registry, RegistryError, SubTaskKind};
use crate::sample::Sample;

const ROLE_ASSIGNMENT: &str = "You are the \u{2018}commander\u{2019} of a sarcasm detection task, and your mission is to select the most appropriate \u{2018}C&W\u{2019} based on the input multimodal content. \
You lead three civil officials who handle text and three military officers who handle images. \
None of them judges sarcasm; each only extracts one kind of clue.";

const SELECTION_INSTRUCTION: &str =
    "Based on the input text and image, select the most appropriate sub-models and provide a rationale.";

const FORMAT_INSTRUCTION: &str = "Reply with a JSON object of the form {\"selected\": [\"<name>\", ...], \"rationale\": \"<one sentence>\"} using only names from the list above.";

const REASK_REMINDER: &str =
    "Respond only with the structured object {\"selected\": [...], \"rationale\": \"...\"} and nothing else.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub enum PlanSource {
    Model,
    Fallback,
    Forced,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RoutingPlan {
    pub sample_id: String,
    pub selected: BTreeSet<SubTaskKind>,
    pub rationale: String,
    pub source: PlanSource,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RoutingError {
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error("image for sample `{sample}` is unavailable: {reason}")]
    ImageUnavailable { sample: String, reason: String },
    #[error("routing response is unparseable: {0}")]
    Unparseable(String),
    #[error("commander unavailable: {0}")]
    BackendExhausted(BackendError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoutingOptions {
    /// Attach the image to the routing request when the backend accepts images.
    pub commander_sees_image: bool,
    pub decoding: DecodingParams,
    /// Skip the commander and use this selection (still normalized).
    pub forced: Option<BTreeSet<SubTaskKind>>,
}

impl Default for RoutingOptions {
    fn default() -> Self {
        RoutingOptions {
            commander_sees_image: true,
            decoding: DecodingParams::default(),
            forced: None,
        }
    }
}

/// Builds the commander request. `attach_image` is ignored for imageless
/// samples.
pub fn build_routing_prompt(
    sample: &Sample,
    registry: &Registry,
    attach_image: bool,
    decoding: DecodingParams,
) -> Result<ModelRequest, RoutingError> {
    let brief = render_capability_brief(registry)?;
    let system_text =
        format!("{ROLE_ASSIGNMENT}\n\nAvailable C&W:\n{brief}\n\n{SELECTION_INSTRUCTION}\n{FORMAT_INSTRUCTION}");
    let mut parts = vec![UserPart::Text(format!("Text: {}", sample.text))];
    match &sample.image {
        None => parts.push(UserPart::Text("No image is attached.".into())),
        Some(image) if attach_image => {
            let part = image.load().map_err(|e| RoutingError::ImageUnavailable {
                sample: sample.id.clone(),
                reason: e.to_string(),
            })?;
            parts.push(UserPart::Image(part));
        }
        Some(_) => parts.push(UserPart::Text("An image is attached but not viewable.".into())),
    }
    Ok(ModelRequest {
        system_text,
        user_parts: parts,
        decoding,
    })
}

fn selection_object(text: &str) -> Option<serde_json::Map<String, Value>> {
    let as_selection = |v: Value| match v {
        Value::Object(map) if map.contains_key("selected") => Some(map),
        _ => None,
    };
    if let (Some(start), Some(end)) = (text.find('{'), text.rfind('}')) {
        if start < end {
            if let Some(map) = serde_json::from_str(&text[start..=end]).ok().and_then(as_selection) {
                return Some(map);
            }
        }
    }
    // Surrounding prose may itself contain braces; try every object start.
    text.match_indices('{').find_map(|(i, _)| {
        serde_json::Deserializer::from_str(&text[i..])
            .into_iter::<Value>()
            .next()
            .and_then(Result::ok)
            .and_then(as_selection)
    })
}

/// Extracts the commander's selection, keeping only kinds present in
/// `registry`.
pub fn parse_routing_response(
    text: &str,
    registry: &Registry,
) -> Result<(BTreeSet<SubTaskKind>, String), RoutingError> {
    let object =
        selection_object(text).ok_or_else(|| RoutingError::Unparseable("no structured selection object".into()))?;
    let names = match object.get("selected") {
        Some(Value::Array(items)) => items,
        Some(Value::Null) => return Ok((BTreeSet::new(), rationale_of(&object))),
        _ => return Err(RoutingError::Unparseable("`selected` is not a list".into())),
    };
    let mut recognized = 0usize;
    let mut selected = BTreeSet::new();
    for name in names {
        let Some(kind) = name.as_str().and_then(|s| s.parse::<SubTaskKind>().ok()) else {
            continue;
        };
        recognized += 1;
        if registry.contains(kind) {
            selected.insert(kind);
        }
    }
    if !names.is_empty() && recognized == 0 {
        return Err(RoutingError::Unparseable(
            "no selected name matches a known sub-task".into(),
        ));
    }
    Ok((selected, rationale_of(&object)))
}

fn rationale_of(object: &serde_json::Map<String, Value>) -> String {
    object
        .get("rationale")
        .and_then(Value::as_str)
        .unwrap_or_default()
        .to_string()
}

/// (selected ∪ mandatory) ∩ registry, minus image-side kinds when the sample
/// has no image.
pub fn enforce_plan(selected: &BTreeSet<SubTaskKind>, registry: &Registry, has_image: bool) -> BTreeSet<SubTaskKind> {
    selected
        .iter()
        .copied()
        .chain(registry.mandatory_kinds())
        .filter(|k| registry.contains(*k))
        .filter(|k| has_image || !k.is_image())
        .collect()
}

pub fn route(
    sample: &Sample,
    registry: &Registry,
    commander: &dyn Backend,
    options: &RoutingOptions,
) -> Result<RoutingPlan, RoutingError> {
    let has_image = sample.has_image();
    let plan = |selected: &BTreeSet<SubTaskKind>, rationale: String, source| RoutingPlan {
        sample_id: sample.id.clone(),
        selected: enforce_plan(selected, registry, has_image),
        rationale,
        source,
    };

    if let Some(forced) = &options.forced {
        return Ok(plan(forced, "fixed plan from configuration".into(), PlanSource::Forced));
    }
    if registry.is_empty() {
        return Ok(plan(
            &BTreeSet::new(),
            "no capabilities available".into(),
            PlanSource::Forced,
        ));
    }

    let attach = options.commander_sees_image && commander.supports_images();
    let request = build_routing_prompt(sample, registry, attach, options.decoding)?;
    let first = commander.invoke(&request).map_err(RoutingError::BackendExhausted)?;
    if let Ok((selected, rationale)) = parse_routing_response(&first.text, registry) {
        return Ok(plan(&selected, rationale, PlanSource::Model));
    }

    let mut reask = request;
    reask.user_parts.push(UserPart::Text(REASK_REMINDER.into()));
    let second = commander.invoke(&reask).map_err(RoutingError::BackendExhausted)?;
    match parse_routing_response(&second.text, registry) {
        Ok((selected, rationale)) => Ok(plan(&selected, rationale, PlanSource::Model)),
        Err(_) => Ok(plan(
            &BTreeSet::new(),
            "commander reply unparseable; mandatory set only".into(),
            PlanSource::Fallback,
        )),
    }
}
