//! Evidence chain assembly, the final classification prompt, and verdict
//! parsing.

use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{Backend, BackendError, DecodingParams, ModelRequest, UserPart};
use crate::dispatch::Clue;
use crate::registry::SubTaskKind;
use crate::sample::{Label, Sample};

const CLASSIFIER_SYSTEM: &str = "You are an expert in multimodal sarcasm detection. \
Specialist models have gathered evidence about the post below; they give no verdict themselves. \
Weigh the text, the image when provided, and the evidence to decide whether the post is sarcastic.";

const ANSWER_INSTRUCTION: &str =
    "Answer with exactly \"Sarcastic\" or \"Non-sarcastic\" on the first line, followed by brief reasoning.";

pub fn section_label(kind: SubTaskKind) -> &'static str {
    match kind {
        SubTaskKind::Keyword => "Keywords:",
        SubTaskKind::Sentiment => "Sentiment:",
        SubTaskKind::Rhetoric => "Rhetorical devices:",
        SubTaskKind::ImgSum => "Image description:",
        SubTaskKind::FacExp => "Facial expressions:",
        SubTaskKind::TexExt => "Embedded text:",
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvidenceChain {
    pub sample: Sample,
    clues: Vec<Clue>,
}

impl EvidenceChain {
    /// Clues in canonical order, failed ones included.
    pub fn clues(&self) -> &[Clue] {
        &self.clues
    }

    pub fn ok_clues(&self) -> impl Iterator<Item = &Clue> {
        self.clues.iter().filter(|c| c.is_ok())
    }

    pub fn failed_count(&self) -> usize {
        self.clues.iter().filter(|c| !c.is_ok()).count()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EvidenceError {
    #[error("clue kind {0} appears more than once")]
    DuplicateKind(SubTaskKind),
    #[error("image for sample `{sample}` is unavailable: {reason}")]
    ImageUnavailable { sample: String, reason: String },
    #[error("response carries no sarcasm verdict")]
    Unparseable,
    #[error("classifier unavailable: {0}")]
    BackendExhausted(BackendError),
}

pub fn assemble_chain(sample: &Sample, clues: Vec<Clue>) -> Result<EvidenceChain, EvidenceError> {
    let mut clues = clues;
    clues.sort_by_key(|c| c.kind);
    if let Some(w) = clues.windows(2).find(|w| w[0].kind == w[1].kind) {
        return Err(EvidenceError::DuplicateKind(w[0].kind));
    }
    Ok(EvidenceChain {
        sample: sample.clone(),
        clues,
    })
}

/// Builds the classifier request: original text, image (when `attach_image`
/// and the sample has one), one labeled section per successful clue, then the
/// answer instruction.
pub fn render_final_prompt(
    chain: &EvidenceChain,
    attach_image: bool,
    decoding: DecodingParams,
) -> Result<ModelRequest, EvidenceError> {
    let sample = &chain.sample;
    let mut body = format!("Text: {}\n", sample.text);
    let mut image_part = None;
    if let Some(image) = &sample.image {
        if attach_image {
            image_part = Some(image.load().map_err(|e| EvidenceError::ImageUnavailable {
                sample: sample.id.clone(),
                reason: e.to_string(),
            })?);
            body.push_str("Image: attached\n");
        } else {
            body.push_str("Image: attached but not viewable\n");
        }
    }
    body.push_str("\nEvidence:\n");
    let mut any = false;
    for clue in chain.ok_clues() {
        any = true;
        body.push_str(section_label(clue.kind));
        body.push(' ');
        body.push_str(clue.content.trim());
        body.push('\n');
    }
    if !any {
        body.push_str("(none)\n");
    }
    body.push('\n');
    body.push_str(ANSWER_INSTRUCTION);

    let mut user_parts = vec![UserPart::Text(body)];
    if let Some(part) = image_part {
        user_parts.push(UserPart::Image(part));
    }
    Ok(ModelRequest {
        system_text: CLASSIFIER_SYSTEM.to_string(),
        user_parts,
        decoding,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParseStatus {
    /// The deciding mention is an exact label token.
    Clean,
    /// Inferred from a negated or related phrase.
    Heuristic,
    /// No verdict found; scored as non-sarcastic.
    DefaultedNonSarcastic,
}

fn verdict_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(
            r"(?ix)
            (?P<neg>
                \bnon[-\ ]?(?:sarcastic|ironic)(?:ally)?\b
              | (?:\bnot|\bnever|n['’]t)\s+(?:[a-z]+\s+){0,2}?(?:sarcastic|ironic)(?:ally)?\b
              | \bno\s+(?:sarcasm|irony)\b
            )
          | (?P<pos>\b(?:sarcastic|ironic)(?:ally)?\b)
            ",
        )
        .expect("verdict pattern compiles")
    })
}

/// Negation-aware verdict extraction; the last verdict-bearing mention wins.
pub fn parse_label(text: &str) -> Result<(Label, ParseStatus), EvidenceError> {
    let last = verdict_pattern()
        .captures_iter(text)
        .last()
        .ok_or(EvidenceError::Unparseable)?;
    let (label, token) = match (last.name("neg"), last.name("pos")) {
        (Some(m), _) => (Label::NonSarcastic, m.as_str()),
        (None, Some(m)) => (Label::Sarcastic, m.as_str()),
        (None, None) => return Err(EvidenceError::Unparseable),
    };
    let exact = token.eq_ignore_ascii_case("sarcastic") || token.eq_ignore_ascii_case("non-sarcastic");
    Ok((
        label,
        if exact {
            ParseStatus::Clean
        } else {
            ParseStatus::Heuristic
        },
    ))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prediction {
    pub sample_id: String,
    pub label: Label,
    pub raw_response: String,
    pub parse_status: ParseStatus,
}

/// Line format shared by native runs and imported baselines.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub sample_id: String,
    pub label: Label,
    #[serde(default = "clean")]
    pub parse_status: ParseStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response_sha256: Option<String>,
}

fn clean() -> ParseStatus {
    ParseStatus::Clean
}

impl From<&Prediction> for PredictionRecord {
    fn from(p: &Prediction) -> Self {
        PredictionRecord {
            sample_id: p.sample_id.clone(),
            label: p.label,
            parse_status: p.parse_status,
            response_sha256: Some(crate::backends::sha256_hex(p.raw_response.as_bytes())),
        }
    }
}

impl From<PredictionRecord> for Prediction {
    fn from(r: PredictionRecord) -> Self {
        Prediction {
            sample_id: r.sample_id,
            label: r.label,
            raw_response: String::new(),
            parse_status: r.parse_status,
        }
    }
}

pub fn classify(
    chain: &EvidenceChain,
    classifier: &dyn Backend,
    attach_image: bool,
    decoding: DecodingParams,
) -> Result<Prediction, EvidenceError> {
    let request = render_final_prompt(chain, attach_image && classifier.supports_images(), decoding)?;
    let response = classifier.invoke(&request).map_err(EvidenceError::BackendExhausted)?;
    let (label, parse_status) =
        parse_label(&response.text).unwrap_or((Label::NonSarcastic, ParseStatus::DefaultedNonSarcastic));
    Ok(Prediction {
        sample_id: chain.sample.id.clone(),
        label,
        raw_response: response.text,
        parse_status,
    })
}
