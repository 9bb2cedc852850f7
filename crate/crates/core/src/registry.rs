//! The six specialist capabilities the commander can route to.
//!
//! Three text-side specialists (keywords, sentiment, rhetoric) and three
//! image-side specialists (scene summary, facial expressions, embedded text).
//! Descriptions, mandatory flags and backend bindings are data so that
//! ablations and configuration overrides never touch prompt code.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// One specialist sub-task.
///
/// Variant order is the canonical order used by every deterministic
/// rendering, so the derived `Ord` doubles as the canonical sort.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SubTaskKind {
    Keyword,
    Sentiment,
    Rhetoric,
    ImgSum,
    FacExp,
    TexExt,
}

impl SubTaskKind {
    /// All kinds in canonical order.
    pub const ALL: [SubTaskKind; 6] = [
        SubTaskKind::Keyword,
        SubTaskKind::Sentiment,
        SubTaskKind::Rhetoric,
        SubTaskKind::ImgSum,
        SubTaskKind::FacExp,
        SubTaskKind::TexExt,
    ];

    pub fn display_name(self) -> &'static str {
        match self {
            SubTaskKind::Keyword => "Keyword",
            SubTaskKind::Sentiment => "Sentiment",
            SubTaskKind::Rhetoric => "Rhetoric",
            SubTaskKind::FacExp => "Fac-exp",
            SubTaskKind::ImgSum => "Img-sum",
            SubTaskKind::TexExt => "Tex-ext",
        }
    }

    pub fn role_class(self) -> RoleClass {
        match self {
            SubTaskKind::Keyword | SubTaskKind::Sentiment | SubTaskKind::Rhetoric => RoleClass::Text,
            SubTaskKind::FacExp | SubTaskKind::ImgSum | SubTaskKind::TexExt => RoleClass::Image,
        }
    }

    pub fn is_image(self) -> bool {
        self.role_class() == RoleClass::Image
    }

    /// Lowercase identifier used for default backend ids and directory names.
    pub fn slug(self) -> &'static str {
        match self {
            SubTaskKind::Keyword => "keyword",
            SubTaskKind::Sentiment => "sentiment",
            SubTaskKind::Rhetoric => "rhetoric",
            SubTaskKind::FacExp => "fac-exp",
            SubTaskKind::ImgSum => "img-sum",
            SubTaskKind::TexExt => "tex-ext",
        }
    }

    fn default_description(self) -> &'static str {
        match self {
            SubTaskKind::Keyword => "Extract keywords from the text.",
            SubTaskKind::Sentiment => "Analyze the sentiment expressed in the sentence.",
            SubTaskKind::Rhetoric => "Identify the rhetorical devices used in the text.",
            SubTaskKind::FacExp => "Recognize the facial expressions of individuals in the image.",
            SubTaskKind::ImgSum => "Describe the content of the image.",
            SubTaskKind::TexExt => "Identify the subtitles in the image.",
        }
    }

    fn default_mandatory(self) -> bool {
        matches!(
            self,
            SubTaskKind::Keyword | SubTaskKind::Sentiment | SubTaskKind::ImgSum
        )
    }
}

impl fmt::Display for SubTaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.display_name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown sub-task `{0}`")]
pub struct UnknownKind(pub String);

impl FromStr for SubTaskKind {
    type Err = UnknownKind;

    /// Accepts display names case-insensitively, with `-`, `_` or nothing
    /// between the two halves of the image-side names (`Img-sum`, `img_sum`,
    /// `ImgSum`).
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let folded: String = s
            .trim()
            .chars()
            .filter(|c| !matches!(c, '-' | '_' | ' '))
            .flat_map(char::to_lowercase)
            .collect();
        let kind = match folded.as_str() {
            "keyword" | "keywords" => SubTaskKind::Keyword,
            "sentiment" => SubTaskKind::Sentiment,
            "rhetoric" => SubTaskKind::Rhetoric,
            "facexp" => SubTaskKind::FacExp,
            "imgsum" => SubTaskKind::ImgSum,
            "texext" => SubTaskKind::TexExt,
            _ => return Err(UnknownKind(s.to_string())),
        };
        Ok(kind)
    }
}

impl Serialize for SubTaskKind {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.display_name())
    }
}

impl<'de> Deserialize<'de> for SubTaskKind {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RoleClass {
    Text,
    Image,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CapabilityCard {
    pub kind: SubTaskKind,
    pub role_class: RoleClass,
    pub description: String,
    pub mandatory: bool,
    pub backend_id: String,
}

impl CapabilityCard {
    pub fn new(kind: SubTaskKind) -> Self {
        CapabilityCard {
            kind,
            role_class: kind.role_class(),
            description: kind.default_description().to_string(),
            mandatory: kind.default_mandatory(),
            backend_id: kind.slug().to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RegistryError {
    #[error("registry has no capabilities")]
    EmptyRegistry,
    #[error("capability {0} has an empty description")]
    EmptyDescription(SubTaskKind),
    #[error("capability {kind} declares role class {declared:?}, expected {expected:?}")]
    RoleMismatch {
        kind: SubTaskKind,
        declared: RoleClass,
        expected: RoleClass,
    },
    #[error("capability {0} appears more than once")]
    DuplicateKind(SubTaskKind),
}

/// Immutable set of capability cards keyed by kind.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Registry {
    cards: BTreeMap<SubTaskKind, CapabilityCard>,
}

impl Registry {
    pub fn empty() -> Self {
        Registry::default()
    }

    pub fn from_cards(cards: impl IntoIterator<Item = CapabilityCard>) -> Result<Self, RegistryError> {
        let mut map = BTreeMap::new();
        for card in cards {
            if card.description.trim().is_empty() {
                return Err(RegistryError::EmptyDescription(card.kind));
            }
            let expected = card.kind.role_class();
            if card.role_class != expected {
                return Err(RegistryError::RoleMismatch {
                    kind: card.kind,
                    declared: card.role_class,
                    expected,
                });
            }
            let kind = card.kind;
            if map.insert(kind, card).is_some() {
                return Err(RegistryError::DuplicateKind(kind));
            }
        }
        Ok(Registry { cards: map })
    }

    pub fn card(&self, kind: SubTaskKind) -> Option<&CapabilityCard> {
        self.cards.get(&kind)
    }

    pub fn card_mut(&mut self, kind: SubTaskKind) -> Option<&mut CapabilityCard> {
        self.cards.get_mut(&kind)
    }

    /// Cards in canonical kind order.
    pub fn cards(&self) -> impl Iterator<Item = &CapabilityCard> {
        self.cards.values()
    }

    pub fn kinds(&self) -> BTreeSet<SubTaskKind> {
        self.cards.keys().copied().collect()
    }

    pub fn mandatory_kinds(&self) -> BTreeSet<SubTaskKind> {
        self.cards.values().filter(|c| c.mandatory).map(|c| c.kind).collect()
    }

    pub fn contains(&self, kind: SubTaskKind) -> bool {
        self.cards.contains_key(&kind)
    }

    pub fn len(&self) -> usize {
        self.cards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cards.is_empty()
    }

    /// Keeps only the cards of the given role class.
    pub fn restrict_to(&self, class: RoleClass) -> Registry {
        Registry {
            cards: self
                .cards
                .iter()
                .filter(|(_, c)| c.role_class == class)
                .map(|(k, c)| (*k, c.clone()))
                .collect(),
        }
    }
}

/// All six capabilities with their stock descriptions; Keyword, Sentiment
/// and Img-sum are mandatory.
pub fn default_registry() -> Registry {
    Registry {
        cards: SubTaskKind::ALL.iter().map(|&k| (k, CapabilityCard::new(k))).collect(),
    }
}

/// One `<display name>: <description>` line per card, canonical order.
pub fn render_capability_brief(registry: &Registry) -> Result<String, RegistryError> {
    if registry.is_empty() {
        return Err(RegistryError::EmptyRegistry);
    }
    let lines: Vec<String> = registry
        .cards()
        .map(|c| format!("{}: {}", c.kind.display_name(), c.description))
        .collect();
    Ok(lines.join("\n"))
}

/// Drops every card whose kind is in `disabled`. Surviving cards keep their
/// mandatory flags.
pub fn apply_ablation(registry: &Registry, disabled: &BTreeSet<SubTaskKind>) -> Registry {
    Registry {
        cards: registry
            .cards
            .iter()
            .filter(|(k, _)| !disabled.contains(k))
            .map(|(k, c)| (*k, c.clone()))
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn default_registry_has_six_cards_three_mandatory() {
        let reg = default_registry();
        assert_eq!(reg.len(), 6);
        assert_eq!(
            reg.mandatory_kinds(),
            [SubTaskKind::Keyword, SubTaskKind::Sentiment, SubTaskKind::ImgSum]
                .into_iter()
                .collect()
        );
        assert_eq!(reg.card(SubTaskKind::TexExt).unwrap().role_class, RoleClass::Image);
        assert_eq!(default_registry(), default_registry());
    }

    #[test]
    fn stock_descriptions() {
        let reg = default_registry();
        let desc = |k| reg.card(k).unwrap().description.as_str();
        assert_eq!(desc(SubTaskKind::Keyword), "Extract keywords from the text.");
        assert_eq!(
            desc(SubTaskKind::Sentiment),
            "Analyze the sentiment expressed in the sentence."
        );
        assert_eq!(
            desc(SubTaskKind::Rhetoric),
            "Identify the rhetorical devices used in the text."
        );
        assert_eq!(
            desc(SubTaskKind::FacExp),
            "Recognize the facial expressions of individuals in the image."
        );
        assert_eq!(desc(SubTaskKind::ImgSum), "Describe the content of the image.");
        assert_eq!(desc(SubTaskKind::TexExt), "Identify the subtitles in the image.");
    }

    #[test]
    fn display_names_round_trip() {
        let names = ["Keyword", "Sentiment", "Rhetoric", "Img-sum", "Fac-exp", "Tex-ext"];
        for (kind, name) in SubTaskKind::ALL.iter().zip(names) {
            assert_eq!(kind.to_string(), name);
            assert_eq!(name.parse::<SubTaskKind>().unwrap(), *kind);
            assert_eq!(name.to_uppercase().parse::<SubTaskKind>().unwrap(), *kind);
        }
        assert!("Irony".parse::<SubTaskKind>().is_err());
    }

    #[test]
    fn brief_lists_cards_in_canonical_order() {
        let brief = render_capability_brief(&default_registry()).unwrap();
        let expected = "Keyword: Extract keywords from the text.\n\
Sentiment: Analyze the sentiment expressed in the sentence.\n\
Rhetoric: Identify the rhetorical devices used in the text.\n\
Img-sum: Describe the content of the image.\n\
Fac-exp: Recognize the facial expressions of individuals in the image.\n\
Tex-ext: Identify the subtitles in the image.";
        assert_eq!(brief, expected);
        assert_eq!(brief, render_capability_brief(&default_registry()).unwrap());
    }

    #[test]
    fn brief_singleton_and_empty() {
        let only_kw = Registry::from_cards([CapabilityCard::new(SubTaskKind::Keyword)]).unwrap();
        assert_eq!(
            render_capability_brief(&only_kw).unwrap(),
            "Keyword: Extract keywords from the text."
        );
        assert_eq!(
            render_capability_brief(&Registry::empty()),
            Err(RegistryError::EmptyRegistry)
        );
    }

    #[test]
    fn ablation_cases() {
        let reg = default_registry();
        let without_rhetoric = apply_ablation(&reg, &[SubTaskKind::Rhetoric].into_iter().collect());
        assert_eq!(without_rhetoric.len(), 5);
        assert!(!without_rhetoric.contains(SubTaskKind::Rhetoric));
        assert_eq!(apply_ablation(&reg, &BTreeSet::new()), reg);
        assert!(apply_ablation(&reg, &SubTaskKind::ALL.into_iter().collect()).is_empty());
    }

    #[test]
    fn invalid_cards_are_rejected() {
        let mut card = CapabilityCard::new(SubTaskKind::Keyword);
        card.description = "  ".into();
        assert_eq!(
            Registry::from_cards([card]),
            Err(RegistryError::EmptyDescription(SubTaskKind::Keyword))
        );
        let mut card = CapabilityCard::new(SubTaskKind::TexExt);
        card.role_class = RoleClass::Text;
        assert!(matches!(
            Registry::from_cards([card]),
            Err(RegistryError::RoleMismatch { .. })
        ));
        let dup = [
            CapabilityCard::new(SubTaskKind::Keyword),
            CapabilityCard::new(SubTaskKind::Keyword),
        ];
        assert_eq!(
            Registry::from_cards(dup),
            Err(RegistryError::DuplicateKind(SubTaskKind::Keyword))
        );
    }

    proptest! {
        #[test]
        fn ablation_removes_exactly_the_disabled_kinds(mask in 0u8..64, keep_mask in 0u8..64) {
            let base: Registry = apply_ablation(
                &default_registry(),
                &SubTaskKind::ALL.iter().enumerate()
                    .filter(|(i, _)| keep_mask & (1 << i) != 0)
                    .map(|(_, k)| *k).collect(),
            );
            let disabled: BTreeSet<_> = SubTaskKind::ALL.iter().enumerate()
                .filter(|(i, _)| mask & (1 << i) != 0)
                .map(|(_, k)| *k).collect();
            let out = apply_ablation(&base, &disabled);
            let expected: BTreeSet<_> = base.kinds().difference(&disabled).copied().collect();
            prop_assert_eq!(out.kinds(), expected);
            for card in out.cards() {
                prop_assert_eq!(card.mandatory, base.card(card.kind).unwrap().mandatory);
            }
        }
    }
}
