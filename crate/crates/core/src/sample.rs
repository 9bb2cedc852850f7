use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::backends::ImagePart;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Sarcastic,
    NonSarcastic,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Sarcastic => "Sarcastic",
            Label::NonSarcastic => "Non-sarcastic",
        }
    }

    /// Dataset encoding: 1 is sarcastic, 0 is not.
    pub fn from_code(code: i64) -> Option<Label> {
        match code {
            1 => Some(Label::Sarcastic),
            0 => Some(Label::NonSarcastic),
            _ => None,
        }
    }

    pub fn code(self) -> u8 {
        match self {
            Label::Sarcastic => 1,
            Label::NonSarcastic => 0,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "sarcastic" => Ok(Label::Sarcastic),
            "non-sarcastic" | "nonsarcastic" | "non_sarcastic" => Ok(Label::NonSarcastic),
            _ => Err(format!("unknown label `{s}`")),
        }
    }
}

impl Serialize for Label {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for Label {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, PartialEq, Eq)]
pub enum ImageRef {
    File(PathBuf),
    Inline { media_type: String, data: Vec<u8> },
}

impl fmt::Debug for ImageRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ImageRef::File(p) => f.debug_tuple("File").field(p).finish(),
            ImageRef::Inline { media_type, data } => f
                .debug_struct("Inline")
                .field("media_type", media_type)
                .field("bytes", &data.len())
                .finish(),
        }
    }
}

pub fn media_type_for(path: &Path) -> &'static str {
    let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
    match ext.as_deref() {
        Some("jpg" | "jpeg") => "image/jpeg",
        Some("png") => "image/png",
        Some("gif") => "image/gif",
        Some("webp") => "image/webp",
        Some("bmp") => "image/bmp",
        _ => "application/octet-stream",
    }
}

impl ImageRef {
    pub fn load(&self) -> io::Result<ImagePart> {
        match self {
            ImageRef::File(path) => Ok(ImagePart {
                media_type: media_type_for(path).to_string(),
                data: fs::read(path).map_err(|e| io::Error::new(e.kind(), format!("{}: {e}", path.display())))?,
            }),
            ImageRef::Inline { media_type, data } => Ok(ImagePart {
                media_type: media_type.clone(),
                data: data.clone(),
            }),
        }
    }
}

/// One text (+ optional image) item to classify.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub id: String,
    pub text: String,
    pub image: Option<ImageRef>,
    pub gold: Option<Label>,
}

impl Sample {
    pub fn text_only(id: impl Into<String>, text: impl Into<String>) -> Self {
        Sample {
            id: id.into(),
            text: text.into(),
            image: None,
            gold: None,
        }
    }

    pub fn with_image(mut self, image: ImageRef) -> Self {
        self.image = Some(image);
        self
    }

    pub fn with_gold(mut self, gold: Label) -> Self {
        self.gold = Some(gold);
        self
    }

    pub fn has_image(&self) -> bool {
        self.image.is_some()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_encoding() {
        assert_eq!(Label::from_code(1), Some(Label::Sarcastic));
        assert_eq!(Label::from_code(0), Some(Label::NonSarcastic));
        assert_eq!(Label::from_code(2), None);
        for l in [Label::Sarcastic, Label::NonSarcastic] {
            assert_eq!(l.as_str().parse::<Label>().unwrap(), l);
            assert_eq!(Label::from_code(l.code() as i64), Some(l));
        }
        assert!("maybe".parse::<Label>().is_err());
    }

    #[test]
    fn media_types() {
        assert_eq!(media_type_for(Path::new("a/b.JPG")), "image/jpeg");
        assert_eq!(media_type_for(Path::new("x.png")), "image/png");
        assert_eq!(media_type_for(Path::new("x")), "application/octet-stream");
    }
}
