//! Line-delimited dataset manifests and split statistics.
//!
//! One JSON object per line:
//!
//! ```text
//! {"id": "t1", "text": "...", "image": "t1.jpg" | null, "label": 1 | 0 | null}
//! ```
//!
//! `image` paths are resolved against the image root (the manifest's
//! directory when none is given). Label 1 is sarcastic, 0 is not.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::sample::{ImageRef, Label, Sample};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    /// Guesses the split from a file name (`train`, `val`/`dev`, else test).
    pub fn infer(path: &Path) -> Split {
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or_default()
            .to_ascii_lowercase();
        if stem.contains("train") {
            Split::Train
        } else if stem.contains("val") || stem.contains("dev") {
            Split::Validation
        } else {
            Split::Test
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "val" | "valid" | "validation" | "dev" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub name: String,
    pub split: Split,
    pub samples: Vec<Sample>,
    pub image_root: Option<PathBuf>,
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("line {line}: malformed record: {reason}")]
    MalformedRecord { line: usize, reason: String },
    #[error("line {line}: duplicate sample id `{id}`")]
    DuplicateId { line: usize, id: String },
    #[error("line {line}: invalid label {value} (expected 0, 1 or null)")]
    InvalidLabel { line: usize, value: String },
    #[error("line {line}: image file {} not found", path.display())]
    MissingImageFile { line: usize, path: PathBuf },
    #[error("sample `{0}` has an inline image and cannot be written to a manifest")]
    InlineImage(String),
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LoadOptions {
    /// Skip the existence check for image files.
    pub lazy_images: bool,
}

fn malformed(line: usize, reason: impl Into<String>) -> DatasetError {
    DatasetError::MalformedRecord {
        line,
        reason: reason.into(),
    }
}

fn parse_record(line_no: usize, line: &str, root: &Path, opts: LoadOptions) -> Result<Sample, DatasetError> {
    let value: Value = serde_json::from_str(line).map_err(|e| malformed(line_no, e.to_string()))?;
    let obj = value
        .as_object()
        .ok_or_else(|| malformed(line_no, "record is not an object"))?;
    let id = match obj.get("id") {
        Some(Value::String(s)) if !s.trim().is_empty() => s.clone(),
        Some(Value::Number(n)) => n.to_string(),
        _ => return Err(malformed(line_no, "`id` must be a non-empty string")),
    };
    let text = match obj.get("text") {
        Some(Value::String(s)) if !s.trim().is_empty() => s.clone(),
        _ => return Err(malformed(line_no, "`text` must be a non-empty string")),
    };
    let image = match obj.get("image") {
        None | Some(Value::Null) => None,
        Some(Value::String(s)) if !s.is_empty() => {
            let path = root.join(s);
            if !opts.lazy_images && !path.is_file() {
                return Err(DatasetError::MissingImageFile { line: line_no, path });
            }
            Some(ImageRef::File(path))
        }
        Some(_) => return Err(malformed(line_no, "`image` must be a path or null")),
    };
    let gold = match obj.get("label") {
        None | Some(Value::Null) => None,
        Some(v) => match v.as_i64().and_then(Label::from_code) {
            Some(label) if v.is_i64() || v.is_u64() => Some(label),
            _ => {
                return Err(DatasetError::InvalidLabel {
                    line: line_no,
                    value: v.to_string(),
                })
            }
        },
    };
    Ok(Sample { id, text, image, gold })
}

pub fn load_samples(
    path: &Path,
    image_root: Option<&Path>,
    opts: LoadOptions,
) -> Result<DatasetManifest, DatasetError> {
    let io_err = |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = fs::File::open(path).map_err(io_err)?;
    let root = match image_root {
        Some(r) => r.to_path_buf(),
        None => path.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    let mut seen = HashSet::new();
    let mut samples = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err)?;
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let sample = parse_record(line_no, &line, &root, opts)?;
        if !seen.insert(sample.id.clone()) {
            return Err(DatasetError::DuplicateId {
                line: line_no,
                id: sample.id,
            });
        }
        samples.push(sample);
    }
    Ok(DatasetManifest {
        name: path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("dataset")
            .to_string(),
        split: Split::infer(path),
        samples,
        image_root: Some(root),
    })
}

#[derive(Serialize)]
struct RecordOut<'a> {
    id: &'a str,
    text: &'a str,
    image: Option<String>,
    label: Option<u8>,
}

/// Writes the manifest back out; file images are written relative to the
/// manifest's image root when possible.
pub fn write_samples(manifest: &DatasetManifest, path: &Path) -> Result<(), DatasetError> {
    let io_err = |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut out = BufWriter::new(fs::File::create(path).map_err(io_err)?);
    for sample in &manifest.samples {
        let image = match &sample.image {
            None => None,
            Some(ImageRef::File(p)) => {
                let rel = manifest
                    .image_root
                    .as_deref()
                    .and_then(|root| p.strip_prefix(root).ok())
                    .unwrap_or(p);
                Some(rel.to_string_lossy().into_owned())
            }
            Some(ImageRef::Inline { .. }) => return Err(DatasetError::InlineImage(sample.id.clone())),
        };
        let record = RecordOut {
            id: &sample.id,
            text: &sample.text,
            image,
            label: sample.gold.map(Label::code),
        };
        serde_json::to_writer(&mut out, &record).map_err(|e| io_err(e.into()))?;
        out.write_all(b"\n").map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}

pub fn strip_images(manifest: &DatasetManifest) -> DatasetManifest {
    DatasetManifest {
        samples: manifest
            .samples
            .iter()
            .map(|s| Sample {
                image: None,
                ..s.clone()
            })
            .collect(),
        ..manifest.clone()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SplitStats {
    pub n_train: u64,
    pub n_validation: u64,
    pub n_test: u64,
    pub n_sarcastic: u64,
    pub n_non_sarcastic: u64,
    /// Samples without a gold label; counted in split sizes only.
    pub n_unlabeled: u64,
}

pub fn split_stats(train: &DatasetManifest, validation: &DatasetManifest, test: &DatasetManifest) -> SplitStats {
    let mut stats = SplitStats {
        n_train: train.samples.len() as u64,
        n_validation: validation.samples.len() as u64,
        n_test: test.samples.len() as u64,
        ..SplitStats::default()
    };
    for sample in train.samples.iter().chain(&validation.samples).chain(&test.samples) {
        match sample.gold {
            Some(Label::Sarcastic) => stats.n_sarcastic += 1,
            Some(Label::NonSarcastic) => stats.n_non_sarcastic += 1,
            None => stats.n_unlabeled += 1,
        }
    }
    stats
}

/// Published split sizes and whole-dataset class totals for a benchmark.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitExpectation {
    pub name: String,
    pub train: u64,
    pub validation: u64,
    pub test: u64,
    pub sarcastic: u64,
    pub non_sarcastic: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldMismatch {
    pub field: &'static str,
    pub expected: u64,
    pub actual: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub struct ExpectationMismatch {
    pub dataset: String,
    pub mismatches: Vec<FieldMismatch>,
}

impl fmt::Display for ExpectationMismatch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} expectation failed:", self.dataset)?;
        for m in &self.mismatches {
            write!(f, " {} expected {} found {};", m.field, m.expected, m.actual)?;
        }
        Ok(())
    }
}

impl SplitExpectation {
    pub fn mmsd() -> Self {
        serde_json::from_str(include_str!("../data/mmsd.json")).expect("bundled MMSD expectation")
    }

    pub fn mmsd2() -> Self {
        serde_json::from_str(include_str!("../data/mmsd2.json")).expect("bundled MMSD 2.0 expectation")
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name.to_ascii_lowercase().replace([' ', '.', '-', '_'], "").as_str() {
            "mmsd" => Some(Self::mmsd()),
            "mmsd20" | "mmsd2" => Some(Self::mmsd2()),
            _ => None,
        }
    }

    pub fn check(&self, stats: &SplitStats) -> Result<(), ExpectationMismatch> {
        let fields = [
            ("train", self.train, stats.n_train),
            ("validation", self.validation, stats.n_validation),
            ("test", self.test, stats.n_test),
            ("sarcastic", self.sarcastic, stats.n_sarcastic),
            ("non_sarcastic", self.non_sarcastic, stats.n_non_sarcastic),
        ];
        let mismatches: Vec<FieldMismatch> = fields
            .into_iter()
            .filter(|(_, expected, actual)| expected != actual)
            .map(|(field, expected, actual)| FieldMismatch {
                field,
                expected,
                actual,
            })
            .collect();
        if mismatches.is_empty() {
            Ok(())
        } else {
            Err(ExpectationMismatch {
                dataset: self.name.clone(),
                mismatches,
            })
        }
    }
}
