//! Shared domain types: the four-dimension taxonomy, prompts and their
//! derived metadata, and prompt change records.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// One of the four orthogonal taxonomy axes: why, who, when and how.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Dimension {
    Intent,
    Role,
    Sdlc,
    Type,
}

impl Dimension {
    pub const ALL: [Dimension; 4] = [
        Dimension::Intent,
        Dimension::Role,
        Dimension::Sdlc,
        Dimension::Type,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Dimension::Intent => "INTENT",
            Dimension::Role => "ROLE",
            Dimension::Sdlc => "SDLC",
            Dimension::Type => "TYPE",
        }
    }
}

impl fmt::Display for Dimension {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Dimension {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "INTENT" => Ok(Dimension::Intent),
            "ROLE" => Ok(Dimension::Role),
            "SDLC" => Ok(Dimension::Sdlc),
            "TYPE" | "PTYPE" => Ok(Dimension::Type),
            other => Err(Error::InvalidParameter(format!("unknown dimension {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TaxonomyLabel {
    pub dimension: Dimension,
    pub name: String,
}

/// Closed per-dimension category sets. Loaded from JSON so it can be
/// extended without recompiling.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Vocabulary {
    pub dimensions: BTreeMap<Dimension, Vec<String>>,
}

pub const DEFAULT_VOCABULARY_JSON: &str = include_str!("../data/vocabulary.json");

impl Default for Vocabulary {
    fn default() -> Self {
        Vocabulary::from_json(DEFAULT_VOCABULARY_JSON).expect("bundled vocabulary is valid")
    }
}

impl Vocabulary {
    pub fn from_json(text: &str) -> Result<Self> {
        let vocab: Vocabulary = serde_json::from_str(text).map_err(|e| Error::from_json(&e))?;
        vocab.check()?;
        Ok(vocab)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    fn check(&self) -> Result<()> {
        for dim in Dimension::ALL {
            let names = self
                .dimensions
                .get(&dim)
                .ok_or_else(|| Error::InvalidVocabulary(format!("dimension {dim} missing")))?;
            if names.is_empty() {
                return Err(Error::InvalidVocabulary(format!("dimension {dim} has no categories")));
            }
            for (i, name) in names.iter().enumerate() {
                if name.trim().is_empty() {
                    return Err(Error::InvalidVocabulary(format!("blank category in {dim}")));
                }
                if names[..i].contains(name) {
                    return Err(Error::InvalidVocabulary(format!("duplicate category {name:?} in {dim}")));
                }
            }
        }
        Ok(())
    }

    /// Categories of a dimension, in file order. File order is the tie-break
    /// order for classifiers.
    pub fn categories(&self, dimension: Dimension) -> &[String] {
        self.dimensions.get(&dimension).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn position(&self, dimension: Dimension, name: &str) -> Option<usize> {
        self.categories(dimension).iter().position(|c| c == name)
    }

    pub fn validate_label(&self, dimension: Dimension, name: &str) -> Result<TaxonomyLabel> {
        if self.position(dimension, name).is_some() {
            Ok(TaxonomyLabel {
                dimension,
                name: name.to_string(),
            })
        } else {
            Err(Error::UnknownCategory {
                dimension,
                name: name.to_string(),
            })
        }
    }
}

/// A full four-dimension annotation of one prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classification {
    pub intent: TaxonomyLabel,
    pub role: TaxonomyLabel,
    pub sdlc: TaxonomyLabel,
    pub ptype: TaxonomyLabel,
    pub confidence_per_dimension: BTreeMap<Dimension, f64>,
    pub classifier_id: String,
}

impl Classification {
    /// Builds a classification from label names, validating each one.
    pub fn from_names(
        vocab: &Vocabulary,
        names: &BTreeMap<Dimension, String>,
        confidence: BTreeMap<Dimension, f64>,
        classifier_id: impl Into<String>,
    ) -> Result<Self> {
        let label = |dim: Dimension| -> Result<TaxonomyLabel> {
            let name = names
                .get(&dim)
                .ok_or_else(|| Error::InvalidParameter(format!("no label for {dim}")))?;
            vocab.validate_label(dim, name)
        };
        let classification = Classification {
            intent: label(Dimension::Intent)?,
            role: label(Dimension::Role)?,
            sdlc: label(Dimension::Sdlc)?,
            ptype: label(Dimension::Type)?,
            confidence_per_dimension: confidence,
            classifier_id: classifier_id.into(),
        };
        classification.validate(vocab)?;
        Ok(classification)
    }

    pub fn label(&self, dimension: Dimension) -> &TaxonomyLabel {
        match dimension {
            Dimension::Intent => &self.intent,
            Dimension::Role => &self.role,
            Dimension::Sdlc => &self.sdlc,
            Dimension::Type => &self.ptype,
        }
    }

    pub fn validate(&self, vocab: &Vocabulary) -> Result<()> {
        for dim in Dimension::ALL {
            let label = self.label(dim);
            if label.dimension != dim {
                return Err(Error::InvalidParameter(format!(
                    "label {:?} sits in the {dim} slot but is tagged {}",
                    label.name, label.dimension
                )));
            }
            vocab.validate_label(dim, &label.name)?;
        }
        for (dim, c) in &self.confidence_per_dimension {
            if !(0.0..=1.0).contains(c) {
                return Err(Error::InvalidParameter(format!("confidence {c} for {dim} outside [0,1]")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Manual,
    Imported,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prompt {
    pub id: String,
    pub text: String,
    pub created_at: DateTime<Utc>,
    pub updated_at: DateTime<Utc>,
    pub origin: Origin,
    pub classification: Option<Classification>,
    pub content_hash: String,
    pub length_chars: usize,
    pub word_count: usize,
}

impl Prompt {
    pub fn new(id: String, text: String, origin: Origin, now: DateTime<Utc>) -> Self {
        let meta = derive_metadata(&text);
        Prompt {
            id,
            text,
            created_at: now,
            updated_at: now,
            origin,
            classification: None,
            content_hash: meta.content_hash,
            length_chars: meta.length_chars,
            word_count: meta.word_count,
        }
    }

    /// Replaces the text and re-derives metadata. `updated_at` never moves
    /// backwards.
    pub fn set_text(&mut self, text: String, now: DateTime<Utc>) {
        let meta = derive_metadata(&text);
        self.text = text;
        self.content_hash = meta.content_hash;
        self.length_chars = meta.length_chars;
        self.word_count = meta.word_count;
        self.updated_at = now.max(self.updated_at);
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptChangeRecord {
    pub old_text: String,
    pub new_text: String,
    pub source_repo: String,
    pub source_ref: String,
}

impl PromptChangeRecord {
    pub fn validate(&self) -> Result<()> {
        if self.old_text.is_empty() && self.new_text.is_empty() {
            return Err(Error::InvalidParameter(
                "change record has neither old nor new text".into(),
            ));
        }
        Ok(())
    }

    /// Reads JSON-lines; blank lines are skipped.
    pub fn read_jsonl(text: &str) -> Result<Vec<PromptChangeRecord>> {
        let mut records = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let record: PromptChangeRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
                line: idx + 1,
                column: e.column(),
                message: e.to_string(),
            })?;
            record.validate()?;
            records.push(record);
        }
        Ok(records)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Metadata {
    pub length_chars: usize,
    pub word_count: usize,
    pub content_hash: String,
}

/// Collapses whitespace runs to one space and trims the ends. Case is kept.
pub fn normalize_whitespace(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

pub fn content_hash(text: &str) -> String {
    hex::encode(Sha256::digest(normalize_whitespace(text).as_bytes()))
}

pub fn derive_metadata(text: &str) -> Metadata {
    Metadata {
        length_chars: text.chars().count(),
        word_count: text.split_whitespace().count(),
        content_hash: content_hash(text),
    }
}
