//! The prompt library: stored prompts, templates and suggestions plus the
//! canonical single-file JSON format, and the pure library-wide operations
//! (filtering, dedup clustering, summary statistics, integrity audit).

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::classifier::{ClassifierRouting, Embedder};
use crate::error::{Error, Result};
use crate::model::{content_hash, derive_metadata, normalize_whitespace, Dimension, Prompt, Vocabulary};
use crate::optimizer::{HttpEntityBackend, HttpGrammarBackend, Suggestion, SuggestionStatus};
use crate::similarity::{meets_threshold, word_set, NgramProfile, SimilarityConfig};
use crate::template::Template;

pub const SCHEMA_VERSION: u64 = 1;
pub const SAMPLE_LIBRARY_JSON: &str = include_str!("../data/sample_library.json");

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierSettings {
    pub routing: ClassifierRouting,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rules_path: Option<String>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub model_paths: BTreeMap<Dimension, String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerSettings {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dictionary_path: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub patterns_path: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grammar_backend: Option<HttpGrammarBackend>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ner_backend: Option<HttpEntityBackend>,
}

/// Settings stored inside the library file. Relative paths resolve against
/// the directory holding the library.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct LibraryConfig {
    pub similarity: SimilarityConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub vocabulary_path: Option<String>,
    pub classifier: ClassifierSettings,
    pub optimizer: OptimizerSettings,
}

impl LibraryConfig {
    pub fn validate(&self) -> Result<()> {
        self.similarity.validate()?;
        self.classifier.routing.validate()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct LibraryDocument {
    schema_version: u64,
    #[serde(default)]
    config: LibraryConfig,
    prompts: Vec<Prompt>,
    templates: Vec<Template>,
    suggestions: Vec<Suggestion>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Library {
    pub config: LibraryConfig,
    pub prompts: BTreeMap<String, Prompt>,
    pub templates: BTreeMap<String, Template>,
    pub suggestions: BTreeMap<String, Suggestion>,
}

impl Library {
    pub fn new(config: LibraryConfig) -> Self {
        Library { config, ..Default::default() }
    }

    pub fn sample() -> Self {
        Library::from_json(SAMPLE_LIBRARY_JSON).expect("bundled sample library is valid")
    }

    /// Parses the canonical format. The schema version is checked before the
    /// rest of the document is interpreted.
    pub fn from_json(text: &str) -> Result<Self> {
        let raw: Value = serde_json::from_str(text).map_err(|e| Error::from_json(&e))?;
        let version = raw.get("schema_version").and_then(Value::as_u64).ok_or_else(|| Error::Parse {
            line: 1,
            column: 1,
            message: "missing integer field \"schema_version\"".into(),
        })?;
        if version != SCHEMA_VERSION {
            return Err(Error::UnsupportedSchemaVersion(version));
        }
        let doc: LibraryDocument = serde_json::from_str(text).map_err(|e| Error::from_json(&e))?;
        doc.config.validate()?;
        let mut lib = Library::new(doc.config);
        for p in doc.prompts {
            let id = p.id.clone();
            if lib.prompts.insert(id.clone(), p).is_some() {
                return Err(Error::InvalidParameter(format!("duplicate prompt id {id}")));
            }
        }
        for t in doc.templates {
            t.validate()?;
            let id = t.id.clone();
            if lib.templates.insert(id.clone(), t).is_some() {
                return Err(Error::InvalidParameter(format!("duplicate template id {id}")));
            }
        }
        for s in doc.suggestions {
            s.validate()?;
            let id = s.id.clone();
            if lib.suggestions.insert(id.clone(), s).is_some() {
                return Err(Error::InvalidParameter(format!("duplicate suggestion id {id}")));
            }
        }
        let problems = lib.audit(None);
        if !problems.is_empty() {
            return Err(Error::InvalidParameter(format!("library failed integrity audit: {}", problems.join("; "))));
        }
        Ok(lib)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Canonical text: sorted keys, records ordered by id, two-space indent,
    /// trailing newline. Equal libraries give identical bytes.
    pub fn to_json(&self) -> String {
        let doc = LibraryDocument {
            schema_version: SCHEMA_VERSION,
            config: self.config.clone(),
            prompts: self.prompts.values().cloned().collect(),
            templates: self.templates.values().cloned().collect(),
            suggestions: self.suggestions.values().cloned().collect(),
        };
        // Going through Value sorts object keys.
        let value = serde_json::to_value(&doc).expect("library documents always serialize");
        let mut text = serde_json::to_string_pretty(&value).expect("values always serialize");
        text.push('\n');
        text
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::atomic_write(path, self.to_json().as_bytes())
    }

    pub fn prompt(&self, id: &str) -> Result<&Prompt> {
        self.prompts.get(id).ok_or_else(|| Error::not_found("prompt", id))
    }

    pub fn template(&self, id: &str) -> Result<&Template> {
        self.templates.get(id).ok_or_else(|| Error::not_found("template", id))
    }

    pub fn suggestion(&self, id: &str) -> Result<&Suggestion> {
        self.suggestions.get(id).ok_or_else(|| Error::not_found("suggestion", id))
    }

    /// Suggestions of one prompt in review order: kind, then span.
    pub fn suggestions_for(&self, prompt_id: &str, pending_only: bool) -> Vec<&Suggestion> {
        let mut out: Vec<&Suggestion> = self
            .suggestions
            .values()
            .filter(|s| s.prompt_id == prompt_id)
            .filter(|s| !pending_only || s.status == SuggestionStatus::Pending)
            .collect();
        out.sort_by(|a, b| {
            (a.kind, a.span.start, a.span.end, &a.id).cmp(&(b.kind, b.span.start, b.span.end, &b.id))
        });
        out
    }

    /// Prompts in creation order (ties by id).
    pub fn prompts_in_order(&self) -> Vec<&Prompt> {
        let mut out: Vec<&Prompt> = self.prompts.values().collect();
        out.sort_by(|a, b| (a.created_at, &a.id).cmp(&(b.created_at, &b.id)));
        out
    }

    pub fn list(&self, filter: &PromptFilter) -> Vec<&Prompt> {
        self.prompts_in_order().into_iter().filter(|p| filter.matches(p)).collect()
    }

    /// Latest timestamp anywhere in the library.
    pub fn latest_timestamp(&self) -> Option<chrono::DateTime<chrono::Utc>> {
        self.prompts
            .values()
            .flat_map(|p| [p.created_at, p.updated_at])
            .chain(self.templates.values().map(|t| t.created_at))
            .max()
    }

    /// Referential and derived-data integrity problems; empty when sound.
    pub fn audit(&self, vocab: Option<&Vocabulary>) -> Vec<String> {
        let mut problems = Vec::new();
        for (id, p) in &self.prompts {
            if *id != p.id {
                problems.push(format!("prompt stored under {id} has id {}", p.id));
            }
            let meta = derive_metadata(&p.text);
            if meta.content_hash != p.content_hash || meta.length_chars != p.length_chars || meta.word_count != p.word_count {
                problems.push(format!("prompt {id} metadata does not match its text"));
            }
            if p.updated_at < p.created_at {
                problems.push(format!("prompt {id} updated before it was created"));
            }
            if let (Some(v), Some(c)) = (vocab, &p.classification) {
                if let Err(e) = c.validate(v) {
                    problems.push(format!("prompt {id}: {e}"));
                }
            }
        }
        for (id, s) in &self.suggestions {
            if *id != s.id {
                problems.push(format!("suggestion stored under {id} has id {}", s.id));
            }
            match self.prompts.get(&s.prompt_id) {
                None => problems.push(format!("suggestion {id} references missing prompt {}", s.prompt_id)),
                Some(p) => {
                    if s.base_content_hash == p.content_hash && s.span.end > p.text.chars().count() {
                        problems.push(format!("suggestion {id} span exceeds its prompt"));
                    }
                }
            }
        }
        for (id, t) in &self.templates {
            if *id != t.id {
                problems.push(format!("template stored under {id} has id {}", t.id));
            }
            if let Err(e) = t.validate() {
                problems.push(format!("template {id}: {e}"));
            }
            for src in &t.source_prompt_ids {
                if !self.prompts.contains_key(src) && !t.tombstoned_source_ids.contains(src) {
                    problems.push(format!("template {id} references missing prompt {src}"));
                }
            }
        }
        problems
    }

    /// Removes a prompt and its suggestions; templates keep the id but mark
    /// it tombstoned.
    pub fn remove_prompt(&mut self, id: &str) -> Result<Prompt> {
        let prompt = self.prompts.remove(id).ok_or_else(|| Error::not_found("prompt", id))?;
        self.suggestions.retain(|_, s| s.prompt_id != id);
        for t in self.templates.values_mut() {
            if t.source_prompt_ids.iter().any(|s| s == id) && !t.tombstoned_source_ids.iter().any(|s| s == id) {
                t.tombstoned_source_ids.push(id.to_string());
            }
        }
        Ok(prompt)
    }
}

/// Conjunctive exact-match filter; unset dimensions match everything.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptFilter {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intent: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub role: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sdlc: Option<String>,
    #[serde(default, rename = "type", skip_serializing_if = "Option::is_none")]
    pub ptype: Option<String>,
}

impl PromptFilter {
    pub fn get(&self, dim: Dimension) -> Option<&str> {
        match dim {
            Dimension::Intent => self.intent.as_deref(),
            Dimension::Role => self.role.as_deref(),
            Dimension::Sdlc => self.sdlc.as_deref(),
            Dimension::Type => self.ptype.as_deref(),
        }
    }

    pub fn is_empty(&self) -> bool {
        Dimension::ALL.iter().all(|&d| self.get(d).is_none())
    }

    pub fn matches(&self, prompt: &Prompt) -> bool {
        if self.is_empty() {
            return true;
        }
        let Some(c) = &prompt.classification else { return false };
        Dimension::ALL
            .iter()
            .all(|&d| self.get(d).is_none_or(|want| c.label(d).name == want))
    }

    /// Rejects labels outside the vocabulary.
    pub fn validate(&self, vocab: &Vocabulary) -> Result<()> {
        for dim in Dimension::ALL {
            if let Some(name) = self.get(dim) {
                vocab.validate_label(dim, name)?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DedupReport {
    /// Multi-member clusters, each listed keeper first.
    pub clusters: Vec<Vec<String>>,
    pub removed_ids: Vec<String>,
    pub kept_ids: Vec<String>,
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

/// Groups prompts whose pairwise score reaches `threshold` by transitive
/// closure. Each cluster keeps its earliest prompt (ties: smallest id).
pub fn dedup_plan<F>(prompts: &[&Prompt], threshold: f64, score: F) -> DedupReport
where
    F: Fn(usize, usize) -> f64 + Sync,
{
    let n = prompts.len();
    let pairs: Vec<(usize, usize)> = (0..n)
        .into_par_iter()
        .flat_map_iter(|i| {
            let score = &score;
            (i + 1..n).filter(move |&j| meets_threshold(score(i, j), threshold)).map(move |j| (i, j))
        })
        .collect();
    let mut parent: Vec<usize> = (0..n).collect();
    for (i, j) in pairs {
        let (a, b) = (find(&mut parent, i), find(&mut parent, j));
        if a != b {
            parent[a.max(b)] = a.min(b);
        }
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..n {
        let root = find(&mut parent, i);
        groups.entry(root).or_default().push(i);
    }
    let mut clusters = Vec::new();
    let mut removed = Vec::new();
    let mut kept = Vec::new();
    for members in groups.into_values().filter(|m| m.len() > 1) {
        let mut ids: Vec<&Prompt> = members.iter().map(|&i| prompts[i]).collect();
        ids.sort_by(|a, b| (a.created_at, &a.id).cmp(&(b.created_at, &b.id)));
        kept.push(ids[0].id.clone());
        removed.extend(ids[1..].iter().map(|p| p.id.clone()));
        clusters.push(ids.iter().map(|p| p.id.clone()).collect());
    }
    clusters.sort();
    removed.sort();
    kept.sort();
    DedupReport { clusters, removed_ids: removed, kept_ids: kept }
}

/// Dedup plan over character n-gram cosine (the default backend).
pub fn dedup_plan_ngram(prompts: &[&Prompt], threshold: f64, ngram: usize) -> Result<DedupReport> {
    let profiles = prompts.iter().map(|p| NgramProfile::new(&p.text, ngram)).collect::<Result<Vec<_>>>()?;
    Ok(dedup_plan(prompts, threshold, |i, j| profiles[i].cosine(&profiles[j])))
}

/// Dedup plan over an external embedding (cosine of the vectors).
pub fn dedup_plan_embedded(prompts: &[&Prompt], threshold: f64, embedder: &dyn Embedder) -> Result<DedupReport> {
    let vectors = prompts.iter().map(|p| embedder.embed(&normalize_whitespace(&p.text))).collect::<Result<Vec<_>>>()?;
    Ok(dedup_plan(prompts, threshold, |i, j| vector_cosine(&vectors[i], &vectors[j])))
}

fn vector_cosine(a: &[f64], b: &[f64]) -> f64 {
    if a == b {
        return 1.0;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(0.0, 1.0)
}

// ---------------------------------------------------------------------------
// Summary

pub const TLDR_MIN_WORDS: usize = 50;
pub const TLDR_MAX_WORDS: usize = 100;
pub const TOPIC_COUNT: usize = 10;

/// Fixed TL;DR for a library with no prompts (exactly 50 words).
pub const EMPTY_LIBRARY_NOTICE: &str = "This prompt library is currently empty, so there is nothing to summarize yet. \
Add prompts from your daily development work, such as requests for code generation, reviews, tests, or documentation. \
Once prompts are stored, this summary will describe their main topics, the most common intents, and the roles they target.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LibrarySummary {
    pub prompt_count: usize,
    pub classified_count: usize,
    pub topics: Vec<String>,
    pub intent_distribution: BTreeMap<String, usize>,
    pub role_distribution: BTreeMap<String, usize>,
    pub tldr: String,
    /// "gateway" or "offline".
    pub source: String,
}

const STOPWORDS: &[&str] = &[
    "a", "about", "above", "after", "again", "against", "all", "also", "am", "an", "and", "any", "are", "as", "at",
    "be", "because", "been", "before", "being", "below", "between", "both", "but", "by", "can", "could", "did", "do",
    "does", "doing", "down", "during", "each", "etc", "few", "for", "from", "further", "get", "give", "had", "has",
    "have", "having", "he", "her", "here", "hers", "him", "his", "how", "i", "if", "in", "into", "is", "it", "its",
    "itself", "just", "let", "like", "make", "me", "more", "most", "my", "need", "no", "nor", "not", "now", "of",
    "off", "on", "once", "one", "only", "or", "other", "our", "ours", "out", "over", "own", "please", "same", "she",
    "should", "so", "some", "such", "than", "that", "the", "their", "theirs", "them", "then", "there", "these",
    "they", "this", "those", "through", "to", "too", "under", "until", "up", "us", "use", "using", "very", "want",
    "was", "we", "were", "what", "when", "where", "which", "while", "who", "whom", "why", "will", "with", "would",
    "you", "your", "yours",
];

pub fn is_stopword(word: &str) -> bool {
    STOPWORDS.binary_search(&word).is_ok()
}

/// Counts per label over classified prompts; labels with no prompts are
/// absent.
pub fn distributions(library: &Library) -> (BTreeMap<String, usize>, BTreeMap<String, usize>) {
    let mut intent = BTreeMap::new();
    let mut role = BTreeMap::new();
    for c in library.prompts.values().filter_map(|p| p.classification.as_ref()) {
        *intent.entry(c.intent.name.clone()).or_default() += 1;
        *role.entry(c.role.name.clone()).or_default() += 1;
    }
    (intent, role)
}

/// Most frequent non-stopword tokens by document frequency, ties broken
/// alphabetically.
pub fn offline_topics<'a>(texts: impl IntoIterator<Item = &'a str>) -> Vec<String> {
    let mut df: BTreeMap<String, usize> = BTreeMap::new();
    for text in texts {
        for w in word_set(text) {
            if w.len() < 2 || is_stopword(&w) || w.chars().all(|c| c.is_ascii_digit()) {
                continue;
            }
            *df.entry(w).or_default() += 1;
        }
    }
    let mut ranked: Vec<(String, usize)> = df.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.into_iter().take(TOPIC_COUNT).map(|(w, _)| w).collect()
}

const TLDR_PADDING: &[&str] = &[
    "Prompts in the library can be searched by intent, role, lifecycle stage and prompt type.",
    "Similar prompts can be merged into reusable templates with placeholders for the parts that change.",
    "Spelling, grammar and sensitive data suggestions help keep stored prompts clean and safe to share.",
    "Duplicates can be removed so that each request is stored only once.",
];

fn words(text: &str) -> Vec<&str> {
    text.split_whitespace().collect()
}

/// Clamps a text into the TL;DR word bounds: longer texts are cut at the
/// maximum, shorter ones are extended with fixed library-description
/// sentences.
pub fn fit_word_bounds(text: &str) -> String {
    let mut out: Vec<String> = words(text).into_iter().map(str::to_string).collect();
    let mut pad = TLDR_PADDING.iter().cycle();
    while out.len() < TLDR_MIN_WORDS {
        out.extend(words(pad.next().expect("padding cycles forever")).into_iter().map(str::to_string));
    }
    if out.len() > TLDR_MAX_WORDS {
        out.truncate(TLDR_MAX_WORDS);
        if let Some(last) = out.last_mut() {
            let trimmed = last.trim_end_matches(|c: char| !c.is_alphanumeric()).to_string();
            *last = format!("{trimmed}.");
        }
    }
    out.join(" ")
}

fn top_label(dist: &BTreeMap<String, usize>) -> Option<(&str, usize)> {
    dist.iter()
        .max_by(|a, b| a.1.cmp(b.1).then_with(|| b.0.cmp(a.0)))
        .map(|(k, v)| (k.as_str(), *v))
}

/// Deterministic extractive TL;DR: library statistics followed by the
/// opening words of prompts in creation order.
pub fn offline_tldr(library: &Library, topics: &[String]) -> String {
    if library.prompts.is_empty() {
        return EMPTY_LIBRARY_NOTICE.to_string();
    }
    let (intent, role) = distributions(library);
    let n = library.prompts.len();
    let mut s = format!("The library holds {n} prompt{}.", if n == 1 { "" } else { "s" });
    if let Some((label, k)) = top_label(&intent) {
        s.push_str(&format!(" The most common intent is {label} ({k} of {n})."));
    }
    if let Some((label, k)) = top_label(&role) {
        s.push_str(&format!(" Most prompts target the {label} role ({k} of {n})."));
    }
    if !topics.is_empty() {
        let shown: Vec<&str> = topics.iter().take(5).map(String::as_str).collect();
        s.push_str(&format!(" Main topics: {}.", shown.join(", ")));
    }
    for p in library.prompts_in_order() {
        if words(&s).len() >= TLDR_MAX_WORDS {
            break;
        }
        let opening: Vec<&str> = words(&p.text).into_iter().take(20).collect();
        let mut sentence = opening.join(" ");
        let cleaned = sentence.trim_end_matches(|c: char| !c.is_alphanumeric()).to_string();
        sentence = cleaned;
        if !sentence.is_empty() {
            s.push_str(&format!(" Example: {sentence}."));
        }
    }
    fit_word_bounds(&s)
}

pub fn offline_summary(library: &Library) -> LibrarySummary {
    let topics = offline_topics(library.prompts.values().map(|p| p.text.as_str()));
    let (intent, role) = distributions(library);
    LibrarySummary {
        prompt_count: library.prompts.len(),
        classified_count: library.prompts.values().filter(|p| p.classification.is_some()).count(),
        tldr: offline_tldr(library, &topics),
        topics,
        intent_distribution: intent,
        role_distribution: role,
        source: "offline".into(),
    }
}

/// True when `hash` is the current content hash of `text`.
pub fn hash_matches(text: &str, hash: &str) -> bool {
    content_hash(text) == hash
}

/// Ids present in both sets, for callers reconciling lists.
pub fn common_ids<'a>(a: &'a BTreeSet<String>, b: &'a BTreeSet<String>) -> impl Iterator<Item = &'a String> {
    a.intersection(b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Origin;
    use chrono::{TimeZone, Utc};

    fn prompt(id: &str, text: &str, secs: i64) -> Prompt {
        Prompt::new(id.into(), text.into(), Origin::Manual, Utc.timestamp_opt(1_700_000_000 + secs, 0).unwrap())
    }

    #[test]
    fn empty_notice_has_fifty_words() {
        assert_eq!(EMPTY_LIBRARY_NOTICE.split_whitespace().count(), 50);
        let s = offline_summary(&Library::default());
        assert_eq!(s.tldr, EMPTY_LIBRARY_NOTICE);
        assert!(s.intent_distribution.is_empty() && s.role_distribution.is_empty() && s.topics.is_empty());
    }

    #[test]
    fn stopwords_are_sorted_for_binary_search() {
        let mut sorted = STOPWORDS.to_vec();
        sorted.sort();
        assert_eq!(sorted, STOPWORDS);
        assert!(is_stopword("the") && !is_stopword("query"));
    }

    #[test]
    fn word_bounds() {
        let long = "word ".repeat(120);
        assert_eq!(fit_word_bounds(&long).split_whitespace().count(), 100);
        let short = fit_word_bounds("Tiny.");
        let n = short.split_whitespace().count();
        assert!((50..=100).contains(&n), "{n}");
    }

    #[test]
    fn canonical_round_trip() {
        let mut lib = Library::default();
        for (i, t) in ["one prompt", "two prompt"].iter().enumerate() {
            let p = prompt(&format!("p{i}"), t, i as i64);
            lib.prompts.insert(p.id.clone(), p);
        }
        let text = lib.to_json();
        let back = Library::from_json(&text).unwrap();
        assert_eq!(back, lib);
        assert_eq!(back.to_json(), text);
    }

    #[test]
    fn import_errors() {
        assert!(matches!(
            Library::from_json(r#"{"schema_version": 999, "prompts": 5}"#),
            Err(Error::UnsupportedSchemaVersion(999))
        ));
        match Library::from_json("{\n  \"schema_version\": 1,\n  \"prompts\": [}\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn sample_library_has_two_prompts() {
        let lib = Library::sample();
        assert_eq!(lib.prompts.len(), 2);
        assert!(lib.audit(Some(&Vocabulary::default())).is_empty());
    }

    #[test]
    fn dedup_keeps_earliest() {
        let a = prompt("b", "same text", 0);
        let b = prompt("a", "same  text", 5);
        let c = prompt("c", "other text entirely", 1);
        let report = dedup_plan_ngram(&[&a, &b, &c], 0.999, 3).unwrap();
        assert_eq!(report.clusters, vec![vec!["b".to_string(), "a".to_string()]]);
        assert_eq!(report.removed_ids, vec!["a"]);
        assert_eq!(report.kept_ids, vec!["b"]);
    }

    #[test]
    fn filters_are_conjunctive() {
        let f = PromptFilter { intent: Some("Code Generation".into()), ..Default::default() };
        let p = prompt("x", "text", 0);
        assert!(!f.matches(&p));
        assert!(PromptFilter::default().matches(&p));
        assert!(f.validate(&Vocabulary::default()).is_ok());
        let bad = PromptFilter { role: Some("Wizard".into()), ..Default::default() };
        assert!(bad.validate(&Vocabulary::default()).is_err());
    }
}
