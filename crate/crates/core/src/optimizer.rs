//! Reviewable edit suggestions: spelling, grammar and sensitive-data
//! redaction. Detectors are pure functions of the text; the library layer
//! adds template suggestions and stores the results.

use std::collections::HashMap;
use std::path::Path;
use std::sync::{Arc, LazyLock};
use std::time::Duration;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::gateway;
use crate::model::content_hash;

pub const REDACTED: &str = "[REDACTED]";
pub const STALE_RATIONALE: &str = "stale";

const DEFAULT_WORDS: &str = include_str!("../data/words_en.txt");
const TECH_WORDS: &str = include_str!("../data/words_tech.txt");
pub const DEFAULT_PATTERNS_JSON: &str = include_str!("../data/sensitive_patterns.json");

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SuggestionKind {
    Anonymization,
    Spelling,
    Grammar,
    Template,
}

impl SuggestionKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SuggestionKind::Anonymization => "ANONYMIZATION",
            SuggestionKind::Spelling => "SPELLING",
            SuggestionKind::Grammar => "GRAMMAR",
            SuggestionKind::Template => "TEMPLATE",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SuggestionStatus {
    Pending,
    Accepted,
    Rejected,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SensitiveEntityKind {
    Email,
    ApiKey,
    Password,
    Phone,
    CreditCard,
    IpAddress,
    Url,
    PersonName,
}

impl SensitiveEntityKind {
    pub fn confidence(self) -> f64 {
        match self {
            SensitiveEntityKind::ApiKey
            | SensitiveEntityKind::Password
            | SensitiveEntityKind::CreditCard => 0.99,
            SensitiveEntityKind::Email => 0.98,
            SensitiveEntityKind::Phone | SensitiveEntityKind::IpAddress => 0.96,
            SensitiveEntityKind::Url | SensitiveEntityKind::PersonName => 0.95,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SensitiveEntityKind::Email => "EMAIL",
            SensitiveEntityKind::ApiKey => "API_KEY",
            SensitiveEntityKind::Password => "PASSWORD",
            SensitiveEntityKind::Phone => "PHONE",
            SensitiveEntityKind::CreditCard => "CREDIT_CARD",
            SensitiveEntityKind::IpAddress => "IP_ADDRESS",
            SensitiveEntityKind::Url => "URL",
            SensitiveEntityKind::PersonName => "PERSON_NAME",
        }
    }
}

/// Half-open range of character (not byte) offsets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Span { start, end }
    }

    pub fn overlaps(&self, other: &Span) -> bool {
        self.start < other.end && other.start < self.end
    }
}

/// A detector result before it is attached to a stored prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub kind: SuggestionKind,
    pub span: Span,
    pub replacement: String,
    pub confidence: f64,
    pub rationale: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entity: Option<SensitiveEntityKind>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Suggestion {
    pub id: String,
    pub prompt_id: String,
    pub kind: SuggestionKind,
    pub span: Span,
    pub replacement: String,
    pub confidence: f64,
    pub rationale: String,
    pub status: SuggestionStatus,
    pub base_content_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entity: Option<SensitiveEntityKind>,
    /// For TEMPLATE suggestions: the similar prompts that triggered it.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub related_prompt_ids: Vec<String>,
}

impl Suggestion {
    pub fn from_proposal(id: String, prompt_id: &str, text: &str, proposal: Proposal) -> Self {
        Suggestion {
            id,
            prompt_id: prompt_id.to_string(),
            kind: proposal.kind,
            span: proposal.span,
            replacement: proposal.replacement,
            confidence: proposal.confidence,
            rationale: proposal.rationale,
            status: SuggestionStatus::Pending,
            base_content_hash: content_hash(text),
            entity: proposal.entity,
            related_prompt_ids: Vec::new(),
        }
    }

    /// True when two suggestions propose the same edit (ids and status aside).
    pub fn same_edit(&self, other: &Suggestion) -> bool {
        self.prompt_id == other.prompt_id
            && self.kind == other.kind
            && self.span == other.span
            && self.replacement == other.replacement
            && self.base_content_hash == other.base_content_hash
    }

    pub fn validate(&self) -> Result<()> {
        if self.span.start > self.span.end {
            return Err(Error::InvalidParameter(format!(
                "suggestion {} has inverted span",
                self.id
            )));
        }
        if !(0.0..=1.0).contains(&self.confidence) {
            return Err(Error::InvalidParameter(format!(
                "suggestion {} confidence outside [0,1]",
                self.id
            )));
        }
        Ok(())
    }
}

/// Replaces the character span `span` of `text`. Everything outside the
/// span is copied unchanged.
pub fn apply_span(text: &str, span: Span, replacement: &str) -> Result<String> {
    let len = text.chars().count();
    if span.start > span.end || span.end > len {
        return Err(Error::InvalidParameter(format!(
            "span {}..{} outside text of {len} characters",
            span.start, span.end
        )));
    }
    let start = char_to_byte(text, span.start);
    let end = char_to_byte(text, span.end);
    let mut out = String::with_capacity(text.len() + replacement.len());
    out.push_str(&text[..start]);
    out.push_str(replacement);
    out.push_str(&text[end..]);
    Ok(out)
}

fn char_to_byte(text: &str, idx: usize) -> usize {
    text.char_indices().nth(idx).map_or(text.len(), |(b, _)| b)
}

/// Byte offset → character offset lookup for one text.
struct CharIndex {
    table: Vec<usize>,
}

impl CharIndex {
    fn new(text: &str) -> Self {
        let mut table = vec![0; text.len() + 1];
        let mut chars = 0;
        for (b, c) in text.char_indices() {
            for slot in &mut table[b..b + c.len_utf8()] {
                *slot = chars;
            }
            chars += 1;
        }
        table[text.len()] = chars;
        CharIndex { table }
    }

    fn span(&self, start: usize, end: usize) -> Span {
        Span::new(self.table[start], self.table[end])
    }
}

/// Spelling confidence: longer words and smaller edits are more certain.
pub fn spelling_confidence(len: usize, distance: usize) -> f64 {
    let raw = 0.60 + 0.04 * len as f64 - 0.10 * (distance as f64 - 1.0);
    raw.clamp(0.50, 0.90)
}

/// Grammar edits sit slightly below the matching spelling confidence.
pub fn grammar_confidence(len: usize) -> f64 {
    (spelling_confidence(len, 1) - 0.05).max(0.50)
}

/// Optimal string alignment distance (adjacent transpositions cost 1).
pub fn osa_distance(a: &[u8], b: &[u8]) -> usize {
    let (n, m) = (a.len(), b.len());
    let mut d = vec![vec![0usize; m + 1]; n + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=m {
        d[0][j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let cost = usize::from(a[i - 1] != b[j - 1]);
            let mut v = (d[i - 1][j] + 1).min(d[i][j - 1] + 1).min(d[i - 1][j - 1] + cost);
            if i > 1 && j > 1 && a[i - 1] == b[j - 2] && a[i - 2] == b[j - 1] {
                v = v.min(d[i - 2][j - 2] + 1);
            }
            d[i][j] = v;
        }
    }
    d[n][m]
}

/// Frequency-ordered word list. Earlier words win ties between candidates
/// at the same distance.
#[derive(Debug, Clone)]
pub struct Dictionary {
    words: Vec<String>,
    rank: HashMap<String, usize>,
}

pub const MAX_SPELLING_DISTANCE: usize = 2;

impl Dictionary {
    pub fn from_words<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut dict = Dictionary { words: Vec::new(), rank: HashMap::new() };
        dict.extend(words);
        dict
    }

    /// Appends words not yet present; they rank after existing entries.
    pub fn extend<I, S>(&mut self, words: I)
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        for w in words {
            let w = w.as_ref().trim().to_lowercase();
            if w.is_empty() || self.rank.contains_key(&w) {
                continue;
            }
            self.rank.insert(w.clone(), self.words.len());
            self.words.push(w);
        }
    }

    /// One word per line, most frequent first.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(Self::from_words(text.lines()))
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn contains(&self, word: &str) -> bool {
        self.rank.contains_key(&word.to_lowercase())
    }

    /// Closest dictionary word within `MAX_SPELLING_DISTANCE`; ties go to
    /// the more frequent word.
    pub fn best_candidate(&self, word: &str) -> Option<(&str, usize)> {
        let target = word.to_lowercase();
        let t = target.as_bytes();
        let mut best: Option<(usize, usize)> = None;
        for (rank, cand) in self.words.iter().enumerate() {
            let c = cand.as_bytes();
            if c.len().abs_diff(t.len()) > MAX_SPELLING_DISTANCE {
                continue;
            }
            let d = osa_distance(t, c);
            if d == 0 || d > MAX_SPELLING_DISTANCE {
                continue;
            }
            if best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, rank));
                if d == 1 {
                    // Words are scanned in rank order, so nothing later can
                    // beat a distance-1 hit.
                    break;
                }
            }
        }
        best.map(|(d, rank)| (self.words[rank].as_str(), d))
    }
}

static DEFAULT_DICTIONARY: LazyLock<Arc<Dictionary>> = LazyLock::new(|| {
    let mut dict = Dictionary::from_words(DEFAULT_WORDS.lines());
    dict.extend(TECH_WORDS.lines());
    Arc::new(dict)
});

pub fn default_dictionary() -> Arc<Dictionary> {
    DEFAULT_DICTIONARY.clone()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Casing {
    Lower,
    Upper,
    Title,
}

fn casing(word: &str) -> Option<Casing> {
    let mut chars = word.chars();
    let first = chars.next()?;
    let rest: Vec<char> = chars.collect();
    if word.chars().all(|c| c.is_ascii_lowercase()) {
        Some(Casing::Lower)
    } else if word.chars().all(|c| c.is_ascii_uppercase()) {
        Some(Casing::Upper)
    } else if first.is_ascii_uppercase() && rest.iter().all(|c| c.is_ascii_lowercase()) {
        Some(Casing::Title)
    } else {
        None
    }
}

fn apply_casing(word: &str, casing: Casing) -> String {
    match casing {
        Casing::Lower => word.to_lowercase(),
        Casing::Upper => word.to_uppercase(),
        Casing::Title => capitalize(word),
    }
}

fn capitalize(word: &str) -> String {
    let mut chars = word.chars();
    match chars.next() {
        Some(first) => first.to_uppercase().chain(chars).collect(),
        None => String::new(),
    }
}

/// A whitespace-delimited piece of text plus its alphanumeric core, all as
/// byte ranges.
#[derive(Debug, Clone, Copy)]
struct Chunk<'a> {
    start: usize,
    end: usize,
    core_start: usize,
    core_end: usize,
    text: &'a str,
}

impl<'a> Chunk<'a> {
    fn core(&self, full: &'a str) -> &'a str {
        &full[self.core_start..self.core_end]
    }

    fn has_core(&self) -> bool {
        self.core_start < self.core_end
    }

    fn bare(&self) -> bool {
        self.core_start == self.start && self.core_end == self.end
    }
}

fn make_chunk(text: &str, s: usize, e: usize) -> Chunk<'_> {
    let piece = &text[s..e];
    let lead = piece.len() - piece.trim_start_matches(|c: char| !c.is_alphanumeric()).len();
    let trimmed = piece.trim_end_matches(|c: char| !c.is_alphanumeric());
    let (core_start, core_end) = if lead >= trimmed.len() {
        (s, s)
    } else {
        (s + lead, s + trimmed.len())
    };
    Chunk { start: s, end: e, core_start, core_end, text: piece }
}

fn chunks(text: &str) -> Vec<Chunk<'_>> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, c) in text.char_indices() {
        if c.is_whitespace() {
            if let Some(s) = start.take() {
                out.push(make_chunk(text, s, i));
            }
        } else if start.is_none() {
            start = Some(i);
        }
    }
    if let Some(s) = start {
        out.push(make_chunk(text, s, text.len()));
    }
    out
}

fn is_word(core: &str) -> bool {
    !core.is_empty() && core.chars().all(|c| c.is_ascii_alphabetic())
}

/// Chunks that look like code, markup or addresses are never spell-checked.
fn codeish(chunk: &str) -> bool {
    chunk.contains("{{")
        || chunk.contains("}}")
        || chunk.contains('`')
        || chunk.contains('@')
        || chunk.contains('/')
        || chunk.contains('\\')
        || chunk.contains('_')
        || chunk.contains('<')
        || chunk.contains('=')
}

pub fn check_spelling_with(dict: &Dictionary, text: &str) -> Vec<Proposal> {
    let idx = CharIndex::new(text);
    let mut out = Vec::new();
    for chunk in chunks(text) {
        if !chunk.has_core() || codeish(chunk.text) {
            continue;
        }
        let core = chunk.core(text);
        if !is_word(core) || core.len() < 2 {
            continue;
        }
        let Some(case) = casing(core) else { continue };
        // Short all-caps tokens are treated as acronyms.
        if case == Casing::Upper && core.len() <= 4 {
            continue;
        }
        if dict.contains(core) {
            continue;
        }
        if let Some((cand, d)) = dict.best_candidate(core) {
            out.push(Proposal {
                kind: SuggestionKind::Spelling,
                span: idx.span(chunk.core_start, chunk.core_end),
                replacement: apply_casing(cand, case),
                confidence: spelling_confidence(core.chars().count(), d),
                rationale: format!("'{core}' is not in the dictionary"),
                entity: None,
            });
        }
    }
    out
}

pub fn check_spelling(text: &str) -> Vec<Proposal> {
    check_spelling_with(&DEFAULT_DICTIONARY, text)
}

const DOUBLING_ALLOWED: &[&str] = &["that", "had"];
const ABBREVIATIONS: &[&str] = &[
    "e.g", "i.e", "etc", "vs", "cf", "approx", "mr", "mrs", "ms", "dr", "fig", "no", "st", "al",
];
const VOWEL_EXCEPTIONS: &[&str] = &["uni", "use", "usa", "usu", "uti", "ure", "uro", "eu", "ewe", "one", "once"];
const SILENT_H: &[&str] = &["hour", "honest", "honor", "honour", "heir"];

fn vowel_sound(word: &str) -> bool {
    let w = word.to_lowercase();
    if SILENT_H.iter().any(|p| w.starts_with(p)) {
        return true;
    }
    if VOWEL_EXCEPTIONS.iter().any(|p| w.starts_with(p)) {
        return false;
    }
    w.starts_with(['a', 'e', 'i', 'o', 'u'])
}

fn grammar_proposal(idx: &CharIndex, start: usize, end: usize, replacement: String, len: usize, why: &str) -> Proposal {
    Proposal {
        kind: SuggestionKind::Grammar,
        span: idx.span(start, end),
        replacement,
        confidence: grammar_confidence(len),
        rationale: why.to_string(),
        entity: None,
    }
}

fn doubled_words(text: &str, cs: &[Chunk<'_>], idx: &CharIndex) -> Vec<Proposal> {
    let mut out = Vec::new();
    for pair in cs.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        let (ca, cb) = (a.core(text), b.core(text));
        if !is_word(ca) || !ca.eq_ignore_ascii_case(cb) {
            continue;
        }
        if a.core_end != a.end || b.core_start != b.start {
            continue;
        }
        if DOUBLING_ALLOWED.contains(&ca.to_lowercase().as_str()) {
            continue;
        }
        out.push(grammar_proposal(
            idx,
            a.core_start,
            b.core_end,
            ca.to_string(),
            ca.chars().count(),
            "doubled word",
        ));
    }
    out
}

fn article_agreement(text: &str, cs: &[Chunk<'_>], idx: &CharIndex) -> Vec<Proposal> {
    let mut out = Vec::new();
    for pair in cs.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        if !a.bare() || b.core_start != b.start {
            continue;
        }
        let article = a.core(text);
        let next = b.core(text);
        let is_an = match article.to_lowercase().as_str() {
            "a" => false,
            "an" => true,
            _ => continue,
        };
        if !next.starts_with(|c: char| c.is_ascii_alphabetic()) {
            continue;
        }
        // Acronyms are read letter by letter or as words; either is fine.
        let lead: String = next.chars().take_while(|c| c.is_ascii_alphabetic()).collect();
        if lead.len() >= 2 && lead.chars().all(|c| c.is_ascii_uppercase()) {
            continue;
        }
        let wants_an = vowel_sound(&lead);
        if wants_an == is_an {
            continue;
        }
        let fixed = match (wants_an, article) {
            (true, "A") => "An",
            (true, _) => "an",
            (false, "An") | (false, "AN") => "A",
            (false, _) => "a",
        };
        let why = if wants_an {
            "use 'an' before a vowel sound"
        } else {
            "use 'a' before a consonant sound"
        };
        out.push(grammar_proposal(idx, a.core_start, a.core_end, fixed.to_string(), fixed.len(), why));
    }
    out
}

fn ends_sentence(text: &str, chunk: &Chunk<'_>) -> bool {
    let tail = chunk.text.trim_end_matches(['"', '\'', ')', ']']);
    if tail.ends_with("..") {
        return false;
    }
    if !tail.ends_with(['.', '!', '?']) {
        return false;
    }
    let core = chunk.core(text).to_lowercase();
    !(tail.ends_with('.') && ABBREVIATIONS.contains(&core.as_str()))
}

fn sentence_capitals(text: &str, cs: &[Chunk<'_>], idx: &CharIndex) -> Vec<Proposal> {
    let mut out = Vec::new();
    let mut at_start = true;
    for chunk in cs {
        if !chunk.has_core() {
            continue;
        }
        if at_start {
            let core = chunk.core(text);
            if chunk.core_start == chunk.start
                && !codeish(chunk.text)
                && is_word(core)
                && core.chars().all(|c| c.is_ascii_lowercase())
            {
                out.push(grammar_proposal(
                    idx,
                    chunk.core_start,
                    chunk.core_end,
                    capitalize(core),
                    core.len(),
                    "sentence should start with a capital letter",
                ));
            }
        }
        at_start = ends_sentence(text, chunk);
    }
    out
}

fn repeated_punctuation(text: &str, idx: &CharIndex) -> Vec<Proposal> {
    let mut out = Vec::new();
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut i = 0;
    while i < chars.len() {
        let (b, c) = chars[i];
        let mut j = i + 1;
        while j < chars.len() && chars[j].1 == c {
            j += 1;
        }
        let run = j - i;
        let flagged = match c {
            '!' | '?' | ',' | ';' | ':' => run >= 2,
            '.' => run == 2,
            _ => false,
        };
        if flagged {
            let end = chars.get(j).map_or(text.len(), |&(e, _)| e);
            out.push(grammar_proposal(idx, b, end, c.to_string(), run, "repeated punctuation"));
        }
        i = j;
    }
    out
}

/// Drops proposals that overlap an earlier one; earlier entries win.
fn drop_overlaps(proposals: Vec<Proposal>) -> Vec<Proposal> {
    let mut kept: Vec<Proposal> = Vec::new();
    for p in proposals {
        if kept.iter().all(|k| !k.span.overlaps(&p.span)) {
            kept.push(p);
        }
    }
    kept
}

fn sort_proposals(proposals: &mut [Proposal]) {
    proposals.sort_by_key(|p| (p.kind, p.span.start, p.span.end));
}

/// Built-in grammar rules. When rules collide on a span the earlier rule
/// wins: doubled word, article agreement, sentence capital, punctuation.
pub fn check_grammar(text: &str) -> Vec<Proposal> {
    let idx = CharIndex::new(text);
    let cs = chunks(text);
    let mut all = doubled_words(text, &cs, &idx);
    all.extend(article_agreement(text, &cs, &idx));
    all.extend(sentence_capitals(text, &cs, &idx));
    all.extend(repeated_punctuation(text, &idx));
    let mut kept = drop_overlaps(all);
    sort_proposals(&mut kept);
    kept
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatternValidator {
    Luhn,
    Ipv4,
    Phone,
    Entropy,
    NotRedacted,
    TrimTrailingPunct,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatternRuleSpec {
    pub kind: SensitiveEntityKind,
    pub pattern: String,
    pub confidence: f64,
    #[serde(default)]
    pub group: usize,
    #[serde(default)]
    pub validator: Option<PatternValidator>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatternConfig {
    pub rules: Vec<PatternRuleSpec>,
}

#[derive(Debug, Clone)]
struct CompiledRule {
    spec: PatternRuleSpec,
    regex: Regex,
}

#[derive(Debug, Clone)]
pub struct SensitivePatterns {
    rules: Vec<CompiledRule>,
}

impl SensitivePatterns {
    pub fn from_config(config: PatternConfig) -> Result<Self> {
        let mut rules = Vec::with_capacity(config.rules.len());
        for spec in config.rules {
            if !(0.95..=0.99).contains(&spec.confidence) {
                return Err(Error::InvalidParameter(format!(
                    "{} rule confidence {} outside [0.95, 0.99]",
                    spec.kind.as_str(),
                    spec.confidence
                )));
            }
            let regex = Regex::new(&spec.pattern)
                .map_err(|e| Error::InvalidParameter(format!("bad {} pattern: {e}", spec.kind.as_str())))?;
            if spec.group >= regex.captures_len() {
                return Err(Error::InvalidParameter(format!(
                    "{} pattern has no capture group {}",
                    spec.kind.as_str(),
                    spec.group
                )));
            }
            rules.push(CompiledRule { spec, regex });
        }
        Ok(SensitivePatterns { rules })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let config: PatternConfig = serde_json::from_str(text).map_err(|e| Error::from_json(&e))?;
        Self::from_config(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Raw matches as byte ranges, before overlap merging.
    fn matches(&self, text: &str) -> Vec<(usize, usize, SensitiveEntityKind, f64)> {
        let mut out = Vec::new();
        for rule in &self.rules {
            for caps in rule.regex.captures_iter(text) {
                let Some(m) = caps.get(rule.spec.group) else { continue };
                let (mut s, mut e) = (m.start(), m.end());
                if let Some(v) = rule.spec.validator {
                    match validate_match(v, &text[s..e]) {
                        Some(trimmed) => e = s + trimmed,
                        None => continue,
                    }
                }
                // Leading punctuation can sneak into generic rules.
                while s < e && text[s..].starts_with(['.', ',', ';', ':']) {
                    s += 1;
                }
                if s < e {
                    out.push((s, e, rule.spec.kind, rule.spec.confidence));
                }
            }
        }
        out
    }
}

impl Default for SensitivePatterns {
    fn default() -> Self {
        DEFAULT_PATTERNS.clone()
    }
}

static DEFAULT_PATTERNS: LazyLock<SensitivePatterns> = LazyLock::new(|| {
    SensitivePatterns::from_json(DEFAULT_PATTERNS_JSON).expect("bundled pattern rules are valid")
});

pub fn luhn_valid(digits: &str) -> bool {
    let ds: Vec<u32> = digits.chars().filter_map(|c| c.to_digit(10)).collect();
    if !(13..=19).contains(&ds.len()) {
        return false;
    }
    let sum: u32 = ds
        .iter()
        .rev()
        .enumerate()
        .map(|(i, &d)| {
            if i % 2 == 1 {
                let x = d * 2;
                if x > 9 { x - 9 } else { x }
            } else {
                d
            }
        })
        .sum();
    sum.is_multiple_of(10)
}

fn shannon_entropy(s: &str) -> f64 {
    let mut counts: HashMap<char, usize> = HashMap::new();
    for c in s.chars() {
        *counts.entry(c).or_default() += 1;
    }
    let n = s.chars().count() as f64;
    counts
        .values()
        .map(|&k| {
            let p = k as f64 / n;
            -p * p.log2()
        })
        .sum()
}

/// Returns the accepted length of the match (possibly trimmed) or `None`
/// to reject it.
fn validate_match(v: PatternValidator, m: &str) -> Option<usize> {
    let ok = match v {
        PatternValidator::Luhn => luhn_valid(m),
        PatternValidator::Ipv4 => m.split('.').all(|o| o.parse::<u16>().is_ok_and(|x| x <= 255)),
        PatternValidator::Phone => (10..=15).contains(&m.chars().filter(char::is_ascii_digit).count()),
        PatternValidator::Entropy => {
            m.chars().any(|c| c.is_ascii_digit())
                && m.chars().any(|c| c.is_ascii_uppercase())
                && m.chars().any(|c| c.is_ascii_lowercase())
                && shannon_entropy(m) >= 3.5
        }
        PatternValidator::NotRedacted => !m.starts_with(REDACTED),
        PatternValidator::TrimTrailingPunct => {
            let t = m.trim_end_matches(['.', ',', ';', ':', '!', '?']);
            return (!t.is_empty()).then_some(t.len());
        }
    };
    ok.then_some(m.len())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Entity {
    pub kind: SensitiveEntityKind,
    pub span: Span,
    pub confidence: f64,
}

/// Merges overlapping detections into their union span, keeping the kind
/// with the higher confidence (earlier start wins ties).
pub fn merge_entities(mut entities: Vec<Entity>) -> Vec<Entity> {
    entities.sort_by(|a, b| a.span.start.cmp(&b.span.start).then(b.span.end.cmp(&a.span.end)));
    let mut out: Vec<Entity> = Vec::new();
    for e in entities {
        match out.last_mut() {
            Some(cur) if e.span.start < cur.span.end => {
                cur.span.end = cur.span.end.max(e.span.end);
                if e.confidence > cur.confidence {
                    cur.kind = e.kind;
                    cur.confidence = e.confidence;
                }
            }
            _ => out.push(e),
        }
    }
    out
}

fn entity_proposal(e: &Entity) -> Proposal {
    Proposal {
        kind: SuggestionKind::Anonymization,
        span: e.span,
        replacement: REDACTED.to_string(),
        confidence: e.confidence,
        rationale: format!("{} detected", e.kind.as_str()),
        entity: Some(e.kind),
    }
}

pub fn detect_entities(patterns: &SensitivePatterns, text: &str) -> Vec<Entity> {
    let idx = CharIndex::new(text);
    let raw = patterns
        .matches(text)
        .into_iter()
        .map(|(s, e, kind, confidence)| Entity { kind, span: idx.span(s, e), confidence })
        .collect();
    merge_entities(raw)
}

pub fn detect_sensitive(text: &str) -> Vec<Proposal> {
    detect_entities(&DEFAULT_PATTERNS, text).iter().map(entity_proposal).collect()
}

/// External named-entity recogniser. Offsets are character offsets.
pub trait EntityBackend: Send + Sync {
    fn name(&self) -> &str;
    fn detect(&self, text: &str) -> Result<Vec<Entity>>;
}

/// External grammar checker replacing the built-in rules.
pub trait GrammarBackend: Send + Sync {
    fn name(&self) -> &str;
    fn check(&self, text: &str) -> Result<Vec<Proposal>>;
}

/// Client for an HTTP NER service: POST `{"text": ...}`, reply
/// `{"entities": [{"label", "start", "end"}]}`. Only person labels are used.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpEntityBackend {
    pub url: String,
    #[serde(default = "default_backend_timeout")]
    pub timeout_secs: u64,
}

fn default_backend_timeout() -> u64 {
    5
}

fn usize_field(v: &Value, key: &str) -> Result<usize> {
    v.get(key)
        .and_then(Value::as_u64)
        .map(|x| x as usize)
        .ok_or_else(|| Error::InvalidResponse(format!("missing integer field '{key}'")))
}

fn check_span(span: Span, text: &str) -> Result<Span> {
    if span.start > span.end || span.end > text.chars().count() {
        return Err(Error::InvalidResponse(format!("span {}..{} out of range", span.start, span.end)));
    }
    Ok(span)
}

impl EntityBackend for HttpEntityBackend {
    fn name(&self) -> &str {
        &self.url
    }

    fn detect(&self, text: &str) -> Result<Vec<Entity>> {
        let reply = gateway::post_json(&self.url, &json!({ "text": text }), Duration::from_secs(self.timeout_secs))?;
        let items = reply
            .get("entities")
            .and_then(Value::as_array)
            .ok_or_else(|| Error::InvalidResponse("missing 'entities' array".into()))?;
        let mut out = Vec::new();
        for item in items {
            let label = item.get("label").and_then(Value::as_str).unwrap_or_default();
            if !matches!(label.to_ascii_uppercase().as_str(), "PERSON" | "PER" | "PERSON_NAME") {
                continue;
            }
            let span = check_span(Span::new(usize_field(item, "start")?, usize_field(item, "end")?), text)?;
            out.push(Entity {
                kind: SensitiveEntityKind::PersonName,
                span,
                confidence: SensitiveEntityKind::PersonName.confidence(),
            });
        }
        Ok(out)
    }
}

/// Client for an HTTP grammar service: POST `{"text": ...}`, reply
/// `{"matches": [{"start", "end", "replacement", "message"}]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpGrammarBackend {
    pub url: String,
    #[serde(default = "default_backend_timeout")]
    pub timeout_secs: u64,
}

impl GrammarBackend for HttpGrammarBackend {
    fn name(&self) -> &str {
        &self.url
    }

    fn check(&self, text: &str) -> Result<Vec<Proposal>> {
        let reply = gateway::post_json(&self.url, &json!({ "text": text }), Duration::from_secs(self.timeout_secs))?;
        let items = reply
            .get("matches")
            .and_then(Value::as_array)
            .ok_or_else(|| Error::InvalidResponse("missing 'matches' array".into()))?;
        let mut out = Vec::new();
        for item in items {
            let span = check_span(Span::new(usize_field(item, "start")?, usize_field(item, "end")?), text)?;
            let replacement = item
                .get("replacement")
                .and_then(Value::as_str)
                .ok_or_else(|| Error::InvalidResponse("missing 'replacement'".into()))?;
            let message = item.get("message").and_then(Value::as_str).unwrap_or("grammar");
            out.push(Proposal {
                kind: SuggestionKind::Grammar,
                span,
                replacement: replacement.to_string(),
                confidence: grammar_confidence(span.end - span.start),
                rationale: message.to_string(),
                entity: None,
            });
        }
        let mut kept = drop_overlaps(out);
        sort_proposals(&mut kept);
        Ok(kept)
    }
}

/// Detector results plus any backend failures that were degraded to the
/// built-ins.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Analysis {
    pub proposals: Vec<Proposal>,
    pub warnings: Vec<String>,
}

/// The detector bundle. Cheap to clone; the dictionary and rules are shared.
#[derive(Clone)]
pub struct Optimizer {
    dictionary: Arc<Dictionary>,
    patterns: Arc<SensitivePatterns>,
    grammar: Option<Arc<dyn GrammarBackend>>,
    ner: Option<Arc<dyn EntityBackend>>,
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer {
            dictionary: default_dictionary(),
            patterns: Arc::new(SensitivePatterns::default()),
            grammar: None,
            ner: None,
        }
    }
}

impl std::fmt::Debug for Optimizer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Optimizer")
            .field("dictionary_words", &self.dictionary.len())
            .field("grammar", &self.grammar.as_ref().map(|g| g.name().to_string()))
            .field("ner", &self.ner.as_ref().map(|n| n.name().to_string()))
            .finish()
    }
}

impl Optimizer {
    pub fn with_dictionary(mut self, dictionary: Arc<Dictionary>) -> Self {
        self.dictionary = dictionary;
        self
    }

    pub fn with_patterns(mut self, patterns: Arc<SensitivePatterns>) -> Self {
        self.patterns = patterns;
        self
    }

    pub fn with_grammar_backend(mut self, backend: Arc<dyn GrammarBackend>) -> Self {
        self.grammar = Some(backend);
        self
    }

    pub fn with_entity_backend(mut self, backend: Arc<dyn EntityBackend>) -> Self {
        self.ner = Some(backend);
        self
    }

    pub fn dictionary(&self) -> &Dictionary {
        &self.dictionary
    }

    pub fn sensitive(&self, text: &str, warnings: &mut Vec<String>) -> Vec<Proposal> {
        let idx = CharIndex::new(text);
        let mut found: Vec<Entity> = self
            .patterns
            .matches(text)
            .into_iter()
            .map(|(s, e, kind, confidence)| Entity { kind, span: idx.span(s, e), confidence })
            .collect();
        if let Some(ner) = &self.ner {
            match ner.detect(text) {
                Ok(extra) => found.extend(extra),
                Err(e) => warnings.push(format!("NER backend {} failed ({e}); using pattern rules only", ner.name())),
            }
        }
        merge_entities(found).iter().map(entity_proposal).collect()
    }

    pub fn grammar(&self, text: &str, warnings: &mut Vec<String>) -> Vec<Proposal> {
        if let Some(backend) = &self.grammar {
            match backend.check(text) {
                Ok(found) => return found,
                Err(e) => warnings.push(format!(
                    "grammar backend {} failed ({e}); using built-in rules",
                    backend.name()
                )),
            }
        }
        check_grammar(text)
    }

    /// Runs every detector. Spelling and grammar edits that would touch a
    /// redacted span are dropped, as are grammar edits overlapping a
    /// spelling fix. Output is ordered by kind, then span.
    pub fn analyze(&self, text: &str) -> Analysis {
        let mut warnings = Vec::new();
        let sensitive = self.sensitive(text, &mut warnings);
        let spelling: Vec<Proposal> = check_spelling_with(&self.dictionary, text)
            .into_iter()
            .filter(|p| sensitive.iter().all(|s| !s.span.overlaps(&p.span)))
            .collect();
        let grammar: Vec<Proposal> = self
            .grammar(text, &mut warnings)
            .into_iter()
            .filter(|p| {
                sensitive.iter().chain(spelling.iter()).all(|s| !s.span.overlaps(&p.span))
            })
            .collect();
        for w in &warnings {
            log::warn!("{w}");
        }
        let mut proposals = sensitive;
        proposals.extend(spelling);
        proposals.extend(grammar);
        sort_proposals(&mut proposals);
        Analysis { proposals, warnings }
    }
}
