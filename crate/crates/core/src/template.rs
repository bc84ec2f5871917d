//! Prompt templates with `{{name}}` placeholders.
//!
//! The grammar is deliberately lenient: anything that is not a well-formed
//! placeholder is literal text, so every string parses and joining the
//! segments gives back the input byte for byte.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::LazyLock;

use chrono::{DateTime, Utc};
use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::gateway::{Gateway, GatewayRequest, Purpose};
use crate::model::{normalize_whitespace, Classification, Prompt};
use crate::similarity::SimilarityScore;

static NAME_RE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^[a-z][a-z0-9_]{0,63}$").unwrap());

pub fn is_valid_name(name: &str) -> bool {
    NAME_RE.is_match(name)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "lowercase")]
pub enum Segment {
    Literal(String),
    Placeholder(String),
}

fn placeholder_at(rest: &str) -> Option<(&str, usize)> {
    let inner = rest.strip_prefix("{{")?;
    let close = inner.find("}}")?;
    let name = &inner[..close];
    is_valid_name(name).then_some((name, close + 4))
}

pub fn parse_template(body: &str) -> Vec<Segment> {
    let mut segments = Vec::new();
    let mut literal = String::new();
    let mut i = 0;
    while i < body.len() {
        let rest = &body[i..];
        if let Some((name, consumed)) = placeholder_at(rest) {
            if !literal.is_empty() {
                segments.push(Segment::Literal(std::mem::take(&mut literal)));
            }
            segments.push(Segment::Placeholder(name.to_string()));
            i += consumed;
        } else {
            let ch = rest.chars().next().expect("non-empty remainder");
            literal.push(ch);
            i += ch.len_utf8();
        }
    }
    if !literal.is_empty() {
        segments.push(Segment::Literal(literal));
    }
    segments
}

pub fn reconstruct(segments: &[Segment]) -> String {
    segments
        .iter()
        .map(|s| match s {
            Segment::Literal(text) => text.clone(),
            Segment::Placeholder(name) => format!("{{{{{name}}}}}"),
        })
        .collect()
}

/// Distinct placeholder names in order of first appearance.
pub fn placeholder_names(body: &str) -> Vec<String> {
    let mut seen = Vec::new();
    for seg in parse_template(body) {
        if let Segment::Placeholder(name) = seg {
            if !seen.contains(&name) {
                seen.push(name);
            }
        }
    }
    seen
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariableSpec {
    pub name: String,
    pub description: String,
    pub example_values: Vec<String>,
}

pub type Binding = BTreeMap<String, String>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Template {
    pub id: String,
    pub body: String,
    pub variables: Vec<VariableSpec>,
    pub source_prompt_ids: Vec<String>,
    /// Source ids whose prompt has since been deleted.
    #[serde(default)]
    pub tombstoned_source_ids: Vec<String>,
    pub classification: Option<Classification>,
    pub created_at: DateTime<Utc>,
    #[serde(default)]
    pub confidence: Option<f64>,
}

/// Checks the placeholder/variable bijection and name syntax.
pub fn validate_bijection(body: &str, variables: &[VariableSpec]) -> Result<()> {
    let mut declared = BTreeSet::new();
    for v in variables {
        if !is_valid_name(&v.name) {
            return Err(Error::InvalidTemplate(format!("invalid variable name {:?}", v.name)));
        }
        if !declared.insert(v.name.as_str()) {
            return Err(Error::InvalidTemplate(format!("variable {:?} declared twice", v.name)));
        }
    }
    let used = placeholder_names(body);
    for name in &used {
        if !declared.contains(name.as_str()) {
            return Err(Error::InvalidTemplate(format!("placeholder {{{{{name}}}}} is not declared")));
        }
    }
    for name in declared {
        if !used.iter().any(|u| u == name) {
            return Err(Error::InvalidTemplate(format!("variable {name:?} does not appear in the body")));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum UnknownPolicy {
    #[default]
    Warn,
    Strict,
}

pub fn render_body(body: &str, binding: &Binding, policy: UnknownPolicy) -> Result<String> {
    for (name, value) in binding {
        if value.contains("{{") {
            return Err(Error::InvalidBinding {
                name: name.clone(),
                reason: "value contains the placeholder opener \"{{\"".into(),
            });
        }
    }
    let segments = parse_template(body);
    let mut out = String::with_capacity(body.len());
    for seg in &segments {
        match seg {
            Segment::Literal(text) => out.push_str(text),
            Segment::Placeholder(name) => {
                let value = binding
                    .get(name)
                    .ok_or_else(|| Error::MissingVariable(name.clone()))?;
                out.push_str(value);
            }
        }
    }
    let used = placeholder_names(body);
    for extra in binding.keys().filter(|k| !used.contains(k)) {
        match policy {
            UnknownPolicy::Strict => return Err(Error::UnknownVariable(extra.clone())),
            UnknownPolicy::Warn => log::warn!("binding supplies unknown variable {extra:?}"),
        }
    }
    Ok(out)
}

impl Template {
    pub fn validate(&self) -> Result<()> {
        validate_bijection(&self.body, &self.variables)?;
        if let Some(c) = self.confidence {
            if !(0.0..=1.0).contains(&c) {
                return Err(Error::InvalidTemplate(format!("confidence {c} outside [0,1]")));
            }
        }
        Ok(())
    }

    pub fn render(&self, binding: &Binding) -> Result<String> {
        render_body(&self.body, binding, UnknownPolicy::Warn)
    }

    pub fn render_with(&self, binding: &Binding, policy: UnknownPolicy) -> Result<String> {
        render_body(&self.body, binding, policy)
    }
}

/// An extracted template before it receives an id and provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateDraft {
    pub body: String,
    pub variables: Vec<VariableSpec>,
    /// One binding per source prompt that renders the body back into it.
    /// Empty for drafts produced by the gateway.
    pub bindings: Vec<Binding>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct AlignOptions {
    /// Accept a single all-variable template when no token is shared.
    pub allow_all_variable: bool,
}

fn lcs<T: PartialEq + Copy>(a: &[T], b: &[T]) -> Vec<T> {
    let (n, m) = (a.len(), b.len());
    let mut table = vec![0u32; (n + 1) * (m + 1)];
    let idx = |i: usize, j: usize| i * (m + 1) + j;
    for i in (0..n).rev() {
        for j in (0..m).rev() {
            table[idx(i, j)] = if a[i] == b[j] {
                table[idx(i + 1, j + 1)] + 1
            } else {
                table[idx(i + 1, j)].max(table[idx(i, j + 1)])
            };
        }
    }
    let mut out = Vec::with_capacity(table[0] as usize);
    let (mut i, mut j) = (0, 0);
    while i < n && j < m {
        if a[i] == b[j] {
            out.push(a[i]);
            i += 1;
            j += 1;
        } else if table[idx(i + 1, j)] >= table[idx(i, j + 1)] {
            i += 1;
        } else {
            j += 1;
        }
    }
    out
}

/// Leftmost positions of `skeleton` as a subsequence of `tokens`.
fn embed<T: PartialEq>(skeleton: &[T], tokens: &[T]) -> Vec<usize> {
    let mut positions = Vec::with_capacity(skeleton.len());
    let mut from = 0;
    for anchor in skeleton {
        let at = tokens[from..]
            .iter()
            .position(|t| t == anchor)
            .map(|p| p + from)
            .expect("skeleton is a common subsequence");
        positions.push(at);
        from = at + 1;
    }
    positions
}

/// A word or a punctuation mark; `glued` means no space before it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Tok<'a> {
    glued: bool,
    text: &'a str,
}

const SPLIT_PUNCT: &[char] = &['.', ',', ';', ':', '!', '?', '(', ')', '[', ']', '"', '\''];

/// Splits normalized text on spaces, then peels leading and trailing
/// punctuation off each word so "records." and "dictionaries." share the
/// final period as an anchor.
fn tokenize(normalized: &str) -> Vec<Tok<'_>> {
    let mut out = Vec::new();
    for word in normalized.split(' ').filter(|w| !w.is_empty()) {
        let mut glued = out.is_empty();
        let core_start = word.find(|c: char| !SPLIT_PUNCT.contains(&c)).unwrap_or(word.len());
        let core_end = word.rfind(|c: char| !SPLIT_PUNCT.contains(&c)).map_or(core_start, |i| {
            i + word[i..].chars().next().map_or(0, char::len_utf8)
        });
        for (i, c) in word[..core_start].char_indices() {
            out.push(Tok { glued, text: &word[i..i + c.len_utf8()] });
            glued = true;
        }
        if core_end > core_start {
            out.push(Tok { glued, text: &word[core_start..core_end] });
            glued = true;
        }
        for (i, c) in word[core_end..].char_indices() {
            let at = core_end + i;
            out.push(Tok { glued, text: &word[at..at + c.len_utf8()] });
            glued = true;
        }
    }
    out
}

fn join_tokens(tokens: &[Tok<'_>]) -> String {
    let mut s = String::new();
    for (i, t) in tokens.iter().enumerate() {
        if i > 0 && !t.glued {
            s.push(' ');
        }
        s.push_str(t.text);
    }
    s
}

#[derive(Debug, Clone)]
enum Unit<'a> {
    Anchor(Tok<'a>),
    /// Token run per source prompt.
    Gap(Vec<Vec<Tok<'a>>>),
}

fn gap_has_empty(gap: &[Vec<Tok<'_>>]) -> bool {
    gap.iter().any(Vec::is_empty)
}

/// The runs disagree on whether a space precedes them, so no single body
/// spacing renders them all.
fn gap_mixed_spacing(gap: &[Vec<Tok<'_>>]) -> bool {
    let mut firsts = gap.iter().filter_map(|r| r.first()).map(|t| t.glued);
    let first = firsts.next();
    firsts.any(|g| Some(g) != first)
}

fn absorb<'a>(gap: &mut [Vec<Tok<'a>>], anchor: Tok<'a>, at_end: bool) {
    for run in gap.iter_mut() {
        if at_end {
            run.push(anchor);
        } else {
            run.insert(0, anchor);
        }
    }
}

/// Folds anchors into neighbouring gaps until every gap is non-empty for
/// every source and no two gaps touch.
fn settle_units(mut units: Vec<Unit<'_>>) -> Vec<Unit<'_>> {
    loop {
        let adjacent = units
            .windows(2)
            .position(|w| matches!(w, [Unit::Gap(_), Unit::Gap(_)]));
        if let Some(i) = adjacent {
            let Unit::Gap(right) = units.remove(i + 1) else { unreachable!() };
            let Unit::Gap(left) = &mut units[i] else { unreachable!() };
            for (l, r) in left.iter_mut().zip(right) {
                l.extend(r);
            }
            continue;
        }
        let mixed = units
            .iter()
            .enumerate()
            .position(|(i, u)| i > 0 && matches!(u, Unit::Gap(g) if !gap_has_empty(g) && gap_mixed_spacing(g)));
        if let Some(i) = mixed {
            let Unit::Anchor(a) = units.remove(i - 1) else { unreachable!("gaps never touch") };
            if let Unit::Gap(g) = &mut units[i - 1] {
                absorb(g, a, false);
            }
            continue;
        }
        let optional = units
            .iter()
            .position(|u| matches!(u, Unit::Gap(g) if gap_has_empty(g)));
        let Some(i) = optional else { return units };
        if let Some(Unit::Anchor(a)) = units.get(i + 1).cloned() {
            units.remove(i + 1);
            if let Unit::Gap(g) = &mut units[i] {
                absorb(g, a, true);
            }
        } else if i > 0 && matches!(units[i - 1], Unit::Anchor(_)) {
            let Unit::Anchor(a) = units.remove(i - 1) else { unreachable!() };
            if let Unit::Gap(g) = &mut units[i - 1] {
                absorb(g, a, false);
            }
        } else {
            // A lone gap with nothing left to absorb: only happens when some
            // source prompt is empty.
            return units;
        }
    }
}

fn next_var_name(counter: &mut usize, taken: &BTreeSet<String>) -> String {
    loop {
        *counter += 1;
        let name = format!("var_{counter}");
        if !taken.contains(&name) {
            return name;
        }
    }
}

fn dedup_in_order(values: impl IntoIterator<Item = String>) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for v in values {
        if !out.contains(&v) {
            out.push(v);
        }
    }
    out
}

/// Deterministic template extraction by token alignment.
///
/// Prompts are whitespace-normalized and split into words and edge
/// punctuation marks. The anchor
/// skeleton is the progressive pairwise LCS of the token sequences; each
/// maximal gap between anchors becomes one variable `var_1..var_n`, left to
/// right. Gaps that are empty for some prompt absorb a neighbouring anchor so
/// that every binding value is non-empty and rendering stays single-spaced.
/// Every input (normalized) renders back exactly from `bindings[i]`.
pub fn extract_template_aligned(prompts: &[&str], options: AlignOptions) -> Result<TemplateDraft> {
    if prompts.len() < 2 {
        return Err(Error::InvalidParameter("aligned extraction needs at least two prompts".into()));
    }
    let normalized: Vec<String> = prompts.iter().map(|p| normalize_whitespace(p)).collect();
    let token_lists: Vec<Vec<Tok<'_>>> = normalized.iter().map(|p| tokenize(p)).collect();

    let mut skeleton = token_lists[0].clone();
    for tokens in &token_lists[1..] {
        skeleton = lcs(&skeleton, tokens);
    }
    if skeleton.is_empty() && !options.allow_all_variable {
        return Err(Error::NoCommonSkeleton);
    }

    let embeddings: Vec<Vec<usize>> = token_lists.iter().map(|t| embed(&skeleton, t)).collect();
    let mut units = Vec::with_capacity(2 * skeleton.len() + 1);
    for slot in 0..=skeleton.len() {
        let gap: Vec<Vec<Tok<'_>>> = token_lists
            .iter()
            .zip(&embeddings)
            .map(|(tokens, pos)| {
                let start = if slot == 0 { 0 } else { pos[slot - 1] + 1 };
                let end = if slot == skeleton.len() { tokens.len() } else { pos[slot] };
                tokens[start..end].to_vec()
            })
            .collect();
        if gap.iter().any(|run| !run.is_empty()) {
            units.push(Unit::Gap(gap));
        }
        if slot < skeleton.len() {
            units.push(Unit::Anchor(skeleton[slot]));
        }
    }
    let units = settle_units(units);

    // Placeholders already present in anchor text stay as declared variables.
    let mut carried: Vec<String> = Vec::new();
    for unit in &units {
        if let Unit::Anchor(a) = unit {
            for name in placeholder_names(a.text) {
                if !carried.contains(&name) {
                    carried.push(name);
                }
            }
        }
    }
    let taken: BTreeSet<String> = carried.iter().cloned().collect();

    let mut counter = 0;
    let mut body = String::new();
    let mut variables = Vec::new();
    let mut bindings = vec![Binding::new(); prompts.len()];
    for (i, unit) in units.iter().enumerate() {
        let glued = match unit {
            Unit::Anchor(a) => a.glued,
            Unit::Gap(runs) => runs.iter().find_map(|r| r.first()).is_none_or(|t| t.glued),
        };
        if i > 0 && !glued {
            body.push(' ');
        }
        match unit {
            Unit::Anchor(a) => body.push_str(a.text),
            Unit::Gap(runs) => {
                let name = next_var_name(&mut counter, &taken);
                body.push_str(&format!("{{{{{name}}}}}"));
                let values: Vec<String> = runs.iter().map(|r| join_tokens(r)).collect();
                for (binding, value) in bindings.iter_mut().zip(&values) {
                    binding.insert(name.clone(), value.clone());
                }
                variables.push(VariableSpec {
                    name,
                    description: String::new(),
                    example_values: dedup_in_order(values),
                });
            }
        }
    }
    for name in carried {
        variables.push(VariableSpec {
            name,
            description: "placeholder carried over from the source prompts".into(),
            example_values: Vec::new(),
        });
    }
    validate_bijection(&body, &variables)?;
    Ok(TemplateDraft {
        body,
        variables,
        bindings,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExtractionMode {
    Aligned,
    Llm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractionOutcome {
    pub draft: TemplateDraft,
    pub mode: ExtractionMode,
    pub confidence: Option<f64>,
    pub variable_confidence: BTreeMap<String, f64>,
    /// Why the gateway result was not used, when it was not.
    pub fallback_reason: Option<String>,
}

const TEMPLATE_SYSTEM_PROMPT: &str = "You turn families of similar software-engineering prompts into one reusable prompt template.\n\
Identify the common structure and the parts that vary. Replace each varying part with a placeholder of the form {{name}}, \
where name matches [a-z][a-z0-9_]* and describes the role of the value (for example {{language}} or {{value}}).\n\
Keep the wording and intent of the target prompt. Use the classifications to choose names that fit the audience.\n\
Answer with a single JSON object and nothing else:\n\
{\"template\": string, \"variables\": [{\"name\": string, \"description\": string, \"confidence\": number}], \"confidence\": number}\n\
Every placeholder in the template must appear exactly once in variables, and every variable must appear in the template. \
Confidences are between 0 and 1.";

fn describe_classification(c: Option<&Classification>) -> String {
    match c {
        Some(c) => format!(
            "intent={}; role={}; sdlc={}; type={}",
            c.intent.name, c.role.name, c.sdlc.name, c.ptype.name
        ),
        None => "unclassified".into(),
    }
}

pub fn template_request(target: &Prompt, similar: &[(&Prompt, SimilarityScore)]) -> GatewayRequest {
    let mut user = String::new();
    user.push_str("TARGET PROMPT\n");
    user.push_str(&format!("text: {}\n", target.text));
    user.push_str(&format!(
        "classification: {}\n\n",
        describe_classification(target.classification.as_ref())
    ));
    user.push_str("SIMILAR PROMPTS\n");
    for (i, (p, score)) in similar.iter().enumerate() {
        user.push_str(&format!("[{}] similarity={:.4}\n", i + 1, score.ensemble));
        user.push_str(&format!("text: {}\n", p.text));
        user.push_str(&format!(
            "classification: {}\n",
            describe_classification(p.classification.as_ref())
        ));
    }
    GatewayRequest::structured(Purpose::TemplateGen, TEMPLATE_SYSTEM_PROMPT, user)
}

fn unit_interval(v: &Value) -> Option<f64> {
    v.as_f64().filter(|c| (0.0..=1.0).contains(c))
}

/// Parses and validates a template generation document.
pub fn parse_template_response(doc: &Value) -> Result<(TemplateDraft, Option<f64>, BTreeMap<String, f64>)> {
    let body = doc
        .get("template")
        .and_then(Value::as_str)
        .ok_or_else(|| Error::InvalidResponse("missing string field \"template\"".into()))?;
    let raw_vars = doc
        .get("variables")
        .and_then(Value::as_array)
        .ok_or_else(|| Error::InvalidResponse("missing array field \"variables\"".into()))?;
    let confidence = match doc.get("confidence") {
        None | Some(Value::Null) => None,
        Some(v) => Some(unit_interval(v).ok_or_else(|| Error::InvalidResponse("confidence outside [0,1]".into()))?),
    };
    let mut variables = Vec::new();
    let mut per_var = BTreeMap::new();
    for v in raw_vars {
        let name = v
            .get("name")
            .and_then(Value::as_str)
            .ok_or_else(|| Error::InvalidResponse("variable without a name".into()))?;
        let description = v.get("description").and_then(Value::as_str).unwrap_or_default();
        if let Some(c) = v.get("confidence").filter(|c| !c.is_null()) {
            let c = unit_interval(c)
                .ok_or_else(|| Error::InvalidResponse(format!("confidence for {name:?} outside [0,1]")))?;
            per_var.insert(name.to_string(), c);
        }
        variables.push(VariableSpec {
            name: name.to_string(),
            description: description.to_string(),
            example_values: Vec::new(),
        });
    }
    validate_bijection(body, &variables).map_err(|e| Error::InvalidResponse(e.to_string()))?;
    Ok((
        TemplateDraft {
            body: body.to_string(),
            variables,
            bindings: Vec::new(),
        },
        confidence,
        per_var,
    ))
}

/// Gateway-backed extraction. Any gateway or validation failure falls back
/// to [`extract_template_aligned`] over the target and its similar prompts.
pub fn extract_template_llm(
    gateway: &Gateway,
    target: &Prompt,
    similar: &[(&Prompt, SimilarityScore)],
) -> Result<ExtractionOutcome> {
    let request = template_request(target, similar);
    let attempt = gateway
        .complete_json(&request)
        .and_then(|doc| parse_template_response(&doc));
    match attempt {
        Ok((draft, confidence, variable_confidence)) => Ok(ExtractionOutcome {
            draft,
            mode: ExtractionMode::Llm,
            confidence,
            variable_confidence,
            fallback_reason: None,
        }),
        Err(e) => {
            log::warn!("template generation via gateway failed ({e}); using aligned extraction");
            let mut outcome = extract_aligned_outcome(target, similar)?;
            outcome.fallback_reason = Some(format!("{}: {e}", e.code()));
            Ok(outcome)
        }
    }
}

pub fn extract_aligned_outcome(
    target: &Prompt,
    similar: &[(&Prompt, SimilarityScore)],
) -> Result<ExtractionOutcome> {
    let mut texts = vec![target.text.as_str()];
    texts.extend(similar.iter().map(|(p, _)| p.text.as_str()));
    let draft = extract_template_aligned(&texts, AlignOptions::default())?;
    Ok(ExtractionOutcome {
        draft,
        mode: ExtractionMode::Aligned,
        confidence: None,
        variable_confidence: BTreeMap::new(),
        fallback_reason: None,
    })
}
