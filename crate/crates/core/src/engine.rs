//! The engine: one open library plus the classifier, optimizer and gateway
//! configured for it. Every front end (CLI, HTTP service) goes through here,
//! and the response types below are shared so both emit identical JSON.
//!
//! Operations that may call the gateway are split in two phases (prepare /
//! commit) so a server can run the slow part without holding its write lock.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::{DateTime, Duration, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::classifier::{BackendId, Classifier, ClassifierRouting, Embedder, HeuristicClassifier, Route, TrainedModel};
use crate::error::{Error, Result};
use crate::gateway::{Gateway, GatewayRequest, Purpose};
use crate::library::{
    dedup_plan_embedded, dedup_plan_ngram, fit_word_bounds, offline_summary, DedupReport, Library, LibrarySummary,
    PromptFilter, SCHEMA_VERSION, TOPIC_COUNT,
};
use crate::model::{Classification, Origin, Prompt, Vocabulary};
use crate::optimizer::{
    apply_span, Dictionary, HttpEntityBackend, HttpGrammarBackend, Optimizer, Proposal, SensitivePatterns, Span,
    Suggestion, SuggestionKind, SuggestionStatus, STALE_RATIONALE,
};
use crate::similarity::{check_threshold, find_similar, SimilarityScore};
use crate::template::{
    extract_aligned_outcome, extract_template_aligned, extract_template_llm, validate_bijection, AlignOptions, Binding,
    ExtractionMode, ExtractionOutcome, Template, TemplateDraft, UnknownPolicy, VariableSpec,
};

pub const SEED_ENV: &str = "PWM_SEED";
pub const NOW_ENV: &str = "PWM_NOW";

/// Upper bound on accept/re-optimize rounds in [`Engine::accept_all`].
const MAX_APPLY_ROUNDS: usize = 10_000;

// ---------------------------------------------------------------------------
// Shared response shapes

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub schema_version: u64,
}

impl Health {
    pub fn ok() -> Self {
        Health { status: "ok".into(), schema_version: SCHEMA_VERSION }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptList {
    pub prompts: Vec<Prompt>,
}

/// A prompt with its pending suggestions, as returned by add/update/show.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptResponse {
    pub prompt: Prompt,
    pub suggestions: Vec<Suggestion>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeleteResponse {
    pub deleted: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuggestionList {
    pub prompt_id: String,
    pub suggestions: Vec<Suggestion>,
    pub warnings: Vec<String>,
}

/// Result of accepting or rejecting one suggestion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuggestionResponse {
    pub suggestion: Suggestion,
    pub prompt: Prompt,
    /// Set when accepting a TEMPLATE suggestion created a template.
    pub template: Option<Template>,
    /// Pending suggestions of the prompt after the change.
    pub pending: Vec<Suggestion>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarPrompt {
    pub prompt_id: String,
    pub text: String,
    pub score: SimilarityScore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarList {
    pub prompt_id: String,
    pub threshold: f64,
    pub similar: Vec<SimilarPrompt>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractResponse {
    pub template: Template,
    pub mode: ExtractionMode,
    pub fallback_reason: Option<String>,
    pub variable_confidence: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateList {
    pub templates: Vec<Template>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderResponse {
    pub template_id: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifyResponse {
    pub prompt_id: String,
    pub classification: Classification,
    pub warnings: Vec<String>,
}

/// Partial template edit; unset fields keep their value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemplatePatch {
    #[serde(default)]
    pub body: Option<String>,
    #[serde(default)]
    pub variables: Option<Vec<VariableSpec>>,
}

// ---------------------------------------------------------------------------
// Ids and time

/// Random ids. Seeded runs mix the seed with a digest of the library so
/// that successive processes working on the same file stay reproducible
/// without repeating ids.
#[derive(Debug, Clone)]
enum IdGen {
    Entropy,
    Seeded(ChaCha8Rng),
}

impl IdGen {
    fn next(&mut self, prefix: &str) -> String {
        let v: u64 = match self {
            IdGen::Entropy => rand::rng().random(),
            IdGen::Seeded(rng) => rng.random(),
        };
        format!("{prefix}{v:016x}")
    }
}

/// Wall clock, or a deterministic clock that advances one second per
/// reading and never precedes anything already in the library.
#[derive(Debug, Clone)]
enum Clock {
    System,
    Stepping(DateTime<Utc>),
}

impl Clock {
    fn now(&mut self) -> DateTime<Utc> {
        match self {
            Clock::System => Utc::now(),
            Clock::Stepping(t) => {
                let now = *t;
                *t = now + Duration::seconds(1);
                now
            }
        }
    }
}

fn library_digest(library: &Library) -> u64 {
    let digest = Sha256::digest(library.to_json().as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

// ---------------------------------------------------------------------------
// Options

/// Run-time wiring that does not live in the library file.
#[derive(Clone)]
pub struct EngineOptions {
    pub gateway: Arc<Gateway>,
    pub seed: Option<u64>,
    pub now: Option<DateTime<Utc>>,
    pub dedup_embedder: Option<Arc<dyn Embedder>>,
}

impl std::fmt::Debug for EngineOptions {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EngineOptions")
            .field("gateway", &self.gateway)
            .field("seed", &self.seed)
            .field("now", &self.now)
            .field("dedup_embedder", &self.dedup_embedder.as_ref().map(|e| e.id().to_string()))
            .finish()
    }
}

impl Default for EngineOptions {
    fn default() -> Self {
        EngineOptions { gateway: Arc::new(Gateway::offline()), seed: None, now: None, dedup_embedder: None }
    }
}

impl EngineOptions {
    /// Gateway from the `PWM_LLM_*`/`PWM_OFFLINE` variables, plus the
    /// `PWM_SEED` (integer) and `PWM_NOW` (RFC 3339) reproducibility hooks.
    pub fn from_env() -> Result<Self> {
        let seed = match std::env::var(SEED_ENV) {
            Ok(s) if !s.trim().is_empty() => Some(
                s.trim()
                    .parse::<u64>()
                    .map_err(|_| Error::InvalidParameter(format!("{SEED_ENV} must be an unsigned integer, got {s:?}")))?,
            ),
            _ => None,
        };
        let now = match std::env::var(NOW_ENV) {
            Ok(s) if !s.trim().is_empty() => Some(
                DateTime::parse_from_rfc3339(s.trim())
                    .map_err(|_| Error::InvalidParameter(format!("{NOW_ENV} must be an RFC 3339 timestamp, got {s:?}")))?
                    .with_timezone(&Utc),
            ),
            _ => None,
        };
        Ok(EngineOptions { gateway: Arc::new(Gateway::from_env()?), seed, now, dedup_embedder: None })
    }

    pub fn with_gateway(mut self, gateway: Gateway) -> Self {
        self.gateway = Arc::new(gateway);
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn with_now(mut self, now: DateTime<Utc>) -> Self {
        self.now = Some(now);
        self
    }
}

// ---------------------------------------------------------------------------
// Two-phase jobs

/// Everything a template extraction needs, detached from the library.
#[derive(Debug, Clone)]
pub struct ExtractJob {
    pub target: Prompt,
    pub similar: Vec<(Prompt, SimilarityScore)>,
    pub mode: ExtractionMode,
}

impl ExtractJob {
    pub fn run(&self, gateway: &Gateway) -> Result<ExtractionOutcome> {
        let similar: Vec<(&Prompt, SimilarityScore)> = self.similar.iter().map(|(p, s)| (p, *s)).collect();
        match self.mode {
            ExtractionMode::Aligned => extract_aligned_outcome(&self.target, &similar),
            ExtractionMode::Llm => extract_template_llm(gateway, &self.target, &similar),
        }
    }
}

/// A classification computed outside the engine, ready to be stored.
#[derive(Debug, Clone)]
pub struct Classified {
    pub classification: Classification,
    pub warnings: Vec<String>,
}

// ---------------------------------------------------------------------------
// Summary

const SUMMARY_SYSTEM_PROMPT: &str = "You summarize a library of software-engineering prompts for the developer who owns it.\n\
Identify the main topics the prompts cover and write a short overview.\n\
Answer with a single JSON object and nothing else:\n\
{\"topics\": [string, ...], \"tldr\": string}\n\
List at most ten topics, most prominent first, each a short noun phrase. \
The tldr must be between 50 and 100 words.";

const DIGEST_PROMPT_CHARS: usize = 400;
const DIGEST_MAX_PROMPTS: usize = 200;

/// SUMMARIZE request over a digest of the library: each prompt (truncated)
/// in creation order, capped in count.
pub fn summary_request(library: &Library) -> GatewayRequest {
    let mut user = format!("The library holds {} prompts.\n\nPROMPTS\n", library.prompts.len());
    for (i, p) in library.prompts_in_order().into_iter().take(DIGEST_MAX_PROMPTS).enumerate() {
        let text: String = p.text.chars().take(DIGEST_PROMPT_CHARS).collect();
        user.push_str(&format!("{}. {}\n", i + 1, text.split_whitespace().collect::<Vec<_>>().join(" ")));
    }
    GatewayRequest::structured(Purpose::Summarize, SUMMARY_SYSTEM_PROMPT, user)
}

/// Parses `{"topics": [...], "tldr": "..."}`; the TL;DR is fitted to the
/// word bounds.
pub fn parse_summary_response(doc: &Value) -> Result<(Vec<String>, String)> {
    let topics = doc
        .get("topics")
        .and_then(Value::as_array)
        .ok_or_else(|| Error::InvalidResponse("summary needs a \"topics\" array".into()))?
        .iter()
        .map(|t| {
            t.as_str()
                .map(|s| s.trim().to_string())
                .ok_or_else(|| Error::InvalidResponse("topics must be strings".into()))
        })
        .collect::<Result<Vec<_>>>()?;
    let tldr = doc
        .get("tldr")
        .and_then(Value::as_str)
        .filter(|s| !s.trim().is_empty())
        .ok_or_else(|| Error::InvalidResponse("summary needs a non-empty \"tldr\" string".into()))?;
    let topics = topics.into_iter().filter(|t| !t.is_empty()).take(TOPIC_COUNT).collect();
    Ok((topics, fit_word_bounds(tldr)))
}

/// Distributions are always computed locally; topics and TL;DR come from
/// the gateway when it answers, otherwise from the offline extractor.
pub fn summarize_library(library: &Library, gateway: &Gateway) -> LibrarySummary {
    let mut summary = offline_summary(library);
    if library.prompts.is_empty() {
        return summary;
    }
    match gateway.complete_json(&summary_request(library)).and_then(|doc| parse_summary_response(&doc)) {
        Ok((topics, tldr)) => {
            summary.topics = topics;
            summary.tldr = tldr;
            summary.source = "gateway".into();
        }
        Err(e) => log::info!("summary via gateway unavailable ({e}); using offline summary"),
    }
    summary
}

// ---------------------------------------------------------------------------
// Engine

fn resolve(base: Option<&Path>, p: &str) -> PathBuf {
    let path = Path::new(p);
    match base {
        Some(b) if path.is_relative() => b.join(path),
        _ => path.to_path_buf(),
    }
}

pub struct Engine {
    library: Library,
    vocab: Vocabulary,
    classifier: Classifier,
    optimizer: Optimizer,
    gateway: Arc<Gateway>,
    dedup_embedder: Option<Arc<dyn Embedder>>,
    ids: IdGen,
    clock: Clock,
    path: Option<PathBuf>,
    startup_warnings: Vec<String>,
}

impl std::fmt::Debug for Engine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Engine")
            .field("path", &self.path)
            .field("prompts", &self.library.prompts.len())
            .field("classifier", &self.classifier)
            .field("optimizer", &self.optimizer)
            .finish()
    }
}

impl Engine {
    /// Builds an engine around `library`. Relative paths in the library
    /// config resolve against `base_dir`.
    pub fn new(library: Library, base_dir: Option<&Path>, options: EngineOptions) -> Result<Self> {
        library.config.validate()?;
        let cfg = &library.config;
        let mut warnings = Vec::new();

        let vocab = match &cfg.vocabulary_path {
            Some(p) => Vocabulary::load(&resolve(base_dir, p))?,
            None => Vocabulary::default(),
        };
        let heuristic = match &cfg.classifier.rules_path {
            Some(p) => HeuristicClassifier::load(&resolve(base_dir, p), &vocab)?,
            None => HeuristicClassifier::with_vocabulary(&vocab)?,
        };
        let mut models = Vec::new();
        for (dim, p) in &cfg.classifier.model_paths {
            let model = TrainedModel::load(&resolve(base_dir, p))?;
            if model.dimension != *dim {
                return Err(Error::ModelMismatch(format!(
                    "model file {p} was trained for {}, configured for {dim}",
                    model.dimension
                )));
            }
            for label in &model.labels {
                vocab.validate_label(*dim, label)?;
            }
            models.push(model);
        }
        // Trainable routes without a model run on the heuristic backend.
        let mut routing: ClassifierRouting = cfg.classifier.routing.clone();
        for (dim, route) in routing.routes.iter_mut() {
            if route.backend == BackendId::Trainable {
                let model = models.iter().find(|m| m.dimension == *dim);
                match model {
                    Some(m) if route.variant.is_none_or(|v| v == m.variant) => {}
                    _ => {
                        warnings.push(format!("{dim}: no {} model configured; using heuristic", route.label()));
                        *route = Route { backend: BackendId::Heuristic, variant: None };
                    }
                }
            }
        }
        let mut classifier =
            Classifier::new(vocab.clone(), heuristic, routing).with_gateway(Arc::clone(&options.gateway));
        for m in models {
            classifier = classifier.with_model(m);
        }

        let mut optimizer = Optimizer::default();
        if let Some(p) = &cfg.optimizer.dictionary_path {
            optimizer = optimizer.with_dictionary(Arc::new(Dictionary::load(&resolve(base_dir, p))?));
        }
        if let Some(p) = &cfg.optimizer.patterns_path {
            optimizer = optimizer.with_patterns(Arc::new(SensitivePatterns::load(&resolve(base_dir, p))?));
        }
        if let Some(b) = &cfg.optimizer.grammar_backend {
            optimizer = optimizer.with_grammar_backend(Arc::new(HttpGrammarBackend::clone(b)));
        }
        if let Some(b) = &cfg.optimizer.ner_backend {
            optimizer = optimizer.with_entity_backend(Arc::new(HttpEntityBackend::clone(b)));
        }

        let ids = match options.seed {
            Some(seed) => IdGen::Seeded(ChaCha8Rng::seed_from_u64(seed ^ library_digest(&library))),
            None => IdGen::Entropy,
        };
        let clock = match options.now {
            Some(start) => {
                let floor = library.latest_timestamp().map(|t| t + Duration::seconds(1));
                Clock::Stepping(floor.map_or(start, |f| start.max(f)))
            }
            None => Clock::System,
        };
        for w in &warnings {
            log::debug!("{w}");
        }
        Ok(Engine {
            library,
            vocab,
            classifier,
            optimizer,
            gateway: options.gateway,
            dedup_embedder: options.dedup_embedder,
            ids,
            clock,
            path: None,
            startup_warnings: warnings,
        })
    }

    /// Opens a library file; `save` writes back to it.
    pub fn open(path: &Path, options: EngineOptions) -> Result<Self> {
        let library = Library::load(path)?;
        let mut engine = Engine::new(library, path.parent(), options)?;
        engine.path = Some(path.to_path_buf());
        Ok(engine)
    }

    /// Writes `library` to a new file at `path` and opens it.
    pub fn create(path: &Path, library: Library, options: EngineOptions) -> Result<Self> {
        let mut engine = Engine::new(library, path.parent(), options)?;
        engine.path = Some(path.to_path_buf());
        engine.save()?;
        Ok(engine)
    }

    pub fn save(&self) -> Result<()> {
        match &self.path {
            Some(p) => self.library.save(p),
            None => Ok(()),
        }
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn library(&self) -> &Library {
        &self.library
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn classifier(&self) -> &Classifier {
        &self.classifier
    }

    pub fn optimizer(&self) -> &Optimizer {
        &self.optimizer
    }

    pub fn gateway(&self) -> &Arc<Gateway> {
        &self.gateway
    }

    pub fn startup_warnings(&self) -> &[String] {
        &self.startup_warnings
    }

    pub fn audit(&self) -> Vec<String> {
        self.library.audit(Some(&self.vocab))
    }

    fn now(&mut self) -> DateTime<Utc> {
        self.clock.now()
    }

    fn fresh_id(&mut self, prefix: &str) -> String {
        loop {
            let id = self.ids.next(prefix);
            let taken = self.library.prompts.contains_key(&id)
                || self.library.templates.contains_key(&id)
                || self.library.suggestions.contains_key(&id);
            if !taken {
                return id;
            }
        }
    }

    // -- prompts -------------------------------------------------------------

    pub fn get_prompt(&self, id: &str) -> Result<PromptResponse> {
        let prompt = self.library.prompt(id)?.clone();
        Ok(PromptResponse { suggestions: self.pending(id), prompt, warnings: Vec::new() })
    }

    pub fn list_prompts(&self, filter: &PromptFilter) -> Result<PromptList> {
        filter.validate(&self.vocab)?;
        Ok(PromptList { prompts: self.library.list(filter).into_iter().cloned().collect() })
    }

    fn check_text(text: &str) -> Result<()> {
        if text.trim().is_empty() {
            Err(Error::EmptyText)
        } else {
            Ok(())
        }
    }

    /// Classification step of add/update, runnable without the engine.
    pub fn classify_text(classifier: &Classifier, text: &str) -> Classified {
        let (classification, warnings) = classifier.classify_with_fallback(text);
        Classified { classification, warnings }
    }

    /// Stores a new prompt, classifies it and runs the optimizer on it.
    pub fn add_prompt(&mut self, text: &str) -> Result<PromptResponse> {
        Self::check_text(text)?;
        let classified = Self::classify_text(&self.classifier, text);
        self.add_classified(text, Origin::Manual, classified)
    }

    pub fn add_classified(&mut self, text: &str, origin: Origin, classified: Classified) -> Result<PromptResponse> {
        Self::check_text(text)?;
        classified.classification.validate(&self.vocab)?;
        let id = self.fresh_id("p_");
        let now = self.now();
        let mut prompt = Prompt::new(id.clone(), text.to_string(), origin, now);
        prompt.classification = Some(classified.classification);
        self.library.prompts.insert(id.clone(), prompt);
        let mut warnings = classified.warnings;
        let optimized = self.optimize(&id)?;
        warnings.extend(optimized.warnings);
        Ok(PromptResponse { prompt: self.library.prompt(&id)?.clone(), suggestions: optimized.suggestions, warnings })
    }

    pub fn update_prompt(&mut self, id: &str, text: &str) -> Result<PromptResponse> {
        Self::check_text(text)?;
        self.library.prompt(id)?;
        let classified = Self::classify_text(&self.classifier, text);
        self.update_classified(id, text, classified)
    }

    pub fn update_classified(&mut self, id: &str, text: &str, classified: Classified) -> Result<PromptResponse> {
        Self::check_text(text)?;
        classified.classification.validate(&self.vocab)?;
        let now = self.now();
        let prompt = self.library.prompts.get_mut(id).ok_or_else(|| Error::not_found("prompt", id))?;
        prompt.set_text(text.to_string(), now);
        prompt.classification = Some(classified.classification);
        let mut warnings = classified.warnings;
        let optimized = self.optimize(id)?;
        warnings.extend(optimized.warnings);
        Ok(PromptResponse { prompt: self.library.prompt(id)?.clone(), suggestions: optimized.suggestions, warnings })
    }

    /// Removes a prompt and its suggestions; templates built from it keep a
    /// tombstoned reference.
    pub fn delete_prompt(&mut self, id: &str) -> Result<DeleteResponse> {
        self.library.remove_prompt(id)?;
        Ok(DeleteResponse { deleted: id.to_string() })
    }

    pub fn similar(&self, id: &str, threshold: Option<f64>) -> Result<SimilarList> {
        let prompt = self.library.prompt(id)?;
        let cfg = &self.library.config.similarity;
        let threshold = threshold.unwrap_or(cfg.thresholds.template_trigger);
        let hits = find_similar(prompt, self.library.prompts.values(), threshold, cfg)?;
        Ok(SimilarList {
            prompt_id: id.to_string(),
            threshold,
            similar: hits
                .into_iter()
                .map(|(p, score)| SimilarPrompt { prompt_id: p.id.clone(), text: p.text.clone(), score })
                .collect(),
        })
    }

    // -- classification ------------------------------------------------------

    /// Classifier for a one-off run; `backend` routes every dimension to
    /// one backend.
    pub fn classifier_for(&self, backend: Option<BackendId>) -> Classifier {
        match backend {
            None => self.classifier.clone(),
            Some(b) => {
                let mut routing = ClassifierRouting::uniform(b);
                if b == BackendId::Trainable {
                    // Keep the configured variants.
                    for (dim, route) in routing.routes.iter_mut() {
                        route.variant = self.library.config.classifier.routing.route(*dim).variant;
                    }
                }
                let mut c = Classifier::new(
                    self.vocab.clone(),
                    HeuristicClassifier::clone(self.heuristic()),
                    routing,
                )
                .with_gateway(Arc::clone(&self.gateway));
                for m in self.models() {
                    c = c.with_model(m);
                }
                c
            }
        }
    }

    fn heuristic(&self) -> &HeuristicClassifier {
        self.classifier.heuristic()
    }

    fn models(&self) -> Vec<TrainedModel> {
        self.classifier.models().cloned().collect()
    }

    /// Strict re-classification with an optional backend override; the
    /// result is stored on the prompt.
    pub fn classify(&mut self, id: &str, backend: Option<BackendId>) -> Result<ClassifyResponse> {
        let text = self.library.prompt(id)?.text.clone();
        let classification = self.classifier_for(backend).classify(&text)?;
        self.store_classification(id, classification, Vec::new())
    }

    pub fn store_classification(
        &mut self,
        id: &str,
        classification: Classification,
        warnings: Vec<String>,
    ) -> Result<ClassifyResponse> {
        classification.validate(&self.vocab)?;
        let prompt = self.library.prompts.get_mut(id).ok_or_else(|| Error::not_found("prompt", id))?;
        prompt.classification = Some(classification.clone());
        Ok(ClassifyResponse { prompt_id: id.to_string(), classification, warnings })
    }

    // -- optimizer -----------------------------------------------------------

    fn pending(&self, prompt_id: &str) -> Vec<Suggestion> {
        self.library.suggestions_for(prompt_id, true).into_iter().cloned().collect()
    }

    fn template_proposal(&self, prompt: &Prompt) -> Result<Option<(Proposal, Vec<String>)>> {
        let cfg = &self.library.config.similarity;
        let hits = find_similar(prompt, self.library.prompts.values(), cfg.thresholds.template_trigger, cfg)?;
        let Some((_, top)) = hits.first() else { return Ok(None) };
        let similar: Vec<&Prompt> = hits.iter().map(|(p, _)| *p).collect();
        let Some(draft) = template_draft(prompt, &similar) else { return Ok(None) };
        let confidence = top.ensemble.clamp(0.0, 1.0);
        let proposal = Proposal {
            kind: SuggestionKind::Template,
            span: Span::new(0, prompt.text.chars().count()),
            replacement: draft.body,
            confidence,
            rationale: format!(
                "similar to {} stored prompt{} (best ensemble score {confidence:.2}); extract a reusable template",
                hits.len(),
                if hits.len() == 1 { "" } else { "s" }
            ),
            entity: None,
        };
        Ok(Some((proposal, hits.iter().map(|(p, _)| p.id.clone()).collect())))
    }

    /// Runs every detector on a stored prompt and reconciles the result with
    /// its stored suggestions: identical pending ones are kept, edits the
    /// user already resolved are not proposed again, and pending ones that
    /// no longer apply are rejected as stale. Returns the pending list in
    /// review order (ANONYMIZATION, SPELLING, GRAMMAR, TEMPLATE).
    pub fn optimize(&mut self, prompt_id: &str) -> Result<SuggestionList> {
        let prompt = self.library.prompt(prompt_id)?.clone();
        let analysis = self.optimizer.analyze(&prompt.text);
        let mut warnings = analysis.warnings;
        let mut candidates: Vec<Suggestion> = analysis
            .proposals
            .into_iter()
            .map(|p| Suggestion::from_proposal(String::new(), prompt_id, &prompt.text, p))
            .collect();
        match self.template_proposal(&prompt) {
            Ok(Some((proposal, related))) => {
                let mut s = Suggestion::from_proposal(String::new(), prompt_id, &prompt.text, proposal);
                s.related_prompt_ids = related;
                candidates.push(s);
            }
            Ok(None) => {}
            Err(e) => warnings.push(format!("template check failed ({e})")),
        }

        let existing: Vec<Suggestion> = self.library.suggestions_for(prompt_id, false).into_iter().cloned().collect();
        let mut matched: Vec<(String, Vec<String>)> = Vec::new();
        let mut fresh = Vec::new();
        for cand in candidates {
            if let Some(s) = existing.iter().find(|s| s.status == SuggestionStatus::Pending && s.same_edit(&cand)) {
                matched.push((s.id.clone(), cand.related_prompt_ids));
                continue;
            }
            let resolved_by_user = existing
                .iter()
                .any(|s| s.status != SuggestionStatus::Pending && s.rationale != STALE_RATIONALE && s.same_edit(&cand));
            if !resolved_by_user {
                fresh.push(cand);
            }
        }
        for s in existing.iter().filter(|s| s.status == SuggestionStatus::Pending) {
            match matched.iter().find(|(id, _)| *id == s.id) {
                Some((_, related)) => {
                    if let Some(stored) = self.library.suggestions.get_mut(&s.id) {
                        stored.related_prompt_ids = related.clone();
                    }
                }
                None => self.mark_stale(&s.id),
            }
        }
        for mut s in fresh {
            s.id = self.fresh_id("s_");
            s.validate()?;
            self.library.suggestions.insert(s.id.clone(), s);
        }
        Ok(SuggestionList { prompt_id: prompt_id.to_string(), suggestions: self.pending(prompt_id), warnings })
    }

    fn mark_stale(&mut self, id: &str) {
        if let Some(s) = self.library.suggestions.get_mut(id) {
            s.status = SuggestionStatus::Rejected;
            s.rationale = STALE_RATIONALE.to_string();
        }
    }

    /// Suggestions invalidated by an edit report as stale rather than as
    /// resolved, since the user never decided on them.
    fn check_pending(s: &Suggestion) -> Result<()> {
        match s.status {
            SuggestionStatus::Pending => Ok(()),
            SuggestionStatus::Rejected if s.rationale == STALE_RATIONALE => Err(Error::StaleSuggestion(s.id.clone())),
            _ => Err(Error::AlreadyResolved(s.id.clone())),
        }
    }

    fn pending_suggestion(&self, id: &str) -> Result<(Suggestion, Prompt)> {
        let s = self.library.suggestion(id)?.clone();
        Self::check_pending(&s)?;
        let prompt = self.library.prompt(&s.prompt_id)?.clone();
        if s.base_content_hash != prompt.content_hash {
            return Err(Error::StaleSuggestion(id.to_string()));
        }
        Ok((s, prompt))
    }

    /// Accepts a pending suggestion. Text edits are applied to the prompt,
    /// other pending suggestions that no longer line up are rejected as
    /// stale, and the optimizer runs again. A TEMPLATE suggestion instead
    /// creates a template from the prompt and its similar prompts.
    /// Failures leave the library untouched.
    pub fn accept(&mut self, id: &str) -> Result<SuggestionResponse> {
        let (s, prompt) = self.pending_suggestion(id)?;
        if s.kind == SuggestionKind::Template {
            let template = self.template_from_suggestion(&s, &prompt);
            template.validate()?;
            self.library.templates.insert(template.id.clone(), template.clone());
            self.set_status(id, SuggestionStatus::Accepted);
            return Ok(SuggestionResponse {
                suggestion: self.library.suggestion(id)?.clone(),
                prompt,
                template: Some(template),
                pending: self.pending(&s.prompt_id),
            });
        }
        let text = apply_span(&prompt.text, s.span, &s.replacement)?;
        let now = self.now();
        let stored = self.library.prompts.get_mut(&s.prompt_id).ok_or_else(|| Error::not_found("prompt", &s.prompt_id))?;
        stored.set_text(text, now);
        let new_hash = stored.content_hash.clone();
        self.set_status(id, SuggestionStatus::Accepted);
        let others: Vec<String> = self
            .library
            .suggestions_for(&s.prompt_id, true)
            .into_iter()
            .filter(|o| o.base_content_hash != new_hash)
            .map(|o| o.id.clone())
            .collect();
        for o in others {
            self.mark_stale(&o);
        }
        let pending = self.optimize(&s.prompt_id)?.suggestions;
        Ok(SuggestionResponse {
            suggestion: self.library.suggestion(id)?.clone(),
            prompt: self.library.prompt(&s.prompt_id)?.clone(),
            template: None,
            pending,
        })
    }

    pub fn reject(&mut self, id: &str) -> Result<SuggestionResponse> {
        let s = self.library.suggestion(id)?.clone();
        Self::check_pending(&s)?;
        self.set_status(id, SuggestionStatus::Rejected);
        Ok(SuggestionResponse {
            suggestion: self.library.suggestion(id)?.clone(),
            prompt: self.library.prompt(&s.prompt_id)?.clone(),
            template: None,
            pending: self.pending(&s.prompt_id),
        })
    }

    /// Accepts pending suggestions of a prompt one at a time, re-reading the
    /// pending list after every edit, until none of the selected kinds is
    /// left. `kinds = None` selects every kind.
    pub fn accept_all(&mut self, prompt_id: &str, kinds: Option<&[SuggestionKind]>) -> Result<Vec<SuggestionResponse>> {
        let selected = |k: SuggestionKind| kinds.is_none_or(|ks| ks.contains(&k));
        let mut out = Vec::new();
        let mut current = self.optimize(prompt_id)?.suggestions;
        for _ in 0..MAX_APPLY_ROUNDS {
            let Some(next) = current.iter().find(|s| selected(s.kind)) else { return Ok(out) };
            let r = self.accept(&next.id.clone())?;
            current = r.pending.clone();
            out.push(r);
        }
        Err(Error::InvalidParameter(format!("suggestions for {prompt_id} did not converge")))
    }

    fn set_status(&mut self, id: &str, status: SuggestionStatus) {
        if let Some(s) = self.library.suggestions.get_mut(id) {
            s.status = status;
        }
    }

    fn template_from_suggestion(&mut self, s: &Suggestion, prompt: &Prompt) -> Template {
        let related: Vec<&Prompt> =
            s.related_prompt_ids.iter().filter_map(|id| self.library.prompts.get(id)).collect();
        let draft = template_draft(prompt, &related).filter(|d| d.body == s.replacement);
        let variables = match draft {
            Some(d) => d.variables,
            None => crate::template::placeholder_names(&s.replacement)
                .into_iter()
                .map(|name| VariableSpec { name, description: String::new(), example_values: Vec::new() })
                .collect(),
        };
        let mut sources = vec![prompt.id.clone()];
        sources.extend(related.iter().map(|p| p.id.clone()));
        let id = self.fresh_id("t_");
        Template {
            id,
            body: s.replacement.clone(),
            variables,
            source_prompt_ids: sources,
            tombstoned_source_ids: Vec::new(),
            classification: prompt.classification.clone(),
            created_at: self.now(),
            confidence: Some(s.confidence),
        }
    }

    // -- templates -----------------------------------------------------------

    /// Collects the target and its similar prompts for extraction.
    pub fn extract_job(&self, prompt_id: &str, mode: ExtractionMode) -> Result<ExtractJob> {
        let target = self.library.prompt(prompt_id)?;
        let cfg = &self.library.config.similarity;
        let hits = find_similar(target, self.library.prompts.values(), cfg.thresholds.template_trigger, cfg)?;
        if hits.is_empty() {
            return Err(Error::InsufficientData(format!(
                "no stored prompt reaches the template trigger ({}) against {prompt_id}",
                cfg.thresholds.template_trigger
            )));
        }
        Ok(ExtractJob {
            target: target.clone(),
            similar: hits.into_iter().map(|(p, s)| (p.clone(), s)).collect(),
            mode,
        })
    }

    pub fn commit_extraction(&mut self, job: &ExtractJob, outcome: ExtractionOutcome) -> Result<ExtractResponse> {
        self.library.prompt(&job.target.id)?;
        let mut sources = vec![job.target.id.clone()];
        sources.extend(job.similar.iter().map(|(p, _)| p.id.clone()));
        let template = Template {
            id: self.fresh_id("t_"),
            body: outcome.draft.body,
            variables: outcome.draft.variables,
            source_prompt_ids: sources,
            tombstoned_source_ids: Vec::new(),
            classification: job.target.classification.clone(),
            created_at: self.now(),
            confidence: outcome.confidence,
        };
        template.validate()?;
        // Sources deleted while the job ran are tombstoned right away.
        let mut template = template;
        template.tombstoned_source_ids = template
            .source_prompt_ids
            .iter()
            .filter(|id| !self.library.prompts.contains_key(*id))
            .cloned()
            .collect();
        self.library.templates.insert(template.id.clone(), template.clone());
        Ok(ExtractResponse {
            template,
            mode: outcome.mode,
            fallback_reason: outcome.fallback_reason,
            variable_confidence: outcome.variable_confidence,
        })
    }

    pub fn extract_template(&mut self, prompt_id: &str, mode: ExtractionMode) -> Result<ExtractResponse> {
        let job = self.extract_job(prompt_id, mode)?;
        let outcome = job.run(&self.gateway)?;
        self.commit_extraction(&job, outcome)
    }

    pub fn list_templates(&self) -> TemplateList {
        let mut templates: Vec<Template> = self.library.templates.values().cloned().collect();
        templates.sort_by(|a, b| (a.created_at, &a.id).cmp(&(b.created_at, &b.id)));
        TemplateList { templates }
    }

    pub fn get_template(&self, id: &str) -> Result<Template> {
        self.library.template(id).cloned()
    }

    /// Edits body and/or variables; the placeholder/variable bijection must
    /// hold afterwards.
    pub fn edit_template(&mut self, id: &str, patch: TemplatePatch) -> Result<Template> {
        let current = self.library.template(id)?;
        let body = patch.body.unwrap_or_else(|| current.body.clone());
        let variables = patch.variables.unwrap_or_else(|| current.variables.clone());
        validate_bijection(&body, &variables)?;
        let t = self.library.templates.get_mut(id).ok_or_else(|| Error::not_found("template", id))?;
        t.body = body;
        t.variables = variables;
        Ok(t.clone())
    }

    pub fn render_template(&self, id: &str, binding: &Binding, strict: bool) -> Result<RenderResponse> {
        let t = self.library.template(id)?;
        let policy = if strict { UnknownPolicy::Strict } else { UnknownPolicy::Warn };
        Ok(RenderResponse { template_id: id.to_string(), text: t.render_with(binding, policy)? })
    }

    // -- library-wide --------------------------------------------------------

    /// Plans a dedup without changing anything.
    pub fn dedup_plan(&self, threshold: Option<f64>) -> Result<DedupReport> {
        let cfg = &self.library.config.similarity;
        let threshold = threshold.unwrap_or(cfg.thresholds.dedup);
        check_threshold(threshold)?;
        let prompts = self.library.prompts_in_order();
        match &self.dedup_embedder {
            Some(e) => dedup_plan_embedded(&prompts, threshold, e.as_ref()),
            None => dedup_plan_ngram(&prompts, threshold, cfg.ngram),
        }
    }

    /// Removes near-duplicates, keeping the earliest prompt of each cluster.
    pub fn dedup(&mut self, threshold: Option<f64>) -> Result<DedupReport> {
        let report = self.dedup_plan(threshold)?;
        for id in &report.removed_ids {
            self.library.remove_prompt(id)?;
        }
        Ok(report)
    }

    pub fn summary(&self) -> LibrarySummary {
        summarize_library(&self.library, &self.gateway)
    }

    pub fn export_json(&self) -> String {
        self.library.to_json()
    }

    pub fn export(&self, path: &Path) -> Result<()> {
        self.library.save(path)
    }

    /// Replaces the open library with the contents of a canonical file.
    pub fn import(&mut self, path: &Path) -> Result<()> {
        let library = Library::load(path)?;
        let problems = library.audit(Some(&self.vocab));
        if !problems.is_empty() {
            return Err(Error::InvalidParameter(format!("imported library failed audit: {}", problems.join("; "))));
        }
        self.library = library;
        Ok(())
    }
}

/// Best-effort aligned draft for a TEMPLATE suggestion: the whole similar
/// set, then the closest prompt only, then an all-variable template.
fn template_draft(target: &Prompt, similar: &[&Prompt]) -> Option<TemplateDraft> {
    let mut texts = vec![target.text.as_str()];
    texts.extend(similar.iter().map(|p| p.text.as_str()));
    extract_template_aligned(&texts, AlignOptions::default())
        .or_else(|_| extract_template_aligned(&texts[..2], AlignOptions::default()))
        .or_else(|_| extract_template_aligned(&texts[..2], AlignOptions { allow_all_variable: true }))
        .ok()
}
