//! Four-dimension prompt classification. Three backends: a keyword/pattern
//! heuristic that always works offline, trainable statistical models
//! (random forest, small feed-forward net) over bag-of-words features, and
//! an LLM annotator reached through the gateway.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;
use std::sync::{Arc, LazyLock};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::gateway::{Gateway, GatewayRequest, Purpose};
use crate::model::{Classification, Dimension, PromptChangeRecord, Vocabulary};

pub const DEFAULT_RULES_JSON: &str = include_str!("../data/heuristic_rules.json");
pub const MODEL_FORMAT_VERSION: u32 = 1;
pub const FEATURE_SPEC_VERSION: u32 = 1;
pub const MAX_BOW_VOCABULARY: usize = 5000;
pub const MIN_TRAINING_EXAMPLES: usize = 20;
pub const ANNOTATION_EXAMPLES: usize = 6;
/// Confidence reported for LLM labels that arrive without one.
pub const LLM_DEFAULT_CONFIDENCE: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendId {
    Heuristic,
    Trainable,
    Llm,
}

impl BackendId {
    pub fn as_str(self) -> &'static str {
        match self {
            BackendId::Heuristic => "heuristic",
            BackendId::Trainable => "trainable",
            BackendId::Llm => "llm",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelVariant {
    Forest,
    Mlp,
}

impl ModelVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelVariant::Forest => "forest",
            ModelVariant::Mlp => "mlp",
        }
    }
}

impl std::str::FromStr for ModelVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "forest" | "rf" | "random_forest" => Ok(ModelVariant::Forest),
            "mlp" => Ok(ModelVariant::Mlp),
            other => Err(Error::InvalidParameter(format!("unknown model variant {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Route {
    pub backend: BackendId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variant: Option<ModelVariant>,
}

impl Route {
    pub fn label(&self) -> String {
        match self.variant {
            Some(v) if self.backend == BackendId::Trainable => format!("{}:{}", self.backend.as_str(), v.as_str()),
            _ => self.backend.as_str().to_string(),
        }
    }
}

/// Backend choice per dimension. The default mirrors the hybrid setup:
/// tree ensemble for prompt type, feed-forward net for everything else.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierRouting {
    pub routes: BTreeMap<Dimension, Route>,
}

impl Default for ClassifierRouting {
    fn default() -> Self {
        let mut routes = BTreeMap::new();
        for dim in Dimension::ALL {
            let variant = if dim == Dimension::Type { ModelVariant::Forest } else { ModelVariant::Mlp };
            routes.insert(dim, Route { backend: BackendId::Trainable, variant: Some(variant) });
        }
        ClassifierRouting { routes }
    }
}

impl ClassifierRouting {
    pub fn uniform(backend: BackendId) -> Self {
        ClassifierRouting {
            routes: Dimension::ALL.iter().map(|&d| (d, Route { backend, variant: None })).collect(),
        }
    }

    pub fn route(&self, dim: Dimension) -> Route {
        self.routes.get(&dim).copied().unwrap_or(Route { backend: BackendId::Heuristic, variant: None })
    }

    pub fn validate(&self) -> Result<()> {
        for dim in Dimension::ALL {
            let route = self
                .routes
                .get(&dim)
                .ok_or_else(|| Error::InvalidParameter(format!("routing has no entry for {dim}")))?;
            if route.backend == BackendId::Trainable && route.variant.is_none() {
                return Err(Error::InvalidParameter(format!("trainable route for {dim} needs a variant")));
            }
        }
        Ok(())
    }
}

/// Word tokens used by the heuristic and the bag-of-words features:
/// lowercase alphanumeric runs, plus `{{` / `}}` markers so placeholder
/// syntax is visible to the models.
pub fn feature_tokens(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    let chars: Vec<char> = text.chars().collect();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_alphanumeric() {
            cur.extend(c.to_lowercase());
            i += 1;
            continue;
        }
        if !cur.is_empty() {
            out.push(std::mem::take(&mut cur));
        }
        if (c == '{' || c == '}') && chars.get(i + 1) == Some(&c) {
            out.push(if c == '{' { "{{".into() } else { "}}".into() });
            i += 2;
            continue;
        }
        i += 1;
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

// ---------------------------------------------------------------------------
// Heuristic backend

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeuristicRule {
    pub label: String,
    #[serde(default = "one")]
    pub weight: f64,
    #[serde(default)]
    pub keywords: Vec<String>,
    #[serde(default)]
    pub patterns: Vec<String>,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DimensionRules {
    #[serde(default)]
    pub default: Option<String>,
    pub rules: Vec<HeuristicRule>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RuleTable {
    pub version: u32,
    pub dimensions: BTreeMap<Dimension, DimensionRules>,
}

#[derive(Debug, Clone)]
struct CompiledHeuristicRule {
    label: String,
    weight: f64,
    phrases: Vec<Vec<String>>,
    patterns: Vec<Regex>,
}

/// Keyword and pattern scoring. Each distinct keyword or pattern that hits
/// adds the rule weight once to its label; the highest score wins, ties go
/// to the label listed first in the vocabulary.
#[derive(Debug, Clone)]
pub struct HeuristicClassifier {
    vocab: Vocabulary,
    defaults: BTreeMap<Dimension, String>,
    rules: BTreeMap<Dimension, Vec<CompiledHeuristicRule>>,
}

impl HeuristicClassifier {
    pub fn new(table: &RuleTable, vocab: &Vocabulary) -> Result<Self> {
        if table.version != 1 {
            return Err(Error::UnsupportedSchemaVersion(u64::from(table.version)));
        }
        let mut defaults = BTreeMap::new();
        let mut rules = BTreeMap::new();
        for dim in Dimension::ALL {
            let spec = table.dimensions.get(&dim);
            let default = match spec.and_then(|s| s.default.clone()) {
                Some(d) => vocab.validate_label(dim, &d)?.name,
                None => vocab.categories(dim)[0].clone(),
            };
            defaults.insert(dim, default);
            let mut compiled = Vec::new();
            for rule in spec.map(|s| s.rules.as_slice()).unwrap_or(&[]) {
                vocab.validate_label(dim, &rule.label)?;
                if !(rule.weight.is_finite() && rule.weight > 0.0) {
                    return Err(Error::InvalidParameter(format!("rule weight for {:?} must be positive", rule.label)));
                }
                let patterns = rule
                    .patterns
                    .iter()
                    .map(|p| Regex::new(p).map_err(|e| Error::InvalidParameter(format!("bad rule pattern {p:?}: {e}"))))
                    .collect::<Result<Vec<_>>>()?;
                let phrases = rule
                    .keywords
                    .iter()
                    .map(|k| feature_tokens(k))
                    .filter(|t| !t.is_empty())
                    .collect();
                compiled.push(CompiledHeuristicRule { label: rule.label.clone(), weight: rule.weight, phrases, patterns });
            }
            rules.insert(dim, compiled);
        }
        Ok(HeuristicClassifier { vocab: vocab.clone(), defaults, rules })
    }

    pub fn from_json(text: &str, vocab: &Vocabulary) -> Result<Self> {
        let table: RuleTable = serde_json::from_str(text).map_err(|e| Error::from_json(&e))?;
        Self::new(&table, vocab)
    }

    pub fn load(path: &Path, vocab: &Vocabulary) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?, vocab)
    }

    pub fn with_vocabulary(vocab: &Vocabulary) -> Result<Self> {
        Self::from_json(DEFAULT_RULES_JSON, vocab)
    }

    /// Per-label scores in vocabulary order.
    pub fn scores(&self, text: &str, dim: Dimension) -> Vec<f64> {
        let cats = self.vocab.categories(dim);
        let mut scores = vec![0.0; cats.len()];
        let tokens = feature_tokens(text);
        for rule in &self.rules[&dim] {
            let Some(pos) = cats.iter().position(|c| *c == rule.label) else { continue };
            let hits = rule.phrases.iter().filter(|p| contains_phrase(&tokens, p)).count()
                + rule.patterns.iter().filter(|r| r.is_match(text)).count();
            scores[pos] += rule.weight * hits as f64;
        }
        scores
    }

    /// Label and confidence. Confidence is the smoothed share of the winning
    /// score, so an input with no hits reports 1/k and a tie reports at most
    /// one half.
    pub fn classify_dimension(&self, text: &str, dim: Dimension) -> (String, f64) {
        let cats = self.vocab.categories(dim);
        let scores = self.scores(text, dim);
        let total: f64 = scores.iter().sum();
        let k = cats.len() as f64;
        if total == 0.0 {
            return (self.defaults[&dim].clone(), 1.0 / k);
        }
        let best = argmax(&scores);
        let confidence = (scores[best] + 1.0) / (total + k);
        (cats[best].clone(), confidence)
    }

    pub fn classify(&self, text: &str) -> Result<Classification> {
        let mut names = BTreeMap::new();
        let mut conf = BTreeMap::new();
        for dim in Dimension::ALL {
            let (label, c) = self.classify_dimension(text, dim);
            names.insert(dim, label);
            conf.insert(dim, c);
        }
        Classification::from_names(&self.vocab, &names, conf, BackendId::Heuristic.as_str())
    }
}

fn contains_phrase(tokens: &[String], phrase: &[String]) -> bool {
    tokens.windows(phrase.len()).any(|w| w == phrase)
}

/// First index of the maximum; NaN never wins.
fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

static DEFAULT_HEURISTIC: LazyLock<HeuristicClassifier> = LazyLock::new(|| {
    HeuristicClassifier::with_vocabulary(&Vocabulary::default()).expect("bundled rule table is valid")
});

pub fn default_heuristic() -> &'static HeuristicClassifier {
    &DEFAULT_HEURISTIC
}

// ---------------------------------------------------------------------------
// Features

/// External sentence embedder usable in place of bag-of-words features.
pub trait Embedder: Send + Sync {
    fn id(&self) -> &str;
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureSpec {
    BagOfWords { version: u32, vocabulary: Vec<String> },
    Embedding { version: u32, embedder: String, dim: usize },
}

/// Sparse feature vector: (index, value) pairs with ascending indices.
pub type SparseVec = Vec<(usize, f64)>;

impl FeatureSpec {
    pub fn bag_of_words<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut df: HashMap<String, usize> = HashMap::new();
        for text in texts {
            let uniq: BTreeSet<String> = feature_tokens(text).into_iter().collect();
            for t in uniq {
                *df.entry(t).or_default() += 1;
            }
        }
        let mut words: Vec<(String, usize)> = df.into_iter().collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        words.truncate(MAX_BOW_VOCABULARY);
        let mut vocabulary: Vec<String> = words.into_iter().map(|(w, _)| w).collect();
        vocabulary.sort();
        FeatureSpec::BagOfWords { version: FEATURE_SPEC_VERSION, vocabulary }
    }

    pub fn version(&self) -> u32 {
        match self {
            FeatureSpec::BagOfWords { version, .. } | FeatureSpec::Embedding { version, .. } => *version,
        }
    }

    pub fn width(&self) -> usize {
        match self {
            FeatureSpec::BagOfWords { vocabulary, .. } => vocabulary.len(),
            FeatureSpec::Embedding { dim, .. } => *dim,
        }
    }

    pub fn featurize(&self, text: &str, embedder: Option<&dyn Embedder>) -> Result<SparseVec> {
        match self {
            FeatureSpec::BagOfWords { vocabulary, .. } => {
                let mut counts: BTreeMap<usize, f64> = BTreeMap::new();
                for t in feature_tokens(text) {
                    if let Ok(i) = vocabulary.binary_search(&t) {
                        *counts.entry(i).or_default() += 1.0;
                    }
                }
                Ok(counts.into_iter().collect())
            }
            FeatureSpec::Embedding { embedder: id, dim, .. } => {
                let e = embedder.ok_or_else(|| {
                    Error::ModelMismatch(format!("model needs embedder {id:?} but none is configured"))
                })?;
                if e.id() != id || e.dim() != *dim {
                    return Err(Error::ModelMismatch(format!(
                        "model trained with embedder {id:?} ({dim} dims), got {:?} ({} dims)",
                        e.id(),
                        e.dim()
                    )));
                }
                let v = e.embed(text)?;
                if v.len() != *dim {
                    return Err(Error::InvalidResponse(format!("embedder returned {} dims, expected {dim}", v.len())));
                }
                Ok(v.into_iter().enumerate().filter(|(_, x)| *x != 0.0).collect())
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Random forest

pub const FOREST_TREES: usize = 100;
const MAX_TREE_DEPTH: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "node", rename_all = "snake_case")]
enum TreeNode {
    Leaf { dist: Vec<f64> },
    Split { feature: usize, threshold: f64, left: usize, right: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Tree {
    nodes: Vec<TreeNode>,
}

impl Tree {
    fn predict<'a>(&'a self, x: &SparseVec) -> &'a [f64] {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                TreeNode::Leaf { dist } => return dist,
                TreeNode::Split { feature, threshold, left, right } => {
                    let v = x
                        .binary_search_by_key(feature, |&(f, _)| f)
                        .map_or(0.0, |pos| x[pos].1);
                    i = if v <= *threshold { *left } else { *right };
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestParams {
    trees: Vec<Tree>,
}

struct DenseData<'a> {
    x: Vec<f64>,
    width: usize,
    y: &'a [usize],
    classes: usize,
}

impl DenseData<'_> {
    fn at(&self, row: usize, col: usize) -> f64 {
        self.x[row * self.width + col]
    }
}

fn gini(counts: &[f64], n: f64) -> f64 {
    if n == 0.0 {
        return 0.0;
    }
    1.0 - counts.iter().map(|c| (c / n).powi(2)).sum::<f64>()
}

struct BestSplit {
    feature: usize,
    threshold: f64,
    impurity: f64,
}

fn best_split_on(data: &DenseData<'_>, samples: &[usize], feature: usize) -> Option<BestSplit> {
    let mut order: Vec<(f64, usize)> = samples.iter().map(|&s| (data.at(s, feature), data.y[s])).collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0));
    if order[0].0 == order[order.len() - 1].0 {
        return None;
    }
    let n = order.len() as f64;
    let mut right = vec![0.0; data.classes];
    for &(_, y) in &order {
        right[y] += 1.0;
    }
    let mut left = vec![0.0; data.classes];
    let mut best: Option<BestSplit> = None;
    for i in 0..order.len() - 1 {
        let y = order[i].1;
        left[y] += 1.0;
        right[y] -= 1.0;
        if order[i].0 == order[i + 1].0 {
            continue;
        }
        let nl = (i + 1) as f64;
        let nr = n - nl;
        let impurity = (nl * gini(&left, nl) + nr * gini(&right, nr)) / n;
        if best.as_ref().is_none_or(|b| impurity < b.impurity) {
            best = Some(BestSplit { feature, threshold: (order[i].0 + order[i + 1].0) / 2.0, impurity });
        }
    }
    best
}

fn grow_tree(data: &DenseData<'_>, samples: Vec<usize>, mtry: usize, rng: &mut ChaCha8Rng) -> Tree {
    let mut nodes: Vec<TreeNode> = Vec::new();
    // (node index, samples, depth)
    let mut stack = vec![(0usize, samples, 0usize)];
    nodes.push(TreeNode::Leaf { dist: Vec::new() });
    let mut perm: Vec<usize> = (0..data.width).collect();
    while let Some((idx, samples, depth)) = stack.pop() {
        let mut counts = vec![0.0; data.classes];
        for &s in &samples {
            counts[data.y[s]] += 1.0;
        }
        let n = samples.len() as f64;
        let dist: Vec<f64> = counts.iter().map(|c| c / n).collect();
        let pure = counts.iter().filter(|&&c| c > 0.0).count() <= 1;
        if pure || samples.len() < 2 || depth >= MAX_TREE_DEPTH {
            nodes[idx] = TreeNode::Leaf { dist };
            continue;
        }
        // Keep drawing features until `mtry` non-constant ones were tried,
        // or every feature has been looked at.
        let mut best: Option<BestSplit> = None;
        let mut tried = 0;
        for k in 0..perm.len() {
            let j = rng.random_range(k..perm.len());
            perm.swap(k, j);
            if let Some(split) = best_split_on(data, &samples, perm[k]) {
                tried += 1;
                if best.as_ref().is_none_or(|b| split.impurity < b.impurity) {
                    best = Some(split);
                }
            }
            if tried >= mtry {
                break;
            }
        }
        let Some(split) = best else {
            nodes[idx] = TreeNode::Leaf { dist };
            continue;
        };
        let (l, r): (Vec<usize>, Vec<usize>) =
            samples.iter().partition(|&&s| data.at(s, split.feature) <= split.threshold);
        let left = nodes.len();
        nodes.push(TreeNode::Leaf { dist: Vec::new() });
        let right = nodes.len();
        nodes.push(TreeNode::Leaf { dist: Vec::new() });
        nodes[idx] = TreeNode::Split { feature: split.feature, threshold: split.threshold, left, right };
        stack.push((right, r, depth + 1));
        stack.push((left, l, depth + 1));
    }
    Tree { nodes }
}

fn densify(rows: &[SparseVec], width: usize) -> Vec<f64> {
    let mut x = vec![0.0; rows.len() * width];
    for (i, row) in rows.iter().enumerate() {
        for &(j, v) in row {
            x[i * width + j] = v;
        }
    }
    x
}

fn fit_forest(rows: &[SparseVec], y: &[usize], width: usize, classes: usize, seed: u64, trees: usize) -> ForestParams {
    let data = DenseData { x: densify(rows, width), width, y, classes };
    let mtry = ((width as f64).sqrt().floor() as usize).max(1);
    let n = rows.len();
    let trees = (0..trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (t as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let sample: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            grow_tree(&data, sample, mtry, &mut rng)
        })
        .collect();
    ForestParams { trees }
}

impl ForestParams {
    fn predict_proba(&self, x: &SparseVec, classes: usize) -> Vec<f64> {
        let mut p = vec![0.0; classes];
        for tree in &self.trees {
            for (acc, v) in p.iter_mut().zip(tree.predict(x)) {
                *acc += v;
            }
        }
        let k = self.trees.len().max(1) as f64;
        p.iter_mut().for_each(|v| *v /= k);
        p
    }
}

// ---------------------------------------------------------------------------
// Feed-forward network: one ReLU hidden layer, softmax output, Adam.

pub const MLP_HIDDEN: usize = 100;
pub const MLP_MAX_EPOCHS: usize = 200;
const MLP_LEARNING_RATE: f64 = 1e-3;
const MLP_ALPHA: f64 = 1e-4;
const MLP_BATCH: usize = 200;
const MLP_TOL: f64 = 1e-4;
const MLP_PATIENCE: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    hidden: usize,
    /// input × hidden, row-major by input feature
    w1: Vec<f64>,
    b1: Vec<f64>,
    /// hidden × classes
    w2: Vec<f64>,
    b2: Vec<f64>,
}

impl MlpParams {
    fn forward(&self, x: &SparseVec, classes: usize) -> (Vec<f64>, Vec<f64>) {
        let h = self.hidden;
        let mut hid = self.b1.clone();
        for &(j, v) in x {
            let row = &self.w1[j * h..(j + 1) * h];
            for (a, w) in hid.iter_mut().zip(row) {
                *a += v * w;
            }
        }
        hid.iter_mut().for_each(|a| *a = a.max(0.0));
        let mut z = self.b2.clone();
        for (i, a) in hid.iter().enumerate() {
            if *a == 0.0 {
                continue;
            }
            for (c, zc) in z.iter_mut().enumerate() {
                *zc += a * self.w2[i * classes + c];
            }
        }
        (hid, softmax(&z))
    }
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Adam { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    fn step(&mut self, params: &mut [&mut Vec<f64>], grads: &[Vec<f64>]) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.t += 1;
        let lr = MLP_LEARNING_RATE * (1.0 - B2.powi(self.t)).sqrt() / (1.0 - B1.powi(self.t));
        let mut k = 0;
        for (p, g) in params.iter_mut().zip(grads) {
            for (w, gi) in p.iter_mut().zip(g) {
                self.m[k] = B1 * self.m[k] + (1.0 - B1) * gi;
                self.v[k] = B2 * self.v[k] + (1.0 - B2) * gi * gi;
                *w -= lr * self.m[k] / (self.v[k].sqrt() + EPS);
                k += 1;
            }
        }
    }
}

fn fit_mlp(rows: &[SparseVec], y: &[usize], width: usize, classes: usize, seed: u64, max_epochs: usize) -> MlpParams {
    let h = MLP_HIDDEN;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut init = |fan_in: usize, fan_out: usize, n: usize| -> Vec<f64> {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        (0..n).map(|_| rng.random_range(-bound..bound)).collect()
    };
    let mut p = MlpParams {
        hidden: h,
        w1: init(width, h, width * h),
        b1: init(width, h, h),
        w2: init(h, classes, h * classes),
        b2: init(h, classes, classes),
    };
    let total = p.w1.len() + p.b1.len() + p.w2.len() + p.b2.len();
    let mut adam = Adam::new(total);
    let n = rows.len();
    let batch = MLP_BATCH.min(n).max(1);
    let mut order: Vec<usize> = (0..n).collect();
    let mut best_loss = f64::INFINITY;
    let mut stale = 0;
    for _epoch in 0..max_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(batch) {
            let bsz = chunk.len() as f64;
            let mut gw1 = vec![0.0; p.w1.len()];
            let mut gb1 = vec![0.0; h];
            let mut gw2 = vec![0.0; p.w2.len()];
            let mut gb2 = vec![0.0; classes];
            for &s in chunk {
                let (hid, prob) = p.forward(&rows[s], classes);
                epoch_loss -= prob[y[s]].max(1e-12).ln();
                let mut dz = prob;
                dz[y[s]] -= 1.0;
                let mut dh = vec![0.0; h];
                for i in 0..h {
                    if hid[i] == 0.0 {
                        continue;
                    }
                    for c in 0..classes {
                        gw2[i * classes + c] += hid[i] * dz[c];
                        dh[i] += p.w2[i * classes + c] * dz[c];
                    }
                }
                for c in 0..classes {
                    gb2[c] += dz[c];
                }
                for &(j, v) in &rows[s] {
                    for i in 0..h {
                        if hid[i] > 0.0 {
                            gw1[j * h + i] += v * dh[i];
                        }
                    }
                }
                for i in 0..h {
                    if hid[i] > 0.0 {
                        gb1[i] += dh[i];
                    }
                }
            }
            let reg: f64 = p.w1.iter().chain(&p.w2).map(|w| w * w).sum();
            epoch_loss += 0.5 * MLP_ALPHA * reg;
            for (g, w) in gw1.iter_mut().zip(&p.w1) {
                *g = (*g + MLP_ALPHA * w) / bsz;
            }
            for (g, w) in gw2.iter_mut().zip(&p.w2) {
                *g = (*g + MLP_ALPHA * w) / bsz;
            }
            gb1.iter_mut().for_each(|g| *g /= bsz);
            gb2.iter_mut().for_each(|g| *g /= bsz);
            adam.step(&mut [&mut p.w1, &mut p.b1, &mut p.w2, &mut p.b2], &[gw1, gb1, gw2, gb2]);
        }
        let loss = epoch_loss / n as f64;
        if loss > best_loss - MLP_TOL {
            stale += 1;
            if stale >= MLP_PATIENCE {
                break;
            }
        } else {
            stale = 0;
        }
        best_loss = best_loss.min(loss);
    }
    p
}

// ---------------------------------------------------------------------------
// Trained models

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum ModelParams {
    Forest(ForestParams),
    Mlp(MlpParams),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub format_version: u32,
    pub dimension: Dimension,
    pub variant: ModelVariant,
    pub features: FeatureSpec,
    /// Class labels in vocabulary order; output index i is labels[i].
    pub labels: Vec<String>,
    pub params: ModelParams,
    pub heldout_weighted_f1: f64,
    pub split_seed: u64,
    pub train_size: usize,
    pub test_size: usize,
}

impl TrainedModel {
    pub fn predict_proba(&self, text: &str, embedder: Option<&dyn Embedder>) -> Result<Vec<f64>> {
        let x = self.features.featurize(text, embedder)?;
        let k = self.labels.len();
        Ok(match &self.params {
            ModelParams::Forest(f) => f.predict_proba(&x, k),
            ModelParams::Mlp(m) => m.forward(&x, k).1,
        })
    }

    pub fn predict(&self, text: &str, embedder: Option<&dyn Embedder>) -> Result<(String, f64)> {
        let p = self.predict_proba(text, embedder)?;
        let best = argmax(&p);
        Ok((self.labels[best].clone(), p[best].clamp(0.0, 1.0)))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| Error::from_json(&e))?;
        crate::atomic_write(path, text.as_bytes())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: Value = serde_json::from_str(text).map_err(|e| Error::from_json(&e))?;
        let format = raw.get("format_version").and_then(Value::as_u64).unwrap_or(0);
        if format != u64::from(MODEL_FORMAT_VERSION) {
            return Err(Error::UnsupportedSchemaVersion(format));
        }
        let model: TrainedModel = serde_json::from_value(raw).map_err(|e| Error::from_json(&e))?;
        if model.features.version() != FEATURE_SPEC_VERSION {
            return Err(Error::ModelMismatch(format!(
                "feature spec version {} (expected {FEATURE_SPEC_VERSION})",
                model.features.version()
            )));
        }
        let consistent = match &model.params {
            ModelParams::Forest(_) => model.variant == ModelVariant::Forest,
            ModelParams::Mlp(m) => {
                model.variant == ModelVariant::Mlp
                    && m.w1.len() == model.features.width() * m.hidden
                    && m.w2.len() == m.hidden * model.labels.len()
            }
        };
        if !consistent || model.labels.is_empty() {
            return Err(Error::ModelMismatch("model parameters do not match its metadata".into()));
        }
        Ok(model)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[derive(Clone)]
pub struct TrainConfig {
    pub seed: u64,
    pub trees: usize,
    pub max_epochs: usize,
    pub embedder: Option<Arc<dyn Embedder>>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { seed: 42, trees: FOREST_TREES, max_epochs: MLP_MAX_EPOCHS, embedder: None }
    }
}

impl std::fmt::Debug for TrainConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TrainConfig")
            .field("seed", &self.seed)
            .field("trees", &self.trees)
            .field("max_epochs", &self.max_epochs)
            .field("embedder", &self.embedder.as_ref().map(|e| e.id().to_string()))
            .finish()
    }
}

/// Deterministic 80/20 split: (train indices, test indices).
pub fn split_indices(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test = ((n as f64 * 0.2).round() as usize).clamp(1, n.saturating_sub(1).max(1));
    let test_idx = idx[..test].to_vec();
    let train_idx = idx[test..].to_vec();
    (train_idx, test_idx)
}

pub fn train_classifier(
    dataset: &[(String, Classification)],
    dimension: Dimension,
    variant: ModelVariant,
    vocab: &Vocabulary,
    config: &TrainConfig,
) -> Result<TrainedModel> {
    if dataset.len() < MIN_TRAINING_EXAMPLES {
        return Err(Error::InsufficientData(format!(
            "{} examples; at least {MIN_TRAINING_EXAMPLES} required",
            dataset.len()
        )));
    }
    for (_, c) in dataset {
        c.validate(vocab)?;
    }
    let present: BTreeSet<&str> = dataset.iter().map(|(_, c)| c.label(dimension).name.as_str()).collect();
    if present.len() < 2 {
        let only = present.iter().next().copied().unwrap_or_default();
        return Err(Error::DegenerateLabels(format!("{dimension} = {only}")));
    }
    let labels: Vec<String> = vocab
        .categories(dimension)
        .iter()
        .filter(|c| present.contains(c.as_str()))
        .cloned()
        .collect();
    let (train_idx, test_idx) = split_indices(dataset.len(), config.seed);
    let features = match &config.embedder {
        Some(e) => FeatureSpec::Embedding { version: FEATURE_SPEC_VERSION, embedder: e.id().to_string(), dim: e.dim() },
        None => FeatureSpec::bag_of_words(train_idx.iter().map(|&i| dataset[i].0.as_str())),
    };
    let embedder = config.embedder.as_deref();
    let rows = train_idx
        .iter()
        .map(|&i| features.featurize(&dataset[i].0, embedder))
        .collect::<Result<Vec<_>>>()?;
    let y: Vec<usize> = train_idx
        .iter()
        .map(|&i| labels.iter().position(|l| *l == dataset[i].1.label(dimension).name).unwrap_or(0))
        .collect();
    let width = features.width();
    let params = match variant {
        ModelVariant::Forest => ModelParams::Forest(fit_forest(&rows, &y, width, labels.len(), config.seed, config.trees)),
        ModelVariant::Mlp => ModelParams::Mlp(fit_mlp(&rows, &y, width, labels.len(), config.seed, config.max_epochs)),
    };
    let mut model = TrainedModel {
        format_version: MODEL_FORMAT_VERSION,
        dimension,
        variant,
        features,
        labels,
        params,
        heldout_weighted_f1: 0.0,
        split_seed: config.seed,
        train_size: train_idx.len(),
        test_size: test_idx.len(),
    };
    let held_out: Vec<(String, Classification)> = test_idx.iter().map(|&i| dataset[i].clone()).collect();
    model.heldout_weighted_f1 = evaluate_with(&model, &held_out, embedder)?;
    Ok(model)
}

/// Support-weighted mean of per-class F1 over the classes present in
/// `truth`. A class never predicted has precision 0.
pub fn weighted_f1(truth: &[String], predicted: &[String]) -> Result<f64> {
    if truth.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if truth.len() != predicted.len() {
        return Err(Error::InvalidParameter(format!(
            "{} labels but {} predictions",
            truth.len(),
            predicted.len()
        )));
    }
    let mut support: BTreeMap<&str, usize> = BTreeMap::new();
    let mut pred_count: BTreeMap<&str, usize> = BTreeMap::new();
    let mut hits: BTreeMap<&str, usize> = BTreeMap::new();
    for (t, p) in truth.iter().zip(predicted) {
        *support.entry(t).or_default() += 1;
        *pred_count.entry(p).or_default() += 1;
        if t == p {
            *hits.entry(t).or_default() += 1;
        }
    }
    let n = truth.len() as f64;
    let mut total = 0.0;
    for (class, &s) in &support {
        let tp = hits.get(class).copied().unwrap_or(0) as f64;
        let pc = pred_count.get(class).copied().unwrap_or(0) as f64;
        let precision = if pc > 0.0 { tp / pc } else { 0.0 };
        let recall = tp / s as f64;
        let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
        total += s as f64 / n * f1;
    }
    Ok(total)
}

fn evaluate_with(model: &TrainedModel, dataset: &[(String, Classification)], embedder: Option<&dyn Embedder>) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let truth: Vec<String> = dataset.iter().map(|(_, c)| c.label(model.dimension).name.clone()).collect();
    let predicted = dataset
        .iter()
        .map(|(t, _)| model.predict(t, embedder).map(|p| p.0))
        .collect::<Result<Vec<_>>>()?;
    weighted_f1(&truth, &predicted)
}

pub fn evaluate_classifier(model: &TrainedModel, dataset: &[(String, Classification)]) -> Result<f64> {
    evaluate_with(model, dataset, None)
}

pub fn evaluate_classifier_with(
    model: &TrainedModel,
    dataset: &[(String, Classification)],
    embedder: &dyn Embedder,
) -> Result<f64> {
    evaluate_with(model, dataset, Some(embedder))
}

/// Majority-class baseline F1 on `test`, using the most frequent label of
/// `train` (ties to the smaller label).
pub fn majority_baseline_f1(train: &[String], test: &[String]) -> Result<f64> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for t in train {
        *counts.entry(t).or_default() += 1;
    }
    let majority = counts
        .iter()
        .max_by(|a, b| a.1.cmp(b.1).then_with(|| b.0.cmp(a.0)))
        .map(|(l, _)| l.to_string())
        .ok_or(Error::EmptyDataset)?;
    weighted_f1(test, &vec![majority; test.len()])
}

// ---------------------------------------------------------------------------
// LLM annotation

/// A change record with labels for both the old and the new prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledChange {
    pub record: PromptChangeRecord,
    pub old: Classification,
    pub new: Classification,
}

fn label_description(dim: Dimension, name: &str) -> Option<&'static str> {
    Some(match (dim, name) {
        (Dimension::Intent, "Best Practices") => "asks how something should be done, for conventions, guidelines or advice",
        (Dimension::Intent, "Documentation & Explanation") => "asks to explain, describe, document or summarize code or concepts",
        (Dimension::Intent, "Code Generation") => "asks the model to write, generate or convert code",
        (Dimension::Intent, "Code Review & Analysis") => "asks to review, analyze, audit or find problems in existing code",
        (Dimension::Role, "General") => "no particular professional role is evident",
        (Dimension::Role, "Software Developer") => "written from the perspective of someone building software",
        (Dimension::Role, "Project Manager") => "concerned with planning, schedules, teams or stakeholders",
        (Dimension::Role, "Data Scientist") => "concerned with data analysis, statistics or machine-learning models",
        (Dimension::Sdlc, "General") => "not tied to a specific lifecycle phase",
        (Dimension::Sdlc, "Implementation & Coding") => "writing, fixing or changing code",
        (Dimension::Sdlc, "Testing & Quality Assurance") => "tests, verification and quality checks",
        (Dimension::Sdlc, "Planning & Design") => "requirements, architecture and design decisions",
        (Dimension::Type, "Template-based") => "contains fill-in placeholders or a reusable fixed structure",
        (Dimension::Type, "Zero-shot") => "a direct instruction with no worked examples",
        (Dimension::Type, "Few-shot") => "includes one or more worked input/output examples",
        _ => return None,
    })
}

fn taxonomy_header(vocab: &Vocabulary) -> String {
    let mut s = String::new();
    s.push_str("You annotate software-engineering prompts along four independent dimensions.\n\n");
    s.push_str("# Taxonomy\n");
    for dim in Dimension::ALL {
        s.push_str(&format!("{dim}:\n"));
        for name in vocab.categories(dim) {
            match label_description(dim, name) {
                Some(d) => s.push_str(&format!("  - {name}: {d}\n")),
                None => s.push_str(&format!("  - {name}\n")),
            }
        }
    }
    s.push_str("\n# Decision tree\n");
    for dim in Dimension::ALL {
        let cats = vocab.categories(dim);
        s.push_str(&format!("{dim}:\n"));
        let (fallback, rest) = match dim {
            // Structural signals decide the prompt type in order.
            Dimension::Type => (cats.last().cloned().unwrap_or_default(), &cats[..cats.len().saturating_sub(1)]),
            _ => (cats[0].clone(), &cats[1..]),
        };
        for (i, name) in rest.iter().enumerate() {
            let q = label_description(dim, name).unwrap_or("matches this category best");
            s.push_str(&format!("  {}. Does the prompt say it {q}? If yes, choose {name}.\n", i + 1));
        }
        s.push_str(&format!("  {}. Otherwise choose {fallback}.\n", rest.len() + 1));
    }
    s.push_str("\n# Method\n");
    s.push_str("Reason step by step through the decision tree for each dimension before answering. ");
    s.push_str("Reply with a JSON object whose keys are INTENT, ROLE, SDLC and TYPE, each mapped to exactly one category name from the taxonomy, ");
    s.push_str("plus an optional \"confidence\" object mapping each dimension to a number in [0, 1].\n");
    s
}

fn label_lines(c: &Classification) -> String {
    Dimension::ALL.iter().map(|&d| format!("{d} = {}\n", c.label(d).name)).collect()
}

fn fenced(text: &str) -> String {
    format!("<<<\n{text}\n>>>\n")
}

/// Few-shot annotation prompt for a change record. Examples are shuffled
/// with `seed`; everything else is fixed, so equal inputs give equal text.
pub fn build_annotation_prompt(
    target: &PromptChangeRecord,
    examples: &[LabeledChange],
    vocab: &Vocabulary,
    seed: u64,
) -> Result<String> {
    if examples.len() != ANNOTATION_EXAMPLES {
        return Err(Error::WrongExampleCount { expected: ANNOTATION_EXAMPLES, actual: examples.len() });
    }
    target.validate()?;
    for ex in examples {
        ex.record.validate()?;
        ex.old.validate(vocab)?;
        ex.new.validate(vocab)?;
    }
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut s = taxonomy_header(vocab);
    s.push_str("\n# Examples\n");
    for (n, &i) in order.iter().enumerate() {
        let ex = &examples[i];
        s.push_str(&format!("\n## Example {}\n", n + 1));
        s.push_str("OLD PROMPT:\n");
        s.push_str(&fenced(&ex.record.old_text));
        s.push_str("OLD LABELS:\n");
        s.push_str(&label_lines(&ex.old));
        s.push_str("NEW PROMPT:\n");
        s.push_str(&fenced(&ex.record.new_text));
        s.push_str("NEW LABELS:\n");
        s.push_str(&label_lines(&ex.new));
    }
    s.push_str("\n# Target\n");
    s.push_str("Annotate both prompts below. Reply as {\"old\": {...}, \"new\": {...}} using the format above.\n");
    s.push_str("OLD PROMPT:\n");
    s.push_str(&fenced(&target.old_text));
    s.push_str("NEW PROMPT:\n");
    s.push_str(&fenced(&target.new_text));
    Ok(s)
}

/// Zero-shot request for a single library prompt.
pub fn classification_request(text: &str, vocab: &Vocabulary) -> GatewayRequest {
    let mut user = String::from("# Prompt\n");
    user.push_str(&fenced(text));
    GatewayRequest::structured(Purpose::Annotate, taxonomy_header(vocab), user)
}

/// Reads `{INTENT, ROLE, SDLC, TYPE, confidence?}`; a `new` sub-object is
/// accepted in place of the top level.
pub fn parse_annotation(value: &Value, vocab: &Vocabulary) -> Result<(BTreeMap<Dimension, String>, BTreeMap<Dimension, f64>)> {
    let obj = value.get("new").filter(|v| v.is_object()).unwrap_or(value);
    let mut names = BTreeMap::new();
    let mut conf = BTreeMap::new();
    for dim in Dimension::ALL {
        let name = obj
            .get(dim.as_str())
            .and_then(Value::as_str)
            .ok_or_else(|| Error::InvalidResponse(format!("annotation lacks {dim}")))?;
        let name = name.trim();
        vocab
            .validate_label(dim, name)
            .map_err(|e| Error::InvalidResponse(e.to_string()))?;
        names.insert(dim, name.to_string());
        let c = obj
            .get("confidence")
            .and_then(|c| c.get(dim.as_str()))
            .and_then(Value::as_f64)
            .unwrap_or(LLM_DEFAULT_CONFIDENCE);
        if !(0.0..=1.0).contains(&c) {
            return Err(Error::InvalidResponse(format!("{dim} confidence {c} outside [0,1]")));
        }
        conf.insert(dim, c);
    }
    Ok((names, conf))
}

// ---------------------------------------------------------------------------
// Routing

/// Routes each dimension to its configured backend.
#[derive(Clone)]
pub struct Classifier {
    vocab: Vocabulary,
    heuristic: HeuristicClassifier,
    routing: ClassifierRouting,
    models: BTreeMap<Dimension, Arc<TrainedModel>>,
    embedder: Option<Arc<dyn Embedder>>,
    gateway: Option<Arc<Gateway>>,
}

impl std::fmt::Debug for Classifier {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Classifier")
            .field("routing", &self.routing)
            .field("models", &self.models.keys().collect::<Vec<_>>())
            .field("gateway", &self.gateway.is_some())
            .finish()
    }
}

impl Classifier {
    pub fn new(vocab: Vocabulary, heuristic: HeuristicClassifier, routing: ClassifierRouting) -> Self {
        Classifier { vocab, heuristic, routing, models: BTreeMap::new(), embedder: None, gateway: None }
    }

    /// Heuristic on every dimension with the bundled rule table.
    pub fn heuristic_only(vocab: &Vocabulary) -> Result<Self> {
        Ok(Self::new(
            vocab.clone(),
            HeuristicClassifier::with_vocabulary(vocab)?,
            ClassifierRouting::uniform(BackendId::Heuristic),
        ))
    }

    pub fn with_model(mut self, model: TrainedModel) -> Self {
        self.models.insert(model.dimension, Arc::new(model));
        self
    }

    pub fn with_embedder(mut self, embedder: Arc<dyn Embedder>) -> Self {
        self.embedder = Some(embedder);
        self
    }

    pub fn with_gateway(mut self, gateway: Arc<Gateway>) -> Self {
        self.gateway = Some(gateway);
        self
    }

    pub fn routing(&self) -> &ClassifierRouting {
        &self.routing
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn heuristic(&self) -> &HeuristicClassifier {
        &self.heuristic
    }

    pub fn models(&self) -> impl Iterator<Item = &TrainedModel> {
        self.models.values().map(|m| m.as_ref())
    }

    fn trainable(&self, dim: Dimension, variant: Option<ModelVariant>, text: &str) -> Result<(String, f64)> {
        let unavailable = || Error::BackendUnavailable { dimension: dim, backend: BackendId::Trainable.as_str().into() };
        let model = self.models.get(&dim).ok_or_else(unavailable)?;
        if variant.is_some_and(|v| v != model.variant) {
            return Err(unavailable());
        }
        model.predict(text, self.embedder.as_deref())
    }

    fn llm(&self, text: &str) -> Result<(BTreeMap<Dimension, String>, BTreeMap<Dimension, f64>)> {
        let gateway = self.gateway.as_ref().ok_or_else(|| Error::BackendUnavailable {
            dimension: Dimension::Intent,
            backend: BackendId::Llm.as_str().into(),
        })?;
        let value = gateway.complete_json(&classification_request(text, &self.vocab))?;
        parse_annotation(&value, &self.vocab)
    }

    /// Strict classification: any unavailable backend is an error.
    pub fn classify(&self, text: &str) -> Result<Classification> {
        let (c, warnings) = self.classify_inner(text, false)?;
        debug_assert!(warnings.is_empty());
        Ok(c)
    }

    /// Like `classify`, but a failing backend falls back to the heuristic
    /// for that dimension and the failure is reported as a warning.
    pub fn classify_with_fallback(&self, text: &str) -> (Classification, Vec<String>) {
        match self.classify_inner(text, true) {
            Ok(r) => r,
            Err(e) => {
                let c = self.heuristic.classify(text).expect("heuristic labels come from the vocabulary");
                (c, vec![format!("classification failed ({e}); used heuristic")])
            }
        }
    }

    fn classify_inner(&self, text: &str, fallback: bool) -> Result<(Classification, Vec<String>)> {
        let mut names = BTreeMap::new();
        let mut conf = BTreeMap::new();
        let mut used = BTreeMap::new();
        let mut warnings = Vec::new();
        let mut llm_cache: Option<Result<(BTreeMap<Dimension, String>, BTreeMap<Dimension, f64>)>> = None;
        for dim in Dimension::ALL {
            let route = self.routing.route(dim);
            let result = match route.backend {
                BackendId::Heuristic => Ok(self.heuristic.classify_dimension(text, dim)),
                BackendId::Trainable => self.trainable(dim, route.variant, text),
                BackendId::Llm => {
                    let cached = llm_cache.get_or_insert_with(|| self.llm(text));
                    match cached {
                        Ok((n, c)) => Ok((n[&dim].clone(), c[&dim])),
                        Err(e) => Err(match e {
                            Error::BackendUnavailable { .. } | Error::GatewayUnavailable(_) | Error::MissingCredential(_) => {
                                Error::BackendUnavailable { dimension: dim, backend: BackendId::Llm.as_str().into() }
                            }
                            other => Error::InvalidResponse(other.to_string()),
                        }),
                    }
                }
            };
            let (label, c, id) = match result {
                Ok((l, c)) => (l, c, route.label()),
                Err(e) if fallback => {
                    warnings.push(format!("{dim}: {} backend failed ({e}); used heuristic", route.label()));
                    let (l, c) = self.heuristic.classify_dimension(text, dim);
                    (l, c, BackendId::Heuristic.as_str().to_string())
                }
                Err(e) => return Err(e),
            };
            names.insert(dim, label);
            conf.insert(dim, c);
            used.insert(dim, id);
        }
        let ids: BTreeSet<&String> = used.values().collect();
        let classifier_id = if ids.len() == 1 {
            ids.into_iter().next().cloned().unwrap_or_default()
        } else {
            used.iter().map(|(d, id)| format!("{d}={id}")).collect::<Vec<_>>().join(",")
        };
        Ok((Classification::from_names(&self.vocab, &names, conf, classifier_id)?, warnings))
    }
}
