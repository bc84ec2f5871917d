//! Pairwise prompt similarity: normalized Levenshtein, word-set Jaccard and
//! character n-gram cosine, combined into a weighted ensemble.
//!
//! All metrics compare whitespace-normalized text, so formatting noise does
//! not lower a score. Every component is symmetric and lies in `[0, 1]`.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{normalize_whitespace, Prompt};

/// Slack applied when comparing a score against a threshold. Weighted sums
/// of exact rationals can land one ulp under the exact value.
pub const SCORE_EPSILON: f64 = 1e-12;

pub const DEFAULT_NGRAM: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityWeights {
    pub w_lev: f64,
    pub w_jac: f64,
    pub w_cos: f64,
}

impl Default for SimilarityWeights {
    fn default() -> Self {
        SimilarityWeights {
            w_lev: 0.40,
            w_jac: 0.30,
            w_cos: 0.30,
        }
    }
}

impl SimilarityWeights {
    pub fn new(w_lev: f64, w_jac: f64, w_cos: f64) -> Result<Self> {
        let weights = SimilarityWeights { w_lev, w_jac, w_cos };
        weights.validate()?;
        Ok(weights)
    }

    pub fn validate(&self) -> Result<()> {
        let parts = [self.w_lev, self.w_jac, self.w_cos];
        if parts.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidParameter(format!("negative or non-finite weight in {parts:?}")));
        }
        let sum: f64 = parts.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidParameter(format!("weights sum to {sum}, expected 1")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityThresholds {
    pub template_trigger: f64,
    pub dedup: f64,
}

impl Default for SimilarityThresholds {
    fn default() -> Self {
        SimilarityThresholds {
            template_trigger: 0.70,
            dedup: 0.999,
        }
    }
}

impl SimilarityThresholds {
    pub fn validate(&self) -> Result<()> {
        check_threshold(self.template_trigger)?;
        check_threshold(self.dedup)
    }
}

pub(crate) fn check_threshold(t: f64) -> Result<()> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("threshold {t} outside [0,1]")))
    }
}

/// `score >= threshold`, tolerant to float rounding at the boundary.
pub fn meets_threshold(score: f64, threshold: f64) -> bool {
    score + SCORE_EPSILON >= threshold
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityScore {
    pub levenshtein: f64,
    pub jaccard: f64,
    pub cosine: f64,
    pub ensemble: f64,
    pub weights: SimilarityWeights,
}

/// Unit-cost edit distance over Unicode scalar values.
pub fn edit_distance(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    if a.is_empty() {
        return b.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut curr = vec![0; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        curr[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let cost = usize::from(ca != cb);
            curr[j + 1] = (prev[j] + cost).min(prev[j + 1] + 1).min(curr[j] + 1);
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    prev[b.len()]
}

fn levenshtein_normalized(a: &str, b: &str) -> f64 {
    let longest = a.chars().count().max(b.chars().count());
    if longest == 0 {
        return 1.0;
    }
    1.0 - edit_distance(a, b) as f64 / longest as f64
}

pub fn levenshtein_sim(a: &str, b: &str) -> f64 {
    levenshtein_normalized(&normalize_whitespace(a), &normalize_whitespace(b))
}

/// Lowercased maximal alphanumeric runs.
pub fn word_set(text: &str) -> BTreeSet<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

pub fn jaccard_sim(a: &str, b: &str) -> f64 {
    let (wa, wb) = (word_set(a), word_set(b));
    if wa.is_empty() && wb.is_empty() {
        return 1.0;
    }
    let inter = wa.intersection(&wb).count();
    let union = wa.len() + wb.len() - inter;
    inter as f64 / union as f64
}

fn ngram_counts(text: &str, n: usize) -> BTreeMap<&str, u64> {
    let bounds: Vec<usize> = text
        .char_indices()
        .map(|(i, _)| i)
        .chain(std::iter::once(text.len()))
        .collect();
    let mut counts = BTreeMap::new();
    if bounds.len() > n {
        for w in bounds.windows(n + 1) {
            *counts.entry(&text[w[0]..w[n]]).or_insert(0) += 1;
        }
    }
    counts
}

fn cosine_normalized(a: &str, b: &str, n: usize) -> f64 {
    if a == b {
        return 1.0;
    }
    let (ga, gb) = (ngram_counts(a, n), ngram_counts(b, n));
    match (ga.is_empty(), gb.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    // Sum over the intersection in key order so the result does not depend
    // on argument order.
    let dot: f64 = ga
        .iter()
        .filter_map(|(k, &x)| gb.get(k).map(|&y| (x * y) as f64))
        .sum();
    let na: f64 = ga.values().map(|&x| (x * x) as f64).sum::<f64>().sqrt();
    let nb: f64 = gb.values().map(|&x| (x * x) as f64).sum::<f64>().sqrt();
    (dot / (na * nb)).clamp(0.0, 1.0)
}

/// Character n-gram profile of one normalized text, for scanning many
/// pairs without rebuilding counts. `cosine` agrees exactly with
/// [`cosine_ngram_sim`].
#[derive(Debug, Clone, PartialEq)]
pub struct NgramProfile {
    text: String,
    counts: BTreeMap<String, u64>,
    norm: f64,
}

impl NgramProfile {
    pub fn new(text: &str, n: usize) -> Result<Self> {
        if n < 1 {
            return Err(Error::InvalidParameter("n-gram size must be at least 1".into()));
        }
        let text = normalize_whitespace(text);
        let counts: BTreeMap<String, u64> = ngram_counts(&text, n)
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
        let norm = counts.values().map(|&x| (x * x) as f64).sum::<f64>().sqrt();
        Ok(NgramProfile { text, counts, norm })
    }

    pub fn cosine(&self, other: &NgramProfile) -> f64 {
        if self.text == other.text {
            return 1.0;
        }
        match (self.counts.is_empty(), other.counts.is_empty()) {
            (true, true) => return 1.0,
            (true, false) | (false, true) => return 0.0,
            _ => {}
        }
        let dot: f64 = self
            .counts
            .iter()
            .filter_map(|(k, &x)| other.counts.get(k).map(|&y| (x * y) as f64))
            .sum();
        (dot / (self.norm * other.norm)).clamp(0.0, 1.0)
    }
}

pub fn cosine_ngram_sim(a: &str, b: &str, n: usize) -> Result<f64> {
    if n < 1 {
        return Err(Error::InvalidParameter("n-gram size must be at least 1".into()));
    }
    Ok(cosine_normalized(&normalize_whitespace(a), &normalize_whitespace(b), n))
}

/// Ensemble similarity with the default trigram size.
pub fn ensemble_sim(a: &str, b: &str, weights: SimilarityWeights) -> SimilarityScore {
    ensemble_sim_with(a, b, weights, DEFAULT_NGRAM)
}

pub fn ensemble_sim_with(a: &str, b: &str, weights: SimilarityWeights, n: usize) -> SimilarityScore {
    let (a, b) = (normalize_whitespace(a), normalize_whitespace(b));
    let levenshtein = levenshtein_normalized(&a, &b);
    let jaccard = jaccard_sim(&a, &b);
    let cosine = cosine_normalized(&a, &b, n.max(1));
    let ensemble = weights.w_lev * levenshtein + weights.w_jac * jaccard + weights.w_cos * cosine;
    SimilarityScore {
        levenshtein,
        jaccard,
        cosine,
        ensemble: ensemble.clamp(0.0, 1.0),
        weights,
    }
}

/// Similarity settings carried by a library.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityConfig {
    pub weights: SimilarityWeights,
    pub ngram: usize,
    pub thresholds: SimilarityThresholds,
}

impl Default for SimilarityConfig {
    fn default() -> Self {
        SimilarityConfig {
            weights: SimilarityWeights::default(),
            ngram: DEFAULT_NGRAM,
            thresholds: SimilarityThresholds::default(),
        }
    }
}

impl SimilarityConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.thresholds.validate()?;
        if self.ngram < 1 {
            return Err(Error::InvalidParameter("n-gram size must be at least 1".into()));
        }
        Ok(())
    }

    pub fn score(&self, a: &str, b: &str) -> SimilarityScore {
        ensemble_sim_with(a, b, self.weights, self.ngram)
    }
}

/// Library prompts whose ensemble score against `prompt` reaches `threshold`,
/// best first; ties go to the smaller id. The query itself is skipped by id.
pub fn find_similar<'a, I>(
    prompt: &Prompt,
    library: I,
    threshold: f64,
    config: &SimilarityConfig,
) -> Result<Vec<(&'a Prompt, SimilarityScore)>>
where
    I: IntoIterator<Item = &'a Prompt>,
{
    check_threshold(threshold)?;
    let candidates: Vec<&Prompt> = library.into_iter().filter(|p| p.id != prompt.id).collect();
    let mut hits: Vec<(&Prompt, SimilarityScore)> = candidates
        .par_iter()
        .map(|p| (*p, config.score(&prompt.text, &p.text)))
        .filter(|(_, s)| meets_threshold(s.ensemble, threshold))
        .collect();
    hits.sort_by(|(pa, sa), (pb, sb)| {
        sb.ensemble
            .total_cmp(&sa.ensemble)
            .then_with(|| pa.id.cmp(&pb.id))
    });
    Ok(hits)
}
