//! Acceptance gate. Runs every primary criterion at its stated tolerance and
//! prints one PASS/FAIL line per criterion; exits non-zero if any fails.
//!
//! Reference values come from small independent implementations in this
//! file (`oracle`), never from the library under test.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use chrono::{DateTime, TimeZone, Utc};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pwm_core::agreement::{aggregate_wins, band, fleiss_kappa, leave_one_out, AgreementBand, AnnotationMatrix};
use pwm_core::classifier::{
    evaluate_classifier, majority_baseline_f1, split_indices, train_classifier, BackendId, ClassifierRouting,
    ModelVariant, TrainConfig,
};
use pwm_core::engine::{Engine, EngineOptions};
use pwm_core::library::{dedup_plan_ngram, offline_summary, Library, LibraryConfig, TLDR_MAX_WORDS, TLDR_MIN_WORDS};
use pwm_core::model::{normalize_whitespace, Classification, Dimension, Origin, Prompt, Vocabulary};
use pwm_core::optimizer::{detect_sensitive, SuggestionKind, REDACTED};
use pwm_core::similarity::{ensemble_sim, SimilarityWeights};
use pwm_core::template::{extract_template_aligned, render_body, AlignOptions, UnknownPolicy};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn main() {
    let criteria: Vec<(&str, fn() -> Outcome)> = vec![
        ("ensemble similarity algebra", ensemble_algebra),
        ("template trigger at 0.70", template_trigger),
        ("fleiss kappa and bands", kappa_criterion),
        ("leave-one-out rater contribution", leave_one_out_criterion),
        ("template round-trip", template_round_trip),
        ("sensitive-data redaction", redaction),
        ("deduplication", dedup_criterion),
        ("trainable classifier", classifier_criterion),
        ("library summary", summary_criterion),
        ("end-to-end CLI", end_to_end),
    ];
    let mut failed = 0;
    for (name, run) in &criteria {
        let started = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into());
            Err(format!("panic: {msg}"))
        });
        let took = started.elapsed();
        match outcome {
            Ok(detail) => println!("PASS  {name}: {detail} [{took:.2?}]"),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name}: {why} [{took:.2?}]");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

mod oracle {
    use super::*;

    pub fn normalize(s: &str) -> String {
        let mut out = String::new();
        for w in s.split_whitespace() {
            if !out.is_empty() {
                out.push(' ');
            }
            out.push_str(w);
        }
        out
    }

    /// Full-matrix Wagner-Fischer over chars.
    pub fn levenshtein(a: &str, b: &str) -> f64 {
        let (a, b) = (normalize(a), normalize(b));
        let a: Vec<char> = a.chars().collect();
        let b: Vec<char> = b.chars().collect();
        let longest = a.len().max(b.len());
        if longest == 0 {
            return 1.0;
        }
        let mut d = vec![vec![0usize; b.len() + 1]; a.len() + 1];
        for (i, row) in d.iter_mut().enumerate() {
            row[0] = i;
        }
        for j in 0..=b.len() {
            d[0][j] = j;
        }
        for i in 1..=a.len() {
            for j in 1..=b.len() {
                let sub = d[i - 1][j - 1] + usize::from(a[i - 1] != b[j - 1]);
                d[i][j] = sub.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
            }
        }
        1.0 - d[a.len()][b.len()] as f64 / longest as f64
    }

    pub fn words(s: &str) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        let mut cur = String::new();
        for c in s.chars().chain(std::iter::once(' ')) {
            if c.is_alphanumeric() {
                cur.extend(c.to_lowercase());
            } else if !cur.is_empty() {
                out.insert(std::mem::take(&mut cur));
            }
        }
        out
    }

    pub fn jaccard(a: &str, b: &str) -> f64 {
        let (wa, wb) = (words(a), words(b));
        if wa.is_empty() && wb.is_empty() {
            return 1.0;
        }
        let inter = wa.iter().filter(|w| wb.contains(*w)).count();
        inter as f64 / (wa.len() + wb.len() - inter) as f64
    }

    fn trigrams(s: &str) -> HashMap<Vec<char>, f64> {
        let chars: Vec<char> = s.chars().collect();
        let mut out = HashMap::new();
        if chars.len() >= 3 {
            for w in chars.windows(3) {
                *out.entry(w.to_vec()).or_insert(0.0) += 1.0;
            }
        }
        out
    }

    pub fn cosine(a: &str, b: &str) -> f64 {
        let (a, b) = (normalize(a), normalize(b));
        if a == b {
            return 1.0;
        }
        let (ga, gb) = (trigrams(&a), trigrams(&b));
        if ga.is_empty() || gb.is_empty() {
            return if ga.is_empty() && gb.is_empty() { 1.0 } else { 0.0 };
        }
        let dot: f64 = ga.iter().map(|(k, x)| x * gb.get(k).unwrap_or(&0.0)).sum();
        let na = ga.values().map(|x| x * x).sum::<f64>().sqrt();
        let nb = gb.values().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    }

    pub fn ensemble(a: &str, b: &str) -> f64 {
        0.4 * levenshtein(a, b) + 0.3 * jaccard(a, b) + 0.3 * cosine(a, b)
    }

    /// Kappa from ordered rater-pair agreement counts.
    pub fn fleiss(labels: &[Vec<usize>], categories: usize) -> Option<f64> {
        let n_items = labels.len() as f64;
        let raters = labels[0].len();
        let mut p_bar = 0.0;
        let mut totals = vec![0.0; categories];
        for row in labels {
            let mut agree = 0usize;
            for r in 0..raters {
                totals[row[r]] += 1.0;
                for s in 0..raters {
                    if r != s && row[r] == row[s] {
                        agree += 1;
                    }
                }
            }
            p_bar += agree as f64 / (raters * (raters - 1)) as f64;
        }
        p_bar /= n_items;
        let all = n_items * raters as f64;
        let p_e: f64 = totals.iter().map(|t| (t / all) * (t / all)).sum();
        if (1.0 - p_e).abs() < 1e-15 {
            return None;
        }
        Some((p_bar - p_e) / (1.0 - p_e))
    }

    pub fn luhn_check_digit(body: &[u32]) -> u32 {
        // Double every second digit counting from the right of the full
        // number, i.e. starting with the last digit of `body`.
        let mut sum = 0;
        for (i, &d) in body.iter().rev().enumerate() {
            sum += if i % 2 == 0 {
                let x = d * 2;
                x / 10 + x % 10
            } else {
                d
            };
        }
        (10 - sum % 10) % 10
    }

    pub fn luhn_ok(number: &str) -> bool {
        let ds: Vec<u32> = number.chars().filter_map(|c| c.to_digit(10)).collect();
        let (last, body) = ds.split_last().expect("digits");
        luhn_check_digit(body) == *last
    }

    /// Support-weighted F1 from an explicit confusion matrix.
    pub fn weighted_f1(truth: &[String], predicted: &[String]) -> f64 {
        let classes: BTreeSet<&String> = truth.iter().chain(predicted).collect();
        let index: BTreeMap<&String, usize> = classes.iter().enumerate().map(|(i, c)| (*c, i)).collect();
        let k = classes.len();
        let mut m = vec![vec![0usize; k]; k];
        for (t, p) in truth.iter().zip(predicted) {
            m[index[t]][index[p]] += 1;
        }
        let n = truth.len() as f64;
        let mut total = 0.0;
        for c in 0..k {
            let support: usize = m[c].iter().sum();
            if support == 0 {
                continue;
            }
            let predicted_c: usize = (0..k).map(|r| m[r][c]).sum();
            let tp = m[c][c] as f64;
            let precision = if predicted_c == 0 { 0.0 } else { tp / predicted_c as f64 };
            let recall = tp / support as f64;
            let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
            total += support as f64 / n * f1;
        }
        total
    }
}

// ---------------------------------------------------------------------------
// shared fixtures

const WORDS: &[&str] = &[
    "write", "a", "function", "that", "parses", "the", "file", "and", "returns", "list", "of", "records", "explain",
    "how", "rust", "python", "query", "select", "users", "orders", "test", "review", "this", "code", "for", "bugs",
    "data", "model", "plan", "sprint", "api", "docs", "cache", "server", "client", "async", "error", "handling",
];

fn t0() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2025, 1, 1, 0, 0, 0).unwrap()
}

fn heuristic_config() -> LibraryConfig {
    let mut config = LibraryConfig::default();
    config.classifier.routing = ClassifierRouting::uniform(BackendId::Heuristic);
    config
}

fn fresh_engine(seed: u64) -> Engine {
    let options = EngineOptions::default().with_seed(seed).with_now(t0());
    Engine::new(Library::new(heuristic_config()), None, options).expect("engine")
}

fn random_sentence(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> String {
    let n = rng.random_range(lo..=hi);
    (0..n).map(|_| *WORDS.choose(rng).unwrap()).collect::<Vec<_>>().join(" ")
}

fn classification(vocab: &Vocabulary, names: [&str; 4]) -> Classification {
    let dims = [Dimension::Intent, Dimension::Role, Dimension::Sdlc, Dimension::Type];
    let map: BTreeMap<Dimension, String> = dims.iter().zip(names).map(|(d, n)| (*d, n.to_string())).collect();
    Classification::from_names(vocab, &map, BTreeMap::new(), "manual").expect("valid labels")
}

// ---------------------------------------------------------------------------
// 1. similarity

fn random_pair(rng: &mut ChaCha8Rng) -> (String, String) {
    const ALPHABET: &[char] = &['a', 'b', 'c', 'd', 'e', 'X', 'Y', ' ', ' ', '\t', '\n', '.', ',', '!', '0', '7', 'é', 'ß'];
    match rng.random_range(0..4) {
        0 => {
            let gen = |rng: &mut ChaCha8Rng| {
                let n = rng.random_range(0..30);
                (0..n).map(|_| *ALPHABET.choose(rng).unwrap()).collect::<String>()
            };
            (gen(rng), gen(rng))
        }
        1 => (random_sentence(rng, 0, 10), random_sentence(rng, 0, 10)),
        _ => {
            // A near neighbour: a few word edits, sometimes re-spaced.
            let a = random_sentence(rng, 1, 12);
            let mut w: Vec<String> = a.split(' ').map(str::to_string).collect();
            for _ in 0..rng.random_range(0..3) {
                let i = rng.random_range(0..w.len());
                match rng.random_range(0..3) {
                    0 => w[i] = WORDS.choose(rng).unwrap().to_string(),
                    1 => w.insert(i, WORDS.choose(rng).unwrap().to_uppercase()),
                    _ if w.len() > 1 => {
                        w.remove(i);
                    }
                    _ => {}
                }
            }
            let sep = if rng.random_bool(0.3) { "  " } else { " " };
            (a, w.join(sep))
        }
    }
}

fn ensemble_algebra() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let w = SimilarityWeights::default();
    let mut worst = 0.0f64;
    for k in 0..1000 {
        let (a, b) = random_pair(&mut rng);
        let s = ensemble_sim(&a, &b, w);
        let (l, j, c) = (oracle::levenshtein(&a, &b), oracle::jaccard(&a, &b), oracle::cosine(&a, &b));
        let e = oracle::ensemble(&a, &b);
        for (name, got, want) in [("L", s.levenshtein, l), ("J", s.jaccard, j), ("C", s.cosine, c), ("ensemble", s.ensemble, e)] {
            let err = (got - want).abs();
            worst = worst.max(err);
            ensure!(err <= 1e-9, "pair {k} {a:?} / {b:?}: {name} = {got}, oracle {want}");
        }
        let back = ensemble_sim(&b, &a, w);
        ensure!(back.ensemble == s.ensemble, "pair {k}: not symmetric ({} vs {})", s.ensemble, back.ensemble);
        let same = ensemble_sim(&a, &a, w);
        ensure!((same.ensemble - 1.0).abs() <= 1e-12, "pair {k}: sim(a, a) = {}", same.ensemble);
    }
    let took = started.elapsed();
    ensure!(took < Duration::from_secs(10), "1000 pairs took {took:?}");
    Ok(format!("1000 pairs, max |error| {worst:.1e}, symmetric, identity = 1"))
}

// ---------------------------------------------------------------------------
// 2. template trigger

const TRIGGER_CORPUS: &[&str] = &[
    "Write a SQL query to select all users",
    "Write a SQL query to select all orders",
    "Explain the borrow checker in Rust with a short example",
    "Explain the type checker in Rust with a short example",
    "Summarize this meeting transcript in five bullets",
    "Draft a project plan for the data migration",
    "select the list rust",
    "select the data rust",
    "Generate unit tests for the payment service",
    "Generate unit tests for the billing service",
    "Review this pull request for security issues",
    "Review this pull request for performance problems",
    "What is the difference between TCP and UDP?",
    "Convert this Python script to idiomatic Go",
    "Convert this Python script to idiomatic Rust",
    "Write a haiku about continuous integration",
    "Document the public API of the parser crate",
    "Refactor the logging module to remove global state",
    "Write a SQL query to count all users",
    "Plan the sprint backlog for the mobile team",
    "Explain how the garbage collector works in Java",
    "Explain how closures work in JavaScript",
    "Document the public API of the lexer module",
];

fn template_trigger() -> Outcome {
    let n = TRIGGER_CORPUS.len();
    let mut score = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            score[i][j] = oracle::ensemble(TRIGGER_CORPUS[i], TRIGGER_CORPUS[j]);
        }
    }
    // The boundary pair scores exactly 0.4·4/5 + 0.3·3/5 + 0.3·2/3 = 0.70.
    let (bi, bj) = (6, 7);
    ensure!((score[bi][bj] - 0.70).abs() < 1e-12, "boundary pair oracle score {}", score[bi][bj]);
    for i in 0..n {
        for j in 0..i {
            let d = (score[i][j] - 0.70).abs();
            ensure!((i, j) == (bj, bi) || d > 1e-6, "fixture pair {j},{i} too close to the threshold ({})", score[i][j]);
        }
    }

    let mut engine = fresh_engine(2);
    let (mut above, mut below) = (0, 0);
    for (i, text) in TRIGGER_CORPUS.iter().enumerate() {
        let best = (0..i).map(|j| score[i][j]).fold(f64::NEG_INFINITY, f64::max);
        let expected = best >= 0.70 - 1e-9;
        let added = engine.add_prompt(text).map_err(|e| e.to_string())?;
        let got = added.suggestions.iter().any(|s| s.kind == SuggestionKind::Template);
        ensure!(got == expected, "{text:?}: TEMPLATE suggested = {got}, best oracle score {best:.6}");
        if expected {
            above += 1;
        } else {
            below += 1;
        }
    }
    ensure!(above >= 5 && below >= 5, "fixture does not exercise both sides ({above} above, {below} below)");
    Ok(format!("{above} prompts at or above 0.70 suggested, {below} below not; boundary pair (0.70) triggers"))
}

// ---------------------------------------------------------------------------
// 3. kappa

fn matrix(labels: &[Vec<usize>], categories: usize) -> AnnotationMatrix {
    let items = (0..labels.len()).map(|i| format!("i{i}")).collect();
    let raters = (0..labels[0].len()).map(|r| format!("r{r}")).collect();
    let cats: Vec<String> = (0..categories).map(|c| format!("c{c}")).collect();
    let rows = labels.iter().map(|row| row.iter().map(|&c| cats[c].clone()).collect()).collect();
    AnnotationMatrix::new(items, raters, cats, rows).expect("well-formed matrix")
}

fn kappa_criterion() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut checked = 0;
    let mut worst = 0.0f64;
    while checked < 20 {
        let items = rng.random_range(2..=20);
        let raters = rng.random_range(2..=5);
        let cats = rng.random_range(2..=4);
        let labels: Vec<Vec<usize>> =
            (0..items).map(|_| (0..raters).map(|_| rng.random_range(0..cats)).collect()).collect();
        let Some(want) = oracle::fleiss(&labels, cats) else { continue };
        let got = fleiss_kappa(&matrix(&labels, cats)).map_err(|e| e.to_string())?;
        worst = worst.max((got - want).abs());
        ensure!((got - want).abs() <= 1e-9, "matrix {checked}: kappa {got}, oracle {want}");

        // Reorder items, raters and category labels.
        let mut item_order: Vec<usize> = (0..items).collect();
        item_order.shuffle(&mut rng);
        let mut rater_order: Vec<usize> = (0..raters).collect();
        rater_order.shuffle(&mut rng);
        let mut relabel: Vec<usize> = (0..cats).collect();
        relabel.shuffle(&mut rng);
        let permuted: Vec<Vec<usize>> = item_order
            .iter()
            .map(|&i| rater_order.iter().map(|&r| relabel[labels[i][r]]).collect())
            .collect();
        let again = fleiss_kappa(&matrix(&permuted, cats)).map_err(|e| e.to_string())?;
        ensure!((again - got).abs() <= 1e-12, "matrix {checked}: permuted kappa {again} vs {got}");
        checked += 1;
    }
    let degenerate = matrix(&vec![vec![1, 1, 1]; 4], 3);
    ensure!(fleiss_kappa(&degenerate).is_err(), "single-category matrix did not error");
    for (k, want) in [
        (0.4315, AgreementBand::Moderate),
        (0.6898, AgreementBand::Substantial),
        (0.7219, AgreementBand::Substantial),
    ] {
        ensure!(band(k) == want, "band({k}) = {:?}, expected {want:?}", band(k));
    }
    let took = started.elapsed();
    ensure!(took < Duration::from_secs(5), "took {took:?}");
    Ok(format!("20 matrices within {worst:.1e}, permutation invariant, degenerate rejected, bands ok"))
}

// ---------------------------------------------------------------------------
// 4. leave-one-out

/// Published per-category deltas (rows OLD/NEW × dimension).
const TABLE_DELTAS: &[(&str, [f64; 4])] = &[
    ("OLD,SDLC", [-0.0316, -0.0061, 0.0359, -0.0378]),
    ("OLD,ROLE", [-0.0316, 0.0255, 0.0240, -0.0145]),
    ("OLD,INTENT", [-0.0031, -0.0048, 0.0240, -0.0145]),
    ("OLD,TYPE", [0.0325, -0.0203, 0.0449, -0.0519]),
    ("NEW,SDLC", [-0.0316, -0.0061, 0.0360, -0.0378]),
    ("NEW,ROLE", [-0.0316, 0.0255, 0.0240, -0.0145]),
    ("NEW,INTENT", [-0.0031, -0.0048, 0.0240, -0.0145]),
    ("NEW,TYPE", [0.0325, -0.0203, 0.0449, -0.0519]),
];
const TABLE_RATERS: [&str; 4] = ["Haiku", "DS", "Mistral", "GPT-4o"];

fn leave_one_out_criterion() -> Outcome {
    let per_category: BTreeMap<String, BTreeMap<String, Option<f64>>> = TABLE_DELTAS
        .iter()
        .map(|(cat, ds)| {
            (cat.to_string(), TABLE_RATERS.iter().zip(ds).map(|(r, d)| (r.to_string(), Some(*d))).collect())
        })
        .collect();
    let wins = aggregate_wins(&per_category).map_err(|e| e.to_string())?;
    ensure!(wins.winner == "Mistral", "winner {}", wins.winner);
    for (rater, want) in [("Mistral", 6), ("DS", 2), ("Haiku", 0), ("GPT-4o", 0)] {
        ensure!(wins.wins[rater] == want, "{rater} has {} wins, expected {want}", wins.wins[rater]);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut negative = 0;
    for _ in 0..100 {
        let (items, cats) = (30, 4);
        let labels: Vec<Vec<usize>> = (0..items)
            .map(|_| {
                let truth = rng.random_range(0..cats);
                let mut row: Vec<usize> = (0..3)
                    .map(|_| if rng.random_bool(0.85) { truth } else { rng.random_range(0..cats) })
                    .collect();
                row.push(rng.random_range(0..cats));
                row
            })
            .collect();
        let report = leave_one_out(&matrix(&labels, cats)).map_err(|e| e.to_string())?;
        if report.delta["r3"].is_some_and(|d| d < 0.0) {
            negative += 1;
        }
    }
    ensure!(negative >= 95, "noise rater negative in only {negative}/100 trials");
    Ok(format!("Mistral wins 6 of 8 (DS 2); noise rater negative in {negative}/100"))
}

// ---------------------------------------------------------------------------
// 5. template round-trip

const ANCHORS: &[&str] = &[
    "write", "a", "function", "that", "parses", "the", "file", "and", "returns", "list", "of", "explain", "how",
    "query", "test", "review", "for", "bugs", "please", "in", "with", "short", "example", "summary", "report.",
    "(optional)", "now,", "then:", "table", "\"quoted\"",
];
const FILLERS: &[&str] = &[
    "Rust", "Python", "Go", "JSON", "CSV", "YAML", "orders", "users", "records", "dictionaries", "the cache",
    "a map", "async code", "error handling", "tables.", "42", "v2", "data, quickly", "two", "three words here",
];

fn template_round_trip() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut with_vars = 0;
    for family in 0..50 {
        let anchors = rng.random_range(4..=10);
        let slots = rng.random_range(1..=3);
        let mut skeleton: Vec<Option<&str>> = (0..anchors).map(|_| Some(*ANCHORS.choose(&mut rng).unwrap())).collect();
        for _ in 0..slots {
            let at = rng.random_range(0..=skeleton.len());
            skeleton.insert(at, None);
        }
        let members = rng.random_range(3..=5);
        let texts: Vec<String> = (0..members)
            .map(|_| {
                skeleton
                    .iter()
                    .map(|s| s.unwrap_or_else(|| FILLERS.choose(&mut rng).unwrap()))
                    .collect::<Vec<_>>()
                    .join(" ")
            })
            .collect();
        let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
        let draft = extract_template_aligned(&refs, AlignOptions::default())
            .map_err(|e| format!("family {family}: {e}"))?;
        ensure!(draft.bindings.len() == members, "family {family}: {} bindings for {members} members", draft.bindings.len());
        for (text, binding) in texts.iter().zip(&draft.bindings) {
            let rendered = render_body(&draft.body, binding, UnknownPolicy::Strict)
                .map_err(|e| format!("family {family}: {e}"))?;
            ensure!(
                rendered == normalize_whitespace(text),
                "family {family}: body {:?} renders {rendered:?}, source {text:?}",
                draft.body
            );
        }
        let distinct: BTreeSet<&String> = texts.iter().collect();
        if distinct.len() > 1 {
            ensure!(!draft.variables.is_empty(), "family {family}: differing members but no variables");
            with_vars += 1;
        }
    }
    let took = started.elapsed();
    ensure!(took < Duration::from_secs(10), "took {took:?}");
    Ok(format!("50 families render back exactly ({with_vars} with variables)"))
}

// ---------------------------------------------------------------------------
// 6. redaction

fn alnum(rng: &mut ChaCha8Rng, n: usize, charset: &[u8]) -> String {
    (0..n).map(|_| *charset.choose(rng).unwrap() as char).collect()
}

const MIXED: &[u8] = b"ABCDEFGHJKLMNPQRSTUVWXYZabcdefghijkmnopqrstuvwxyz0123456789";
const UPPER_DIGITS: &[u8] = b"ABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789";

fn seeded_entity(rng: &mut ChaCha8Rng, kind: usize) -> String {
    match kind {
        0 => {
            let first = ["alice", "bob", "carol", "dave", "erin"].choose(rng).unwrap();
            let domain = ["example", "corp-mail", "acme"].choose(rng).unwrap();
            let tld = ["com", "org", "io", "co.uk"].choose(rng).unwrap();
            format!("{first}.{}@{domain}.{tld}", rng.random_range(1..99))
        }
        1 => match rng.random_range(0..4) {
            0 => format!("sk-live-{}", alnum(rng, 24, MIXED)),
            1 => format!("ghp_{}", alnum(rng, 36, MIXED)),
            2 => format!("AKIA{}", alnum(rng, 16, UPPER_DIGITS)),
            _ => format!("glpat-{}", alnum(rng, 20, MIXED)),
        },
        2 => {
            let mut body: Vec<u32> = vec![4];
            body.extend((0..14).map(|_| rng.random_range(0..10)));
            body.push(oracle::luhn_check_digit(&body));
            let digits: String = body.iter().map(|d| char::from_digit(*d, 10).unwrap()).collect();
            assert!(oracle::luhn_ok(&digits));
            if rng.random_bool(0.5) {
                digits.as_bytes().chunks(4).map(|c| std::str::from_utf8(c).unwrap()).collect::<Vec<_>>().join(" ")
            } else {
                digits
            }
        }
        3 => {
            let (a, b, c) = (rng.random_range(200..990), rng.random_range(200..990), rng.random_range(1000..9999));
            match rng.random_range(0..3) {
                0 => format!("+1 {a}-{b}-{c}"),
                1 => format!("({a}) {b}-{c}"),
                _ => format!("{a}.{b}.{c}"),
            }
        }
        4 => format!(
            "{}.{}.{}.{}",
            rng.random_range(1..=254),
            rng.random_range(0..=255),
            rng.random_range(0..=255),
            rng.random_range(1..=254)
        ),
        _ => {
            let host = ["internal", "wiki", "build", "status"].choose(rng).unwrap();
            if rng.random_bool(0.5) {
                format!("https://{host}.example.com/path/{}?id={}", rng.random_range(1..50), rng.random_range(1..999))
            } else {
                format!("www.{host}-docs.org/guide")
            }
        }
    }
}

const FRAMES: &[&str] = &[
    "Please send the weekly report to {} before Friday.",
    "The staging credentials use {} for now.",
    "Charge the test order to {} and confirm the receipt.",
    "Call me at {} if the deploy fails.",
    "The database lives at {} behind the VPN.",
    "See {} for the full runbook.",
    "Summarize the incident and mention {} in the timeline.",
];

const CLEAN_CORPUS: &[&str] = &[
    "Write a Python function that parses a CSV file and returns a list of dictionaries.",
    "Explain the difference between TCP and UDP in two paragraphs.",
    "Review this Rust code for off-by-one errors in the loop bounds.",
    "Generate unit tests for the date parser, including 2024-02-29 and 1999-12-31.",
    "Upgrade the project from Python 3.11 to Python 3.12 and list breaking changes.",
    "Our service listens on port 8080; suggest a health check configuration.",
    "Summarize this meeting transcript in five bullet points.",
    "Sort 1,000,000 rows in O(n log n) time and explain the memory trade-offs.",
    "Write a SQL query that returns the top 10 customers by revenue in 2023.",
    "Draft a project plan for migrating the billing service to Kubernetes.",
    "Refactor src/main.rs so that configuration loading happens in one place.",
    "What does HTTP status 404 mean compared to 410?",
    "Create a Dockerfile for a Node 20 application with a multi-stage build.",
    "Explain how the borrow checker handles mutable references in closures.",
    "Document the public API of the tokenizer module with examples.",
    "Write a bash script that retries a command 3 times with a 5 second delay.",
    "Compare random forests and gradient boosting for tabular data.",
    "Suggest names for a function that validates user input.",
    "Convert this JavaScript promise chain to async/await.",
    "Estimate the story points for the login redesign ticket.",
    "Write a regular expression that matches ISO 8601 dates.",
    "Explain the CAP theorem with a short example.",
    "List best practices for structuring a React project with 50 components.",
    "Translate this error message into plain English for end users.",
    "Write a haiku about continuous integration.",
    "Generate a changelog entry for version 2.4.1 of the library.",
    "Profile this function and suggest ways to reduce allocations by 30%.",
    "Design a database schema for a library with books, members and loans.",
    "Write pytest fixtures for a temporary directory and a fake clock.",
    "Explain what the x = y + 1 statement does in a single sentence.",
];

fn redaction() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut engine = fresh_engine(6);
    let mut redactions = 0;
    let mut kinds_seen = BTreeSet::new();
    for i in 0..30 {
        let count = rng.random_range(1..=3);
        let mut entities = Vec::new();
        let mut text = String::from("Context:");
        for _ in 0..count {
            let kind = (i + entities.len()) % 6;
            kinds_seen.insert(kind);
            let entity = seeded_entity(&mut rng, kind);
            text.push(' ');
            text.push_str(&FRAMES.choose(&mut rng).unwrap().replace("{}", &entity));
            entities.push(entity);
        }
        let id = engine.add_prompt(&text).map_err(|e| e.to_string())?.prompt.id;
        let accepted = engine
            .accept_all(&id, Some(&[SuggestionKind::Anonymization]))
            .map_err(|e| format!("text {i}: {e}"))?;
        for r in &accepted {
            let s = &r.suggestion;
            ensure!(s.replacement == REDACTED, "text {i}: replacement {:?}", s.replacement);
            ensure!((0.95..=0.99).contains(&s.confidence), "text {i}: confidence {}", s.confidence);
        }
        redactions += accepted.len();
        let final_text = engine.get_prompt(&id).map_err(|e| e.to_string())?.prompt.text;
        let again = detect_sensitive(&final_text);
        ensure!(again.is_empty(), "text {i}: {} re-detections in {final_text:?}", again.len());
        for e in &entities {
            ensure!(!final_text.contains(e.as_str()), "text {i}: {e:?} survived in {final_text:?}");
        }
    }
    ensure!(kinds_seen.len() == 6, "not every entity kind was seeded");
    for (i, text) in CLEAN_CORPUS.iter().enumerate() {
        let added = engine.add_prompt(text).map_err(|e| e.to_string())?;
        let flagged: Vec<_> =
            added.suggestions.iter().filter(|s| s.kind == SuggestionKind::Anonymization).collect();
        ensure!(flagged.is_empty(), "clean text {i} {text:?} flagged: {:?}", flagged[0].span);
    }
    Ok(format!("30 seeded texts fully redacted ({redactions} edits), 30 clean texts untouched"))
}

// ---------------------------------------------------------------------------
// 7. dedup

fn prompt_at(id: &str, text: &str, minute: i64) -> Prompt {
    Prompt::new(id.to_string(), text.to_string(), Origin::Manual, t0() + chrono::Duration::minutes(minute))
}

fn library_of(prompts: Vec<Prompt>) -> Library {
    let mut lib = Library::new(heuristic_config());
    for p in prompts {
        lib.prompts.insert(p.id.clone(), p);
    }
    lib
}

fn dedup_criterion() -> Outcome {
    let fixture = library_of(vec![
        prompt_at("p1", "Summarize this pull request", 0),
        prompt_at("p2", "Summarize this pull request", 1),
        prompt_at("p3", "Write tests for the parser", 2),
    ]);
    let mut engine = Engine::new(fixture, None, EngineOptions::default().with_seed(7).with_now(t0())).unwrap();
    let report = engine.dedup(None).map_err(|e| e.to_string())?;
    ensure!(report.removed_ids == ["p2"], "identical pair removed {:?}", report.removed_ids);

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut removed_total = 0;
    for round in 0..10 {
        let mut prompts = Vec::new();
        let n = rng.random_range(5..25);
        for i in 0..n {
            let text = match (i, rng.random_range(0..4)) {
                (0, _) | (_, 0) | (_, 1) => random_sentence(&mut rng, 4, 12),
                (_, 2) => {
                    // exact or re-spaced copy of an earlier prompt
                    let src: &Prompt = prompts.choose(&mut rng).unwrap();
                    src.text.replace(' ', if rng.random_bool(0.5) { " " } else { "   " })
                }
                _ => {
                    // one-word variant: similar but below the dedup threshold
                    let src: &Prompt = prompts.choose(&mut rng).unwrap();
                    format!("{} {}", src.text, WORDS.choose(&mut rng).unwrap())
                }
            };
            prompts.push(prompt_at(&format!("q{i:02}"), &text, rng.random_range(0..5)));
        }
        let texts: BTreeMap<String, String> = prompts.iter().map(|p| (p.id.clone(), p.text.clone())).collect();
        let lib = library_of(prompts);
        let mut engine = Engine::new(lib, None, EngineOptions::default().with_seed(round).with_now(t0())).unwrap();
        let first = engine.dedup(None).map_err(|e| e.to_string())?;
        let after_first = engine.library().prompts.clone();
        let second = engine.dedup(None).map_err(|e| e.to_string())?;
        ensure!(second.removed_ids.is_empty(), "round {round}: second pass removed {:?}", second.removed_ids);
        ensure!(engine.library().prompts == after_first, "round {round}: second pass changed the library");

        // Every removed prompt has a partner at or above 0.999 in its
        // cluster; every prompt with no such partner survives.
        for id in &texts.keys().cloned().collect::<Vec<_>>() {
            let partner = texts
                .iter()
                .filter(|(other, _)| *other != id)
                .map(|(_, t)| oracle::cosine(&texts[id], t))
                .fold(0.0f64, f64::max);
            if first.removed_ids.contains(id) {
                ensure!(partner >= 0.999 - 1e-12, "round {round}: {id} removed with best cosine {partner}");
            }
            if partner < 0.999 - 1e-9 {
                ensure!(after_first.contains_key(id), "round {round}: {id} (best cosine {partner}) was removed");
            }
        }
        // The plan is a function of the prompts alone.
        let survivors: Vec<&Prompt> = after_first.values().collect();
        let replan = dedup_plan_ngram(&survivors, 0.999, 3).map_err(|e| e.to_string())?;
        ensure!(replan.removed_ids.is_empty(), "round {round}: survivors still cluster");
        removed_total += first.removed_ids.len();
    }
    ensure!(removed_total > 0, "randomized libraries never contained duplicates");
    Ok(format!("identical pair → 1 removed; 10 random libraries idempotent ({removed_total} removed, none below 0.999)"))
}

// ---------------------------------------------------------------------------
// 8. classifier

/// One cue word per label: the label is fully determined by its presence.
const CUES: &[(Dimension, &[(&str, &str)])] = &[
    (
        Dimension::Intent,
        &[
            ("Best Practices", "guideline"),
            ("Documentation & Explanation", "explain"),
            ("Code Generation", "implement"),
            ("Code Review & Analysis", "audit"),
        ],
    ),
    (
        Dimension::Role,
        &[
            ("General", "anyone"),
            ("Software Developer", "engineer"),
            ("Project Manager", "stakeholder"),
            ("Data Scientist", "dataframe"),
        ],
    ),
    (
        Dimension::Sdlc,
        &[
            ("General", "overview"),
            ("Implementation & Coding", "refactor"),
            ("Testing & Quality Assurance", "coverage"),
            ("Planning & Design", "architecture"),
        ],
    ),
    (
        Dimension::Type,
        &[("Template-based", "placeholder"), ("Zero-shot", "directly"), ("Few-shot", "examples")],
    ),
];
const NEUTRAL: &[&str] = &["please", "the", "project", "for", "our", "team", "today", "with", "care", "this", "code"];

fn classifier_dataset(vocab: &Vocabulary) -> Vec<(String, Classification)> {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    (0..200)
        .map(|_| {
            let mut words: Vec<&str> = (0..rng.random_range(3..=6)).map(|_| *NEUTRAL.choose(&mut rng).unwrap()).collect();
            let mut names = [""; 4];
            for (k, (_, labels)) in CUES.iter().enumerate() {
                let (label, cue) = labels.choose(&mut rng).unwrap();
                names[k] = label;
                words.push(cue);
            }
            words.shuffle(&mut rng);
            (words.join(" "), classification(vocab, names))
        })
        .collect()
}

fn classifier_criterion() -> Outcome {
    let vocab = Vocabulary::default();
    let data = classifier_dataset(&vocab);
    let config = TrainConfig::default();
    let (train_idx, test_idx) = split_indices(data.len(), config.seed);
    let mut lines = Vec::new();
    for (dim, _) in CUES {
        let label = |i: &usize| data[*i].1.label(*dim).name.clone();
        let train_labels: Vec<String> = train_idx.iter().map(label).collect();
        let test_labels: Vec<String> = test_idx.iter().map(label).collect();
        let baseline = majority_baseline_f1(&train_labels, &test_labels).map_err(|e| e.to_string())?;
        let held_out: Vec<(String, Classification)> = test_idx.iter().map(|&i| data[i].clone()).collect();
        for variant in [ModelVariant::Forest, ModelVariant::Mlp] {
            let model = train_classifier(&data, *dim, variant, &vocab, &config).map_err(|e| e.to_string())?;
            let predicted: Vec<String> =
                held_out.iter().map(|(t, _)| model.predict(t, None).map(|p| p.0)).collect::<Result<_, _>>().map_err(|e| e.to_string())?;
            let want = oracle::weighted_f1(&test_labels, &predicted);
            let got = evaluate_classifier(&model, &held_out).map_err(|e| e.to_string())?;
            ensure!((got - want).abs() <= 1e-9, "{dim} {variant:?}: evaluate {got}, confusion-matrix oracle {want}");
            ensure!(
                (model.heldout_weighted_f1 - want).abs() <= 1e-9,
                "{dim} {variant:?}: stored held-out F1 {}, oracle {want}",
                model.heldout_weighted_f1
            );
            ensure!(want >= 0.95, "{dim} {variant:?}: held-out weighted F1 {want:.3} < 0.95");
            ensure!(want > baseline, "{dim} {variant:?}: F1 {want:.3} does not beat majority {baseline:.3}");
            lines.push(format!("{dim}/{variant:?} {want:.3}"));
        }
        lines.push(format!("(baseline {baseline:.3})"));
    }
    Ok(lines.join(", "))
}

// ---------------------------------------------------------------------------
// 9. summary

fn summary_criterion() -> Outcome {
    let vocab = Vocabulary::default();
    let labelled: &[(&str, [&str; 4])] = &[
        ("Write a CSV parser", ["Code Generation", "Software Developer", "Implementation & Coding", "Zero-shot"]),
        ("Write a JSON parser", ["Code Generation", "Software Developer", "Implementation & Coding", "Zero-shot"]),
        ("Review this diff", ["Code Review & Analysis", "Software Developer", "Testing & Quality Assurance", "Zero-shot"]),
        ("Explain the roadmap", ["Documentation & Explanation", "Project Manager", "Planning & Design", "Zero-shot"]),
        ("Tips for notebooks", ["Best Practices", "Data Scientist", "General", "Few-shot"]),
        ("Generate a pandas pipeline", ["Code Generation", "Data Scientist", "Implementation & Coding", "Template-based"]),
        ("Naming conventions", ["Best Practices", "General", "General", "Zero-shot"]),
    ];
    let mut prompts: Vec<Prompt> = labelled
        .iter()
        .enumerate()
        .map(|(i, (text, names))| {
            let mut p = prompt_at(&format!("s{i}"), text, i as i64);
            p.classification = Some(classification(&vocab, *names));
            p
        })
        .collect();
    prompts.push(prompt_at("s9", "An unlabelled prompt", 9));
    let summary = offline_summary(&library_of(prompts));
    let intent: BTreeMap<String, usize> = [
        ("Best Practices", 2),
        ("Code Generation", 3),
        ("Code Review & Analysis", 1),
        ("Documentation & Explanation", 1),
    ]
    .iter()
    .map(|(k, v)| (k.to_string(), *v))
    .collect();
    let role: BTreeMap<String, usize> =
        [("Data Scientist", 2), ("General", 1), ("Project Manager", 1), ("Software Developer", 3)]
            .iter()
            .map(|(k, v)| (k.to_string(), *v))
            .collect();
    ensure!(summary.intent_distribution == intent, "intent counts {:?}", summary.intent_distribution);
    ensure!(summary.role_distribution == role, "role counts {:?}", summary.role_distribution);
    ensure!(summary.prompt_count == 8 && summary.classified_count == 7, "counts {} / {}", summary.prompt_count, summary.classified_count);

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (mut shortest, mut longest) = (usize::MAX, 0);
    for round in 0..20 {
        let n = if round == 0 { 0 } else { rng.random_range(1..40) };
        let prompts = (0..n)
            .map(|i| {
                let mut p = prompt_at(&format!("x{i:02}"), &random_sentence(&mut rng, 1, 30), i as i64);
                if rng.random_bool(0.5) {
                    p.classification = Some(classification(
                        &vocab,
                        ["Code Generation", "Software Developer", "Implementation & Coding", "Zero-shot"],
                    ));
                }
                p
            })
            .collect();
        let summary = offline_summary(&library_of(prompts));
        let words = summary.tldr.split_whitespace().count();
        shortest = shortest.min(words);
        longest = longest.max(words);
        ensure!(
            (TLDR_MIN_WORDS..=TLDR_MAX_WORDS).contains(&words) && (50..=100).contains(&words),
            "round {round} ({n} prompts): TL;DR has {words} words"
        );
        ensure!(summary.source == "offline", "round {round}: source {}", summary.source);
    }
    Ok(format!("exact label counts; 20 offline TL;DRs between {shortest} and {longest} words"))
}

// ---------------------------------------------------------------------------
// 10. end to end

const STUB_TEMPLATE: &str = r#"{"template": "Write a {{language}} function that parses a {{format}} file and returns a list of {{items}}.", "variables": [{"name": "language", "description": "Programming language", "confidence": 0.9}, {"name": "format", "description": "Input file format", "confidence": 0.9}, {"name": "items", "description": "Element type of the result", "confidence": 0.8}], "confidence": 0.85}"#;

fn golden_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/e2e_export.json")
}

fn pwm(dir: &Path, args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_pwm"))
        .args(args)
        .current_dir(dir)
        .env("HOME", dir)
        .env("PWM_SEED", "2024")
        .env("PWM_NOW", "2025-03-01T12:00:00Z")
        .env("PWM_LLM_STUB", dir.join("stub.json"))
        .env_remove("PWM_LIBRARY")
        .env_remove("PWM_OFFLINE")
        .env_remove("PWM_LLM_BASE_URL")
        .env_remove("PWM_LLM_API_KEY")
        .output()
        .map_err(|e| e.to_string())?;
    let stdout = String::from_utf8_lossy(&out.stdout).into_owned();
    if !out.status.success() {
        return Err(format!(
            "`pwm {}` exited {:?}: {}{}",
            args.join(" "),
            out.status.code(),
            stdout,
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    Ok(stdout)
}

fn json(text: &str) -> Result<serde_json::Value, String> {
    serde_json::from_str(text).map_err(|e| format!("bad json {text:?}: {e}"))
}

fn end_to_end() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let dir = tmp.path();
    let stub = serde_json::json!({"entries": [{"purpose": "TEMPLATE_GEN", "digest": "*", "response": STUB_TEMPLATE}]});
    std::fs::write(dir.join("stub.json"), stub.to_string()).map_err(|e| e.to_string())?;

    pwm(dir, &["library", "init", "--sample"])?;
    let added = json(&pwm(
        dir,
        &[
            "--format",
            "json",
            "prompt",
            "add",
            "Write a Go function that parses a YAML file and returns a list of structs, then email teh result to dev@example.com",
        ],
    )?)?;
    let id = added["prompt"]["id"].as_str().ok_or("add returned no id")?.to_string();
    let optimized = json(&pwm(dir, &["--format", "json", "prompt", "optimize", &id, "--apply-all"])?)?;
    let text = optimized["prompt"]["text"].as_str().ok_or("optimize returned no text")?;
    ensure!(text.contains(REDACTED) && text.contains(" the result"), "optimized text {text:?}");

    let extracted = json(&pwm(dir, &["--format", "json", "template", "extract", "sample-2", "--mode", "llm"])?)?;
    let tid = extracted["template"]["id"].as_str().ok_or("extract returned no template id")?.to_string();
    let rendered = json(&pwm(
        dir,
        &["--format", "json", "template", "render", &tid, "--var", "language=Zig", "--var", "format=TOML", "--var", "items=tables"],
    )?)?;
    let want = "Write a Zig function that parses a TOML file and returns a list of tables.";
    ensure!(rendered["text"] == want, "rendered {:?}", rendered["text"]);

    pwm(dir, &["library", "export", "export.json"])?;
    let exported = std::fs::read_to_string(dir.join("export.json")).map_err(|e| e.to_string())?;
    let golden = golden_path();
    if std::env::var_os("PWM_UPDATE_GOLDEN").is_some() {
        std::fs::create_dir_all(golden.parent().unwrap()).map_err(|e| e.to_string())?;
        std::fs::write(&golden, &exported).map_err(|e| e.to_string())?;
        return Err(format!("golden rewritten at {}; inspect it and rerun", golden.display()));
    }
    let expected = std::fs::read_to_string(&golden).map_err(|e| format!("{}: {e}", golden.display()))?;
    ensure!(exported == expected, "export differs from {}", golden.display());
    Ok(format!("6 steps exit 0; export matches golden ({} bytes)", exported.len()))
}
