//! Multi-rater agreement: Fleiss' kappa, leave-one-out rater contribution,
//! Landis–Koch banding and the taxonomy validation sampling rule.

use std::collections::BTreeMap;
use std::io::Read;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Categorical labels from several raters over a shared item set.
///
/// `labels[i][r]` is the index into `categories` that rater `r` gave item `i`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "MatrixDocument", into = "MatrixDocument")]
pub struct AnnotationMatrix {
    items: Vec<String>,
    raters: Vec<String>,
    categories: Vec<String>,
    labels: Vec<Vec<usize>>,
}

/// JSON shape of a matrix: `labels[item][rater]` as category names.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MatrixDocument {
    pub items: Vec<String>,
    pub raters: Vec<String>,
    pub categories: Vec<String>,
    pub labels: Vec<Vec<String>>,
}

impl TryFrom<MatrixDocument> for AnnotationMatrix {
    type Error = Error;

    fn try_from(doc: MatrixDocument) -> Result<Self> {
        AnnotationMatrix::new(doc.items, doc.raters, doc.categories, doc.labels)
    }
}

impl From<AnnotationMatrix> for MatrixDocument {
    fn from(m: AnnotationMatrix) -> Self {
        let labels = m
            .labels
            .iter()
            .map(|row| row.iter().map(|&c| m.categories[c].clone()).collect())
            .collect();
        MatrixDocument {
            items: m.items,
            raters: m.raters,
            categories: m.categories,
            labels,
        }
    }
}

impl AnnotationMatrix {
    pub fn new(
        items: Vec<String>,
        raters: Vec<String>,
        categories: Vec<String>,
        labels: Vec<Vec<String>>,
    ) -> Result<Self> {
        if items.len() < 2 || raters.len() < 2 {
            return Err(Error::InvalidMatrix(format!(
                "need at least 2 items and 2 raters, got {} and {}",
                items.len(),
                raters.len()
            )));
        }
        if labels.len() != items.len() {
            return Err(Error::InvalidMatrix("one label row per item required".into()));
        }
        let mut encoded = Vec::with_capacity(labels.len());
        for (item, row) in items.iter().zip(labels) {
            if row.len() != raters.len() {
                return Err(Error::InvalidMatrix(format!("item {item} is missing ratings")));
            }
            let codes = row
                .iter()
                .map(|label| {
                    categories
                        .iter()
                        .position(|c| c == label)
                        .ok_or_else(|| Error::InvalidMatrix(format!("label {label:?} is not a declared category")))
                })
                .collect::<Result<Vec<_>>>()?;
            encoded.push(codes);
        }
        Ok(AnnotationMatrix {
            items,
            raters,
            categories,
            labels: encoded,
        })
    }

    /// Builds a matrix from per-rater label columns over the same items.
    /// Categories are collected in sorted order.
    pub fn from_columns(items: Vec<String>, columns: &BTreeMap<String, Vec<String>>) -> Result<Self> {
        let raters: Vec<String> = columns.keys().cloned().collect();
        let mut categories: Vec<String> = columns.values().flatten().cloned().collect();
        categories.sort();
        categories.dedup();
        let mut rows = vec![Vec::with_capacity(raters.len()); items.len()];
        for (rater, column) in columns {
            if column.len() != items.len() {
                return Err(Error::InvalidMatrix(format!(
                    "rater {rater} labelled {} items, expected {}",
                    column.len(),
                    items.len()
                )));
            }
            for (row, label) in rows.iter_mut().zip(column) {
                row.push(label.clone());
            }
        }
        AnnotationMatrix::new(items, raters, categories, rows)
    }

    /// CSV with header `item_id,<rater>,<rater>,...`.
    pub fn from_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers().map_err(csv_error)?.clone();
        if headers.get(0) != Some("item_id") {
            return Err(Error::InvalidMatrix("first CSV column must be item_id".into()));
        }
        let raters: Vec<String> = headers.iter().skip(1).map(str::to_string).collect();
        let mut items = Vec::new();
        let mut columns: BTreeMap<String, Vec<String>> = raters.iter().map(|r| (r.clone(), Vec::new())).collect();
        for record in rdr.records() {
            let record = record.map_err(csv_error)?;
            items.push(record.get(0).unwrap_or_default().to_string());
            for (rater, value) in raters.iter().zip(record.iter().skip(1)) {
                if value.is_empty() {
                    return Err(Error::InvalidMatrix(format!("empty cell for rater {rater}")));
                }
                columns.get_mut(rater).expect("rater column").push(value.to_string());
            }
        }
        // Keep the header's rater order rather than the map's.
        let mut categories: Vec<String> = columns.values().flatten().cloned().collect();
        categories.sort();
        categories.dedup();
        let rows = (0..items.len())
            .map(|i| raters.iter().map(|r| columns[r][i].clone()).collect())
            .collect();
        AnnotationMatrix::new(items, raters, categories, rows)
    }

    pub fn to_csv(&self) -> String {
        let mut wtr = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["item_id".to_string()];
        header.extend(self.raters.iter().cloned());
        wtr.write_record(&header).expect("in-memory write");
        for (item, row) in self.items.iter().zip(&self.labels) {
            let mut rec = vec![item.clone()];
            rec.extend(row.iter().map(|&c| self.categories[c].clone()));
            wtr.write_record(&rec).expect("in-memory write");
        }
        String::from_utf8(wtr.into_inner().expect("flush")).expect("utf-8")
    }

    pub fn items(&self) -> &[String] {
        &self.items
    }

    pub fn raters(&self) -> &[String] {
        &self.raters
    }

    pub fn categories(&self) -> &[String] {
        &self.categories
    }

    pub fn label(&self, item: usize, rater: usize) -> &str {
        &self.categories[self.labels[item][rater]]
    }

    /// The same items rated by a subset of raters.
    pub fn select_raters(&self, keep: &[usize]) -> Result<Self> {
        if keep.len() < 2 {
            return Err(Error::InvalidMatrix("need at least 2 raters".into()));
        }
        Ok(AnnotationMatrix {
            items: self.items.clone(),
            raters: keep.iter().map(|&r| self.raters[r].clone()).collect(),
            categories: self.categories.clone(),
            labels: self
                .labels
                .iter()
                .map(|row| keep.iter().map(|&r| row[r]).collect())
                .collect(),
        })
    }

    /// Item × category count table.
    pub fn count_table(&self) -> Vec<Vec<usize>> {
        self.labels
            .iter()
            .map(|row| {
                let mut counts = vec![0; self.categories.len()];
                for &c in row {
                    counts[c] += 1;
                }
                counts
            })
            .collect()
    }
}

fn csv_error(e: csv::Error) -> Error {
    let (line, column) = e
        .position()
        .map(|p| (p.line() as usize, 0))
        .unwrap_or((0, 0));
    Error::Parse {
        line,
        column,
        message: e.to_string(),
    }
}

/// Fleiss' kappa, `(P̄ − P̄e) / (1 − P̄e)`, over the item × category counts.
pub fn fleiss_kappa(matrix: &AnnotationMatrix) -> Result<f64> {
    let table = matrix.count_table();
    let n_items = table.len() as f64;
    let n_raters = matrix.raters.len() as f64;
    let mut category_totals = vec![0usize; matrix.categories.len()];
    let mut agreement_sum = 0.0;
    for row in &table {
        let squares: usize = row.iter().map(|&c| c * c).sum();
        agreement_sum += (squares as f64 - n_raters) / (n_raters * (n_raters - 1.0));
        for (total, &c) in category_totals.iter_mut().zip(row) {
            *total += c;
        }
    }
    let p_bar = agreement_sum / n_items;
    let p_e: f64 = category_totals
        .iter()
        .map(|&t| {
            let p = t as f64 / (n_items * n_raters);
            p * p
        })
        .sum();
    if (1.0 - p_e).abs() < 1e-12 {
        return Err(Error::DegenerateAgreement);
    }
    Ok((p_bar - p_e) / (1.0 - p_e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AgreementBand {
    Poor,
    Slight,
    Fair,
    Moderate,
    Substantial,
    AlmostPerfect,
}

/// Landis–Koch interpretation, intervals closed on the right.
pub fn band(kappa: f64) -> AgreementBand {
    if kappa < 0.0 {
        AgreementBand::Poor
    } else if kappa <= 0.20 {
        AgreementBand::Slight
    } else if kappa <= 0.40 {
        AgreementBand::Fair
    } else if kappa <= 0.60 {
        AgreementBand::Moderate
    } else if kappa <= 0.80 {
        AgreementBand::Substantial
    } else {
        AgreementBand::AlmostPerfect
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    pub per_category_kappa: BTreeMap<String, f64>,
    pub total_kappa: f64,
    pub band: AgreementBand,
}

/// Kappa per tagged matrix plus one over all matrices stacked item-wise.
/// Every matrix must have the same raters in the same order.
pub fn agreement_report(matrices: &BTreeMap<String, AnnotationMatrix>) -> Result<AgreementReport> {
    let first = matrices
        .values()
        .next()
        .ok_or_else(|| Error::InvalidMatrix("no matrices".into()))?;
    let mut per_category_kappa = BTreeMap::new();
    let mut items = Vec::new();
    let mut categories: Vec<String> = Vec::new();
    let mut rows = Vec::new();
    for (tag, m) in matrices {
        if m.raters != first.raters {
            return Err(Error::InvalidMatrix(format!("matrix {tag} has different raters")));
        }
        per_category_kappa.insert(tag.clone(), fleiss_kappa(m)?);
        for (i, item) in m.items.iter().enumerate() {
            items.push(format!("{tag}/{item}"));
            rows.push(
                (0..m.raters.len())
                    .map(|r| format!("{tag}/{}", m.label(i, r)))
                    .collect::<Vec<_>>(),
            );
        }
        categories.extend(m.categories.iter().map(|c| format!("{tag}/{c}")));
    }
    let stacked = AnnotationMatrix::new(items, first.raters.clone(), categories, rows)?;
    let total_kappa = fleiss_kappa(&stacked)?;
    Ok(AgreementReport {
        per_category_kappa,
        total_kappa,
        band: band(total_kappa),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContributionReport {
    pub k_all: f64,
    /// Kappa without each rater; `None` when that subset is degenerate.
    pub k_without: BTreeMap<String, Option<f64>>,
    pub delta: BTreeMap<String, Option<f64>>,
    pub winner: Option<String>,
}

/// Leave-one-out contribution of every rater to the group kappa.
pub fn leave_one_out(matrix: &AnnotationMatrix) -> Result<ContributionReport> {
    if matrix.raters.len() < 3 {
        return Err(Error::InvalidMatrix("leave-one-out needs at least 3 raters".into()));
    }
    let k_all = fleiss_kappa(matrix)?;
    let n = matrix.raters.len();
    let without: Vec<Option<f64>> = (0..n)
        .into_par_iter()
        .map(|skip| {
            let keep: Vec<usize> = (0..n).filter(|&r| r != skip).collect();
            let sub = matrix.select_raters(&keep).expect("n-1 >= 2 raters");
            fleiss_kappa(&sub).ok()
        })
        .collect();
    let mut k_without = BTreeMap::new();
    let mut delta = BTreeMap::new();
    for (rater, k) in matrix.raters.iter().zip(without) {
        k_without.insert(rater.clone(), k);
        delta.insert(rater.clone(), k.map(|k| k_all - k));
    }
    let winner = best_rater(&delta);
    Ok(ContributionReport {
        k_all,
        k_without,
        delta,
        winner,
    })
}

/// Leave-one-out from per-rater label columns over shared items.
pub fn leave_one_out_columns(items: Vec<String>, columns: &BTreeMap<String, Vec<String>>) -> Result<ContributionReport> {
    leave_one_out(&AnnotationMatrix::from_columns(items, columns)?)
}

/// Rater with the largest delta; ties go to the smaller rater id.
fn best_rater(delta: &BTreeMap<String, Option<f64>>) -> Option<String> {
    let mut best: Option<(&String, f64)> = None;
    for (rater, d) in delta {
        if let Some(d) = *d {
            if best.is_none_or(|(_, b)| d > b) {
                best = Some((rater, d));
            }
        }
    }
    best.map(|(r, _)| r.clone())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WinsReport {
    /// Per category, the rater with the largest delta.
    pub category_winners: BTreeMap<String, String>,
    pub wins: BTreeMap<String, usize>,
    pub total_delta: BTreeMap<String, f64>,
    pub winner: String,
}

/// Aggregates per-category deltas into win counts. The winner has the most
/// category wins; ties fall to the larger delta sum, then the smaller id.
pub fn aggregate_wins(per_category: &BTreeMap<String, BTreeMap<String, Option<f64>>>) -> Result<WinsReport> {
    let mut wins: BTreeMap<String, usize> = BTreeMap::new();
    let mut total_delta: BTreeMap<String, f64> = BTreeMap::new();
    let mut category_winners = BTreeMap::new();
    for (category, deltas) in per_category {
        for (rater, d) in deltas {
            wins.entry(rater.clone()).or_insert(0);
            *total_delta.entry(rater.clone()).or_insert(0.0) += d.unwrap_or(0.0);
        }
        if let Some(w) = best_rater(deltas) {
            *wins.get_mut(&w).expect("rater registered") += 1;
            category_winners.insert(category.clone(), w);
        }
    }
    let winner = wins
        .iter()
        .max_by(|(ra, wa), (rb, wb)| {
            wa.cmp(wb)
                .then_with(|| total_delta[*ra].total_cmp(&total_delta[*rb]))
                .then_with(|| rb.cmp(ra))
        })
        .map(|(r, _)| r.clone())
        .ok_or_else(|| Error::InvalidMatrix("no raters".into()))?;
    Ok(WinsReport {
        category_winners,
        wins,
        total_delta,
        winner,
    })
}

/// Uniform sample without replacement, reproducible by seed. Returned in
/// sampled order.
pub fn validation_sample<T: Clone>(dataset: &[T], n: usize, seed: u64) -> Result<Vec<T>> {
    if n > dataset.len() {
        return Err(Error::SampleTooLarge {
            requested: n,
            available: dataset.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(sample(&mut rng, dataset.len(), n)
        .into_iter()
        .map(|i| dataset[i].clone())
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Pass,
    Fail,
}

/// Passes iff the error rate is strictly below 5% (fewer than 5 of 100).
pub fn judge(sample_size: usize, error_count: usize) -> Result<Verdict> {
    if sample_size == 0 || error_count > sample_size {
        return Err(Error::InvalidParameter(format!(
            "{error_count} errors in a sample of {sample_size}"
        )));
    }
    Ok(if error_count * 100 < 5 * sample_size {
        Verdict::Pass
    } else {
        Verdict::Fail
    })
}
