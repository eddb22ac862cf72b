//! Cond-Idf, vocabulary-level mean attribution, polynomial alignment and
//! top-n bias ratios.

use crate::attribution::{top_n_tokens, AttributionVector};
use crate::corpus::{Sample, Task};
use crate::lang::{declared_name_tokens, lexical_categories};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("label {0} is not a class of this task")]
    UnknownLabel(usize),
    #[error("empty corpus")]
    Empty,
    #[error("attribution for {sample} has {got} tokens, sample has {want}")]
    Misalignment { sample: String, got: usize, want: usize },
    #[error("need more than {order} points, got {points}")]
    Underdetermined { order: usize, points: usize },
    #[error("series has zero variance")]
    DegenerateVariance,
    #[error("{0}")]
    Io(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CondIdfRow {
    pub word: String,
    pub count: u64,
    pub count_label: u64,
    pub df: u64,
    pub cond_p: f64,
    pub idf: f64,
    pub cond_idf: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CondIdfTable {
    pub label: usize,
    pub num_projects: usize,
    /// Sorted by word.
    pub rows: Vec<CondIdfRow>,
}

impl CondIdfTable {
    pub fn get(&self, word: &str) -> Option<&CondIdfRow> {
        self.rows
            .binary_search_by(|r| r.word.as_str().cmp(word))
            .ok()
            .map(|i| &self.rows[i])
    }

    pub fn to_csv(&self) -> Result<String, MetricsError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let io = |e: csv::Error| MetricsError::Io(e.to_string());
        w.write_record(["word", "label", "count", "count_label", "df", "idf", "cond_p", "cond_idf"])
            .map_err(io)?;
        for r in &self.rows {
            w.write_record([
                r.word.clone(),
                self.label.to_string(),
                r.count.to_string(),
                r.count_label.to_string(),
                r.df.to_string(),
                r.idf.to_string(),
                r.cond_p.to_string(),
                r.cond_idf.to_string(),
            ])
            .map_err(io)?;
        }
        let bytes = w.into_inner().map_err(|e| MetricsError::Io(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("utf-8 input"))
    }
}

/// Cond-Idf of every token text for label `label`: token-occurrence counts,
/// project-level document frequency, natural log.
pub fn cond_idf(samples: &[&Sample], task: Task, label: usize) -> Result<CondIdfTable, MetricsError> {
    if label >= task.num_classes() {
        return Err(MetricsError::UnknownLabel(label));
    }
    if samples.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut count: BTreeMap<&str, (u64, u64)> = BTreeMap::new();
    let mut projects_of: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    let mut projects = BTreeSet::new();
    for s in samples {
        projects.insert(s.project_id.as_str());
        let hit = s.primary_class() == label;
        for t in &s.tokens {
            let e = count.entry(t.text.as_str()).or_default();
            e.0 += 1;
            e.1 += hit as u64;
            projects_of
                .entry(t.text.as_str())
                .or_default()
                .insert(s.project_id.as_str());
        }
    }
    let n = projects.len();
    let rows = count
        .into_iter()
        .map(|(w, (c, cl))| {
            let df = projects_of[w].len() as u64;
            let cond_p = cl as f64 / c as f64;
            let idf = (n as f64 / df as f64).ln();
            CondIdfRow {
                word: w.to_string(),
                count: c,
                count_label: cl,
                df,
                cond_p,
                idf,
                cond_idf: cond_p * idf,
            }
        })
        .collect();
    Ok(CondIdfTable {
        label,
        num_projects: n,
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IgEntry {
    pub word: String,
    pub mean_ig: f64,
    pub occurrences: usize,
    pub category: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SortedIgDistribution {
    pub entries: Vec<IgEntry>,
}

fn category_names(sample: &Sample) -> Vec<&'static str> {
    match sample.task {
        Task::TypeInf => {
            let decl = declared_name_tokens(&sample.tokens);
            (0..sample.tokens.len())
                .map(|i| if decl.contains(&i) { "declaration-variable" } else { "other" })
                .collect()
        }
        Task::VulnDet => lexical_categories(&sample.tokens)
            .into_iter()
            .map(|c| c.label())
            .collect(),
    }
}

/// Mean per-token weight of every word, heaviest first (ties by word).
pub fn mean_ig_distribution(
    attributions: &[AttributionVector],
    samples: &[&Sample],
) -> Result<SortedIgDistribution, MetricsError> {
    let mut acc: BTreeMap<&str, (f64, usize, &'static str)> = BTreeMap::new();
    for (a, s) in attributions.iter().zip(samples) {
        if a.len() != s.tokens.len() {
            return Err(MetricsError::Misalignment {
                sample: s.sample_id.clone(),
                got: a.len(),
                want: s.tokens.len(),
            });
        }
        let cats = category_names(s);
        for ((t, &w), cat) in s.tokens.iter().zip(&a.per_token).zip(cats) {
            let e = acc.entry(t.text.as_str()).or_insert((0.0, 0, cat));
            e.0 += w;
            e.1 += 1;
        }
    }
    let mut entries: Vec<IgEntry> = acc
        .into_iter()
        .map(|(w, (sum, n, cat))| IgEntry {
            word: w.to_string(),
            mean_ig: sum / n as f64,
            occurrences: n,
            category: cat.to_string(),
        })
        .collect();
    entries.sort_by(|a, b| b.mean_ig.total_cmp(&a.mean_ig).then_with(|| a.word.cmp(&b.word)));
    Ok(SortedIgDistribution { entries })
}

/// Least-squares polynomial in the standardized variable `(x − center) / scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolyFit {
    pub coeffs: Vec<f64>,
    pub center: f64,
    pub scale: f64,
}

impl PolyFit {
    pub fn eval(&self, x: f64) -> f64 {
        let z = (x - self.center) / self.scale;
        self.coeffs.iter().rev().fold(0.0, |acc, c| acc * z + c)
    }
}

/// Solves the Vandermonde least-squares problem by Householder QR.
pub fn polyfit(xs: &[f64], ys: &[f64], order: usize) -> Result<PolyFit, MetricsError> {
    let n = xs.len();
    if n != ys.len() || n <= order {
        return Err(MetricsError::Underdetermined { order, points: n.min(ys.len()) });
    }
    let lo = xs.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let center = (lo + hi) / 2.0;
    let scale = if hi > lo { (hi - lo) / 2.0 } else { 1.0 };
    let k = order + 1;
    // column-major n × k
    let mut a = vec![0.0; n * k];
    for (i, &x) in xs.iter().enumerate() {
        let z = (x - center) / scale;
        let mut p = 1.0;
        for j in 0..k {
            a[j * n + i] = p;
            p *= z;
        }
    }
    let mut b = ys.to_vec();
    for j in 0..k {
        let col = &mut a[j * n..(j + 1) * n];
        let norm = col[j..].iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        let alpha = if col[j] > 0.0 { -norm } else { norm };
        let mut v: Vec<f64> = col[j..].to_vec();
        v[0] -= alpha;
        let vn = v.iter().map(|x| x * x).sum::<f64>();
        if vn == 0.0 {
            continue;
        }
        let apply = |target: &mut [f64]| {
            let s: f64 = v.iter().zip(&target[j..]).map(|(a, b)| a * b).sum();
            let f = 2.0 * s / vn;
            for (t, vi) in target[j..].iter_mut().zip(&v) {
                *t -= f * vi;
            }
        };
        for c in j..k {
            apply(&mut a[c * n..(c + 1) * n]);
        }
        apply(&mut b);
    }
    let mut coeffs = vec![0.0; k];
    for j in (0..k).rev() {
        let r = a[j * n + j];
        let s: f64 = (j + 1..k).map(|c| a[c * n + j] * coeffs[c]).sum();
        coeffs[j] = if r.abs() < 1e-300 { 0.0 } else { (b[j] - s) / r };
    }
    Ok(PolyFit { coeffs, center, scale })
}

pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64, MetricsError> {
    let n = a.len().min(b.len()) as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa <= 1e-300 || sbb <= 1e-300 {
        return Err(MetricsError::DegenerateVariance);
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Alignment {
    pub label: usize,
    pub pearson_r: f64,
    pub mean_ig: Vec<f64>,
    pub cond_idf: Vec<f64>,
    pub fitted_curve: Vec<f64>,
}

/// Cond-Idf re-indexed by IG rank, fitted against rank, correlated with the IG curve.
/// Words missing from the table score 0.
pub fn alignment(
    ig: &SortedIgDistribution,
    table: &CondIdfTable,
    order: usize,
) -> Result<Alignment, MetricsError> {
    let mean_ig: Vec<f64> = ig.entries.iter().map(|e| e.mean_ig).collect();
    let cond: Vec<f64> = ig
        .entries
        .iter()
        .map(|e| table.get(&e.word).map_or(0.0, |r| r.cond_idf))
        .collect();
    let xs: Vec<f64> = (0..cond.len()).map(|i| i as f64).collect();
    let fit = polyfit(&xs, &cond, order)?;
    let fitted: Vec<f64> = xs.iter().map(|&x| fit.eval(x)).collect();
    let r = pearson(&mean_ig, &fitted)?;
    Ok(Alignment {
        label: table.label,
        pearson_r: r,
        mean_ig,
        cond_idf: cond,
        fitted_curve: fitted,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RatioMode {
    /// At least one top-n token is biased.
    Contains,
    /// Every top-n token is biased.
    Only,
}

/// Fraction of samples whose top-n tokens satisfy `mode` against `bias_vocab`.
/// Samples shorter than `n` use all their tokens.
pub fn topn_bias_ratio(
    attributions: &[AttributionVector],
    samples: &[&Sample],
    bias_vocab: &BTreeSet<String>,
    n: usize,
    mode: RatioMode,
) -> f64 {
    let mut hits = 0usize;
    let mut total = 0usize;
    for (a, s) in attributions.iter().zip(samples) {
        let k = n.min(a.len());
        if k == 0 {
            continue;
        }
        total += 1;
        let top = top_n_tokens(a, k).expect("k in range");
        let mut biased = top.iter().map(|&i| bias_vocab.contains(&s.tokens[i].text));
        let ok = match mode {
            RatioMode::Contains => biased.any(|b| b),
            RatioMode::Only => biased.all(|b| b),
        };
        hits += ok as usize;
    }
    if total == 0 {
        0.0
    } else {
        hits as f64 / total as f64
    }
}
