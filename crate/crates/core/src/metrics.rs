//! Answer metrics: exact-match accuracy and uniform-weight cumulative BLEU,
//! plus per-category report aggregation.
//!
//! Both metrics apply the same normalization: lowercase, collapse
//! whitespace, strip punctuation surrounding the whole string. BLEU uses
//! uniform weights over n = 1..N with N capped by both sequence lengths,
//! modified (clipped) n-gram precision, no smoothing, and the brevity
//! penalty `exp(1 - |gold|/|pred|)` when the prediction is shorter.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

#[allow(unused_imports)]
use num_traits::Float;



#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MetricsError {
    LengthMismatch { preds: usize, golds: usize },
    EmptyInput,
    /// The gold answer normalizes to nothing; BLEU is undefined.
    EmptyGold,
}

impl fmt::Display for MetricsError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MetricsError::LengthMismatch { preds, golds } => {
                write!(f, "{preds} predictions vs {golds} golds")
            }
            MetricsError::EmptyInput => write!(f, "metric over zero samples"),
            MetricsError::EmptyGold => write!(f, "gold answer is empty after normalization"),
        }
    }
}

impl core::error::Error for MetricsError {}

/// Lowercase, collapse whitespace runs to single spaces, and strip ASCII
/// punctuation from the ends of the whole string.
pub fn normalize_answer(s: &str) -> String {
    let lowered = s.to_lowercase();
    let collapsed: Vec<&str> = lowered.split_whitespace().collect();
    let joined = collapsed.join(" ");
    joined
        .trim_matches(|c: char| c.is_ascii_punctuation())
        .trim()
        .to_string()
}

/// Fraction of exact matches after normalization.
pub fn accuracy(preds: &[&str], golds: &[&str]) -> Result<f64, MetricsError> {
    if preds.len() != golds.len() {
        return Err(MetricsError::LengthMismatch {
            preds: preds.len(),
            golds: golds.len(),
        });
    }
    if preds.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let correct = preds
        .iter()
        .zip(golds)
        .filter(|(p, g)| normalize_answer(p) == normalize_answer(g))
        .count();
    Ok(correct as f64 / preds.len() as f64)
}

fn ngram_counts<'a>(tokens: &'a [&'a str], n: usize) -> BTreeMap<&'a [&'a str], usize> {
    let mut counts: BTreeMap<&[&str], usize> = BTreeMap::new();
    if tokens.len() >= n {
        for window in tokens.windows(n) {
            *counts.entry(window).or_insert(0) += 1;
        }
    }
    counts
}

/// Cumulative BLEU in `[0, 1]` of a single prediction against one reference.
pub fn bleu(pred: &str, gold: &str) -> Result<f64, MetricsError> {
    let pred_norm = normalize_answer(pred);
    let gold_norm = normalize_answer(gold);
    let gold_tokens: Vec<&str> = gold_norm.split_whitespace().collect();
    if gold_tokens.is_empty() {
        return Err(MetricsError::EmptyGold);
    }
    let pred_tokens: Vec<&str> = pred_norm.split_whitespace().collect();
    if pred_tokens.is_empty() {
        return Ok(0.0);
    }

    let max_n = 4usize.min(gold_tokens.len()).min(pred_tokens.len());
    let mut log_sum = 0.0f64;
    for n in 1..=max_n {
        let pred_grams = ngram_counts(&pred_tokens, n);
        let gold_grams = ngram_counts(&gold_tokens, n);
        let total: usize = pred_grams.values().sum();
        let clipped: usize = pred_grams
            .iter()
            .map(|(gram, &c)| c.min(gold_grams.get(gram).copied().unwrap_or(0)))
            .sum();
        if clipped == 0 {
            return Ok(0.0);
        }
        log_sum += (clipped as f64 / total as f64).ln() / max_n as f64;
    }

    let bp = if pred_tokens.len() < gold_tokens.len() {
        (1.0 - gold_tokens.len() as f64 / pred_tokens.len() as f64).exp()
    } else {
        1.0
    };
    Ok(bp * log_sum.exp())
}

/// One scored sample of an evaluation run.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRow {
    pub id: String,
    pub category: String,
    pub question: String,
    pub gold: String,
    pub prediction: String,
    pub correct: bool,
    pub bleu: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CategoryStats {
    pub count: usize,
    pub accuracy: f64,
    pub bleu: f64,
}

/// Per-category and overall aggregates plus the scored rows.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// Stats in the declared category order.
    pub categories: Vec<(String, CategoryStats)>,
    pub overall: CategoryStats,
    pub rows: Vec<SampleRow>,
}

/// Aggregate rows into per-category and overall statistics. Overall
/// accuracy is `correct / total` over all rows, never a mean of means.
pub fn build_report(rows: Vec<SampleRow>, category_order: &[String]) -> EvalReport {
    let mut order: Vec<String> = category_order.to_vec();
    for row in &rows {
        if !order.contains(&row.category) {
            order.push(row.category.clone());
        }
    }
    let mut categories = Vec::with_capacity(order.len());
    for cat in &order {
        let mut count = 0usize;
        let mut correct = 0usize;
        let mut bleu_sum = 0.0f64;
        for row in rows.iter().filter(|r| &r.category == cat) {
            count += 1;
            correct += row.correct as usize;
            bleu_sum += row.bleu;
        }
        let stats = if count == 0 {
            CategoryStats::default()
        } else {
            CategoryStats {
                count,
                accuracy: correct as f64 / count as f64,
                bleu: bleu_sum / count as f64,
            }
        };
        categories.push((cat.clone(), stats));
    }
    let total = rows.len();
    let overall = if total == 0 {
        CategoryStats::default()
    } else {
        CategoryStats {
            count: total,
            accuracy: rows.iter().filter(|r| r.correct).count() as f64 / total as f64,
            bleu: rows.iter().map(|r| r.bleu).sum::<f64>() / total as f64,
        }
    };
    EvalReport {
        categories,
        overall,
        rows,
    }
}

impl EvalReport {
    /// Aligned text table, categories as columns in declared order.
    pub fn table(&self) -> String {
        let mut header = String::from("metric      ");
        let mut acc = String::from("accuracy    ");
        let mut bl = String::from("bleu        ");
        let mut cnt = String::from("count       ");
        let mut cell = |h: &str, a: f64, b: f64, c: usize| {
            header.push_str(&format_cell(h));
            acc.push_str(&format_cell(&format_f(a)));
            bl.push_str(&format_cell(&format_f(b)));
            cnt.push_str(&format_cell(&c.to_string()));
        };
        for (name, s) in &self.categories {
            cell(name, s.accuracy, s.bleu, s.count);
        }
        cell(
            "overall",
            self.overall.accuracy,
            self.overall.bleu,
            self.overall.count,
        );
        let mut out = String::new();
        for line in [header, acc, bl, cnt] {
            out.push_str(line.trim_end());
            out.push('\n');
        }
        out
    }
}

fn format_cell(s: &str) -> String {
    let mut c = String::new();
    c.push_str(s);
    while c.len() < 13 {
        c.push(' ');
    }
    c
}

fn format_f(v: f64) -> String {
    // four decimals, manual formatting to stay alloc-only
    let scaled = (v * 10000.0).round() as i64;
    let int = scaled / 10000;
    let frac = (scaled % 10000).abs();
    alloc::format!("{int}.{frac:04}")
}
