//! Per-class average precision and ROC AUC, their macro means, and d-prime.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("scores and truth differ in shape: {0}")]
    Shape(String),
    #[error("truth values must be 0 or 1")]
    NonBinaryTruth,
    #[error("AUC {0} outside the open interval (0, 1)")]
    AucOutOfRange(f64),
    #[error("evaluation set is empty")]
    Empty,
}

pub type MetricsResult<T> = Result<T, MetricsError>;

/// Indices sorted by descending score; equal scores keep ascending index.
fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order
}

/// Non-interpolated average precision: the mean, over positives, of the
/// precision at each positive's rank. `None` when there are no positives.
pub fn average_precision(scores: &[f64], truth: &[u8]) -> Option<f64> {
    assert_eq!(scores.len(), truth.len(), "scores and truth must align");
    let positives = truth.iter().filter(|&&t| t == 1).count();
    if positives == 0 {
        return None;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in ranking(scores).iter().enumerate() {
        if truth[i] == 1 {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Some(sum / positives as f64)
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half. `None` unless both outcomes occur.
pub fn roc_auc(scores: &[f64], truth: &[u8]) -> Option<f64> {
    assert_eq!(scores.len(), truth.len(), "scores and truth must align");
    let p = truth.iter().filter(|&&t| t == 1).count();
    let q = truth.len() - p;
    if p == 0 || q == 0 {
        return None;
    }
    // Sweep ascending scores in tie groups: each positive beats every
    // negative strictly below it and ties with negatives in its group.
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut below = 0usize;
    let mut credit = 0.0f64;
    let mut g = 0;
    while g < order.len() {
        let mut end = g;
        while end < order.len() && scores[order[end]] == scores[order[g]] {
            end += 1;
        }
        let (mut pos, mut neg) = (0usize, 0usize);
        for &i in &order[g..end] {
            if truth[i] == 1 {
                pos += 1;
            } else {
                neg += 1;
            }
        }
        credit += pos as f64 * (below as f64 + 0.5 * neg as f64);
        below += neg;
        g = end;
    }
    Some(credit / (p as f64 * q as f64))
}

/// Standard normal quantile (Wichura's AS 241, PPND16), accurate to about
/// 1e-16 relative.
#[allow(clippy::excessive_precision)]
pub fn normal_quantile(p: f64) -> f64 {
    debug_assert!(p > 0.0 && p < 1.0);
    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180625 - q * q;
        return q
            * (((((((2509.0809287301226727 * r + 33430.575583588128105) * r + 67265.770927008700853) * r
                + 45921.953931549871457)
                * r
                + 13731.693765509461125)
                * r
                + 1971.5909503065514427)
                * r
                + 133.14166789178437745)
                * r
                + 3.387132872796366608)
            / (((((((5226.495278852545925 * r + 28729.085735721942674) * r + 39307.89580009271061) * r
                + 21213.794301586595867)
                * r
                + 5394.1960214247511077)
                * r
                + 687.1870074920579083)
                * r
                + 42.313330701600911252)
                * r
                + 1.0);
    }
    let mut r = if q < 0.0 { p } else { 1.0 - p };
    r = (-r.ln()).sqrt();
    let val = if r <= 5.0 {
        let r = r - 1.6;
        (((((((7.7454501427834140764e-4 * r + 0.0227238449892691845833) * r + 0.24178072517745061177) * r
            + 1.27045825245236838258)
            * r
            + 3.64784832476320460504)
            * r
            + 5.7694972214606914055)
            * r
            + 4.6303378461565452959)
            * r
            + 1.42343711074968357734)
            / (((((((1.05075007164441684324e-9 * r + 5.475938084995344946e-4) * r + 0.0151986665636164571966)
                * r
                + 0.14810397642748007459)
                * r
                + 0.68976733498510000455)
                * r
                + 1.6763848301838038494)
                * r
                + 2.05319162663775882187)
                * r
                + 1.0)
    } else {
        let r = r - 5.0;
        (((((((2.01033439929228813265e-7 * r + 2.71155556874348757815e-5) * r + 0.0012426609473880784386)
            * r
            + 0.026532189526576123093)
            * r
            + 0.29656057182850489123)
            * r
            + 1.7848265399172913358)
            * r
            + 5.4637849111641143699)
            * r
            + 6.6579046435011037772)
            / (((((((2.04426310338993978564e-15 * r + 1.4215117583164458887e-7) * r + 1.8463183175100546818e-5)
                * r
                + 7.868691311456132591e-4)
                * r
                + 0.0148753612908506148525)
                * r
                + 0.13692988092273580531)
                * r
                + 0.59983220655588793769)
                * r
                + 1.0)
    };
    if q < 0.0 {
        -val
    } else {
        val
    }
}

/// `sqrt(2) * Phi^-1(auc)`.
pub fn d_prime(auc: f64) -> MetricsResult<f64> {
    if !(auc > 0.0 && auc < 1.0) {
        return Err(MetricsError::AucOutOfRange(auc));
    }
    Ok(std::f64::consts::SQRT_2 * normal_quantile(auc))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: String,
    pub positives: usize,
    #[serde(rename = "AP")]
    pub ap: Option<f64>,
    #[serde(rename = "AUC")]
    pub auc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(rename = "mAP")]
    pub map: f64,
    #[serde(rename = "AUC")]
    pub auc: f64,
    /// Absent when the macro AUC is exactly 0 or 1.
    pub d_prime: Option<f64>,
    pub n_examples: usize,
    pub evaluated_classes: usize,
    /// Classes with no positives (no AP) or a single outcome (no AUC).
    pub skipped_classes: Vec<String>,
    pub per_class: Vec<ClassMetrics>,
}

/// Scores a `[B, N]` row-major prediction matrix against binary truth.
/// Macro means run over the classes for which each metric is defined.
pub fn evaluate_scores(
    scores: &[f64],
    truth: &[u8],
    n_classes: usize,
    class_names: &[String],
) -> MetricsResult<MetricsReport> {
    if n_classes == 0 || scores.is_empty() {
        return Err(MetricsError::Empty);
    }
    if scores.len() != truth.len() || scores.len() % n_classes != 0 || class_names.len() != n_classes {
        return Err(MetricsError::Shape(format!(
            "{} scores, {} truth values, {} classes, {} names",
            scores.len(),
            truth.len(),
            n_classes,
            class_names.len()
        )));
    }
    if truth.iter().any(|&t| t > 1) {
        return Err(MetricsError::NonBinaryTruth);
    }
    let b = scores.len() / n_classes;
    let mut per_class = Vec::with_capacity(n_classes);
    let mut skipped = Vec::new();
    let (mut ap_sum, mut ap_n, mut auc_sum, mut auc_n) = (0.0, 0usize, 0.0, 0usize);
    for c in 0..n_classes {
        let s: Vec<f64> = (0..b).map(|i| scores[i * n_classes + c]).collect();
        let t: Vec<u8> = (0..b).map(|i| truth[i * n_classes + c]).collect();
        let ap = average_precision(&s, &t);
        let auc = roc_auc(&s, &t);
        if let Some(v) = ap {
            ap_sum += v;
            ap_n += 1;
        }
        if let Some(v) = auc {
            auc_sum += v;
            auc_n += 1;
        }
        if ap.is_none() || auc.is_none() {
            skipped.push(class_names[c].clone());
        }
        per_class.push(ClassMetrics {
            class: class_names[c].clone(),
            positives: t.iter().filter(|&&v| v == 1).count(),
            ap,
            auc,
        });
    }
    if ap_n == 0 || auc_n == 0 {
        return Err(MetricsError::Empty);
    }
    let auc = auc_sum / auc_n as f64;
    Ok(MetricsReport {
        map: ap_sum / ap_n as f64,
        auc,
        d_prime: d_prime(auc).ok(),
        n_examples: b,
        evaluated_classes: n_classes - skipped.len(),
        skipped_classes: skipped,
        per_class,
    })
}
