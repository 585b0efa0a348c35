//! Accuracy, rank-based ROC AUC and Pearson correlation.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    if preds.is_empty() {
        return Err(Error::EmptyInput);
    }
    if preds.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            expected: (1, labels.len()),
            actual: (1, preds.len()),
        });
    }
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Binary AUC via the Mann-Whitney statistic with mid-ranks, so tied scores
/// earn half credit. Labels are `true` for positives.
pub fn auc_binary(scores: &[f64], positive: &[bool]) -> Result<f64> {
    if scores.len() != positive.len() {
        return Err(Error::ShapeMismatch {
            expected: (1, positive.len()),
            actual: (1, scores.len()),
        });
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::DegenerateLabels);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Doubled mid-ranks keep everything integral: rank2 = first + last + 2.
    let mut pos_rank2: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let rank2 = (i + j + 2) as u64;
        for &k in &order[i..=j] {
            if positive[k] {
                pos_rank2 += rank2;
            }
        }
        i = j + 1;
    }
    let (np, nn) = (n_pos as u64, n_neg as u64);
    // 2U = sum of doubled ranks - np (np + 1)
    let u2 = pos_rank2 - np * (np + 1);
    Ok(u2 as f64 / (2 * np * nn) as f64)
}

/// One-vs-rest macro AUC over `classes` columns of row-major `scores`
/// (`n x classes`). With two classes this is the binary AUC of column 1.
pub fn auc_macro(scores: &[f64], labels: &[usize], classes: usize) -> Result<f64> {
    if classes < 2 {
        return Err(Error::DegenerateLabels);
    }
    if scores.len() != labels.len() * classes {
        return Err(Error::ShapeMismatch {
            expected: (labels.len(), classes),
            actual: (scores.len() / classes, classes),
        });
    }
    if classes == 2 {
        let col: Vec<f64> = (0..labels.len()).map(|i| scores[i * 2 + 1]).collect();
        let pos: Vec<bool> = labels.iter().map(|&l| l == 1).collect();
        return auc_binary(&col, &pos);
    }
    let per = auc_per_class(scores, labels, classes)?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

pub fn auc_per_class(scores: &[f64], labels: &[usize], classes: usize) -> Result<Vec<f64>> {
    (0..classes)
        .map(|c| {
            let col: Vec<f64> = (0..labels.len()).map(|i| scores[i * classes + c]).collect();
            let pos: Vec<bool> = labels.iter().map(|&l| l == c).collect();
            auc_binary(&col, &pos)
        })
        .collect()
}

/// Pearson correlation coefficient.
pub fn pcc(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::ShapeMismatch {
            expected: (1, x.len()),
            actual: (1, y.len()),
        });
    }
    if x.len() < 2 {
        return Err(Error::EmptyInput);
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::ZeroVariance);
    }
    Ok(sxy / libm::sqrt(sxx * syy))
}

/// Evaluation summary for one method on one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub method: alloc::string::String,
    pub n: usize,
    pub loss: f64,
    pub acc: Option<f64>,
    pub auc: Option<f64>,
    pub pcc: Option<f64>,
    /// Per-class AUC (classification) or per-target PCC (regression).
    pub per_output: Vec<Option<f64>>,
}
