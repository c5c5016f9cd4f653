//! Classification and detection metrics: confusion-count statistics,
//! rank-based ROC AUC, box-overlap quality, and fold-aggregated report
//! tables.
//!
//! Malignant is the positive class throughout, so sensitivity is
//! malignant recall and specificity benign recall.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{BoundingBox, ClassLabel};
use crate::detector::iou;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no {0} samples; metric undefined")]
    EmptyClass(&'static str),
    #[error("roc_auc needs both classes present")]
    SingleClass,
    #[error("unpaired image id {0}")]
    UnpairedId(String),
}

/// Binary confusion counts (malignant = positive).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    /// Tally argmax-thresholded predictions (score >= 0.5 is malignant).
    pub fn from_scores(scores: &[f64], labels: &[ClassLabel]) -> Self {
        let mut c = ConfusionCounts::default();
        for (&s, &l) in scores.iter().zip(labels) {
            let predicted_malignant = s >= 0.5;
            match (l, predicted_malignant) {
                (ClassLabel::Malignant, true) => c.tp += 1,
                (ClassLabel::Malignant, false) => c.fn_ += 1,
                (ClassLabel::Benign, false) => c.tn += 1,
                (ClassLabel::Benign, true) => c.fp += 1,
            }
        }
        c
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub accuracy: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub youden: f64,
}

/// Accuracy, sensitivity, specificity, and Youden index from counts.
///
/// An empty positive or negative class makes the corresponding rate
/// undefined and is reported as an error instead of dividing by zero.
pub fn confusion_metrics(c: &ConfusionCounts) -> Result<ClassificationMetrics, MetricsError> {
    if c.tp + c.fn_ == 0 {
        return Err(MetricsError::EmptyClass("positive"));
    }
    if c.tn + c.fp == 0 {
        return Err(MetricsError::EmptyClass("negative"));
    }
    let total = c.total() as f64;
    let sensitivity = c.tp as f64 / (c.tp + c.fn_) as f64;
    let specificity = c.tn as f64 / (c.tn + c.fp) as f64;
    Ok(ClassificationMetrics {
        accuracy: (c.tp + c.tn) as f64 / total,
        sensitivity,
        specificity,
        youden: sensitivity + specificity - 1.0,
    })
}

/// Rank-statistic AUC: probability that a random positive outranks a
/// random negative, ties counted one half. Computed from midranks, so the
/// result is an exact multiple of `0.5 / (n_pos * n_neg)`.
pub fn roc_auc(scores: &[f64], labels: &[ClassLabel]) -> Result<f64, MetricsError> {
    assert_eq!(scores.len(), labels.len());
    let n_pos = labels
        .iter()
        .filter(|l| **l == ClassLabel::Malignant)
        .count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricsError::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap().then(a.cmp(&b)));

    // midranks over tie groups; ranks are 1-based
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] == ClassLabel::Malignant {
                rank_sum_pos += midrank;
            }
        }
        i = j + 1;
    }
    let np = n_pos as f64;
    let nn = n_neg as f64;
    Ok((rank_sum_pos - np * (np + 1.0) / 2.0) / (np * nn))
}

/// Points of the ROC curve as (false positive rate, true positive rate),
/// swept from the highest threshold down.
pub fn roc_points(scores: &[f64], labels: &[ClassLabel]) -> Result<Vec<(f64, f64)>, MetricsError> {
    let n_pos = labels
        .iter()
        .filter(|l| **l == ClassLabel::Malignant)
        .count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricsError::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    let mut pts = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        for &idx in &order[i..=j] {
            match labels[idx] {
                ClassLabel::Malignant => tp += 1,
                ClassLabel::Benign => fp += 1,
            }
        }
        pts.push((fp as f64 / n_neg as f64, tp as f64 / n_pos as f64));
        i = j + 1;
    }
    Ok(pts)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionQuality {
    pub mean_iou: f64,
    pub hit_rate: f64,
}

/// Mean IoU and the fraction of pairs with IoU >= 0.5 between candidate
/// boxes and reference boxes matched by image id.
pub fn detection_quality(
    candidates: &BTreeMap<String, BoundingBox>,
    reference: &BTreeMap<String, BoundingBox>,
) -> Result<DetectionQuality, MetricsError> {
    if candidates.is_empty() {
        return Err(MetricsError::EmptyClass("paired"));
    }
    let mut sum = 0.0;
    let mut hits = 0usize;
    for (id, cand) in candidates {
        let gt = reference
            .get(id)
            .ok_or_else(|| MetricsError::UnpairedId(id.clone()))?;
        let v = f64::from(iou(cand, gt));
        sum += v;
        if v >= 0.5 {
            hits += 1;
        }
    }
    let n = candidates.len() as f64;
    Ok(DetectionQuality {
        mean_iou: sum / n,
        hit_rate: hits as f64 / n,
    })
}

/// One evaluated fold: named metric values in [0, 1].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub values: BTreeMap<String, f64>,
}

/// Population mean and standard deviation, scaled to percentages.
///
/// The +/- is the population (divide by n) standard deviation across
/// folds; a single fold reports 0. Stated here because the convention is
/// otherwise ambiguous.
pub fn mean_sd_percent(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean * 100.0, var.sqrt() * 100.0)
}

pub fn format_percent_pair(mean_pct: f64, sd_pct: f64) -> String {
    format!("{mean_pct:.2}\u{b1}{sd_pct:.2}")
}

/// Render fold results as an aligned text table plus a full-precision CSV
/// (one column per fold, final mean/sd columns).
pub fn report(folds: &[FoldResult]) -> (String, String) {
    let mut keys: Vec<String> = folds
        .iter()
        .flat_map(|f| f.values.keys().cloned())
        .collect();
    keys.sort();
    keys.dedup();

    let mut text = String::new();
    text.push_str(&format!("{:<22}", "metric"));
    for f in folds {
        text.push_str(&format!("{:<14}", format!("fold{}", f.fold)));
    }
    text.push_str("mean\u{b1}sd (%)\n");
    let mut csv = String::from("metric");
    for f in folds {
        csv.push_str(&format!(",fold{}", f.fold));
    }
    csv.push_str(",mean_pct,sd_pct\n");

    for key in &keys {
        let vals: Vec<f64> = folds
            .iter()
            .map(|f| f.values.get(key).copied().unwrap_or(f64::NAN))
            .collect();
        let (m, s) = mean_sd_percent(&vals);
        text.push_str(&format!("{key:<22}"));
        for v in &vals {
            text.push_str(&format!("{v:<14.4}"));
        }
        text.push_str(&format!("{}\n", format_percent_pair(m, s)));
        csv.push_str(key);
        for v in &vals {
            csv.push_str(&format!(",{v}"));
        }
        csv.push_str(&format!(",{m},{s}\n"));
    }
    (text, csv)
}
