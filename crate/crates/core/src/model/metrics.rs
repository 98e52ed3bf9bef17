use serde::{Deserialize, Serialize};

use super::forward::argmax;
use super::Model;
use crate::data::PatientRecord;
use crate::error::Result;

/// Held-out classification metrics. AUCs are `None` when the evaluation
/// set contains a single class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum EvalMetrics {
    Binary { pr_auc: Option<f64>, roc_auc: Option<f64>, accuracy: f64, f1: f64 },
    Multiclass { accuracy: f64, f1_weighted: f64, f1_macro: f64, f1_micro: f64 },
}

impl EvalMetrics {
    pub fn accuracy(&self) -> f64 {
        match self {
            EvalMetrics::Binary { accuracy, .. } | EvalMetrics::Multiclass { accuracy, .. } => *accuracy,
        }
    }

    pub fn roc_auc(&self) -> Option<f64> {
        match self {
            EvalMetrics::Binary { roc_auc, .. } => *roc_auc,
            EvalMetrics::Multiclass { .. } => None,
        }
    }

    /// Computes the metric set from predicted class distributions.
    pub fn from_predictions(probs: &[Vec<f64>], labels: &[usize], n_classes: usize) -> Self {
        let predicted: Vec<usize> = probs.iter().map(|p| argmax(p)).collect();
        let accuracy = if labels.is_empty() {
            0.0
        } else {
            predicted.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len() as f64
        };
        if n_classes == 2 {
            let scores: Vec<f64> = probs.iter().map(|p| p[1]).collect();
            let positive: Vec<bool> = labels.iter().map(|&l| l == 1).collect();
            let per_class = f1_scores(&predicted, labels, 2);
            EvalMetrics::Binary {
                pr_auc: pr_auc(&scores, &positive),
                roc_auc: roc_auc(&scores, &positive),
                accuracy,
                f1: per_class[1],
            }
        } else {
            let per_class = f1_scores(&predicted, labels, n_classes);
            let mut support = vec![0usize; n_classes];
            for &l in labels {
                support[l] += 1;
            }
            let total = labels.len().max(1) as f64;
            let f1_weighted = per_class.iter().zip(&support).map(|(f, s)| f * *s as f64).sum::<f64>() / total;
            let f1_macro = per_class.iter().sum::<f64>() / n_classes as f64;
            // single-label multiclass: micro F1 equals accuracy
            EvalMetrics::Multiclass { accuracy, f1_weighted, f1_macro, f1_micro: accuracy }
        }
    }
}

/// Evaluates `model` on `records` using their stored labels.
pub fn evaluate(model: &Model, records: &[PatientRecord]) -> Result<EvalMetrics> {
    let probs = records.iter().map(|r| model.predict_proba(r)).collect::<Result<Vec<_>>>()?;
    let labels: Vec<usize> = records.iter().map(|r| r.label).collect();
    Ok(EvalMetrics::from_predictions(&probs, &labels, model.n_classes()))
}

/// Per-class F1; a class never predicted and never present scores 0.
pub fn f1_scores(predicted: &[usize], labels: &[usize], n_classes: usize) -> Vec<f64> {
    let mut tp = vec![0usize; n_classes];
    let mut fp = vec![0usize; n_classes];
    let mut fneg = vec![0usize; n_classes];
    for (&p, &l) in predicted.iter().zip(labels) {
        if p == l {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fneg[l] += 1;
        }
    }
    (0..n_classes)
        .map(|c| {
            let denom = 2 * tp[c] + fp[c] + fneg[c];
            if denom == 0 {
                0.0
            } else {
                2.0 * tp[c] as f64 / denom as f64
            }
        })
        .collect()
}

/// Indices sorted by descending score, ties kept in input order.
fn by_descending_score(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order
}

/// Area under the ROC curve from a threshold sweep; tied scores form one
/// step, which is equivalent to counting tied pairs as one half.
pub fn roc_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|p| **p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let order = by_descending_score(scores);
    let (mut tp, mut fp) = (0usize, 0usize);
    let (mut prev_tpr, mut prev_fpr) = (0.0, 0.0);
    let mut area = 0.0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if positive[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let tpr = tp as f64 / n_pos as f64;
        let fpr = fp as f64 / n_neg as f64;
        area += (fpr - prev_fpr) * (tpr + prev_tpr) / 2.0;
        prev_tpr = tpr;
        prev_fpr = fpr;
    }
    Some(area)
}

/// Average precision: precision at every threshold weighted by the recall
/// gained there.
pub fn pr_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|p| **p).count();
    if n_pos == 0 || n_pos == positive.len() {
        return None;
    }
    let order = by_descending_score(scores);
    let (mut tp, mut seen) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if positive[order[i]] {
                tp += 1;
            }
            seen += 1;
            i += 1;
        }
        let recall = tp as f64 / n_pos as f64;
        let precision = tp as f64 / seen as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Some(ap)
}
