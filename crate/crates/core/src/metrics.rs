//! Evaluation metrics over diagnosis predictions: accuracy, macro F1, and
//! the rank-sum (Mann–Whitney) ROC AUC with tie correction.

use serde::{Deserialize, Serialize};

use crate::error::{MrnError, Result};
use crate::mrn::ClassLabel;

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub f1_macro: f64,
    /// `None` on a single-class dataset, where the AUC is undefined.
    pub roc_auc: Option<f64>,
    /// Confusion counts indexed `[truth][prediction]`.
    pub confusion: [[usize; 2]; 2],
    pub n: usize,
}

/// Confusion counts from aligned prediction/truth sequences.
pub fn confusion(preds: &[ClassLabel], truths: &[ClassLabel]) -> Result<[[usize; 2]; 2]> {
    if preds.len() != truths.len() {
        return Err(MrnError::Shape(format!(
            "{} predictions against {} labels",
            preds.len(),
            truths.len()
        )));
    }
    if preds.is_empty() {
        return Err(MrnError::Config("metrics need at least one sample".into()));
    }
    let mut cm = [[0usize; 2]; 2];
    for (&p, &t) in preds.iter().zip(truths) {
        cm[t.index()][p.index()] += 1;
    }
    Ok(cm)
}

pub fn accuracy(cm: &[[usize; 2]; 2]) -> f64 {
    let n: usize = cm.iter().flatten().sum();
    (cm[0][0] + cm[1][1]) as f64 / n as f64
}

/// Unweighted mean of the per-class F1 scores; a class with no true or
/// predicted members scores zero.
pub fn macro_f1(cm: &[[usize; 2]; 2]) -> f64 {
    let f1 = |k: usize| -> f64 {
        let tp = cm[k][k] as f64;
        let pred = (cm[0][k] + cm[1][k]) as f64;
        let truth = (cm[k][0] + cm[k][1]) as f64;
        if tp == 0.0 {
            return 0.0;
        }
        let precision = tp / pred;
        let recall = tp / truth;
        2.0 * precision * recall / (precision + recall)
    };
    (f1(0) + f1(1)) / 2.0
}

/// Mann–Whitney AUC of the positive-class scores: average ranks (midranks
/// for ties), then `(R⁺ − n⁺(n⁺+1)/2) / (n⁺ n⁻)`. `None` when either class
/// is absent.
pub fn roc_auc(scores: &[f64], truths: &[ClassLabel]) -> Result<Option<f64>> {
    if scores.len() != truths.len() {
        return Err(MrnError::Shape(format!(
            "{} scores against {} labels",
            scores.len(),
            truths.len()
        )));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(MrnError::Numeric(format!("non-finite score {s}")));
    }
    let n_pos = truths.iter().filter(|&&t| t == ClassLabel::Pd).count();
    let n_neg = truths.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Ok(None);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));
    let mut ranks = vec![0.0f64; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1..=j+1 share their midrank.
        let mid = (i + j + 2) as f64 / 2.0;
        for &idx in &order[i..=j] {
            ranks[idx] = mid;
        }
        i = j + 1;
    }
    let r_pos: f64 = truths
        .iter()
        .zip(&ranks)
        .filter(|(&t, _)| t == ClassLabel::Pd)
        .map(|(_, &r)| r)
        .sum();
    let u = r_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(Some(u / (n_pos * n_neg) as f64))
}

/// Full report from per-sample class probabilities `(p_HC, p_PD)`. The
/// predicted label is the argmax; the AUC ranks `p_PD`.
pub fn report(probs: &[[f64; 2]], truths: &[ClassLabel]) -> Result<MetricsReport> {
    let preds: Vec<ClassLabel> = probs
        .iter()
        .map(|p| if p[1] > p[0] { ClassLabel::Pd } else { ClassLabel::Hc })
        .collect();
    let cm = confusion(&preds, truths)?;
    let scores: Vec<f64> = probs.iter().map(|p| p[1]).collect();
    Ok(MetricsReport {
        accuracy: accuracy(&cm),
        f1_macro: macro_f1(&cm),
        roc_auc: roc_auc(&scores, truths)?,
        confusion: cm,
        n: truths.len(),
    })
}
