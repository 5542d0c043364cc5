//! Binary classification metrics. Class 1 is "quantize".

use serde::{Deserialize, Serialize};

use super::dataset::BlockRecord;
use super::forest::ForestModel;
use super::{FastEwqError, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl Confusion {
    pub fn record(&mut self, truth: u8, predicted: u8) {
        match (truth, predicted) {
            (1, 1) => self.tp += 1,
            (0, 0) => self.tn += 1,
            (0, _) => self.fp += 1,
            _ => self.fn_ += 1,
        }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub confusion: Confusion,
    /// Indexed by class: `[0]` unquantized, `[1]` quantized.
    pub per_class: [ClassMetrics; 2],
    pub accuracy: f64,
    pub macro_avg: ClassMetrics,
    pub weighted_avg: ClassMetrics,
    /// `None` when the rows hold a single class and no ROC curve exists.
    pub roc_auc: Option<f64>,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn class_metrics(tp: u64, fp: u64, fn_: u64) -> ClassMetrics {
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    ClassMetrics {
        precision,
        recall,
        f1,
        support: tp + fn_,
    }
}

impl ClassificationReport {
    /// Metrics from counts alone; zero denominators give 0.
    pub fn from_confusion(c: Confusion, roc_auc: Option<f64>) -> Self {
        let one = class_metrics(c.tp, c.fp, c.fn_);
        // Class 0 viewed as the positive class swaps the roles.
        let zero = class_metrics(c.tn, c.fn_, c.fp);
        let per_class = [zero, one];
        let total = c.total();
        let avg = |w: [f64; 2]| ClassMetrics {
            precision: w[0] * zero.precision + w[1] * one.precision,
            recall: w[0] * zero.recall + w[1] * one.recall,
            f1: w[0] * zero.f1 + w[1] * one.f1,
            support: total,
        };
        Self {
            confusion: c,
            per_class,
            accuracy: ratio(c.tp + c.tn, total),
            macro_avg: avg([0.5, 0.5]),
            weighted_avg: avg([ratio(zero.support, total), ratio(one.support, total)]),
            roc_auc,
        }
    }
}

/// Area under the ROC curve by the trapezoidal rule. Rows with equal scores
/// move the curve together, so a constant scorer yields 0.5.
pub fn roc_auc(labels: &[u8], scores: &[f64]) -> Option<f64> {
    let pos = labels.iter().filter(|&&l| l == 1).count() as f64;
    let neg = labels.len() as f64 - pos;
    if pos == 0.0 || neg == 0.0 {
        return None;
    }
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp) = (0.0, 0.0);
    let (mut prev_tpr, mut prev_fpr) = (0.0, 0.0);
    let mut area = 0.0;
    let mut k = 0;
    while k < order.len() {
        let s = scores[order[k]];
        while k < order.len() && scores[order[k]] == s {
            if labels[order[k]] == 1 {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            k += 1;
        }
        let (tpr, fpr) = (tp / pos, fp / neg);
        area += (fpr - prev_fpr) * (tpr + prev_tpr) / 2.0;
        prev_tpr = tpr;
        prev_fpr = fpr;
    }
    Some(area)
}

/// Predicts every row and scores the result against its label.
pub fn evaluate(model: &ForestModel, rows: &[BlockRecord]) -> Result<ClassificationReport> {
    if rows.is_empty() {
        return Err(FastEwqError::EmptyEvaluation);
    }
    let mut confusion = Confusion::default();
    let mut labels = Vec::with_capacity(rows.len());
    let mut scores = Vec::with_capacity(rows.len());
    for r in rows {
        let p = model.predict(&r.features())?;
        confusion.record(r.label(), p.class);
        labels.push(r.label());
        scores.push(p.score);
    }
    Ok(ClassificationReport::from_confusion(
        confusion,
        roc_auc(&labels, &scores),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn reference_confusion() {
        let c = Confusion {
            tp: 63,
            tn: 105,
            fp: 16,
            fn_: 26,
        };
        let r = ClassificationReport::from_confusion(c, None);
        assert_abs_diff_eq!(r.accuracy, 0.80, epsilon = 1e-12);
        assert_abs_diff_eq!(r.per_class[1].precision, 63.0 / 79.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r.per_class[1].recall, 63.0 / 89.0, epsilon = 1e-12);
        assert_eq!(format!("{:.3}", r.per_class[1].precision), "0.797");
        assert_eq!(format!("{:.3}", r.per_class[1].recall), "0.708");
        assert_abs_diff_eq!(r.per_class[0].precision, 105.0 / 131.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r.per_class[0].recall, 105.0 / 121.0, epsilon = 1e-12);
        assert_eq!(r.per_class[0].support, 121);
        assert_abs_diff_eq!(
            r.macro_avg.f1,
            (r.per_class[0].f1 + r.per_class[1].f1) / 2.0,
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(
            r.weighted_avg.recall,
            (121.0 * r.per_class[0].recall + 89.0 * r.per_class[1].recall) / 210.0,
            epsilon = 1e-15
        );
        // Weighted recall equals accuracy for a binary problem.
        assert_abs_diff_eq!(r.weighted_avg.recall, r.accuracy, epsilon = 1e-12);
    }

    #[test]
    fn zero_denominators() {
        let r = ClassificationReport::from_confusion(
            Confusion {
                tp: 0,
                tn: 5,
                fp: 0,
                fn_: 0,
            },
            None,
        );
        assert_eq!(r.per_class[1].precision, 0.0);
        assert_eq!(r.per_class[1].f1, 0.0);
        assert_eq!(r.accuracy, 1.0);
    }

    #[test]
    fn auc_cases() {
        assert_eq!(roc_auc(&[0, 0, 1, 1], &[0.1, 0.2, 0.8, 0.9]), Some(1.0));
        assert_eq!(roc_auc(&[0, 0, 1, 1], &[0.9, 0.8, 0.2, 0.1]), Some(0.0));
        assert_eq!(roc_auc(&[0, 1, 0, 1], &[0.5; 4]), Some(0.5));
        assert_eq!(roc_auc(&[1, 1], &[0.5, 0.7]), None);
        // One swapped pair out of four.
        assert_eq!(roc_auc(&[0, 1, 0, 1], &[0.1, 0.3, 0.4, 0.9]), Some(0.75));
    }
}
