//! Classification evaluation: confusion matrix, weighted precision / recall /
//! F1, ROC-AUC and PR-AP curves, and batched model prediction.
//!
//! The curve implementations use the textbook definitions directly (trapezoid
//! rule over the ROC sweep, step interpolation for average precision) so they
//! can be cross-checked against brute-force pair counting and threshold
//! enumeration oracles.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::Tape;
use crate::data::{batches, AugmentSpec, DataError, DatasetIndex, Split, TransformMode};
use crate::nn::{Mode, Model, NnError};
use crate::optim::softmax;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("empty input")]
    EmptyInput,
    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },
    #[error("ROC is undefined when only one class is present")]
    SingleClassInput,
    #[error("average precision is undefined without positive instances")]
    NoPositives,
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] NnError),
    #[error("io failure: {0}")]
    Io(#[from] std::io::Error),
}

/// Row = true class, column = predicted class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub num_classes: usize,
    pub counts: Vec<Vec<usize>>,
}

impl ConfusionMatrix {
    pub fn from_labels(
        y_true: &[usize],
        y_pred: &[usize],
        num_classes: usize,
    ) -> Result<Self, MetricsError> {
        if y_true.is_empty() || y_true.len() != y_pred.len() {
            return Err(MetricsError::EmptyInput);
        }
        let mut counts = vec![vec![0usize; num_classes]; num_classes];
        for (&t, &p) in y_true.iter().zip(y_pred) {
            for &label in [t, p].iter() {
                if label >= num_classes {
                    return Err(MetricsError::LabelOutOfRange { label, num_classes });
                }
            }
            counts[t][p] += 1;
        }
        Ok(Self { num_classes, counts })
    }

    pub fn support(&self, class: usize) -> usize {
        self.counts[class].iter().sum()
    }

    pub fn total(&self) -> usize {
        self.counts.iter().map(|r| r.iter().sum::<usize>()).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerClassMetrics {
    pub class: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub accuracy: f64,
    pub weighted_precision: f64,
    pub weighted_recall: f64,
    pub weighted_f1: f64,
    pub per_class: Vec<PerClassMetrics>,
    pub confusion: ConfusionMatrix,
    /// True when some class had a zero denominator and its metric was
    /// reported as 0 by convention.
    pub zero_division_hit: bool,
}

/// Support-weighted precision/recall/F1 from label vectors. Zero-denominator
/// classes contribute 0 and set `zero_division_hit`.
pub fn classification_report(
    y_true: &[usize],
    y_pred: &[usize],
    class_names: &[String],
) -> Result<ClassificationReport, MetricsError> {
    let k = class_names.len();
    let cm = ConfusionMatrix::from_labels(y_true, y_pred, k)?;
    let total = cm.total() as f64;
    let mut correct = 0usize;
    let mut per_class = Vec::with_capacity(k);
    let mut zero_hit = false;
    let (mut wp, mut wf) = (0.0, 0.0);
    for c in 0..k {
        correct += cm.counts[c][c];
        let tp = cm.counts[c][c] as f64;
        let pred_c: f64 = (0..k).map(|t| cm.counts[t][c] as f64).sum();
        let support = cm.support(c);
        let precision = if pred_c > 0.0 {
            tp / pred_c
        } else {
            zero_hit = true;
            0.0
        };
        let recall = if support > 0 {
            tp / support as f64
        } else {
            zero_hit = true;
            0.0
        };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            zero_hit = true;
            0.0
        };
        let w = support as f64 / total;
        wp += w * precision;
        wf += w * f1;
        per_class.push(PerClassMetrics {
            class: class_names[c].clone(),
            precision,
            recall,
            f1,
            support,
        });
    }
    // sum-of-diagonal over N: algebraically equal to the support-weighted
    // recall average, and bitwise equal to accuracy by construction
    Ok(ClassificationReport {
        accuracy: correct as f64 / total,
        weighted_precision: wp,
        weighted_recall: correct as f64 / total,
        weighted_f1: wf,
        per_class,
        confusion: cm,
        zero_division_hit: zero_hit,
    })
}

impl ClassificationReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Aligned plain-text table in the style of the usual library reports.
    pub fn to_text(&self) -> String {
        let name_w = self
            .per_class
            .iter()
            .map(|p| p.class.len())
            .chain(["weighted avg".len()].into_iter())
            .max()
            .unwrap_or(8);
        let mut out = String::new();
        out.push_str(&format!(
            "{:name_w$}  {:>9}  {:>9}  {:>9}  {:>8}\n",
            "", "precision", "recall", "f1-score", "support"
        ));
        for p in &self.per_class {
            out.push_str(&format!(
                "{:name_w$}  {:>9.4}  {:>9.4}  {:>9.4}  {:>8}\n",
                p.class, p.precision, p.recall, p.f1, p.support
            ));
        }
        out.push_str(&format!(
            "\n{:name_w$}  {:>9}  {:>9}  {:>9.4}  {:>8}\n",
            "accuracy", "", "", self.accuracy, self.confusion.total()
        ));
        out.push_str(&format!(
            "{:name_w$}  {:>9.4}  {:>9.4}  {:>9.4}  {:>8}\n",
            "weighted avg",
            self.weighted_precision,
            self.weighted_recall,
            self.weighted_f1,
            self.confusion.total()
        ));
        if self.zero_division_hit {
            out.push_str("\nwarning: zero-denominator metrics reported as 0\n");
        }
        out
    }
}

/// One curve as (x, y) points plus its scalar summary area.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub points: Vec<(f64, f64)>,
    pub area: f64,
}

/// Binary ROC curve and trapezoid AUC. `scores` are positive-class scores;
/// tied scores move together (one threshold per distinct score).
pub fn roc_curve_auc(labels: &[bool], scores: &[f64]) -> Result<Curve, MetricsError> {
    if labels.is_empty() || labels.len() != scores.len() {
        return Err(MetricsError::EmptyInput);
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(MetricsError::SingleClassInput);
    }
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    let mut points = vec![(0.0, 0.0)];
    let mut auc = 0.0;
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let (mut dtp, mut dfp) = (0usize, 0usize);
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                dtp += 1;
            } else {
                dfp += 1;
            }
            i += 1;
        }
        let prev = (fp as f64 / neg as f64, tp as f64 / pos as f64);
        tp += dtp;
        fp += dfp;
        let next = (fp as f64 / neg as f64, tp as f64 / pos as f64);
        auc += (next.0 - prev.0) * (prev.1 + next.1) / 2.0;
        points.push(next);
    }
    Ok(Curve { points, area: auc })
}

/// Binary precision-recall curve and step-interpolated average precision:
/// AP = sum over threshold groups of (R_i - R_{i-1}) * P_i.
pub fn pr_curve_ap(labels: &[bool], scores: &[f64]) -> Result<Curve, MetricsError> {
    if labels.is_empty() || labels.len() != scores.len() {
        return Err(MetricsError::EmptyInput);
    }
    let pos = labels.iter().filter(|&&l| l).count();
    if pos == 0 {
        return Err(MetricsError::NoPositives);
    }
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    let mut points = vec![(0.0, 1.0)];
    let mut ap = 0.0;
    let (mut tp, mut taken) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                tp += 1;
            }
            taken += 1;
            i += 1;
        }
        let recall = tp as f64 / pos as f64;
        let precision = tp as f64 / taken as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
        points.push((recall, precision));
    }
    Ok(Curve { points, area: ap })
}

/// Write a curve as two-column CSV.
pub fn export_curve_csv(
    curve: &Curve,
    x_name: &str,
    y_name: &str,
    path: &Path,
) -> Result<(), MetricsError> {
    let mut out = format!("{x_name},{y_name}\n");
    for (x, y) in &curve.points {
        out.push_str(&format!("{x:.6},{y:.6}\n"));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Lowest index wins ties, matching the rest of the engine's conventions.
pub fn argmax_row(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub struct Predictions {
    pub y_true: Vec<usize>,
    pub y_pred: Vec<usize>,
    /// Softmax probabilities, `[N, num_classes]` row-major.
    pub probs: Vec<Vec<f32>>,
}

/// Run the model in eval mode over one split and collect labels, argmax
/// predictions, and softmax probabilities.
pub fn predict(
    model: &mut Model<f32>,
    index: &DatasetIndex,
    split: Split,
    batch_size: usize,
    spec: &AugmentSpec,
) -> Result<Predictions, MetricsError> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    use rand::SeedableRng;
    let mut preds = Predictions { y_true: Vec::new(), y_pred: Vec::new(), probs: Vec::new() };
    for batch in batches(index, split, batch_size, false, 0, 0, spec, TransformMode::Eval)? {
        let batch = batch?;
        let mut tape = Tape::new();
        let x = tape.constant(batch.images.clone());
        let out = model.forward(&mut tape, x, Mode::Eval, &mut rng)?;
        let probs = softmax(tape.value(out));
        let k = probs.shape()[1];
        for (row_idx, &label) in batch.labels.iter().enumerate() {
            let row = &probs.data()[row_idx * k..(row_idx + 1) * k];
            preds.y_true.push(label);
            preds.y_pred.push(argmax_row(row));
            preds.probs.push(row.to_vec());
        }
    }
    Ok(preds)
}
