//! Binary segmentation metrics and the classification report.
//!
//! All six segmentation scores derive from one set of confusion counts.
//! Degenerate 0/0 ratios resolve to the "perfect empty" convention: a
//! score is 1.0 when neither prediction nor ground truth contains the
//! relevant positives, and 0.0 otherwise. Under these conventions the
//! F1 score stays algebraically identical to the Dice coefficient in
//! every branch.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Thresholds a probability map into a `{0, 1}` mask; values at or
/// above the threshold become 1.
pub fn binarize<E: Scalar>(probs: &[E], threshold: f64) -> Vec<u8> {
    let t = E::from_f64(threshold);
    probs.iter().map(|&p| u8::from(p >= t)).collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

impl std::ops::Add for ConfusionCounts {
    type Output = ConfusionCounts;
    fn add(self, o: ConfusionCounts) -> ConfusionCounts {
        ConfusionCounts {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
        }
    }
}

/// Pixel-wise confusion counts of a predicted binary mask against
/// ground truth. Both masks must be equal-length `{0, 1}` buffers.
pub fn confusion_counts(pred: &[u8], gt: &[u8]) -> Result<ConfusionCounts> {
    if pred.len() != gt.len() {
        return Err(Error::shape(
            "confusion_counts",
            format!("prediction of {} pixels vs ground truth of {}", pred.len(), gt.len()),
        ));
    }
    if pred.is_empty() {
        return Err(Error::invalid("confusion_counts", "empty masks"));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.iter().zip(gt) {
        if p > 1 || g > 1 {
            return Err(Error::invalid("confusion_counts", format!("mask value {} not in {{0, 1}}", p.max(g))));
        }
        match (p, g) {
            (1, 1) => c.tp += 1,
            (1, 0) => c.fp += 1,
            (0, 1) => c.fn_ += 1,
            (0, 0) => c.tn += 1,
            _ => unreachable!(),
        }
    }
    Ok(c)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    /// Counts summed over the whole set before computing metrics.
    Micro,
    /// Metrics computed per image, then arithmetically averaged.
    PerImageMean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub precision: f64,
    pub recall: f64,
    pub accuracy: f64,
    pub f1: f64,
    pub iou: f64,
    pub dice: f64,
    pub counts: ConfusionCounts,
    pub aggregation: Aggregation,
}

fn ratio(num: u64, den: u64, empty_is_perfect: bool) -> f64 {
    if den == 0 {
        if empty_is_perfect {
            1.0
        } else {
            0.0
        }
    } else {
        num as f64 / den as f64
    }
}

/// The six scores of one confusion-count set.
pub fn compute_metrics(c: ConfusionCounts) -> MetricsReport {
    let precision = ratio(c.tp, c.tp + c.fp, c.fn_ == 0);
    let recall = ratio(c.tp, c.tp + c.fn_, c.fp == 0);
    let accuracy = ratio(c.tp + c.tn, c.total(), true);
    let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
    let iou = ratio(c.tp, c.tp + c.fp + c.fn_, true);
    let dice = ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_, true);
    MetricsReport { precision, recall, accuracy, f1, iou, dice, counts: c, aggregation: Aggregation::Micro }
}

/// Scores a set of (prediction, ground truth) mask pairs under the
/// chosen aggregation. Micro sums counts first; per-image-mean averages
/// the per-pair scores (the `counts` field still reports the sum).
pub fn evaluate_dataset<'a, I>(pairs: I, aggregation: Aggregation) -> Result<MetricsReport>
where
    I: IntoIterator<Item = (&'a [u8], &'a [u8])>,
{
    let mut total = ConfusionCounts::default();
    let mut sums = [0.0f64; 6];
    let mut n = 0u64;
    for (pred, gt) in pairs {
        let c = confusion_counts(pred, gt)?;
        total = total + c;
        let m = compute_metrics(c);
        for (s, v) in sums.iter_mut().zip([m.precision, m.recall, m.accuracy, m.f1, m.iou, m.dice]) {
            *s += v;
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::invalid("evaluate_dataset", "no mask pairs"));
    }
    match aggregation {
        Aggregation::Micro => Ok(MetricsReport { aggregation, ..compute_metrics(total) }),
        Aggregation::PerImageMean => {
            let inv = 1.0 / n as f64;
            Ok(MetricsReport {
                precision: sums[0] * inv,
                recall: sums[1] * inv,
                accuracy: sums[2] * inv,
                f1: sums[3] * inv,
                iou: sums[4] * inv,
                dice: sums[5] * inv,
                counts: total,
                aggregation,
            })
        }
    }
}

impl MetricsReport {
    /// Single-row CSV: header plus values.
    pub fn to_csv(&self) -> String {
        let agg = match self.aggregation {
            Aggregation::Micro => "micro",
            Aggregation::PerImageMean => "per-image-mean",
        };
        format!(
            "aggregation,tp,fp,fn,tn,precision,recall,accuracy,f1,iou,dice\n{},{},{},{},{},{},{},{},{},{},{}\n",
            agg,
            self.counts.tp,
            self.counts.fp,
            self.counts.fn_,
            self.counts.tn,
            self.precision,
            self.recall,
            self.accuracy,
            self.f1,
            self.iou,
            self.dice
        )
    }
}

/// Per-class scores of a multi-class prediction set.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassificationReport {
    /// Row-major `K x K` matrix; entry `(true, predicted)`.
    pub confusion: Vec<u64>,
    pub classes: usize,
    pub per_class: Vec<ClassScores>,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassScores {
    pub class: usize,
    pub support: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// One-vs-rest scores per class plus overall accuracy.
pub fn classification_report(y_true: &[usize], y_pred: &[usize], classes: usize) -> Result<ClassificationReport> {
    if y_true.len() != y_pred.len() {
        return Err(Error::shape(
            "classification_report",
            format!("{} labels vs {} predictions", y_true.len(), y_pred.len()),
        ));
    }
    if y_true.is_empty() {
        return Err(Error::invalid("classification_report", "no samples"));
    }
    let mut confusion = vec![0u64; classes * classes];
    for (&t, &p) in y_true.iter().zip(y_pred) {
        if t >= classes || p >= classes {
            return Err(Error::invalid(
                "classification_report",
                format!("label {} out of range [0, {})", t.max(p), classes),
            ));
        }
        confusion[t * classes + p] += 1;
    }
    let mut per_class = Vec::with_capacity(classes);
    let mut correct = 0u64;
    for c in 0..classes {
        let tp = confusion[c * classes + c];
        correct += tp;
        let pred_c: u64 = (0..classes).map(|t| confusion[t * classes + c]).sum();
        let true_c: u64 = (0..classes).map(|p| confusion[c * classes + p]).sum();
        let (fp, fn_) = (pred_c - tp, true_c - tp);
        let precision = ratio(tp, tp + fp, fn_ == 0);
        let recall = ratio(tp, tp + fn_, fp == 0);
        let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
        per_class.push(ClassScores { class: c, support: true_c, precision, recall, f1 });
    }
    Ok(ClassificationReport {
        confusion,
        classes,
        per_class,
        accuracy: correct as f64 / y_true.len() as f64,
    })
}

impl ClassificationReport {
    /// CSV: one row per class, then an `accuracy` summary row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,support,precision,recall,f1\n");
        for c in &self.per_class {
            out.push_str(&format!("{},{},{},{},{}\n", c.class, c.support, c.precision, c.recall, c.f1));
        }
        out.push_str(&format!("accuracy,,,,{}\n", self.accuracy));
        out
    }
}
