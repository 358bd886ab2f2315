//! Marker classification metrics and time error.
//!
//! Two average-precision numbers are reported. `avg_precision` is the
//! unweighted mean of per-class precision over argmax predictions;
//! `avg_precision_ranked` is the one-vs-rest area under the precision-recall
//! step curve built from predicted probabilities, averaged over classes.
//! Any class whose denominator is empty scores 0 and is listed in
//! `zero_division`.

use serde::{Deserialize, Serialize};

use crate::data::{ordered_batches, MarkedSequence};
use crate::error::{Error, Result};
use crate::model::StepPrediction;
use crate::train::TrainedModel;

/// Counts indexed by `[true class][predicted class]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix { num_classes, counts: vec![0; num_classes * num_classes] }
    }

    pub fn from_pairs(num_classes: usize, pairs: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let mut cm = Self::new(num_classes);
        for (t, p) in pairs {
            cm.record(t, p);
        }
        cm
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Self {
        let m = rows.len();
        assert!(rows.iter().all(|r| r.len() == m), "confusion matrix must be square");
        ConfusionMatrix { num_classes: m, counts: rows.concat() }
    }

    pub fn record(&mut self, truth: usize, predicted: usize) {
        self.counts[truth * self.num_classes + predicted] += 1;
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.num_classes, other.num_classes);
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.num_classes + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn correct(&self) -> u64 {
        (0..self.num_classes).map(|c| self.get(c, c)).sum()
    }

    pub fn row_sum(&self, truth: usize) -> u64 {
        (0..self.num_classes).map(|p| self.get(truth, p)).sum()
    }

    pub fn col_sum(&self, predicted: usize) -> u64 {
        (0..self.num_classes).map(|t| self.get(t, predicted)).sum()
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts.chunks(self.num_classes).map(<[u64]>::to_vec).collect()
    }

    pub fn accuracy(&self) -> f64 {
        self.correct() as f64 / self.total() as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// True events of this class.
    pub support: u64,
    pub predicted: u64,
}

fn ratio(num: u64, den: u64) -> (f64, bool) {
    if den == 0 {
        (0.0, true)
    } else {
        (num as f64 / den as f64, false)
    }
}

/// Per-class precision, recall and F1 (fractions), plus the classes that
/// hit an empty denominator anywhere.
pub fn per_class(cm: &ConfusionMatrix) -> (Vec<ClassMetrics>, Vec<usize>) {
    let mut flagged = Vec::new();
    let rows = (0..cm.num_classes())
        .map(|c| {
            let tp = cm.get(c, c);
            let (support, predicted) = (cm.row_sum(c), cm.col_sum(c));
            let (precision, z1) = ratio(tp, predicted);
            let (recall, z2) = ratio(tp, support);
            let (f1, z3) = ratio(2 * tp, support + predicted);
            if z1 || z2 || z3 {
                flagged.push(c);
            }
            ClassMetrics { class: c, precision, recall, f1, support, predicted }
        })
        .collect();
    (rows, flagged)
}

fn percent_mean(values: impl Iterator<Item = f64>, n: usize) -> f64 {
    100.0 * values.sum::<f64>() / n as f64
}

/// Macro and micro F1 in percent.
pub fn macro_micro_f1(cm: &ConfusionMatrix) -> (f64, f64) {
    let (rows, _) = per_class(cm);
    let macro_f1 = percent_mean(rows.iter().map(|r| r.f1), rows.len());
    let tp = cm.correct();
    // pooled: fp and fn both equal the off-diagonal total
    let off = cm.total() - tp;
    let micro = ratio(2 * tp, 2 * tp + 2 * off).0;
    (macro_f1, 100.0 * micro)
}

/// Unweighted mean of per-class precision over argmax predictions, in percent.
pub fn average_precision(cm: &ConfusionMatrix) -> f64 {
    let (rows, _) = per_class(cm);
    percent_mean(rows.iter().map(|r| r.precision), rows.len())
}

/// One-vs-rest average precision of `scores` for the positive set, as the
/// sum over distinct score thresholds of `(R_k - R_{k-1}) * P_k`.
/// `None` when there are no positives.
pub fn binary_average_precision(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let total_pos = positive.iter().filter(|&&p| p).count();
    if total_pos == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut seen, mut ap, mut prev_recall) = (0usize, 0usize, 0.0, 0.0);
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        while i < order.len() && scores[order[i]] == threshold {
            tp += positive[order[i]] as usize;
            seen += 1;
            i += 1;
        }
        let recall = tp as f64 / total_pos as f64;
        ap += (recall - prev_recall) * (tp as f64 / seen as f64);
        prev_recall = recall;
    }
    Some(ap)
}

/// Macro mean of one-vs-rest average precision in percent; classes absent
/// from `truths` score 0 and are returned in the second slot.
pub fn ranked_average_precision(probs: &[Vec<f64>], truths: &[usize], num_classes: usize) -> (f64, Vec<usize>) {
    let mut missing = Vec::new();
    let per: Vec<f64> = (0..num_classes)
        .map(|c| {
            let scores: Vec<f64> = probs.iter().map(|p| p[c]).collect();
            let positive: Vec<bool> = truths.iter().map(|&t| t == c).collect();
            binary_average_precision(&scores, &positive).unwrap_or_else(|| {
                missing.push(c);
                0.0
            })
        })
        .collect();
    (percent_mean(per.into_iter(), num_classes), missing)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Percent; argmax-based macro precision.
    pub avg_precision: f64,
    /// Percent; score-based one-vs-rest area under precision-recall.
    pub avg_precision_ranked: f64,
    pub macro_f1: f64,
    pub micro_f1: f64,
    pub accuracy: f64,
    pub per_class: Vec<ClassMetrics>,
    /// Classes whose precision, recall or F1 had an empty denominator.
    pub zero_division: Vec<usize>,
    /// Mean absolute next-gap error in standardized units.
    pub time_mae: f64,
    /// Same error after mapping both sides back to raw gaps.
    pub time_mae_raw: f64,
    pub events: u64,
    pub class_counts: Vec<u64>,
    pub confusion: Vec<Vec<u64>>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

/// Accumulates predictions batch by batch.
#[derive(Clone, Debug)]
pub struct Evaluator {
    cm: ConfusionMatrix,
    probs: Vec<Vec<f64>>,
    truths: Vec<usize>,
    abs_err: f64,
    abs_err_raw: f64,
}

impl Evaluator {
    pub fn new(num_classes: usize) -> Self {
        Evaluator { cm: ConfusionMatrix::new(num_classes), probs: Vec::new(), truths: Vec::new(), abs_err: 0.0, abs_err_raw: 0.0 }
    }

    /// Adds one predicted event. `gap` and `true_gap` are standardized;
    /// the raw versions are in the original time unit.
    pub fn add(&mut self, prediction: &StepPrediction, truth: usize, true_gap: f64, raw_gap_pred: f64, raw_gap: f64) {
        self.cm.record(truth, prediction.argmax());
        self.probs.push(prediction.probs.clone());
        self.truths.push(truth);
        self.abs_err += (prediction.gap - true_gap).abs();
        self.abs_err_raw += (raw_gap_pred - raw_gap).abs();
    }

    pub fn confusion(&self) -> &ConfusionMatrix {
        &self.cm
    }

    pub fn finish(&self) -> Result<EvalReport> {
        let n = self.cm.total();
        if n == 0 {
            return Err(Error::EmptyTestSet);
        }
        let (per_class, mut zero_division) = per_class(&self.cm);
        let (macro_f1, micro_f1) = macro_micro_f1(&self.cm);
        let (ranked, missing) = ranked_average_precision(&self.probs, &self.truths, self.cm.num_classes());
        zero_division.extend(missing);
        zero_division.sort_unstable();
        zero_division.dedup();
        Ok(EvalReport {
            avg_precision: average_precision(&self.cm),
            avg_precision_ranked: ranked,
            macro_f1,
            micro_f1,
            accuracy: 100.0 * self.cm.accuracy(),
            class_counts: per_class.iter().map(|c| c.support).collect(),
            per_class,
            zero_division,
            time_mae: self.abs_err / n as f64,
            time_mae_raw: self.abs_err_raw / n as f64,
            events: n,
            confusion: self.cm.rows(),
        })
    }
}

/// Scores every next-event prediction (events `1..len` of each sequence).
pub fn evaluate(trained: &TrainedModel, test: &[MarkedSequence], batch_size: usize) -> Result<EvalReport> {
    if test.is_empty() {
        return Err(Error::EmptyTestSet);
    }
    let model = &trained.model;
    let scaler = &trained.scaler;
    let mut ev = Evaluator::new(model.config().num_classes);
    for batch in ordered_batches(test, scaler, batch_size) {
        let preds = model.predict(&batch)?;
        for (b, seq_preds) in preds.iter().enumerate() {
            for (t, p) in seq_preds.iter().enumerate() {
                let k = batch.index(b, t + 1);
                let truth = batch.markers[k]
                    .ok_or_else(|| Error::MissingMarkers(format!("test sequence `{}` has no markers", batch.ids[b])))?;
                ev.add(p, truth, batch.features[k], scaler.inverse(p.gap), batch.raw_gaps[k]);
            }
        }
    }
    ev.finish()
}
