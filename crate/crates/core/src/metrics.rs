//! Accuracy and ROC-AUC for the two one-vs-rest tasks.

use std::collections::HashMap;
use std::fmt;

use thiserror::Error;

use crate::data::{ClassLabel, ManifestEntry};
use crate::infer::PredictionRecord;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricsError {
    #[error("AUC undefined: labels contain a single class")]
    AucUndefined,
    #[error("scores and labels differ in length ({scores} vs {labels})")]
    Length { scores: usize, labels: usize },
    #[error("empty input")]
    Empty,
    #[error("score is NaN")]
    NaN,
    #[error("manifest ids without predictions: {0:?}")]
    MissingIds(Vec<String>),
    #[error("prediction ids not in manifest: {0:?}")]
    UnknownIds(Vec<String>),
}

fn check_lengths(scores: &[f64], labels: &[bool]) -> Result<(), MetricsError> {
    if scores.len() != labels.len() {
        return Err(MetricsError::Length {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    if scores.is_empty() {
        return Err(MetricsError::Empty);
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(MetricsError::NaN);
    }
    Ok(())
}

/// Mann–Whitney estimate of the area under the ROC curve, tied pairs counting
/// one half. Uses mid-ranks after a sort, so `O(n log n)`.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64, MetricsError> {
    check_lengths(scores, labels)?;
    let positives = labels.iter().filter(|&&l| l).count() as u64;
    let negatives = labels.len() as u64 - positives;
    if positives == 0 || negatives == 0 {
        return Err(MetricsError::AucUndefined);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Sum of doubled mid-ranks of the positives; stays integral.
    let mut doubled_rank_sum: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1..=j share the mid-rank (i+1+j)/2.
        let doubled = (i + 1 + j) as u64;
        let pos_in_group = order[i..j].iter().filter(|&&k| labels[k]).count() as u64;
        doubled_rank_sum += doubled * pos_in_group;
        i = j;
    }
    let doubled_u = doubled_rank_sum - positives * (positives + 1);
    Ok(doubled_u as f64 / (2 * positives * negatives) as f64)
}

/// Fraction of items where `score >= threshold` matches the label.
pub fn accuracy(scores: &[f64], labels: &[bool], threshold: f64) -> Result<f64, MetricsError> {
    check_lengths(scores, labels)?;
    let correct = scores
        .iter()
        .zip(labels)
        .filter(|(&s, &l)| (s >= threshold) == l)
        .count();
    Ok(correct as f64 / scores.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskMetrics {
    pub accuracy: f64,
    pub auc: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalReport {
    pub melanoma: TaskMetrics,
    pub seborrheic_keratosis: TaskMetrics,
    pub average_accuracy: f64,
    pub average_auc: f64,
}

impl EvalReport {
    pub fn new(melanoma: TaskMetrics, seborrheic_keratosis: TaskMetrics) -> Self {
        Self {
            melanoma,
            seborrheic_keratosis,
            average_accuracy: (melanoma.accuracy + seborrheic_keratosis.accuracy) / 2.0,
            average_auc: (melanoma.auc + seborrheic_keratosis.auc) / 2.0,
        }
    }

    pub const CSV_HEADER: &'static str =
        "melanoma_accuracy,melanoma_auc,sk_accuracy,sk_auc,average_accuracy,average_auc";

    pub fn to_csv_row(&self) -> String {
        format!(
            "{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.melanoma.accuracy,
            self.melanoma.auc,
            self.seborrheic_keratosis.accuracy,
            self.seborrheic_keratosis.auc,
            self.average_accuracy,
            self.average_auc
        )
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<22} {:>9} {:>9}", "task", "accuracy", "auc")?;
        for (name, m) in [
            ("melanoma", self.melanoma),
            ("seborrheic_keratosis", self.seborrheic_keratosis),
        ] {
            writeln!(f, "{:<22} {:>9.3} {:>9.3}", name, m.accuracy, m.auc)?;
        }
        writeln!(
            f,
            "{:<22} {:>9.3} {:>9.3}",
            "average", self.average_accuracy, self.average_auc
        )
    }
}

/// Scores both tasks: melanoma vs rest and seborrheic keratosis vs rest.
pub fn evaluate(predictions: &[PredictionRecord], manifest: &[ManifestEntry]) -> Result<EvalReport, MetricsError> {
    let labels: HashMap<&str, ClassLabel> = manifest.iter().map(|e| (e.image_id.as_str(), e.label)).collect();
    let mut unknown: Vec<String> = predictions
        .iter()
        .filter(|p| !labels.contains_key(p.image_id.as_str()))
        .map(|p| p.image_id.clone())
        .collect();
    if !unknown.is_empty() {
        unknown.sort();
        return Err(MetricsError::UnknownIds(unknown));
    }
    let by_id: HashMap<&str, &PredictionRecord> = predictions.iter().map(|p| (p.image_id.as_str(), p)).collect();
    let missing: Vec<String> = manifest
        .iter()
        .filter(|e| !by_id.contains_key(e.image_id.as_str()))
        .map(|e| e.image_id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(MetricsError::MissingIds(missing));
    }

    let task = |class: ClassLabel, score: fn(&PredictionRecord) -> f64| -> Result<TaskMetrics, MetricsError> {
        let scores: Vec<f64> = manifest.iter().map(|e| score(by_id[e.image_id.as_str()])).collect();
        let truth: Vec<bool> = manifest.iter().map(|e| e.label == class).collect();
        Ok(TaskMetrics {
            accuracy: accuracy(&scores, &truth, 0.5)?,
            auc: roc_auc(&scores, &truth)?,
        })
    };
    Ok(EvalReport::new(
        task(ClassLabel::Melanoma, |p| p.melanoma_score)?,
        task(ClassLabel::SeborrheicKeratosis, |p| p.sk_score)?,
    ))
}
