//! Confusion matrix and per-class precision/recall/F1 report.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::CLASS_NAMES;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("labels and predictions differ in length: {labels} vs {preds}")]
    LengthMismatch { labels: usize, preds: usize },
    #[error("class index {index} out of range for {classes} classes")]
    ClassOutOfRange { index: usize, classes: usize },
    #[error("confusion matrix is empty")]
    Empty,
}

/// `counts[actual][predicted]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
    pub class_names: Vec<String>,
}

impl ConfusionMatrix {
    pub fn from_counts(counts: Vec<Vec<u64>>) -> Self {
        let class_names = if counts.len() == CLASS_NAMES.len() {
            CLASS_NAMES.iter().map(|s| s.to_string()).collect()
        } else {
            (0..counts.len()).map(|i| format!("class_{i}")).collect()
        };
        ConfusionMatrix {
            counts,
            class_names,
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.counts.len()).map(|k| self.counts[k][k]).sum()
    }

    pub fn row_sum(&self, k: usize) -> u64 {
        self.counts[k].iter().sum()
    }

    pub fn column_sum(&self, k: usize) -> u64 {
        self.counts.iter().map(|row| row[k]).sum()
    }
}

/// Count `(label, prediction)` pairs over the two classes.
pub fn confusion(labels: &[usize], preds: &[usize]) -> Result<ConfusionMatrix, EvalError> {
    confusion_k(CLASS_NAMES.len(), labels, preds)
}

pub fn confusion_k(
    classes: usize,
    labels: &[usize],
    preds: &[usize],
) -> Result<ConfusionMatrix, EvalError> {
    if labels.len() != preds.len() {
        return Err(EvalError::LengthMismatch {
            labels: labels.len(),
            preds: preds.len(),
        });
    }
    let mut counts = vec![vec![0u64; classes]; classes];
    for (&a, &p) in labels.iter().zip(preds) {
        if let Some(&index) = [a, p].iter().find(|&&i| i >= classes) {
            return Err(EvalError::ClassOutOfRange { index, classes });
        }
        counts[a][p] += 1;
    }
    Ok(ConfusionMatrix::from_counts(counts))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub name: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
    /// Set when a zero denominator forced a metric to 0.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub classes: Vec<ClassMetrics>,
    pub accuracy: f64,
    pub confusion: Vec<Vec<u64>>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Per-class precision, recall and F1 plus overall accuracy. Zero denominators
/// give 0 and mark the class degenerate.
pub fn report(cm: &ConfusionMatrix) -> Result<ClassificationReport, EvalError> {
    let total = cm.total();
    if total == 0 {
        return Err(EvalError::Empty);
    }
    let classes = (0..cm.counts.len())
        .map(|k| {
            let tp = cm.counts[k][k];
            let precision = ratio(tp, cm.column_sum(k));
            let recall = ratio(tp, cm.row_sum(k));
            let f1 = match (precision, recall) {
                (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
                _ => None,
            };
            ClassMetrics {
                name: cm.class_names[k].clone(),
                precision: precision.unwrap_or(0.0),
                recall: recall.unwrap_or(0.0),
                f1: f1.unwrap_or(0.0),
                support: cm.row_sum(k),
                degenerate: precision.is_none() || recall.is_none() || f1.is_none(),
            }
        })
        .collect();
    Ok(ClassificationReport {
        classes,
        accuracy: cm.trace() as f64 / total as f64,
        confusion: cm.counts.clone(),
    })
}

fn title_case(name: &str) -> String {
    let mut chars = name.chars();
    match chars.next() {
        Some(first) => first.to_uppercase().chain(chars).collect(),
        None => String::new(),
    }
}

impl ClassificationReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Fixed-width table: one row per class, then the accuracy line, three decimals.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let rule = "-".repeat(60);
        writeln!(out, "{rule}").unwrap();
        writeln!(
            out,
            "{:<12}{:>12}{:>12}{:>12}{:>12}",
            "Class", "Precision", "Recall", "F1-Score", "Support"
        )
        .unwrap();
        writeln!(out, "{rule}").unwrap();
        for c in &self.classes {
            writeln!(
                out,
                "{:<12}{:>12.3}{:>12.3}{:>12.3}{:>12}",
                title_case(&c.name),
                c.precision,
                c.recall,
                c.f1,
                c.support
            )
            .unwrap();
        }
        writeln!(out, "{rule}").unwrap();
        writeln!(out, "{:<12}{:>48.3}", "Accuracy", self.accuracy).unwrap();
        writeln!(out, "{rule}").unwrap();
        out
    }
}
