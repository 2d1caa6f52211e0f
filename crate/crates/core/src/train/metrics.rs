use serde::{Deserialize, Serialize};

use crate::tensor::{Result, TensorError};

/// IoU thresholds of the precision table.
pub const THRESHOLDS: [f64; 5] = [0.5, 0.6, 0.7, 0.8, 0.9];

/// Column header of every metric table.
pub const METRIC_HEADER: [&str; 6] = ["IoU", "Pr@0.5", "Pr@0.6", "Pr@0.7", "Pr@0.8", "Pr@0.9"];

/// `|pred ∧ truth| / |pred ∨ truth|`, with two empty masks scoring 1.
pub fn iou(pred: &[bool], truth: &[bool]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(TensorError::Dimension {
            op: "iou",
            lhs: vec![pred.len()],
            rhs: vec![truth.len()],
        });
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &t) in pred.iter().zip(truth) {
        inter += (p && t) as usize;
        union += (p || t) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Fraction of `ious` at or above `threshold`.
pub fn precision_at(ious: &[f64], threshold: f64) -> Result<f64> {
    if ious.is_empty() {
        return Err(TensorError::Validation("precision over an empty list".into()));
    }
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(TensorError::Validation(format!("threshold {threshold} outside (0, 1)")));
    }
    Ok(ious.iter().filter(|&&v| v >= threshold).count() as f64 / ious.len() as f64)
}

/// Mean IoU and the precision table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub iou: f64,
    pub precision: [f64; 5],
}

impl Metrics {
    pub fn from_ious(ious: &[f64]) -> Result<Self> {
        let mut precision = [0.0; 5];
        for (p, &x) in precision.iter_mut().zip(&THRESHOLDS) {
            *p = precision_at(ious, x)?;
        }
        Ok(Self {
            iou: ious.iter().sum::<f64>() / ious.len() as f64,
            precision,
        })
    }

    pub fn values(&self) -> [f64; 6] {
        let p = self.precision;
        [self.iou, p[0], p[1], p[2], p[3], p[4]]
    }

    pub fn from_values(v: [f64; 6]) -> Self {
        Self {
            iou: v[0],
            precision: [v[1], v[2], v[3], v[4], v[5]],
        }
    }

    pub fn precision_monotone(&self) -> bool {
        self.precision.windows(2).all(|w| w[0] >= w[1])
    }
}

/// Evaluation of one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metrics: Metrics,
    pub count: usize,
    /// `(sample_id, IoU)` sorted by id.
    pub per_sample: Vec<(usize, f64)>,
}

impl EvalReport {
    /// Aggregate per-sample IoUs after sorting by sample id.
    pub fn from_per_sample(mut per_sample: Vec<(usize, f64)>) -> Result<Self> {
        per_sample.sort_by_key(|&(id, _)| id);
        let ious: Vec<f64> = per_sample.iter().map(|&(_, v)| v).collect();
        Ok(Self {
            metrics: Metrics::from_ious(&ious)?,
            count: per_sample.len(),
            per_sample,
        })
    }

    /// Two-line TSV: header and values.
    pub fn to_tsv(&self) -> String {
        let values: Vec<String> = self.metrics.values().iter().map(f64::to_string).collect();
        format!("{}\n{}\n", METRIC_HEADER.join("\t"), values.join("\t"))
    }
}
