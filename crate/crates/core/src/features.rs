//! Feature extraction for calibrators.
//!
//! Layout version 1, for a `K`-class log:
//!
//! | block | width | content |
//! |-------|-------|---------|
//! | `max_prob` | 1 | largest probability |
//! | `prob_sorted_i` | K | probabilities, descending |
//! | `predicted_onehot_i` | K | one-hot of the predicted class |
//! | `premise_length_norm`, `hypothesis_length_norm`, `similarity` | 3 | aux values, lengths divided by the normalization constant, 0 when absent |
//! | `has_premise_length`, `has_hypothesis_length`, `has_similarity` | 3 | 1 when the aux value is present |
//!
//! Any other aux key is ignored here (it stays in the log).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::predlog::PredictionRecord;

pub const LAYOUT_VERSION: u32 = 1;
pub const DEFAULT_LENGTH_NORM: f64 = 100.0;

pub const AUX_PREMISE_LENGTH: &str = "premise_length";
pub const AUX_HYPOTHESIS_LENGTH: &str = "hypothesis_length";
pub const AUX_SIMILARITY: &str = "similarity";

/// `(aux key, feature name, divide by the length constant)`
const AUX_FEATURES: [(&str, &str, bool); 3] = [
    (AUX_PREMISE_LENGTH, "premise_length_norm", true),
    (AUX_HYPOTHESIS_LENGTH, "hypothesis_length_norm", true),
    (AUX_SIMILARITY, "similarity", false),
];

/// Softmax over `logits`, shifted by the maximum for stability.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::InvalidArgument("softmax of an empty vector".into()));
    }
    if let Some(z) = logits.iter().find(|z| !z.is_finite()) {
        return Err(Error::InvalidArgument(format!("non-finite logit {z}")));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// Confidence of the maxProb baseline.
pub fn max_prob(record: &PredictionRecord) -> f64 {
    record.probs.iter().copied().fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureLayout {
    pub version: u32,
    pub num_classes: usize,
    pub length_norm: f64,
}

impl FeatureLayout {
    pub fn new(num_classes: usize) -> Self {
        FeatureLayout {
            version: LAYOUT_VERSION,
            num_classes,
            length_norm: DEFAULT_LENGTH_NORM,
        }
    }

    pub fn with_length_norm(mut self, length_norm: f64) -> Self {
        self.length_norm = length_norm;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != LAYOUT_VERSION {
            return Err(Error::Unsupported(format!(
                "feature layout version {}",
                self.version
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::InvalidArgument("feature layout needs K >= 2".into()));
        }
        if !(self.length_norm.is_finite() && self.length_norm > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "length normalization constant must be positive, got {}",
                self.length_norm
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        1 + 2 * self.num_classes + 2 * AUX_FEATURES.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn names(&self) -> Vec<String> {
        let k = self.num_classes;
        let mut names = vec!["max_prob".to_string()];
        names.extend((1..=k).map(|i| format!("prob_sorted_{i}")));
        names.extend((1..=k).map(|i| format!("predicted_onehot_{i}")));
        names.extend(AUX_FEATURES.iter().map(|(_, name, _)| name.to_string()));
        names.extend(AUX_FEATURES.iter().map(|(key, _, _)| format!("has_{key}")));
        names
    }

    /// Machine-readable description of the layout.
    pub fn describe(&self) -> serde_json::Value {
        serde_json::json!({
            "layout_version": self.version,
            "num_classes": self.num_classes,
            "length_norm": self.length_norm,
            "width": self.len(),
            "names": self.names(),
        })
    }

    pub fn extract(&self, record: &PredictionRecord) -> Result<FeatureVector> {
        self.validate()?;
        let k = self.num_classes;
        if record.probs.len() != k {
            return Err(Error::ArityMismatch {
                expected: k,
                found: record.probs.len(),
            });
        }
        let mut values = Vec::with_capacity(self.len());
        let mut sorted = record.probs.clone();
        sorted.sort_by(|a, b| b.total_cmp(a));
        values.push(sorted[0]);
        values.extend_from_slice(&sorted);
        values.extend((0..k).map(|i| if i == record.predicted { 1.0 } else { 0.0 }));
        for (key, _, is_length) in AUX_FEATURES {
            let v = record.aux.get(key).copied().unwrap_or(0.0);
            values.push(if is_length { v / self.length_norm } else { v });
        }
        for (key, _, _) in AUX_FEATURES {
            values.push(if record.aux.contains_key(key) {
                1.0
            } else {
                0.0
            });
        }
        Ok(FeatureVector {
            layout_version: self.version,
            values,
        })
    }

    pub fn extract_all(&self, records: &[PredictionRecord]) -> Result<Vec<Vec<f64>>> {
        records
            .iter()
            .map(|r| self.extract(r).map(|f| f.values))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub layout_version: u32,
    pub values: Vec<f64>,
}

/// Extracts with the default length constant.
pub fn extract(record: &PredictionRecord, layout_version: u32) -> Result<FeatureVector> {
    FeatureLayout {
        version: layout_version,
        ..FeatureLayout::new(record.num_classes())
    }
    .extract(record)
}
