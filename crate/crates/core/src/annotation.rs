//! Calibration targets derived from held-out predictions.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::predlog::PredictionRecord;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetKind {
    Binary,
    Regression,
}

/// Training signal for a calibrator. Binary targets are encoded as 0.0/1.0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationTarget {
    pub kind: TargetKind,
    pub value: f64,
}

impl CalibrationTarget {
    pub fn binary(positive: bool) -> Self {
        CalibrationTarget {
            kind: TargetKind::Binary,
            value: if positive { 1.0 } else { 0.0 },
        }
    }

    pub fn regression(value: f64) -> Self {
        assert!(
            (0.0..=1.0).contains(&value),
            "regression target {value} outside [0, 1]"
        );
        CalibrationTarget {
            kind: TargetKind::Regression,
            value,
        }
    }

    pub fn is_positive(&self) -> bool {
        self.value == 1.0
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self.kind {
            TargetKind::Binary => self.value == 0.0 || self.value == 1.0,
            TargetKind::Regression => (0.0..=1.0).contains(&self.value),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "{:?} target value {} out of range",
                self.kind, self.value
            )))
        }
    }
}

/// How held-out predictions are turned into targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AnnotationStrategy {
    /// 1 for a correct prediction, 0 otherwise.
    #[serde(rename = "classification")]
    Classification,
    /// `0.5 + maxProb/2` when correct, `0.5 - maxProb/2` when not.
    #[serde(rename = "regression-a1")]
    RegressionA1,
    /// `maxProb` when correct, `0.5 - maxProb/2` when not.
    #[serde(rename = "regression-a2")]
    RegressionA2,
}

impl AnnotationStrategy {
    pub const ALL: [AnnotationStrategy; 3] = [
        AnnotationStrategy::Classification,
        AnnotationStrategy::RegressionA1,
        AnnotationStrategy::RegressionA2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AnnotationStrategy::Classification => "classification",
            AnnotationStrategy::RegressionA1 => "regression-a1",
            AnnotationStrategy::RegressionA2 => "regression-a2",
        }
    }

    pub fn target_kind(self) -> TargetKind {
        match self {
            AnnotationStrategy::Classification => TargetKind::Binary,
            _ => TargetKind::Regression,
        }
    }

    pub fn annotate(self, record: &PredictionRecord) -> CalibrationTarget {
        match self {
            AnnotationStrategy::Classification => annotate_classification(record),
            AnnotationStrategy::RegressionA1 => annotate_regression_a1(record),
            AnnotationStrategy::RegressionA2 => annotate_regression_a2(record),
        }
    }
}

impl fmt::Display for AnnotationStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AnnotationStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "classification" | "binary" => Ok(AnnotationStrategy::Classification),
            "regression-a1" | "a1" => Ok(AnnotationStrategy::RegressionA1),
            "regression-a2" | "a2" => Ok(AnnotationStrategy::RegressionA2),
            other => Err(Error::InvalidArgument(format!(
                "unknown strategy {other:?} (expected classification, regression-a1 or regression-a2)"
            ))),
        }
    }
}

/// 1 iff the prediction matches the gold label.
pub fn correctness(record: &PredictionRecord) -> u8 {
    u8::from(record.predicted == record.gold)
}

pub fn annotate_classification(record: &PredictionRecord) -> CalibrationTarget {
    CalibrationTarget::binary(record.is_correct())
}

/// Score for a correct (`correct = true`) or incorrect prediction with
/// maximum probability `max_prob`.
pub fn regression_a1_score(max_prob: f64, correct: bool) -> f64 {
    if correct {
        0.5 + max_prob / 2.0
    } else {
        0.5 - max_prob / 2.0
    }
}

pub fn regression_a2_score(max_prob: f64, correct: bool) -> f64 {
    if correct {
        max_prob
    } else {
        0.5 - max_prob / 2.0
    }
}

pub fn annotate_regression_a1(record: &PredictionRecord) -> CalibrationTarget {
    CalibrationTarget::regression(regression_a1_score(record.max_prob(), record.is_correct()))
}

pub fn annotate_regression_a2(record: &PredictionRecord) -> CalibrationTarget {
    CalibrationTarget::regression(regression_a2_score(record.max_prob(), record.is_correct()))
}

/// Counts and spread of a set of targets, for the `annotate` summary.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TargetSummary {
    pub count: usize,
    pub positives: usize,
    pub negatives: usize,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl TargetSummary {
    pub fn of(entries: &[(PredictionRecord, CalibrationTarget)]) -> Self {
        let mut s = TargetSummary {
            count: 0,
            positives: 0,
            negatives: 0,
            mean: 0.0,
            min: f64::INFINITY,
            max: f64::NEG_INFINITY,
        };
        let mut total = 0.0;
        for (r, t) in entries {
            s.count += 1;
            total += t.value;
            s.min = s.min.min(t.value);
            s.max = s.max.max(t.value);
            if r.is_correct() {
                s.positives += 1;
            } else {
                s.negatives += 1;
            }
        }
        if s.count > 0 {
            s.mean = total / s.count as f64;
        }
        s
    }
}
