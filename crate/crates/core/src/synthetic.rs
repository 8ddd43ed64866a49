//! Seeded synthetic prediction logs with a controllable distribution shift.
//!
//! Each record carries a `similarity` aux value `s`. The synthetic model is
//! correct with probability `min(1, 0.5 + 0.6 s)`. In distribution its
//! max probability is a smooth increasing function of `s` plus uniform
//! noise; out of distribution it is drawn from a high range that ignores
//! `s`, so the model is overconfident and maxProb ranks poorly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{AUX_HYPOTHESIS_LENGTH, AUX_PREMISE_LENGTH, AUX_SIMILARITY};
use crate::predlog::{LogHeader, PredictionRecord};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum ConfidenceModel {
    /// Max probability = `1/2 + (0.999 - 1/2) * logistic(6 (s + e - 1/2))`
    /// with `e ~ U(-noise, noise)`.
    Tracking { noise: f64 },
    /// Max probability ~ U(low, high), independent of correctness.
    Overconfident { low: f64, high: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub dataset: String,
    pub num_classes: usize,
    pub n: usize,
    pub similarity_low: f64,
    pub similarity_high: f64,
    pub confidence: ConfidenceModel,
}

const MAX_PROB_CEILING: f64 = 0.999;

impl SyntheticSpec {
    pub fn in_distribution(dataset: impl Into<String>, n: usize) -> Self {
        SyntheticSpec {
            dataset: dataset.into(),
            num_classes: 2,
            n,
            similarity_low: 0.0,
            similarity_high: 1.0,
            confidence: ConfidenceModel::Tracking { noise: 0.15 },
        }
    }

    pub fn shifted(dataset: impl Into<String>, n: usize) -> Self {
        SyntheticSpec {
            dataset: dataset.into(),
            num_classes: 2,
            n,
            similarity_low: 0.0,
            similarity_high: 0.6,
            confidence: ConfidenceModel::Overconfident {
                low: 0.75,
                high: MAX_PROB_CEILING,
            },
        }
    }

    fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::InvalidArgument("synthetic logs need K >= 2".into()));
        }
        if !(0.0 <= self.similarity_low
            && self.similarity_low <= self.similarity_high
            && self.similarity_high <= 1.0)
        {
            return Err(Error::InvalidArgument(
                "similarity range must lie in [0, 1]".into(),
            ));
        }
        if let ConfidenceModel::Overconfident { low, high } = self.confidence {
            if !(low <= high && high <= MAX_PROB_CEILING) {
                return Err(Error::InvalidArgument(format!(
                    "overconfident range [{low}, {high}] must be ordered and below {MAX_PROB_CEILING}"
                )));
            }
        }
        Ok(())
    }
}

pub fn correctness_probability(similarity: f64) -> f64 {
    (0.5 + 0.6 * similarity).min(1.0)
}

/// Header for a synthetic log with `k` classes.
pub fn header(num_classes: usize) -> LogHeader {
    LogHeader::new(
        (0..num_classes).map(|i| format!("class{i}")).collect(),
        "synthetic",
    )
}

pub fn generate(spec: &SyntheticSpec, seed: u64) -> Result<Vec<PredictionRecord>> {
    spec.validate()?;
    let k = spec.num_classes;
    // Keep the winner strictly above the uniform share so it stays the argmax.
    let floor = 1.0 / k as f64 + 0.01;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(spec.n);
    for i in 0..spec.n {
        let s = rng.random_range(spec.similarity_low..=spec.similarity_high);
        let p_correct = correctness_probability(s);
        let correct = rng.random::<f64>() < p_correct;
        let m = match spec.confidence {
            ConfidenceModel::Tracking { noise } => {
                let z = 6.0 * (s + rng.random_range(-noise..=noise) - 0.5);
                0.5 + (MAX_PROB_CEILING - 0.5) / (1.0 + (-z).exp())
            }
            ConfidenceModel::Overconfident { low, high } => rng.random_range(low..=high),
        }
        .clamp(floor, MAX_PROB_CEILING);
        let predicted = rng.random_range(0..k);
        let gold = if correct {
            predicted
        } else {
            (predicted + rng.random_range(1..k)) % k
        };
        let rest = (1.0 - m) / (k - 1) as f64;
        let probs = (0..k)
            .map(|c| if c == predicted { m } else { rest })
            .collect();
        let premise = rng.random_range(5..60) as f64;
        let hypothesis = rng.random_range(3..25) as f64;
        let mut r = PredictionRecord::new(
            format!("{}-{i:05}", spec.dataset),
            spec.dataset.clone(),
            probs,
            gold,
        )
        .with_aux(AUX_PREMISE_LENGTH, premise)
        .with_aux(AUX_HYPOTHESIS_LENGTH, hypothesis)
        .with_aux(AUX_SIMILARITY, s);
        r.validate(k)?;
        records.push(r);
    }
    Ok(records)
}

/// Holdout for calibrator training, an in-distribution evaluation set and a
/// shifted evaluation set, each from its own seed stream.
#[derive(Debug, Clone)]
pub struct ShiftBenchmark {
    pub holdout: Vec<PredictionRecord>,
    pub in_domain: Vec<PredictionRecord>,
    pub ood: Vec<PredictionRecord>,
}

pub const IN_DOMAIN_TAG: &str = "synthetic-id";
pub const OOD_TAG: &str = "synthetic-ood";

pub fn shift_benchmark(seed: u64, holdout: usize, eval: usize) -> Result<ShiftBenchmark> {
    Ok(ShiftBenchmark {
        holdout: generate(
            &SyntheticSpec::in_distribution("synthetic-holdout", holdout),
            seed,
        )?,
        in_domain: generate(
            &SyntheticSpec::in_distribution(IN_DOMAIN_TAG, eval),
            seed.wrapping_add(1),
        )?,
        ood: generate(&SyntheticSpec::shifted(OOD_TAG, eval), seed.wrapping_add(2))?,
    })
}
