//! Calibrator with one acceptance class and `n` rejection classes.
//!
//! Class 0 accepts; classes `1..=n` reject. Positive (correct) examples are
//! always labeled 0. Negative examples are relabeled once per epoch (neural
//! backend) or per refit round (forest backend) from the current model:
//!
//! - predicted a rejection class: keep it;
//! - predicted class 0: a uniformly random rejection class, or the most
//!   probable rejection class, depending on the variant.
//!
//! Before any model exists (round 0) every negative draws a random
//! rejection class. Confidence is the probability of class 0.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forest::{self, Forest, ForestParams};
use crate::neural::{self, Mlp, MlpSpec};
use crate::predlog::argmax;

pub const ACCEPT_CLASS: usize = 0;
pub const DEFAULT_FOREST_ROUNDS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RejectionVariant {
    Random,
    Argmax,
}

impl fmt::Display for RejectionVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RejectionVariant::Random => "random",
            RejectionVariant::Argmax => "argmax",
        })
    }
}

impl FromStr for RejectionVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(RejectionVariant::Random),
            "argmax" => Ok(RejectionVariant::Argmax),
            other => Err(Error::InvalidArgument(format!(
                "unknown rejection variant {other:?} (expected random or argmax)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RejectionScheme {
    pub n_rejection: usize,
    pub variant: RejectionVariant,
}

impl RejectionScheme {
    pub fn new(n_rejection: usize, variant: RejectionVariant) -> Result<Self> {
        if n_rejection == 0 {
            return Err(Error::InvalidArgument(
                "n_rejection must be at least 1".into(),
            ));
        }
        Ok(RejectionScheme {
            n_rejection,
            variant,
        })
    }

    pub fn n_classes(&self) -> usize {
        1 + self.n_rejection
    }
}

/// Gold class for one example given the current model's class probabilities.
pub fn assign_gold(
    positive: bool,
    predicted_class: usize,
    class_probs: &[f64],
    variant: RejectionVariant,
    rng: &mut impl Rng,
) -> Result<usize> {
    if class_probs.len() < 2 {
        return Err(Error::InvalidArgument(
            "need at least one rejection class".into(),
        ));
    }
    if predicted_class != argmax(class_probs) {
        return Err(Error::InvalidArgument(format!(
            "predicted class {predicted_class} is not the argmax of the class probabilities"
        )));
    }
    if positive {
        return Ok(ACCEPT_CLASS);
    }
    if predicted_class != ACCEPT_CLASS {
        return Ok(predicted_class);
    }
    let n = class_probs.len() - 1;
    Ok(match variant {
        RejectionVariant::Random => rng.random_range(1..=n),
        RejectionVariant::Argmax => 1 + argmax(&class_probs[1..]),
    })
}

fn bootstrap_labels(positives: &[bool], n_rejection: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    positives
        .iter()
        .map(|&p| {
            if p {
                ACCEPT_CLASS
            } else {
                rng.random_range(1..=n_rejection)
            }
        })
        .collect()
}

fn relabel(
    positives: &[bool],
    probs: &[Vec<f64>],
    variant: RejectionVariant,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>> {
    positives
        .iter()
        .zip(probs)
        .map(|(&p, cp)| assign_gold(p, argmax(cp), cp, variant, rng))
        .collect()
}

fn label_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    rng
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "backend", rename_all = "lowercase")]
pub enum RejectionLearner {
    Neural { spec: MlpSpec },
    Forest { params: ForestParams, rounds: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "backend", rename_all = "lowercase")]
pub enum RejectionBackend {
    Neural { network: Mlp },
    Forest { forest: Forest },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectionModel {
    pub scheme: RejectionScheme,
    pub backend: RejectionBackend,
}

impl RejectionModel {
    pub fn class_probs(&self, x: &[f64]) -> Result<Vec<f64>> {
        match &self.backend {
            RejectionBackend::Neural { network } => network.forward(x),
            RejectionBackend::Forest { forest } => forest.predict_class_proba(x),
        }
    }

    /// Probability of the acceptance class.
    pub fn confidence(&self, x: &[f64]) -> Result<f64> {
        Ok(self.class_probs(x)?[ACCEPT_CLASS])
    }
}

/// Trained model plus the labels used in every round, round 0 first.
#[derive(Debug, Clone)]
pub struct RejectionFit {
    pub model: RejectionModel,
    pub label_stream: Vec<Vec<usize>>,
}

pub fn train_rejection_calibrator(
    x: &[Vec<f64>],
    positives: &[bool],
    scheme: RejectionScheme,
    learner: &RejectionLearner,
) -> Result<RejectionFit> {
    if x.len() != positives.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            found: positives.len(),
        });
    }
    if scheme.n_rejection == 0 {
        return Err(Error::InvalidArgument(
            "n_rejection must be at least 1".into(),
        ));
    }
    let k = scheme.n_classes();
    match learner {
        RejectionLearner::Neural { spec } => {
            if spec.outputs != k {
                return Err(Error::ArityMismatch {
                    expected: k,
                    found: spec.outputs,
                });
            }
            spec.validate_calibrator()?;
            if x.len() < spec.batch_size {
                return Err(Error::InsufficientExamples {
                    needed: spec.batch_size,
                    got: x.len(),
                });
            }
            let mut labels_rng = label_rng(spec.seed);
            let mut shuffle = neural::shuffle_rng(spec.seed);
            let mut network = Mlp::he_uniform(&spec.layer_sizes(x[0].len()), spec.seed)?;
            let mut stream = Vec::with_capacity(spec.epochs);
            for epoch in 0..spec.epochs {
                let labels = if epoch == 0 {
                    bootstrap_labels(positives, scheme.n_rejection, &mut labels_rng)
                } else {
                    let probs = x
                        .iter()
                        .map(|xi| network.forward(xi))
                        .collect::<Result<Vec<_>>>()?;
                    relabel(positives, &probs, scheme.variant, &mut labels_rng)?
                };
                network.sgd_epoch(
                    x,
                    neural::Targets::Classes(&labels),
                    spec.learning_rate,
                    spec.batch_size,
                    &mut shuffle,
                )?;
                stream.push(labels);
            }
            Ok(RejectionFit {
                model: RejectionModel {
                    scheme,
                    backend: RejectionBackend::Neural { network },
                },
                label_stream: stream,
            })
        }
        RejectionLearner::Forest { params, rounds } => {
            if *rounds == 0 {
                return Err(Error::InvalidArgument(
                    "forest backend needs at least one round".into(),
                ));
            }
            let mut labels_rng = label_rng(params.seed);
            let mut labels = bootstrap_labels(positives, scheme.n_rejection, &mut labels_rng);
            let mut stream = vec![labels.clone()];
            let fit = |labels: &[usize]| {
                forest::fit_forest(
                    x,
                    forest::Targets::Classes {
                        labels,
                        n_classes: k,
                    },
                    params,
                )
            };
            let mut model = fit(&labels)?;
            for _ in 1..*rounds {
                let probs = x
                    .iter()
                    .map(|xi| model.predict_class_proba(xi))
                    .collect::<Result<Vec<_>>>()?;
                labels = relabel(positives, &probs, scheme.variant, &mut labels_rng)?;
                model = fit(&labels)?;
                stream.push(labels.clone());
            }
            Ok(RejectionFit {
                model: RejectionModel {
                    scheme,
                    backend: RejectionBackend::Forest { forest: model },
                },
                label_stream: stream,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng() -> ChaCha8Rng {
        label_rng(9)
    }

    #[test]
    fn negative_on_rejection_prediction_keeps_it() {
        let g = assign_gold(
            false,
            2,
            &[0.2, 0.3, 0.5],
            RejectionVariant::Random,
            &mut rng(),
        )
        .unwrap();
        assert_eq!(g, 2);
    }

    #[test]
    fn negative_on_accept_prediction_argmax_variant() {
        let g = assign_gold(
            false,
            0,
            &[0.5, 0.2, 0.3],
            RejectionVariant::Argmax,
            &mut rng(),
        )
        .unwrap();
        assert_eq!(g, 2);
    }

    #[test]
    fn negative_on_accept_prediction_random_variant() {
        let mut r = rng();
        for _ in 0..50 {
            let g = assign_gold(
                false,
                0,
                &[0.6, 0.1, 0.1, 0.2],
                RejectionVariant::Random,
                &mut r,
            )
            .unwrap();
            assert!((1..=3).contains(&g));
        }
    }

    #[test]
    fn positives_always_accept() {
        for probs in [[0.9, 0.05, 0.05], [0.1, 0.8, 0.1], [0.1, 0.1, 0.8]] {
            let p = argmax(&probs);
            for v in [RejectionVariant::Random, RejectionVariant::Argmax] {
                assert_eq!(assign_gold(true, p, &probs, v, &mut rng()).unwrap(), 0);
            }
        }
    }

    #[test]
    fn argument_errors() {
        assert!(assign_gold(false, 0, &[1.0], RejectionVariant::Random, &mut rng()).is_err());
        assert!(assign_gold(false, 1, &[0.9, 0.1], RejectionVariant::Random, &mut rng()).is_err());
        assert!(RejectionScheme::new(0, RejectionVariant::Argmax).is_err());
    }

    #[test]
    fn random_labels_are_seeded() {
        let probs = vec![vec![0.7, 0.1, 0.1, 0.1]; 64];
        let positives = vec![false; 64];
        let a = relabel(
            &positives,
            &probs,
            RejectionVariant::Random,
            &mut label_rng(4),
        )
        .unwrap();
        let b = relabel(
            &positives,
            &probs,
            RejectionVariant::Random,
            &mut label_rng(4),
        )
        .unwrap();
        assert_eq!(a, b);
        assert!(a.iter().any(|&l| l != a[0]));
    }

    #[test]
    fn arity_mismatch() {
        let x = vec![vec![0.0]; 40];
        let pos = vec![true; 40];
        let learner = RejectionLearner::Neural {
            spec: MlpSpec::classification(),
        };
        let scheme = RejectionScheme::new(2, RejectionVariant::Random).unwrap();
        assert!(matches!(
            train_rejection_calibrator(&x, &pos, scheme, &learner),
            Err(Error::ArityMismatch {
                expected: 3,
                found: 2
            })
        ));
    }
}
