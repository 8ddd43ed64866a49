//! Uniform calibrator interface and its serialized artifact.
//!
//! Every approach, including the maxProb baseline, is a [`Calibrator`] that
//! maps a record to a confidence in `[0, 1]`. Artifacts are pretty-printed
//! JSON tagged with a format name and version.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::annotation::{AnnotationStrategy, CalibrationTarget};
use crate::error::{Error, Result};
use crate::features::{FeatureLayout, DEFAULT_LENGTH_NORM};
use crate::forest::{self, Criterion, Forest, ForestParams};
use crate::neural::{self, Mlp, MlpSpec};
use crate::predlog::PredictionRecord;
use crate::rejection::{
    self, RejectionLearner, RejectionModel, RejectionScheme, RejectionVariant,
    DEFAULT_FOREST_ROUNDS,
};

pub const ARTIFACT_FORMAT: &str = "selcal-calibrator";
pub const ARTIFACT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CalibratorKind {
    #[serde(rename = "maxprob")]
    MaxProb,
    RfClass,
    RfRegress,
    MlpClass,
    MlpRegress,
    Rejection,
}

impl CalibratorKind {
    pub const ALL: [CalibratorKind; 6] = [
        CalibratorKind::MaxProb,
        CalibratorKind::RfClass,
        CalibratorKind::RfRegress,
        CalibratorKind::MlpClass,
        CalibratorKind::MlpRegress,
        CalibratorKind::Rejection,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CalibratorKind::MaxProb => "maxprob",
            CalibratorKind::RfClass => "rf-class",
            CalibratorKind::RfRegress => "rf-regress",
            CalibratorKind::MlpClass => "mlp-class",
            CalibratorKind::MlpRegress => "mlp-regress",
            CalibratorKind::Rejection => "rejection",
        }
    }

    pub fn needs_training(self) -> bool {
        self != CalibratorKind::MaxProb
    }

    /// Annotation strategies this calibrator can be trained on.
    pub fn strategies(self) -> &'static [AnnotationStrategy] {
        use AnnotationStrategy::*;
        match self {
            CalibratorKind::MaxProb => &[Classification, RegressionA1, RegressionA2],
            CalibratorKind::RfClass | CalibratorKind::MlpClass | CalibratorKind::Rejection => {
                &[Classification]
            }
            CalibratorKind::RfRegress | CalibratorKind::MlpRegress => &[RegressionA1, RegressionA2],
        }
    }

    pub fn supports(self, strategy: AnnotationStrategy) -> bool {
        self.strategies().contains(&strategy)
    }
}

impl fmt::Display for CalibratorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CalibratorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CalibratorKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = CalibratorKind::ALL.iter().map(|k| k.name()).collect();
                Error::InvalidArgument(format!(
                    "unknown calibrator {s:?} (expected one of {})",
                    names.join(", ")
                ))
            })
    }
}

/// Every supported `calibrator/strategy` pair, for error messages.
pub fn valid_pairs() -> String {
    CalibratorKind::ALL
        .iter()
        .flat_map(|k| k.strategies().iter().map(move |s| format!("{k}/{s}")))
        .collect::<Vec<_>>()
        .join(", ")
}

pub fn check_compatible(kind: CalibratorKind, strategy: AnnotationStrategy) -> Result<()> {
    if kind.supports(strategy) {
        Ok(())
    } else {
        Err(Error::Unsupported(format!(
            "calibrator {kind} cannot train on {strategy} targets; valid pairs: {}",
            valid_pairs()
        )))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForestSettings {
    pub n_trees: usize,
    pub max_depth: Option<usize>,
    pub min_leaf: usize,
    pub features_per_split: Option<usize>,
    pub bootstrap: bool,
}

impl Default for ForestSettings {
    fn default() -> Self {
        let p = ForestParams::classifier();
        ForestSettings {
            n_trees: p.n_trees,
            max_depth: p.max_depth,
            min_leaf: p.min_leaf,
            features_per_split: p.features_per_split,
            bootstrap: p.bootstrap,
        }
    }
}

impl ForestSettings {
    pub fn params(&self, criterion: Criterion, seed: u64) -> ForestParams {
        ForestParams {
            n_trees: self.n_trees,
            max_depth: self.max_depth,
            min_leaf: self.min_leaf,
            features_per_split: self.features_per_split,
            bootstrap: self.bootstrap,
            seed,
            criterion,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MlpSettings {
    pub hidden: Vec<usize>,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for MlpSettings {
    fn default() -> Self {
        let s = MlpSpec::classification();
        MlpSettings {
            hidden: s.hidden,
            learning_rate: s.learning_rate,
            epochs: s.epochs,
            batch_size: s.batch_size,
        }
    }
}

impl MlpSettings {
    pub fn spec(&self, outputs: usize, seed: u64) -> MlpSpec {
        MlpSpec {
            hidden: self.hidden.clone(),
            outputs,
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RejectionBackendKind {
    Neural,
    Forest,
}

impl FromStr for RejectionBackendKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "neural" => Ok(RejectionBackendKind::Neural),
            "forest" => Ok(RejectionBackendKind::Forest),
            other => Err(Error::InvalidArgument(format!(
                "unknown rejection backend {other:?} (expected neural or forest)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RejectionSettings {
    pub n_rejection: usize,
    pub variant: RejectionVariant,
    pub backend: RejectionBackendKind,
    pub rounds: usize,
}

impl Default for RejectionSettings {
    fn default() -> Self {
        RejectionSettings {
            n_rejection: 2,
            variant: RejectionVariant::Argmax,
            backend: RejectionBackendKind::Neural,
            rounds: DEFAULT_FOREST_ROUNDS,
        }
    }
}

/// Learner hyperparameters shared by every calibrator kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub length_norm: f64,
    pub forest: ForestSettings,
    pub mlp: MlpSettings,
    pub rejection: RejectionSettings,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            length_norm: DEFAULT_LENGTH_NORM,
            forest: ForestSettings::default(),
            mlp: MlpSettings::default(),
            rejection: RejectionSettings::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum CalibratorModel {
    #[serde(rename = "maxprob")]
    MaxProb,
    Forest {
        forest: Forest,
    },
    Mlp {
        network: Mlp,
    },
    Rejection {
        model: RejectionModel,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Calibrator {
    pub format: String,
    pub version: u32,
    pub calibrator: CalibratorKind,
    /// Strategy of the training targets; `None` for the untrained baseline.
    pub strategy: Option<AnnotationStrategy>,
    pub layout: FeatureLayout,
    pub model: CalibratorModel,
}

impl Calibrator {
    pub fn max_prob(num_classes: usize) -> Self {
        Calibrator {
            format: ARTIFACT_FORMAT.into(),
            version: ARTIFACT_VERSION,
            calibrator: CalibratorKind::MaxProb,
            strategy: None,
            layout: FeatureLayout::new(num_classes),
            model: CalibratorModel::MaxProb,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.layout.num_classes
    }

    /// Confidence for one record, always in `[0, 1]`.
    pub fn score(&self, record: &PredictionRecord) -> Result<f64> {
        if record.probs.len() != self.layout.num_classes {
            return Err(Error::ArityMismatch {
                expected: self.layout.num_classes,
                found: record.probs.len(),
            });
        }
        if let CalibratorModel::MaxProb = self.model {
            return Ok(record.max_prob());
        }
        let x = self.layout.extract(record)?.values;
        let c = match &self.model {
            CalibratorModel::MaxProb => unreachable!(),
            CalibratorModel::Forest { forest } => match self.calibrator {
                CalibratorKind::RfRegress => forest.predict_value(&x)?,
                _ => forest.predict_class_proba(&x)?[1],
            },
            CalibratorModel::Mlp { network } => {
                let out = network.forward(&x)?;
                if out.len() == 1 {
                    out[0]
                } else {
                    out[1]
                }
            }
            CalibratorModel::Rejection { model } => model.confidence(&x)?,
        };
        Ok(c.clamp(0.0, 1.0))
    }

    pub fn scores(&self, records: &[PredictionRecord]) -> Result<Vec<f64>> {
        records.iter().map(|r| self.score(r)).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s =
            serde_json::to_string_pretty(self).map_err(|e| Error::Serialization(e.to_string()))?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Calibrator =
            serde_json::from_str(text).map_err(|e| Error::Serialization(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    fn validate(&self) -> Result<()> {
        if self.format != ARTIFACT_FORMAT {
            return Err(Error::Unsupported(format!(
                "artifact format {:?}",
                self.format
            )));
        }
        if self.version != ARTIFACT_VERSION {
            return Err(Error::Unsupported(format!(
                "artifact version {}",
                self.version
            )));
        }
        self.layout.validate()?;
        let consistent = matches!(
            (self.calibrator, &self.model),
            (CalibratorKind::MaxProb, CalibratorModel::MaxProb)
                | (
                    CalibratorKind::RfClass | CalibratorKind::RfRegress,
                    CalibratorModel::Forest { .. }
                )
                | (
                    CalibratorKind::MlpClass | CalibratorKind::MlpRegress,
                    CalibratorModel::Mlp { .. }
                )
                | (CalibratorKind::Rejection, CalibratorModel::Rejection { .. })
        );
        if !consistent {
            return Err(Error::Serialization(format!(
                "calibrator {} does not match its model payload",
                self.calibrator
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// Trains `kind` on annotated records. All targets must come from `strategy`.
pub fn train_calibrator(
    kind: CalibratorKind,
    strategy: AnnotationStrategy,
    entries: &[(PredictionRecord, CalibrationTarget)],
    num_classes: usize,
    config: &TrainConfig,
) -> Result<Calibrator> {
    check_compatible(kind, strategy)?;
    let layout = FeatureLayout::new(num_classes).with_length_norm(config.length_norm);
    layout.validate()?;
    if !kind.needs_training() {
        return Ok(Calibrator {
            layout,
            strategy: Some(strategy),
            ..Calibrator::max_prob(num_classes)
        });
    }
    if entries.is_empty() {
        return Err(Error::InsufficientExamples { needed: 1, got: 0 });
    }
    let expected_kind = strategy.target_kind();
    for (r, t) in entries {
        if t.kind != expected_kind {
            return Err(Error::InvalidRecord {
                id: r.id.clone(),
                message: format!("target kind does not match strategy {strategy}"),
            });
        }
    }
    let records: Vec<PredictionRecord> = entries.iter().map(|(r, _)| r.clone()).collect();
    let x = layout.extract_all(&records)?;
    let labels: Vec<usize> = entries
        .iter()
        .map(|(_, t)| t.is_positive() as usize)
        .collect();
    let values: Vec<f64> = entries.iter().map(|(_, t)| t.value).collect();
    let seed = config.seed;
    let model = match kind {
        CalibratorKind::MaxProb => unreachable!(),
        CalibratorKind::RfClass => CalibratorModel::Forest {
            forest: forest::fit_forest(
                &x,
                forest::Targets::Classes {
                    labels: &labels,
                    n_classes: 2,
                },
                &config.forest.params(Criterion::Gini, seed),
            )?,
        },
        CalibratorKind::RfRegress => CalibratorModel::Forest {
            forest: forest::fit_forest(
                &x,
                forest::Targets::Values(&values),
                &config.forest.params(Criterion::Mse, seed),
            )?,
        },
        CalibratorKind::MlpClass | CalibratorKind::MlpRegress => {
            let (outputs, targets) = if kind == CalibratorKind::MlpClass {
                (2, neural::Targets::Classes(&labels))
            } else {
                (1, neural::Targets::Values(&values))
            };
            let spec = config.mlp.spec(outputs, seed);
            spec.validate_calibrator()?;
            let (network, _) = neural::train(&x, targets, &spec)?;
            CalibratorModel::Mlp { network }
        }
        CalibratorKind::Rejection => {
            let r = &config.rejection;
            let scheme = RejectionScheme::new(r.n_rejection, r.variant)?;
            let learner = match r.backend {
                RejectionBackendKind::Neural => RejectionLearner::Neural {
                    spec: config.mlp.spec(scheme.n_classes(), seed),
                },
                RejectionBackendKind::Forest => RejectionLearner::Forest {
                    params: config.forest.params(Criterion::Gini, seed),
                    rounds: r.rounds,
                },
            };
            let positives: Vec<bool> = entries.iter().map(|(_, t)| t.is_positive()).collect();
            let fit = rejection::train_rejection_calibrator(&x, &positives, scheme, &learner)?;
            CalibratorModel::Rejection { model: fit.model }
        }
    };
    Ok(Calibrator {
        format: ARTIFACT_FORMAT.into(),
        version: ARTIFACT_VERSION,
        calibrator: kind,
        strategy: Some(strategy),
        layout,
        model,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotation::AnnotationStrategy::*;

    fn toy(n: usize) -> Vec<(PredictionRecord, CalibrationTarget)> {
        (0..n)
            .map(|i| {
                let p = 0.5 + 0.5 * (i as f64 + 0.5) / n as f64;
                let gold = if i % 3 == 0 { 1 } else { 0 };
                let r = PredictionRecord::new(format!("r{i}"), "toy", vec![p, 1.0 - p], gold);
                (r, CalibrationTarget::binary(false))
            })
            .collect()
    }

    fn annotated(
        strategy: AnnotationStrategy,
        n: usize,
    ) -> Vec<(PredictionRecord, CalibrationTarget)> {
        toy(n)
            .into_iter()
            .map(|(r, _)| {
                let t = strategy.annotate(&r);
                (r, t)
            })
            .collect()
    }

    fn small_config() -> TrainConfig {
        TrainConfig {
            seed: 3,
            forest: ForestSettings {
                n_trees: 5,
                ..ForestSettings::default()
            },
            mlp: MlpSettings {
                hidden: vec![4],
                epochs: 3,
                batch_size: 8,
                ..MlpSettings::default()
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn names_round_trip() {
        for k in CalibratorKind::ALL {
            assert_eq!(k.name().parse::<CalibratorKind>().unwrap(), k);
            assert_eq!(
                serde_json::to_string(&k).unwrap(),
                format!("\"{}\"", k.name())
            );
        }
        assert!("svm".parse::<CalibratorKind>().is_err());
    }

    #[test]
    fn mismatch_lists_valid_pairs() {
        let data = annotated(RegressionA1, 20);
        let err = train_calibrator(
            CalibratorKind::RfClass,
            RegressionA1,
            &data,
            2,
            &small_config(),
        )
        .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("rf-regress/regression-a1"), "{msg}");
        assert!(msg.contains("rejection/classification"), "{msg}");
        assert_eq!(err.category(), "unsupported");
    }

    #[test]
    fn maxprob_scores_max_probability() {
        let c = Calibrator::max_prob(2);
        let r = PredictionRecord::new("a", "d", vec![0.3, 0.7], 1);
        assert_eq!(c.score(&r).unwrap(), 0.7);
        let r3 = PredictionRecord::new("b", "d", vec![0.2, 0.3, 0.5], 1);
        assert!(matches!(
            c.score(&r3),
            Err(Error::ArityMismatch {
                expected: 2,
                found: 3
            })
        ));
    }

    #[test]
    fn every_kind_trains_and_scores_in_range() {
        for kind in CalibratorKind::ALL {
            let strategy = kind.strategies()[0];
            let data = annotated(strategy, 40);
            let c = train_calibrator(kind, strategy, &data, 2, &small_config()).unwrap();
            for (r, _) in &data {
                let s = c.score(r).unwrap();
                assert!((0.0..=1.0).contains(&s), "{kind}: {s}");
            }
            let back = Calibrator::from_json(&c.to_json().unwrap()).unwrap();
            assert_eq!(back.to_json().unwrap(), c.to_json().unwrap());
        }
    }

    #[test]
    fn training_is_byte_deterministic() {
        let data = annotated(RegressionA1, 40);
        let a = train_calibrator(
            CalibratorKind::RfRegress,
            RegressionA1,
            &data,
            2,
            &small_config(),
        )
        .unwrap();
        let b = train_calibrator(
            CalibratorKind::RfRegress,
            RegressionA1,
            &data,
            2,
            &small_config(),
        )
        .unwrap();
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
    }

    #[test]
    fn mlp_needs_a_full_batch() {
        let data = annotated(RegressionA1, 10);
        let config = TrainConfig::default();
        let err = train_calibrator(CalibratorKind::MlpRegress, RegressionA1, &data, 2, &config)
            .unwrap_err();
        assert!(matches!(
            err,
            Error::InsufficientExamples {
                needed: 32,
                got: 10
            }
        ));
    }

    #[test]
    fn rejects_foreign_artifacts() {
        let mut c = Calibrator::max_prob(2);
        c.version = 7;
        let text = serde_json::to_string(&c).unwrap();
        assert!(matches!(
            Calibrator::from_json(&text),
            Err(Error::Unsupported(_))
        ));
        assert!(Calibrator::from_json("{}").is_err());
    }
}
