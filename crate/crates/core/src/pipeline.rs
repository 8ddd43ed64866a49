//! Orchestration behind the `selcal` binary.
//!
//! Each step reads files, calls into the library and writes deterministic
//! outputs. Evaluation output directory layout:
//!
//! | file | columns |
//! |------|---------|
//! | `summary.json` | full report, see [`EvaluationReport`] |
//! | `summary.md` | human-readable tables |
//! | `comparison.tsv` | `calibrator`, then one mean-risk AUC column (percent) per eval set |
//! | `auc.tsv` | `calibrator, dataset, auc_mean, auc_trapezoid, auc_mean_percent, auc_trapezoid_percent, oracle_auc` |
//! | `abstention.tsv` | `calibrator, threshold`, then abstention percent per eval set |
//! | `curves/<label>/<tag>.tsv` | `threshold, coverage, risk, accuracy` |
//! | `cumulative_abstention/<label>.tsv` | `threshold`, then abstention percent per eval set |
//! | `inputs/`, `run.toml` | copies of the inputs and a config that re-runs the evaluation |
//!
//! All TSV files start with one header line and print floats in shortest
//! round-trip form. Table layout version: [`TABLE_VERSION`].

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::annotation::{AnnotationStrategy, TargetSummary};
use crate::calibrator::{
    check_compatible, train_calibrator, Calibrator, CalibratorKind, TrainConfig,
};
use crate::error::{Error, Result};
use crate::metrics::{
    self, abstention_by_threshold, coverage_accuracy, overconfidence_report, relative_improvement,
    risk_coverage_curve, select_threshold, threshold_grid, AbstentionTable, Improvement,
    OverconfidenceReport, RiskCoverageCurve, ScoredExample,
};
use crate::predlog::{self, split_holdout, LogHeader, PredictionRecord};

pub const DEFAULT_TARGET_ACCURACY: f64 = 0.99;
pub const DEFAULT_SELECTION_FRACTION: f64 = 0.5;
pub const SUMMARY_FORMAT: &str = "selcal-evaluation";
pub const TABLE_VERSION: u32 = 1;
pub const BASELINE_LABEL: &str = "maxprob";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub start: f64,
    pub end: f64,
    pub step: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            start: 0.0,
            end: 1.0,
            step: 0.05,
        }
    }
}

impl GridConfig {
    pub fn values(&self) -> Result<Vec<f64>> {
        threshold_grid(self.start, self.end, self.step)
    }
}

/// Everything a command may need. Loaded from TOML, then overridden by flags.
///
/// `seed` is the single source of randomness; it replaces `train.seed`.
/// `selection_fraction = 0` selects the threshold on the full in-domain set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub strategy: Option<AnnotationStrategy>,
    pub calibrator: Option<CalibratorKind>,
    pub target_accuracy: f64,
    pub out: Option<PathBuf>,
    /// Input log of `annotate` (plain) and `train` (annotated).
    pub log: Option<PathBuf>,
    pub holdout_fraction: Option<f64>,
    pub num_classes: Option<usize>,
    /// `path`, `label=path`, or `maxprob` for the built-in baseline.
    pub artifacts: Vec<String>,
    /// Dataset tag to log path.
    pub eval: BTreeMap<String, PathBuf>,
    pub in_domain: Option<String>,
    pub selection_fraction: f64,
    pub grid: GridConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            strategy: None,
            calibrator: None,
            target_accuracy: DEFAULT_TARGET_ACCURACY,
            out: None,
            log: None,
            holdout_fraction: None,
            num_classes: None,
            artifacts: Vec::new(),
            eval: BTreeMap::new(),
            in_domain: None,
            selection_fraction: DEFAULT_SELECTION_FRACTION,
            grid: GridConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parses TOML; relative paths are resolved against `base`.
    pub fn from_toml(text: &str, base: &Path) -> Result<Self> {
        let mut config: RunConfig = toml::from_str(text).map_err(|e| Error::Parse {
            line: 0,
            message: e.to_string(),
        })?;
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        config.out.as_mut().map(resolve);
        config.log.as_mut().map(resolve);
        config.eval.values_mut().for_each(resolve);
        for a in &mut config.artifacts {
            if let ArtifactSpec::File { label, mut path } = ArtifactSpec::parse(a) {
                resolve(&mut path);
                *a = match label {
                    Some(l) => format!("{l}={}", path.display()),
                    None => path.display().to_string(),
                };
            }
        }
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, base)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serialization(e.to_string()))
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn out_dir(&self) -> Result<&Path> {
        self.out
            .as_deref()
            .ok_or_else(|| Error::InvalidArgument("an output directory is required (--out)".into()))
    }

    pub fn eval_options(&self) -> Result<EvalOptions> {
        Ok(EvalOptions {
            target_accuracy: self.target_accuracy,
            selection_fraction: self.selection_fraction,
            seed: self.seed,
            grid: self.grid.values()?,
        })
    }
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        create_dir(parent)?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn to_pretty_json(value: &impl Serialize) -> Result<String> {
    let mut s =
        serde_json::to_string_pretty(value).map_err(|e| Error::Serialization(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnnotateOutcome {
    pub strategy: AnnotationStrategy,
    pub summary: TargetSummary,
    pub annotated: PathBuf,
    /// Records left for upstream training when a holdout split was requested.
    pub remainder: Option<PathBuf>,
}

impl AnnotateOutcome {
    pub fn summary_line(&self) -> String {
        let s = &self.summary;
        format!(
            "strategy: {}, records: {}, positives: {}, negatives: {}, target mean: {:.4}, min: {:.4}, max: {:.4}",
            self.strategy, s.count, s.positives, s.negatives, s.mean, s.min, s.max
        )
    }
}

/// Annotates `log` (or a seeded holdout slice of it) with `strategy`.
///
/// Writes `annotated.jsonl`, plus `remainder.jsonl` when splitting.
pub fn annotate(
    log: &Path,
    strategy: AnnotationStrategy,
    calibrator: Option<CalibratorKind>,
    holdout_fraction: Option<f64>,
    seed: u64,
    out: &Path,
) -> Result<AnnotateOutcome> {
    if let Some(kind) = calibrator {
        check_compatible(kind, strategy)?;
    }
    let (header, records) = predlog::read_log(log)?;
    if records.is_empty() {
        return Err(Error::InsufficientExamples { needed: 1, got: 0 });
    }
    create_dir(out)?;
    let plain = LogHeader {
        strategy: None,
        format_version: predlog::FORMAT_VERSION,
        ..header
    };
    let (holdout, remainder) = match holdout_fraction {
        Some(f) => {
            let (rest, held) = split_holdout(&records, f, seed)?;
            let path = out.join("remainder.jsonl");
            predlog::write_log(&path, &plain, &rest)?;
            (held, Some(path))
        }
        None => (records, None),
    };
    let entries: Vec<_> = holdout
        .into_iter()
        .map(|r| {
            let t = strategy.annotate(&r);
            (r, t)
        })
        .collect();
    let annotated = out.join("annotated.jsonl");
    predlog::write_annotated_log(&annotated, &plain.annotated(strategy), &entries)?;
    Ok(AnnotateOutcome {
        strategy,
        summary: TargetSummary::of(&entries),
        annotated,
        remainder,
    })
}

pub fn artifact_file_name(c: &Calibrator) -> String {
    match c.strategy {
        Some(s) if c.calibrator.needs_training() => format!("{}-{}.json", c.calibrator, s),
        _ => format!("{}.json", c.calibrator),
    }
}

/// Trains `kind` and writes its artifact into `out`. The baseline needs no
/// log, only the class count.
pub fn train(
    log: Option<&Path>,
    kind: CalibratorKind,
    expected_strategy: Option<AnnotationStrategy>,
    num_classes: Option<usize>,
    config: &TrainConfig,
    out: &Path,
) -> Result<(Calibrator, PathBuf)> {
    let calibrator = match log {
        None if kind.needs_training() => {
            return Err(Error::InvalidArgument(format!(
                "calibrator {kind} needs an annotated log (--log)"
            )))
        }
        None => {
            let k = num_classes.ok_or_else(|| {
                Error::InvalidArgument("maxprob without a log needs num_classes".into())
            })?;
            let c = Calibrator::max_prob(k);
            c.layout.validate()?;
            c
        }
        Some(path) => {
            let (header, entries) = predlog::read_annotated_log(path)?;
            let strategy = header
                .strategy
                .expect("annotated header carries a strategy");
            if let Some(expected) = expected_strategy.filter(|&s| s != strategy) {
                return Err(Error::InvalidArgument(format!(
                    "log is annotated with {strategy} but {expected} was requested"
                )));
            }
            if let Some(k) = num_classes.filter(|&k| k != header.num_classes) {
                return Err(Error::ArityMismatch {
                    expected: k,
                    found: header.num_classes,
                });
            }
            train_calibrator(kind, strategy, &entries, header.num_classes, config)?
        }
    };
    create_dir(out)?;
    let path = out.join(artifact_file_name(&calibrator));
    calibrator.save(&path)?;
    Ok((calibrator, path))
}

#[derive(Debug, Clone, PartialEq)]
pub enum ArtifactSpec {
    Builtin,
    File {
        label: Option<String>,
        path: PathBuf,
    },
}

impl ArtifactSpec {
    pub fn parse(s: &str) -> Self {
        if s == BASELINE_LABEL {
            return ArtifactSpec::Builtin;
        }
        match s.split_once('=') {
            Some((label, path)) => ArtifactSpec::File {
                label: Some(label.to_string()),
                path: PathBuf::from(path),
            },
            None => ArtifactSpec::File {
                label: None,
                path: PathBuf::from(s),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledCalibrator {
    pub label: String,
    pub calibrator: Calibrator,
}

fn check_label(label: &str) -> Result<()> {
    let ok = !label.is_empty()
        && label
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || "._-".contains(c));
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "label {label:?} may only use letters, digits, '.', '_' and '-'"
        )))
    }
}

/// Loads artifacts; the maxprob baseline is always present and comes first.
pub fn load_calibrators(specs: &[String], num_classes: usize) -> Result<Vec<LabeledCalibrator>> {
    let mut out = vec![LabeledCalibrator {
        label: BASELINE_LABEL.into(),
        calibrator: Calibrator::max_prob(num_classes),
    }];
    for spec in specs {
        let (label, calibrator) = match ArtifactSpec::parse(spec) {
            ArtifactSpec::Builtin => continue,
            ArtifactSpec::File { label, path } => {
                let c = Calibrator::load(&path)?;
                let label = label.unwrap_or_else(|| {
                    artifact_file_name(&c).trim_end_matches(".json").to_string()
                });
                (label, c)
            }
        };
        check_label(&label)?;
        if calibrator.num_classes() != num_classes {
            return Err(Error::ArityMismatch {
                expected: num_classes,
                found: calibrator.num_classes(),
            });
        }
        if label == BASELINE_LABEL && calibrator.calibrator == CalibratorKind::MaxProb {
            continue;
        }
        if out.iter().any(|l| l.label == label) {
            return Err(Error::InvalidArgument(format!(
                "duplicate calibrator label {label:?}"
            )));
        }
        out.push(LabeledCalibrator { label, calibrator });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSet {
    pub tag: String,
    pub header: LogHeader,
    pub records: Vec<PredictionRecord>,
}

/// Loads each `tag=path` pair, keeping the records whose dataset field is
/// `tag`. All logs must share one class count, which is returned.
pub fn load_eval_sets(eval: &BTreeMap<String, PathBuf>) -> Result<(usize, Vec<EvalSet>)> {
    if eval.is_empty() {
        return Err(Error::InvalidArgument(
            "no evaluation logs given (--eval tag=path)".into(),
        ));
    }
    let mut k = None;
    let mut sets = Vec::new();
    for (tag, path) in eval {
        let (header, records) = predlog::read_log(path)?;
        match k {
            None => k = Some(header.num_classes),
            Some(k) if k != header.num_classes => {
                return Err(Error::ArityMismatch {
                    expected: k,
                    found: header.num_classes,
                })
            }
            _ => {}
        }
        let found: std::collections::BTreeSet<&str> =
            records.iter().map(|r| r.dataset.as_str()).collect();
        if !found.contains(tag.as_str()) {
            return Err(Error::InvalidArgument(format!(
                "{} has no records tagged {tag:?} (tags present: {})",
                path.display(),
                found.into_iter().collect::<Vec<_>>().join(", ")
            )));
        }
        let records = records.into_iter().filter(|r| &r.dataset == tag).collect();
        sets.push(EvalSet {
            tag: tag.clone(),
            header: LogHeader {
                strategy: None,
                format_version: predlog::FORMAT_VERSION,
                ..header
            },
            records,
        });
    }
    Ok((k.expect("at least one log"), sets))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub target_accuracy: f64,
    pub selection_fraction: f64,
    pub seed: u64,
    pub grid: Vec<f64>,
}

/// Reals that may be infinite; infinities travel as the strings `"inf"` and
/// `"-inf"` since JSON has no literal for them.
mod extended_float {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Str(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Str(s) if s == "inf" => Ok(f64::INFINITY),
            Repr::Str(s) if s == "-inf" => Ok(f64::NEG_INFINITY),
            Repr::Str(s) => Err(serde::de::Error::custom(format!("not a number: {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetReport {
    pub tag: String,
    pub n: usize,
    pub accuracy: f64,
    pub auc_mean: f64,
    pub auc_trapezoid: f64,
    pub auc_mean_percent: f64,
    pub auc_trapezoid_percent: f64,
    pub oracle_auc: f64,
    pub worst_auc: f64,
    pub overconfidence: OverconfidenceReport,
    pub coverage_at_threshold: f64,
    /// 1.0 by convention when nothing is answered.
    pub accuracy_at_threshold: f64,
    pub abstention_at_threshold: f64,
    /// Mean-risk AUC change relative to the baseline row.
    pub improvement: Improvement,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub n: usize,
    #[serde(with = "extended_float")]
    pub threshold: f64,
    pub coverage: f64,
    pub accuracy: f64,
    /// True when the target is unattainable and every example is abstained on.
    pub abstains_on_everything: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibratorReport {
    pub label: String,
    pub calibrator: CalibratorKind,
    pub strategy: Option<AnnotationStrategy>,
    pub selection: SelectionReport,
    pub datasets: Vec<DatasetReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub format: String,
    pub version: u32,
    pub target_accuracy: f64,
    pub in_domain: String,
    pub selection_fraction: f64,
    pub seed: u64,
    pub baseline: String,
    pub calibrators: Vec<CalibratorReport>,
}

impl EvaluationReport {
    pub fn tags(&self) -> Vec<&str> {
        self.calibrators
            .first()
            .map(|c| c.datasets.iter().map(|d| d.tag.as_str()).collect())
            .unwrap_or_default()
    }
}

/// Report plus the per-calibrator plot data that goes into separate files.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: EvaluationReport,
    pub curves: Vec<(String, String, RiskCoverageCurve)>,
    pub cumulative: Vec<(String, AbstentionTable)>,
}

fn scored(c: &Calibrator, set: &EvalSet) -> Result<Vec<ScoredExample>> {
    set.records
        .iter()
        .map(|r| ScoredExample::new(c.score(r)?, r.is_correct(), set.tag.as_str()))
        .collect()
}

struct Scored {
    /// Per eval set; the in-domain set holds only its reporting part.
    sets: Vec<Vec<ScoredExample>>,
    selection: Vec<ScoredExample>,
}

pub fn evaluate(
    calibrators: &[LabeledCalibrator],
    sets: &[EvalSet],
    in_domain: &str,
    options: &EvalOptions,
) -> Result<Evaluation> {
    let Some(id_index) = sets.iter().position(|s| s.tag == in_domain) else {
        return Err(Error::InvalidArgument(format!(
            "in-domain tag {in_domain:?} is not among the eval sets"
        )));
    };
    if !(options.target_accuracy > 0.0 && options.target_accuracy <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "target accuracy must lie in (0, 1], got {}",
            options.target_accuracy
        )));
    }
    if !(0.0..1.0).contains(&options.selection_fraction) {
        return Err(Error::InvalidArgument(format!(
            "selection fraction must lie in [0, 1), got {}",
            options.selection_fraction
        )));
    }
    if calibrators.first().map(|c| c.label.as_str()) != Some(BASELINE_LABEL) {
        return Err(Error::InvalidArgument(
            "the first calibrator must be the maxprob baseline".into(),
        ));
    }
    for set in sets {
        if set.records.is_empty() {
            return Err(Error::InsufficientExamples { needed: 1, got: 0 });
        }
    }

    // every (calibrator, set) pair is scored independently
    let pairs: Vec<(usize, usize)> = (0..calibrators.len())
        .flat_map(|c| (0..sets.len()).map(move |s| (c, s)))
        .collect();
    let mut flat = pairs
        .par_iter()
        .map(|&(c, s)| scored(&calibrators[c].calibrator, &sets[s]))
        .collect::<Result<Vec<_>>>()?
        .into_iter();
    let mut scored_all = Vec::with_capacity(calibrators.len());
    for _ in calibrators {
        let mut per_set: Vec<Vec<ScoredExample>> =
            (0..sets.len()).map(|_| flat.next().unwrap()).collect();
        let full = std::mem::take(&mut per_set[id_index]);
        let (report_part, selection) = if options.selection_fraction > 0.0 {
            split_holdout(&full, options.selection_fraction, options.seed)?
        } else {
            (full.clone(), full)
        };
        per_set[id_index] = report_part;
        scored_all.push(Scored {
            sets: per_set,
            selection,
        });
    }

    let curves_per: Vec<Vec<RiskCoverageCurve>> = scored_all
        .iter()
        .map(|s| s.sets.iter().map(|e| risk_coverage_curve(e)).collect())
        .collect::<Result<_>>()?;
    let oracle: Vec<f64> = scored_all[0]
        .sets
        .iter()
        .map(|e| metrics::oracle_auc(e))
        .collect::<Result<_>>()?;
    let worst: Vec<f64> = scored_all[0]
        .sets
        .iter()
        .map(|e| metrics::worst_auc(e))
        .collect::<Result<_>>()?;

    let mut reports = Vec::new();
    let mut curves = Vec::new();
    let mut cumulative = Vec::new();
    for ((lc, s), cs) in calibrators.iter().zip(&scored_all).zip(&curves_per) {
        let threshold = select_threshold(&s.selection, options.target_accuracy)?;
        let sel = coverage_accuracy(&s.selection, threshold);
        let mut datasets = Vec::new();
        for (i, (set, examples)) in sets.iter().zip(&s.sets).enumerate() {
            let curve = &cs[i];
            let at = coverage_accuracy(examples, threshold);
            let base = curves_per[0][i].auc_mean;
            datasets.push(DatasetReport {
                tag: set.tag.clone(),
                n: examples.len(),
                accuracy: coverage_accuracy(examples, f64::NEG_INFINITY).accuracy,
                auc_mean: curve.auc_mean,
                auc_trapezoid: curve.auc_trapezoid,
                auc_mean_percent: curve.auc_mean_percent(),
                auc_trapezoid_percent: curve.auc_trapezoid_percent(),
                oracle_auc: oracle[i],
                worst_auc: worst[i],
                overconfidence: overconfidence_report(examples)?,
                coverage_at_threshold: at.coverage,
                accuracy_at_threshold: at.accuracy,
                abstention_at_threshold: 1.0 - at.coverage,
                improvement: relative_improvement(base, curve.auc_mean, oracle[i])?,
            });
            curves.push((lc.label.clone(), set.tag.clone(), curve.clone()));
        }
        let all: Vec<ScoredExample> = s.sets.iter().flatten().cloned().collect();
        cumulative.push((
            lc.label.clone(),
            abstention_by_threshold(&all, &options.grid)?,
        ));
        reports.push(CalibratorReport {
            label: lc.label.clone(),
            calibrator: lc.calibrator.calibrator,
            strategy: lc.calibrator.strategy,
            selection: SelectionReport {
                n: s.selection.len(),
                threshold,
                coverage: sel.coverage,
                accuracy: sel.accuracy,
                abstains_on_everything: sel.answered == 0,
            },
            datasets,
        });
    }
    Ok(Evaluation {
        report: EvaluationReport {
            format: SUMMARY_FORMAT.into(),
            version: TABLE_VERSION,
            target_accuracy: options.target_accuracy,
            in_domain: in_domain.into(),
            selection_fraction: options.selection_fraction,
            seed: options.seed,
            baseline: BASELINE_LABEL.into(),
            calibrators: reports,
        },
        curves,
        cumulative,
    })
}

fn tsv(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> String {
    let mut s = header.join("\t");
    s.push('\n');
    for row in rows {
        s.push_str(&row.join("\t"));
        s.push('\n');
    }
    s
}

fn num(v: f64) -> String {
    if v == f64::NEG_INFINITY {
        "-inf".into()
    } else {
        format!("{v}")
    }
}

pub fn curve_tsv(curve: &RiskCoverageCurve) -> String {
    tsv(
        &["threshold", "coverage", "risk", "accuracy"],
        curve.points.iter().map(|p| {
            vec![
                num(p.threshold),
                num(p.coverage),
                num(p.risk),
                num(p.selective_accuracy),
            ]
        }),
    )
}

pub fn cumulative_tsv(table: &AbstentionTable) -> String {
    let mut header = vec!["threshold"];
    header.extend(table.rows.iter().map(|(tag, _)| tag.as_str()));
    tsv(
        &header,
        table.thresholds.iter().enumerate().map(|(j, &th)| {
            let mut row = vec![num(th)];
            row.extend(table.rows.iter().map(|(_, r)| num(r[j] * 100.0)));
            row
        }),
    )
}

pub fn comparison_tsv(report: &EvaluationReport) -> String {
    let tags = report.tags();
    let mut header = vec!["calibrator"];
    header.extend(&tags);
    tsv(
        &header,
        report.calibrators.iter().map(|c| {
            let mut row = vec![c.label.clone()];
            row.extend(c.datasets.iter().map(|d| num(d.auc_mean_percent)));
            row
        }),
    )
}

pub fn auc_tsv(report: &EvaluationReport) -> String {
    tsv(
        &[
            "calibrator",
            "dataset",
            "auc_mean",
            "auc_trapezoid",
            "auc_mean_percent",
            "auc_trapezoid_percent",
            "oracle_auc",
        ],
        report.calibrators.iter().flat_map(|c| {
            c.datasets.iter().map(move |d| {
                vec![
                    c.label.clone(),
                    d.tag.clone(),
                    num(d.auc_mean),
                    num(d.auc_trapezoid),
                    num(d.auc_mean_percent),
                    num(d.auc_trapezoid_percent),
                    num(d.oracle_auc),
                ]
            })
        }),
    )
}

pub fn abstention_tsv(report: &EvaluationReport) -> String {
    let tags = report.tags();
    let mut header = vec!["calibrator", "threshold"];
    header.extend(&tags);
    tsv(
        &header,
        report.calibrators.iter().map(|c| {
            let mut row = vec![c.label.clone(), num(c.selection.threshold)];
            row.extend(
                c.datasets
                    .iter()
                    .map(|d| num(d.abstention_at_threshold * 100.0)),
            );
            row
        }),
    )
}

/// Published figures for a BERT-base model fine-tuned on SNLI: mean
/// risk-coverage AUC (percent) on MNLI matched and mismatched dev sets.
pub const REFERENCE_AUC: [(&str, f64, f64); 5] = [
    ("maxProb", 5.25, 6.07),
    ("random-forest classification calibrator", 5.59, 6.49),
    ("random-forest regression calibrator", 4.84, 5.69),
    ("deep classification calibrator", 5.37, 6.15),
    ("deep regression calibrator", 5.15, 5.91),
];

/// Percentage of out-of-distribution reasoning questions abstained on by
/// the same model at the threshold giving 99% SNLI accuracy.
pub const REFERENCE_ABSTENTION: [(&str, f64); 3] = [
    ("maxProb", 61.5),
    ("classification calibrator", 63.9),
    ("regression calibrator", 66.4),
];

fn pct(v: f64) -> String {
    format!("{:.2}", v * 100.0)
}

fn opt_pct(v: Option<f64>) -> String {
    v.map(pct).unwrap_or_else(|| "n/a".into())
}

pub fn render_markdown(report: &EvaluationReport) -> String {
    let tags = report.tags();
    let mut md = String::new();
    let _ = writeln!(md, "# Selective prediction report\n");
    let split = if report.selection_fraction > 0.0 {
        format!(
            "a {}% selection split of `{}` (seed {}); in-domain metrics use the disjoint remainder",
            report.selection_fraction * 100.0,
            report.in_domain,
            report.seed
        )
    } else {
        format!("all of `{}`", report.in_domain)
    };
    let _ = writeln!(
        md,
        "Thresholds target {}% selective accuracy and are selected on {split}.\n",
        report.target_accuracy * 100.0
    );

    let table_head = |md: &mut String, first: &[&str]| {
        let cols: Vec<&str> = first.iter().copied().chain(tags.iter().copied()).collect();
        let _ = writeln!(md, "| {} |", cols.join(" | "));
        let _ = writeln!(md, "|{}", "---|".repeat(cols.len()));
    };

    let _ = writeln!(
        md,
        "## Risk-coverage AUC, mean risk (percent, lower is better)\n"
    );
    table_head(&mut md, &["calibrator"]);
    for c in &report.calibrators {
        let cells: Vec<String> = c
            .datasets
            .iter()
            .map(|d| format!("{:.2}", d.auc_mean_percent))
            .collect();
        let _ = writeln!(md, "| {} | {} |", c.label, cells.join(" | "));
    }
    let oracle: Vec<String> = report.calibrators[0]
        .datasets
        .iter()
        .map(|d| pct(d.oracle_auc))
        .collect();
    let _ = writeln!(md, "| oracle ordering | {} |\n", oracle.join(" | "));

    let _ = writeln!(md, "## Risk-coverage AUC, trapezoid (percent)\n");
    table_head(&mut md, &["calibrator"]);
    for c in &report.calibrators {
        let cells: Vec<String> = c
            .datasets
            .iter()
            .map(|d| format!("{:.2}", d.auc_trapezoid_percent))
            .collect();
        let _ = writeln!(md, "| {} | {} |", c.label, cells.join(" | "));
    }

    let _ = writeln!(md, "\n## Abstention at the selected threshold (percent)\n");
    table_head(&mut md, &["calibrator", "threshold"]);
    for c in &report.calibrators {
        let cells: Vec<String> = c
            .datasets
            .iter()
            .map(|d| pct(d.abstention_at_threshold))
            .collect();
        let _ = writeln!(
            md,
            "| {} | {} | {} |",
            c.label,
            num(c.selection.threshold),
            cells.join(" | ")
        );
    }
    let unattainable: Vec<&str> = report
        .calibrators
        .iter()
        .filter(|c| c.selection.abstains_on_everything)
        .map(|c| c.label.as_str())
        .collect();
    if !unattainable.is_empty() {
        let _ = writeln!(
            md,
            "\nTarget unattainable for {}: the threshold abstains on everything and accuracy is reported as 100% by convention.",
            unattainable.join(", ")
        );
    }

    let _ = writeln!(
        md,
        "\n## Improvement over {} (mean-risk AUC)\n",
        report.baseline
    );
    let _ = writeln!(md, "| calibrator | dataset | absolute (points) | relative to baseline (%) | relative to maximum possible (%) |");
    let _ = writeln!(md, "|---|---|---|---|---|");
    for c in report.calibrators.iter().skip(1) {
        for d in &c.datasets {
            let _ = writeln!(
                md,
                "| {} | {} | {} | {} | {} |",
                c.label,
                d.tag,
                pct(d.improvement.absolute),
                opt_pct(d.improvement.vs_base),
                opt_pct(d.improvement.vs_max_possible)
            );
        }
    }
    let _ = writeln!(md, "\nMaximum possible improvement uses the oracle ordering (all correct answers first) as the best achievable AUC.");

    let _ = writeln!(md, "\n## Overconfidence (percent)\n");
    let _ = writeln!(
        md,
        "| calibrator | dataset | mean confidence | accuracy | gap |"
    );
    let _ = writeln!(md, "|---|---|---|---|---|");
    for c in &report.calibrators {
        for d in &c.datasets {
            let o = &d.overconfidence;
            let _ = writeln!(
                md,
                "| {} | {} | {} | {} | {} |",
                c.label,
                d.tag,
                pct(o.mean_confidence),
                pct(o.accuracy),
                pct(o.gap)
            );
        }
    }

    let _ = writeln!(md, "\n## Reference values\n");
    let _ = writeln!(
        md,
        "Published figures for a BERT-base model fine-tuned on SNLI. They depend on that model and on \
         out-of-distribution sets that are not public, so they are listed for comparison only.\n"
    );
    let _ = writeln!(
        md,
        "| approach | AUC, MNLI matched | AUC, MNLI mismatched |"
    );
    let _ = writeln!(md, "|---|---|---|");
    for (name, m, mm) in REFERENCE_AUC {
        let _ = writeln!(md, "| {name} | {m:.2} | {mm:.2} |");
    }
    let _ = writeln!(
        md,
        "\n| approach | abstained on OOD questions at 99% SNLI accuracy (%) |"
    );
    let _ = writeln!(md, "|---|---|");
    for (name, a) in REFERENCE_ABSTENTION {
        let _ = writeln!(md, "| {name} | {a:.1} |");
    }
    md
}

/// Writes every evaluation output except the input copies.
pub fn write_evaluation(evaluation: &Evaluation, out: &Path) -> Result<()> {
    create_dir(out)?;
    let report = &evaluation.report;
    write_file(&out.join("summary.json"), to_pretty_json(report)?)?;
    write_file(&out.join("summary.md"), render_markdown(report))?;
    write_file(&out.join("comparison.tsv"), comparison_tsv(report))?;
    write_file(&out.join("auc.tsv"), auc_tsv(report))?;
    write_file(&out.join("abstention.tsv"), abstention_tsv(report))?;
    for (label, tag, curve) in &evaluation.curves {
        write_file(
            &out.join("curves").join(label).join(format!("{tag}.tsv")),
            curve_tsv(curve),
        )?;
    }
    for (label, table) in &evaluation.cumulative {
        write_file(
            &out.join("cumulative_abstention")
                .join(format!("{label}.tsv")),
            cumulative_tsv(table),
        )?;
    }
    Ok(())
}

/// Copies the evaluated inputs into `out/inputs` and writes `out/run.toml`
/// so that `evaluate --config out/run.toml` reproduces the bundle.
pub fn write_inputs(
    calibrators: &[LabeledCalibrator],
    sets: &[EvalSet],
    config: &RunConfig,
    out: &Path,
) -> Result<()> {
    let inputs = out.join("inputs");
    create_dir(&inputs)?;
    let mut artifacts = Vec::new();
    for lc in calibrators.iter().skip(1) {
        let name = format!("{}.json", lc.label);
        lc.calibrator.save(inputs.join(&name))?;
        artifacts.push(format!("{}=inputs/{name}", lc.label));
    }
    let mut eval = BTreeMap::new();
    for set in sets {
        let name = format!("{}.jsonl", set.tag);
        predlog::write_log(inputs.join(&name), &set.header, &set.records)?;
        eval.insert(set.tag.clone(), PathBuf::from("inputs").join(name));
    }
    let rerun = RunConfig {
        seed: config.seed,
        target_accuracy: config.target_accuracy,
        artifacts,
        eval,
        in_domain: config.in_domain.clone(),
        selection_fraction: config.selection_fraction,
        grid: config.grid.clone(),
        ..RunConfig::default()
    };
    write_file(&out.join("run.toml"), rerun.to_toml()?)
}

/// Loads everything named in `config`, evaluates and writes the bundle.
pub fn run_evaluate(config: &RunConfig) -> Result<Evaluation> {
    let out = config.out_dir()?;
    let in_domain = config.in_domain.as_deref().ok_or_else(|| {
        Error::InvalidArgument("an in-domain tag is required (--in-domain)".into())
    })?;
    let (k, sets) = load_eval_sets(&config.eval)?;
    let calibrators = load_calibrators(&config.artifacts, k)?;
    let evaluation = evaluate(&calibrators, &sets, in_domain, &config.eval_options()?)?;
    write_evaluation(&evaluation, out)?;
    write_inputs(&calibrators, &sets, config, out)?;
    Ok(evaluation)
}

/// Threshold sweep: for each calibrator and eval set, coverage, risk and
/// accuracy at every grid threshold. Writes `sweep/<label>/<tag>.tsv`.
pub fn run_sweep(config: &RunConfig) -> Result<Vec<PathBuf>> {
    let out = config.out_dir()?;
    let (k, sets) = load_eval_sets(&config.eval)?;
    let calibrators = load_calibrators(&config.artifacts, k)?;
    let grid = config.grid.values()?;
    let jobs: Vec<(usize, usize)> = (0..calibrators.len())
        .flat_map(|c| (0..sets.len()).map(move |s| (c, s)))
        .collect();
    let tables = jobs
        .par_iter()
        .map(|&(c, s)| {
            let examples = scored(&calibrators[c].calibrator, &sets[s])?;
            let rows = grid.iter().map(|&th| {
                let ca = coverage_accuracy(&examples, th);
                let risk = if ca.answered == 0 {
                    0.0
                } else {
                    1.0 - ca.accuracy
                };
                vec![num(th), num(ca.coverage), num(risk), num(ca.accuracy)]
            });
            Ok(tsv(&["threshold", "coverage", "risk", "accuracy"], rows))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut paths = Vec::new();
    for (&(c, s), table) in jobs.iter().zip(tables) {
        let path = out
            .join("sweep")
            .join(&calibrators[c].label)
            .join(format!("{}.tsv", sets[s].tag));
        write_file(&path, table)?;
        paths.push(path);
    }
    Ok(paths)
}

/// Re-renders `summary.md` from the `summary.json` in `dir`.
pub fn run_report(dir: &Path) -> Result<PathBuf> {
    let path = dir.join("summary.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let report: EvaluationReport =
        serde_json::from_str(&text).map_err(|e| Error::Serialization(e.to_string()))?;
    if report.format != SUMMARY_FORMAT || report.version != TABLE_VERSION {
        return Err(Error::Unsupported(format!(
            "summary format {:?} version {}",
            report.format, report.version
        )));
    }
    let md = dir.join("summary.md");
    write_file(&md, render_markdown(&report))?;
    Ok(md)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(id: &str, tag: &str, p: f64, correct: bool) -> PredictionRecord {
        PredictionRecord::new(id, tag, vec![p, 1.0 - p], if correct { 0 } else { 1 })
    }

    #[test]
    fn config_paths_resolve_against_base() {
        let text = r#"
            seed = 4
            out = "run"
            artifacts = ["maxprob", "rf=models/rf.json", "/abs/x.json"]
            [eval]
            dev = "logs/dev.jsonl"
            [train.forest]
            n_trees = 7
        "#;
        let c = RunConfig::from_toml(text, Path::new("/base")).unwrap();
        assert_eq!(c.out.as_deref(), Some(Path::new("/base/run")));
        assert_eq!(c.eval["dev"], PathBuf::from("/base/logs/dev.jsonl"));
        assert_eq!(
            c.artifacts,
            vec!["maxprob", "rf=/base/models/rf.json", "/abs/x.json"]
        );
        assert_eq!(c.train_config().forest.n_trees, 7);
        assert_eq!(c.train_config().seed, 4);
        assert!(RunConfig::from_toml("bogus = 1", Path::new(".")).is_err());
    }

    #[test]
    fn perfectly_ordered_baseline_hits_the_oracle() {
        let records: Vec<_> = (0..10)
            .map(|i| record(&format!("r{i}"), "dev", 0.95 - i as f64 * 0.04, i < 7))
            .collect();
        let sets = vec![EvalSet {
            tag: "dev".into(),
            header: crate::synthetic::header(2),
            records,
        }];
        let cals = load_calibrators(&[], 2).unwrap();
        let options = EvalOptions {
            target_accuracy: 0.99,
            selection_fraction: 0.0,
            seed: 0,
            grid: vec![0.5, 0.9],
        };
        let e = evaluate(&cals, &sets, "dev", &options).unwrap();
        let d = &e.report.calibrators[0].datasets[0];
        assert_eq!(d.auc_mean, d.oracle_auc);
        assert_eq!(e.report.calibrators[0].selection.coverage, 0.7);
    }

    #[test]
    fn threshold_survives_json() {
        let s = SelectionReport {
            n: 1,
            threshold: f64::NEG_INFINITY,
            coverage: 1.0,
            accuracy: 1.0,
            abstains_on_everything: false,
        };
        let text = serde_json::to_string(&s).unwrap();
        assert!(text.contains("\"-inf\""));
        assert_eq!(serde_json::from_str::<SelectionReport>(&text).unwrap(), s);
    }

    #[test]
    fn unknown_in_domain_tag() {
        let sets = vec![EvalSet {
            tag: "dev".into(),
            header: crate::synthetic::header(2),
            records: vec![record("a", "dev", 0.9, true)],
        }];
        let cals = load_calibrators(&[], 2).unwrap();
        let options = EvalOptions {
            target_accuracy: 0.99,
            selection_fraction: 0.0,
            seed: 0,
            grid: vec![],
        };
        assert!(evaluate(&cals, &sets, "ood", &options).is_err());
    }
}
