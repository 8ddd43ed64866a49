//! Prediction logs.
//!
//! A log is UTF-8, one JSON object per line. The first line is the header,
//! every following line is one prediction of the upstream model:
//!
//! ```text
//! {"format_version":1,"num_classes":3,"class_names":["entailment","neutral","contradiction"],"source_model":"bert-base"}
//! {"id":"dev-0","dataset":"snli-dev","probs":[0.2,0.3,0.5],"predicted":2,"gold":2,"aux":{"premise_length":14.0}}
//! ```
//!
//! Annotated logs use `format_version` 2, name the annotation strategy in the
//! header and carry a `target` object on every record.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::annotation::{AnnotationStrategy, CalibrationTarget};
use crate::error::{Error, Result};

/// Plain prediction log.
pub const FORMAT_VERSION: u32 = 1;
/// Prediction log with per-record calibration targets.
pub const ANNOTATED_FORMAT_VERSION: u32 = 2;

/// Maximum allowed deviation of `sum(probs)` from 1.
pub const NORMALIZATION_TOLERANCE: f64 = 1e-6;
/// Deviations below this are accumulation noise and left untouched, so that
/// canonical files survive a read/write cycle byte for byte.
const RENORMALIZE_ABOVE: f64 = 1e-12;

pub const DEFAULT_HOLDOUT_FRACTION: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogHeader {
    pub format_version: u32,
    pub num_classes: usize,
    pub class_names: Vec<String>,
    pub source_model: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strategy: Option<AnnotationStrategy>,
}

impl LogHeader {
    pub fn new(class_names: Vec<String>, source_model: impl Into<String>) -> Self {
        LogHeader {
            format_version: FORMAT_VERSION,
            num_classes: class_names.len(),
            class_names,
            source_model: source_model.into(),
            strategy: None,
        }
    }

    /// Header for an annotated copy of a log.
    pub fn annotated(&self, strategy: AnnotationStrategy) -> Self {
        LogHeader {
            format_version: ANNOTATED_FORMAT_VERSION,
            strategy: Some(strategy),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.format_version {
            FORMAT_VERSION => {
                if self.strategy.is_some() {
                    return Err(Error::InvalidArgument(
                        "format_version 1 headers cannot name a strategy".into(),
                    ));
                }
            }
            ANNOTATED_FORMAT_VERSION => {
                if self.strategy.is_none() {
                    return Err(Error::InvalidArgument(
                        "format_version 2 headers must name a strategy".into(),
                    ));
                }
            }
            v => return Err(Error::Unsupported(format!("log format_version {v}"))),
        }
        if self.num_classes < 2 {
            return Err(Error::InvalidArgument(format!(
                "num_classes must be at least 2, got {}",
                self.num_classes
            )));
        }
        if self.class_names.len() != self.num_classes {
            return Err(Error::ArityMismatch {
                expected: self.num_classes,
                found: self.class_names.len(),
            });
        }
        Ok(())
    }
}

/// One prediction of the upstream model.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRecord {
    pub id: String,
    pub dataset: String,
    pub probs: Vec<f64>,
    pub predicted: usize,
    pub gold: usize,
    pub aux: BTreeMap<String, f64>,
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

impl PredictionRecord {
    /// Builds a record with `predicted` set to the argmax of `probs`.
    pub fn new(
        id: impl Into<String>,
        dataset: impl Into<String>,
        probs: Vec<f64>,
        gold: usize,
    ) -> Self {
        let predicted = argmax(&probs);
        PredictionRecord {
            id: id.into(),
            dataset: dataset.into(),
            probs,
            predicted,
            gold,
            aux: BTreeMap::new(),
        }
    }

    pub fn with_aux(mut self, key: impl Into<String>, value: f64) -> Self {
        self.aux.insert(key.into(), value);
        self
    }

    pub fn num_classes(&self) -> usize {
        self.probs.len()
    }

    pub fn is_correct(&self) -> bool {
        self.predicted == self.gold
    }

    pub fn max_prob(&self) -> f64 {
        self.probs[self.predicted]
    }

    /// Checks every record invariant against a class count `k`, silently
    /// re-normalizing `probs` when the sum is off by less than the tolerance.
    pub fn validate(&mut self, k: usize) -> Result<()> {
        let id = self.id.clone();
        let invalid = |message: String| Error::InvalidRecord {
            id: id.clone(),
            message,
        };
        if self.probs.len() != k {
            return Err(Error::ArityMismatch {
                expected: k,
                found: self.probs.len(),
            });
        }
        if let Some(p) = self.probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(invalid(format!("probability {p} outside [0, 1]")));
        }
        let sum: f64 = self.probs.iter().sum();
        if (sum - 1.0).abs() > NORMALIZATION_TOLERANCE {
            return Err(invalid(format!(
                "probabilities sum to {sum}, not 1 within {NORMALIZATION_TOLERANCE}"
            )));
        }
        let winner = argmax(&self.probs);
        if self.predicted != winner {
            return Err(invalid(format!(
                "predicted {} but lowest-index argmax of probs is {winner}",
                self.predicted
            )));
        }
        if (sum - 1.0).abs() > RENORMALIZE_ABOVE {
            for p in &mut self.probs {
                *p /= sum;
            }
        }
        if self.gold >= k {
            return Err(invalid(format!("gold {} outside [0, {k})", self.gold)));
        }
        if let Some((key, v)) = self.aux.iter().find(|(_, v)| !v.is_finite()) {
            return Err(invalid(format!("aux {key:?} is not finite ({v})")));
        }
        Ok(())
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordIn {
    id: String,
    dataset: String,
    probs: Vec<f64>,
    #[serde(default)]
    predicted: Option<usize>,
    gold: usize,
    #[serde(default)]
    aux: BTreeMap<String, f64>,
    #[serde(default)]
    target: Option<CalibrationTarget>,
}

#[derive(Serialize)]
struct RecordOut<'a> {
    id: &'a str,
    dataset: &'a str,
    probs: &'a [f64],
    predicted: usize,
    gold: usize,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    aux: &'a BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    target: Option<&'a CalibrationTarget>,
}

/// Records paired with their targets, `None` for plain logs.
pub type LogEntries = Vec<(PredictionRecord, Option<CalibrationTarget>)>;

/// Parses a whole log from a reader. Records keep their file order; targets
/// are `Some` exactly when the header is an annotated one.
pub fn parse_log(reader: impl BufRead) -> Result<(LogHeader, LogEntries)> {
    let mut header: Option<LogHeader> = None;
    let mut entries = Vec::new();
    let mut seen = HashSet::new();

    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let at = |e: Error| Error::AtLine {
            line: line_no,
            source: Box::new(e),
        };
        let Some(h) = &header else {
            let h: LogHeader = serde_json::from_str(&line).map_err(|e| Error::Parse {
                line: line_no,
                message: format!("malformed header: {e}"),
            })?;
            h.validate().map_err(at)?;
            header = Some(h);
            continue;
        };

        let raw: RecordIn = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            message: format!("malformed record: {e}"),
        })?;
        let mut record = PredictionRecord {
            predicted: raw.predicted.unwrap_or_else(|| argmax(&raw.probs)),
            id: raw.id,
            dataset: raw.dataset,
            probs: raw.probs,
            gold: raw.gold,
            aux: raw.aux,
        };
        record.validate(h.num_classes).map_err(at)?;
        if !seen.insert(record.id.clone()) {
            return Err(at(Error::DuplicateId(record.id)));
        }
        let target = match (h.strategy, raw.target) {
            (Some(strategy), Some(t)) => {
                t.validate().map_err(at)?;
                if t.kind != strategy.target_kind() {
                    return Err(at(Error::InvalidRecord {
                        id: record.id,
                        message: format!("{:?} target under strategy {strategy}", t.kind),
                    }));
                }
                Some(t)
            }
            (Some(_), None) => {
                return Err(at(Error::InvalidRecord {
                    id: record.id,
                    message: "annotated log record without target".into(),
                }))
            }
            (None, Some(_)) => {
                return Err(at(Error::InvalidRecord {
                    id: record.id,
                    message: "target present but header names no strategy".into(),
                }))
            }
            (None, None) => None,
        };
        entries.push((record, target));
    }

    let header = header.ok_or_else(|| Error::Parse {
        line: 1,
        message: "missing header line".into(),
    })?;
    Ok((header, entries))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::io(path, e))
}

/// Reads a plain or annotated log; annotation targets, if any, are dropped.
pub fn read_log(path: impl AsRef<Path>) -> Result<(LogHeader, Vec<PredictionRecord>)> {
    let (header, entries) = parse_log(open(path.as_ref())?)?;
    Ok((header, entries.into_iter().map(|(r, _)| r).collect()))
}

/// Reads an annotated log; fails on plain logs.
pub fn read_annotated_log(
    path: impl AsRef<Path>,
) -> Result<(LogHeader, Vec<(PredictionRecord, CalibrationTarget)>)> {
    let path = path.as_ref();
    let (header, entries) = parse_log(open(path)?)?;
    if header.strategy.is_none() {
        return Err(Error::InvalidArgument(format!(
            "{} is not an annotated log (format_version {})",
            path.display(),
            header.format_version
        )));
    }
    let entries = entries
        .into_iter()
        .map(|(r, t)| (r, t.expect("annotated log entries carry targets")))
        .collect();
    Ok((header, entries))
}

fn write_line(out: &mut impl Write, value: &impl Serialize) -> std::io::Result<()> {
    serde_json::to_writer(&mut *out, value)?;
    out.write_all(b"\n")
}

fn record_out<'a>(r: &'a PredictionRecord, t: Option<&'a CalibrationTarget>) -> RecordOut<'a> {
    RecordOut {
        id: &r.id,
        dataset: &r.dataset,
        probs: &r.probs,
        predicted: r.predicted,
        gold: r.gold,
        aux: &r.aux,
        target: t,
    }
}

pub fn write_log_to(
    out: &mut impl Write,
    header: &LogHeader,
    records: &[PredictionRecord],
) -> std::io::Result<()> {
    write_line(out, header)?;
    for r in records {
        write_line(out, &record_out(r, None))?;
    }
    Ok(())
}

pub fn write_log(
    path: impl AsRef<Path>,
    header: &LogHeader,
    records: &[PredictionRecord],
) -> Result<()> {
    let path = path.as_ref();
    if header.strategy.is_some() {
        return Err(Error::InvalidArgument(
            "plain logs cannot carry an annotation strategy".into(),
        ));
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    write_log_to(&mut out, header, records)
        .and_then(|_| out.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn write_annotated_log(
    path: impl AsRef<Path>,
    header: &LogHeader,
    entries: &[(PredictionRecord, CalibrationTarget)],
) -> Result<()> {
    let path = path.as_ref();
    if header.strategy.is_none() || header.format_version != ANNOTATED_FORMAT_VERSION {
        return Err(Error::InvalidArgument(
            "annotated logs need a format_version 2 header with a strategy".into(),
        ));
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let result: std::io::Result<()> = (|| {
        write_line(&mut out, header)?;
        for (r, t) in entries {
            write_line(&mut out, &record_out(r, Some(t)))?;
        }
        out.flush()
    })();
    result.map_err(|e| Error::io(path, e))
}

/// Splits `items` into `(train, holdout)` with `|holdout| = round(fraction * n)`.
///
/// Membership is drawn uniformly (unstratified) from a seeded stream; both
/// halves keep the input order.
pub fn split_holdout<T: Clone>(items: &[T], fraction: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if items.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot split an empty sequence".into(),
        ));
    }
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "holdout fraction must lie in (0, 1), got {fraction}"
        )));
    }
    let n = items.len();
    let holdout_len = (fraction * n as f64).round() as usize;
    if holdout_len == 0 || holdout_len == n {
        return Err(Error::InvalidArgument(format!(
            "holdout fraction {fraction} of {n} items leaves an empty side"
        )));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut in_holdout = vec![false; n];
    for &i in &order[..holdout_len] {
        in_holdout[i] = true;
    }
    let (mut train, mut holdout) = (
        Vec::with_capacity(n - holdout_len),
        Vec::with_capacity(holdout_len),
    );
    for (item, held) in items.iter().zip(in_holdout) {
        if held {
            holdout.push(item.clone());
        } else {
            train.push(item.clone());
        }
    }
    Ok((train, holdout))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const HEADER3: &str =
        r#"{"format_version":1,"num_classes":3,"class_names":["e","n","c"],"source_model":"toy"}"#;

    fn parse(text: &str) -> Result<(LogHeader, Vec<PredictionRecord>)> {
        parse_log(text.as_bytes()).map(|(h, e)| (h, e.into_iter().map(|(r, _)| r).collect()))
    }

    #[test]
    fn predicted_is_forced_to_argmax() {
        let text = format!(
            "{HEADER3}\n{}\n",
            r#"{"id":"a","dataset":"d","probs":[0.2,0.3,0.5],"gold":2}"#
        );
        let (h, recs) = parse(&text).unwrap();
        assert_eq!(h.num_classes, 3);
        assert_eq!(recs[0].predicted, 2);
        assert!(recs[0].is_correct());
    }

    #[test]
    fn tie_must_resolve_to_lowest_index() {
        let text = concat!(
            r#"{"format_version":1,"num_classes":2,"class_names":["a","b"],"source_model":"m"}"#,
            "\n",
            r#"{"id":"x","dataset":"d","probs":[0.5,0.5],"predicted":1,"gold":0}"#,
            "\n"
        );
        let err = parse(text).unwrap_err();
        assert_eq!(err.category(), "validation");
        assert!(err.to_string().starts_with("line 2:"), "{err}");

        let ok = text.replace(r#""predicted":1"#, r#""predicted":0"#);
        assert_eq!(parse(&ok).unwrap().1[0].predicted, 0);
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let rec = r#"{"id":"a","dataset":"d","probs":[0.2,0.3,0.5],"gold":2}"#;
        let err = parse(&format!("{HEADER3}\n{rec}\n{rec}\n")).unwrap_err();
        assert!(err.to_string().contains("duplicate id"), "{err}");
        assert!(err.to_string().starts_with("line 3:"));
    }

    #[test]
    fn malformed_line_names_its_number() {
        let rec = r#"{"id":"a","dataset":"d","probs":[0.2,0.3,0.5],"gold":2}"#;
        let err = parse(&format!("{HEADER3}\n{rec}\n{{not json\n")).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err:?}");
    }

    #[test]
    fn arity_mismatch_is_an_error() {
        let rec = r#"{"id":"a","dataset":"d","probs":[0.4,0.6],"gold":1}"#;
        let err = parse(&format!("{HEADER3}\n{rec}\n")).unwrap_err();
        assert_eq!(err.category(), "arity");
    }

    #[test]
    fn normalization_tolerance() {
        let near = r#"{"id":"a","dataset":"d","probs":[0.2,0.3,0.5000005],"gold":2}"#;
        let (_, recs) = parse(&format!("{HEADER3}\n{near}\n")).unwrap();
        let sum: f64 = recs[0].probs.iter().sum();
        assert!((sum - 1.0).abs() < 1e-15);

        let far = r#"{"id":"a","dataset":"d","probs":[0.2,0.3,0.6],"gold":2}"#;
        assert!(parse(&format!("{HEADER3}\n{far}\n")).is_err());
    }

    #[test]
    fn header_must_come_first_and_be_consistent() {
        assert!(parse("").is_err());
        let bad =
            r#"{"format_version":1,"num_classes":3,"class_names":["a","b"],"source_model":"m"}"#;
        assert!(parse(bad).is_err());
        let one = r#"{"format_version":1,"num_classes":1,"class_names":["a"],"source_model":"m"}"#;
        assert!(parse(one).is_err());
    }

    #[test]
    fn unknown_aux_keys_survive_round_trip() {
        let rec = r#"{"id":"a","dataset":"d","probs":[0.1,0.2,0.7],"predicted":2,"gold":0,"aux":{"premise_length":12.0,"zzz_custom":3.5}}"#;
        let text = format!("{HEADER3}\n{rec}\n");
        let (h, recs) = parse(&text).unwrap();
        assert_eq!(recs[0].aux["zzz_custom"], 3.5);
        let mut out = Vec::new();
        write_log_to(&mut out, &h, &recs).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), text);
    }

    #[test]
    fn holdout_sizes() {
        let items: Vec<u32> = (0..10).collect();
        let (train, holdout) = split_holdout(&items, 0.1, 7).unwrap();
        assert_eq!((train.len(), holdout.len()), (9, 1));
        assert_eq!(split_holdout(&items, 0.1, 7).unwrap(), (train, holdout));
    }

    #[test]
    fn holdout_depends_on_seed_only() {
        let items: Vec<u32> = (0..4).collect();
        let a = split_holdout(&items, 0.5, 1).unwrap();
        let b = split_holdout(&items, 0.5, 2).unwrap();
        assert_eq!(a.1.len(), 2);
        assert_eq!(b.1.len(), 2);
        assert_eq!(a, split_holdout(&items, 0.5, 1).unwrap());
        assert_eq!(b, split_holdout(&items, 0.5, 2).unwrap());
    }

    #[test]
    fn holdout_rejects_empty_sides() {
        let items: Vec<u32> = (0..3).collect();
        assert!(split_holdout(&items, 0.1, 0).is_err());
        assert!(split_holdout(&items, 0.9, 0).is_err());
        assert!(split_holdout::<u32>(&[], 0.5, 0).is_err());
        assert!(split_holdout(&items, 1.0, 0).is_err());
    }

    proptest! {
        #[test]
        fn split_is_a_partition(n in 2usize..200, fraction in 0.01f64..0.99, seed: u64) {
            let items: Vec<usize> = (0..n).collect();
            let h = (fraction * n as f64).round() as usize;
            match split_holdout(&items, fraction, seed) {
                Ok((train, holdout)) => {
                    prop_assert_eq!(holdout.len(), h);
                    let mut all: Vec<usize> = train.iter().chain(&holdout).copied().collect();
                    all.sort_unstable();
                    prop_assert_eq!(all, items);
                }
                Err(_) => prop_assert!(h == 0 || h == n),
            }
        }

        #[test]
        fn argmax_ignores_permuted_trailing_ties(
            lead in 0.2f64..0.9,
            tail in proptest::collection::vec(0.0f64..1.0, 1..8),
            ties in proptest::collection::vec(any::<bool>(), 1..8),
            seed: u64,
        ) {
            // winner at index 0; some trailing entries equal it, the rest are smaller
            let mut probs = vec![lead];
            for (i, t) in tail.iter().enumerate() {
                let tie = ties.get(i).copied().unwrap_or(false);
                probs.push(if tie { lead } else { t * lead * 0.999 });
            }
            prop_assert_eq!(argmax(&probs), 0);
            probs[1..].shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(argmax(&probs), 0);
        }
    }
}
