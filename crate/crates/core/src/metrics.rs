//! Coverage, risk and abstention metrics.
//!
//! An example is answered at threshold `th` iff its confidence is strictly
//! greater than `th`; examples whose confidence equals the threshold abstain
//! together. Selective accuracy at zero coverage is defined as 1.0.
//!
//! Risk-coverage curves rank examples by confidence, descending, with ties
//! kept in input order. Point `k` covers the top `k` examples. The primary
//! area is `auc_mean`, the mean risk over the `n` points; `auc_trapezoid`
//! integrates the same points with the first risk extended to coverage 0.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredExample {
    pub confidence: f64,
    pub correct: bool,
    pub dataset: String,
}

impl ScoredExample {
    pub fn new(confidence: f64, correct: bool, dataset: impl Into<String>) -> Result<Self> {
        if !(confidence.is_finite() && (0.0..=1.0).contains(&confidence)) {
            return Err(Error::InvalidArgument(format!(
                "confidence {confidence} outside [0, 1]"
            )));
        }
        Ok(ScoredExample {
            confidence,
            correct,
            dataset: dataset.into(),
        })
    }
}

/// Builds untagged examples from parallel slices.
pub fn examples(confidences: &[f64], correct: &[bool]) -> Result<Vec<ScoredExample>> {
    if confidences.len() != correct.len() {
        return Err(Error::DimensionMismatch {
            expected: confidences.len(),
            found: correct.len(),
        });
    }
    confidences
        .iter()
        .zip(correct)
        .map(|(&c, &v)| ScoredExample::new(c, v, ""))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CoverageAccuracy {
    pub coverage: f64,
    pub accuracy: f64,
    pub answered: usize,
    pub correct: usize,
    pub total: usize,
}

pub fn coverage_accuracy(examples: &[ScoredExample], threshold: f64) -> CoverageAccuracy {
    let (mut answered, mut correct) = (0, 0);
    for e in examples.iter().filter(|e| e.confidence > threshold) {
        answered += 1;
        correct += usize::from(e.correct);
    }
    let total = examples.len();
    CoverageAccuracy {
        coverage: if total == 0 {
            0.0
        } else {
            answered as f64 / total as f64
        },
        accuracy: if answered == 0 {
            1.0
        } else {
            correct as f64 / answered as f64
        },
        answered,
        correct,
        total,
    }
}

/// Fraction of examples abstained on at `threshold`.
pub fn abstention_rate(examples: &[ScoredExample], threshold: f64) -> f64 {
    1.0 - coverage_accuracy(examples, threshold).coverage
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RiskCoveragePoint {
    /// Confidence of the lowest-ranked answered example.
    pub threshold: f64,
    pub coverage: f64,
    pub risk: f64,
    pub selective_accuracy: f64,
    pub answered: usize,
    pub errors: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RiskCoverageCurve {
    pub points: Vec<RiskCoveragePoint>,
    pub auc_mean: f64,
    pub auc_trapezoid: f64,
}

impl RiskCoverageCurve {
    pub fn auc_mean_percent(&self) -> f64 {
        self.auc_mean * 100.0
    }

    pub fn auc_trapezoid_percent(&self) -> f64 {
        self.auc_trapezoid * 100.0
    }
}

/// Exact sum of `weight * num / den` terms divided by `divisor`, rounded
/// once to the nearest f64 while numerator and denominator stay within 53
/// bits; a plain float sum past that.
fn weighted_ratio_mean(terms: &[(u64, u64, u64)], divisor: u64) -> f64 {
    fn gcd(mut a: i128, mut b: i128) -> i128 {
        while b != 0 {
            (a, b) = (b, a % b);
        }
        a.abs()
    }
    let exact = (|| {
        let (mut num, mut den) = (0i128, 1i128);
        for &(w, n, d) in terms {
            let (tn, td) = ((w as i128).checked_mul(n as i128)?, d as i128);
            num = num.checked_mul(td)?.checked_add(tn.checked_mul(den)?)?;
            den = den.checked_mul(td)?;
            let g = gcd(num, den).max(1);
            (num, den) = (num / g, den / g);
        }
        den = den.checked_mul(divisor as i128)?;
        let g = gcd(num, den).max(1);
        Some((num / g, den / g))
    })();
    const EXACT: i128 = 1 << 53;
    match exact {
        Some((num, den)) if num <= EXACT && den <= EXACT => num as f64 / den as f64,
        _ => {
            let total: f64 = terms
                .iter()
                .map(|&(w, n, d)| w as f64 * n as f64 / d as f64)
                .sum();
            total / divisor as f64
        }
    }
}

/// Mean of `errors[k] / (k + 1)` over all `k`.
fn auc_mean_of(errors: &[usize]) -> f64 {
    let terms: Vec<_> = errors
        .iter()
        .enumerate()
        .map(|(k, &e)| (1, e as u64, k as u64 + 1))
        .collect();
    weighted_ratio_mean(&terms, errors.len() as u64)
}

fn auc_trapezoid_of(errors: &[usize]) -> f64 {
    let n = errors.len();
    if n == 1 {
        return errors[0] as f64;
    }
    let terms: Vec<_> = errors
        .iter()
        .enumerate()
        .map(|(k, &e)| {
            let w = if k == 0 {
                3
            } else if k + 1 == n {
                1
            } else {
                2
            };
            (w, e as u64, k as u64 + 1)
        })
        .collect();
    weighted_ratio_mean(&terms, 2 * n as u64)
}

/// Positions of `examples` ranked by confidence, descending, ties stable.
pub fn confidence_order(examples: &[ScoredExample]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.sort_by(|&a, &b| examples[b].confidence.total_cmp(&examples[a].confidence));
    order
}

fn cumulative_errors(correct_in_rank_order: impl Iterator<Item = bool>) -> Vec<usize> {
    correct_in_rank_order
        .scan(0, |errs, ok| {
            *errs += usize::from(!ok);
            Some(*errs)
        })
        .collect()
}

fn require_nonempty(examples: &[ScoredExample]) -> Result<()> {
    if examples.is_empty() {
        Err(Error::InsufficientExamples { needed: 1, got: 0 })
    } else {
        Ok(())
    }
}

pub fn risk_coverage_curve(examples: &[ScoredExample]) -> Result<RiskCoverageCurve> {
    require_nonempty(examples)?;
    let n = examples.len();
    let order = confidence_order(examples);
    let errors = cumulative_errors(order.iter().map(|&i| examples[i].correct));
    let points = order
        .iter()
        .zip(&errors)
        .enumerate()
        .map(|(k, (&i, &e))| {
            let answered = k + 1;
            let risk = e as f64 / answered as f64;
            RiskCoveragePoint {
                threshold: examples[i].confidence,
                coverage: answered as f64 / n as f64,
                risk,
                selective_accuracy: (answered - e) as f64 / answered as f64,
                answered,
                errors: e,
            }
        })
        .collect();
    Ok(RiskCoverageCurve {
        points,
        auc_mean: auc_mean_of(&errors),
        auc_trapezoid: auc_trapezoid_of(&errors),
    })
}

/// `auc_mean` with every correct example ranked first.
pub fn oracle_auc(examples: &[ScoredExample]) -> Result<f64> {
    require_nonempty(examples)?;
    let n_correct = examples.iter().filter(|e| e.correct).count();
    let ranked = (0..examples.len()).map(|k| k < n_correct);
    Ok(auc_mean_of(&cumulative_errors(ranked)))
}

/// `auc_mean` with every incorrect example ranked first.
pub fn worst_auc(examples: &[ScoredExample]) -> Result<f64> {
    require_nonempty(examples)?;
    let n_wrong = examples.iter().filter(|e| !e.correct).count();
    let ranked = (0..examples.len()).map(|k| k >= n_wrong);
    Ok(auc_mean_of(&cumulative_errors(ranked)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Improvement {
    pub absolute: f64,
    /// `(base - new) / base`; `None` when `base` is zero.
    pub vs_base: Option<f64>,
    /// `(base - new) / (base - oracle)`; `None` when the base is already optimal.
    pub vs_max_possible: Option<f64>,
}

pub fn relative_improvement(auc_base: f64, auc_new: f64, auc_oracle: f64) -> Result<Improvement> {
    if auc_base < auc_oracle {
        return Err(Error::InvalidArgument(format!(
            "base AUC {auc_base} below oracle AUC {auc_oracle}"
        )));
    }
    let absolute = auc_base - auc_new;
    Ok(Improvement {
        absolute,
        vs_base: (auc_base != 0.0).then(|| absolute / auc_base),
        vs_max_possible: (auc_base != auc_oracle).then(|| absolute / (auc_base - auc_oracle)),
    })
}

/// Threshold with the largest coverage whose selective accuracy reaches
/// `target_accuracy`. Candidates are `-inf` and every observed confidence.
/// When no positive coverage qualifies, returns the maximum confidence,
/// which abstains on everything.
pub fn select_threshold(examples: &[ScoredExample], target_accuracy: f64) -> Result<f64> {
    require_nonempty(examples)?;
    if !(target_accuracy > 0.0 && target_accuracy <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "target accuracy must lie in (0, 1], got {target_accuracy}"
        )));
    }
    let order = confidence_order(examples);
    let n = examples.len();
    let (mut correct, mut best) = (0usize, None);
    // answering the top `k` is reachable by a threshold only at the end of a
    // run of equal confidences; its threshold is the next lower confidence
    for k in 1..=n {
        correct += usize::from(examples[order[k - 1]].correct);
        let boundary = k == n || examples[order[k]].confidence < examples[order[k - 1]].confidence;
        if boundary && correct as f64 / k as f64 >= target_accuracy {
            best = Some(if k == n {
                f64::NEG_INFINITY
            } else {
                examples[order[k]].confidence
            });
        }
    }
    Ok(best.unwrap_or(examples[order[0]].confidence))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverconfidenceReport {
    pub mean_confidence: f64,
    pub accuracy: f64,
    pub gap: f64,
}

pub fn overconfidence_gap(mean_confidence: f64, accuracy: f64) -> OverconfidenceReport {
    OverconfidenceReport {
        mean_confidence,
        accuracy,
        gap: mean_confidence - accuracy,
    }
}

pub fn overconfidence_report(examples: &[ScoredExample]) -> Result<OverconfidenceReport> {
    require_nonempty(examples)?;
    let n = examples.len() as f64;
    let mean = examples.iter().map(|e| e.confidence).sum::<f64>() / n;
    let acc = examples.iter().filter(|e| e.correct).count() as f64 / n;
    Ok(overconfidence_gap(mean, acc))
}

/// Cumulative abstention per dataset tag over a threshold grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AbstentionTable {
    pub thresholds: Vec<f64>,
    /// Dataset tag and its abstention fraction at each grid threshold.
    pub rows: Vec<(String, Vec<f64>)>,
}

pub fn abstention_by_threshold(
    examples: &[ScoredExample],
    grid: &[f64],
) -> Result<AbstentionTable> {
    if grid.iter().any(|g| g.is_nan()) || grid.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::InvalidArgument(
            "threshold grid must be sorted ascending".into(),
        ));
    }
    let mut groups: BTreeMap<&str, Vec<ScoredExample>> = BTreeMap::new();
    for e in examples {
        groups.entry(&e.dataset).or_default().push(e.clone());
    }
    let rows = groups
        .into_iter()
        .map(|(tag, group)| {
            let row = grid.iter().map(|&th| abstention_rate(&group, th)).collect();
            (tag.to_string(), row)
        })
        .collect();
    Ok(AbstentionTable {
        thresholds: grid.to_vec(),
        rows,
    })
}

/// Evenly spaced grid `start, start + step, ...` up to and including `end`.
pub fn threshold_grid(start: f64, end: f64, step: f64) -> Result<Vec<f64>> {
    if step.is_nan() || step <= 0.0 || start.is_nan() || end.is_nan() || end < start {
        return Err(Error::InvalidArgument(format!(
            "invalid grid {start}:{end}:{step}"
        )));
    }
    let count = ((end - start) / step + 1e-9).floor() as usize;
    Ok((0..=count).map(|i| start + i as f64 * step).collect())
}
