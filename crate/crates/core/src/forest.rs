//! CART decision trees and random forests.
//!
//! Splits are chosen greedily over midpoints between consecutive distinct
//! feature values. Equal-gain candidates resolve to the lowest feature index,
//! then the lowest threshold. A sample goes left when `x[feature] <= threshold`.
//!
//! Every tree draws from its own ChaCha stream, keyed by the master seed and
//! the tree index, so a forest is identical whatever the thread count.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Criterion {
    Gini,
    Mse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestParams {
    pub n_trees: usize,
    pub max_depth: Option<usize>,
    pub min_leaf: usize,
    /// `None` picks `ceil(sqrt(d))` for gini and `ceil(d / 3)` for mse.
    pub features_per_split: Option<usize>,
    pub bootstrap: bool,
    pub seed: u64,
    pub criterion: Criterion,
}

impl ForestParams {
    pub fn classifier() -> Self {
        ForestParams {
            n_trees: 100,
            max_depth: None,
            min_leaf: 1,
            features_per_split: None,
            bootstrap: true,
            seed: 0,
            criterion: Criterion::Gini,
        }
    }

    pub fn regressor() -> Self {
        ForestParams {
            criterion: Criterion::Mse,
            ..Self::classifier()
        }
    }

    pub fn resolved_features_per_split(&self, n_features: usize) -> Result<usize> {
        let m = match self.features_per_split {
            Some(m) => m,
            None => match self.criterion {
                Criterion::Gini => (n_features as f64).sqrt().ceil() as usize,
                Criterion::Mse => n_features.div_ceil(3),
            },
        };
        if m == 0 || m > n_features {
            return Err(Error::InvalidArgument(format!(
                "features_per_split {m} outside [1, {n_features}]"
            )));
        }
        Ok(m)
    }

    fn validate(&self) -> Result<()> {
        if self.n_trees == 0 {
            return Err(Error::InvalidArgument("n_trees must be at least 1".into()));
        }
        if self.min_leaf == 0 {
            return Err(Error::InvalidArgument("min_leaf must be at least 1".into()));
        }
        Ok(())
    }
}

/// Training targets: class labels for gini trees, reals for mse trees.
#[derive(Debug, Clone, Copy)]
pub enum Targets<'a> {
    Classes {
        labels: &'a [usize],
        n_classes: usize,
    },
    Values(&'a [f64]),
}

impl Targets<'_> {
    fn len(&self) -> usize {
        match self {
            Targets::Classes { labels, .. } => labels.len(),
            Targets::Values(v) => v.len(),
        }
    }

    fn criterion(&self) -> Criterion {
        match self {
            Targets::Classes { .. } => Criterion::Gini,
            Targets::Values(_) => Criterion::Mse,
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            Targets::Classes { labels, n_classes } => {
                if n_classes < 2 {
                    return Err(Error::InvalidArgument(
                        "classification needs at least 2 classes".into(),
                    ));
                }
                if let Some(l) = labels.iter().find(|&&l| l >= n_classes) {
                    return Err(Error::InvalidArgument(format!(
                        "class label {l} outside [0, {n_classes})"
                    )));
                }
            }
            Targets::Values(values) => {
                if let Some(v) = values.iter().find(|v| !v.is_finite()) {
                    return Err(Error::InvalidArgument(format!("non-finite target {v}")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LeafValue {
    Distribution(Vec<f64>),
    Mean(f64),
}

/// Node of a tree stored as an arena; children are indices into the same
/// node vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TreeNode {
    Split {
        feature_index: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        value: LeafValue,
        count: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<TreeNode>,
}

impl Tree {
    pub fn leaf(&self, x: &[f64]) -> (&LeafValue, usize) {
        let mut at = 0;
        loop {
            match &self.nodes[at] {
                TreeNode::Split {
                    feature_index,
                    threshold,
                    left,
                    right,
                } => {
                    at = if x[*feature_index] <= *threshold {
                        *left
                    } else {
                        *right
                    }
                }
                TreeNode::Leaf { value, count } => return (value, *count),
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[TreeNode], at: usize) -> usize {
            match &nodes[at] {
                TreeNode::Split { left, right, .. } => {
                    1 + walk(nodes, *left).max(walk(nodes, *right))
                }
                TreeNode::Leaf { .. } => 0,
            }
        }
        walk(&self.nodes, 0)
    }

    pub fn leaves(&self) -> impl Iterator<Item = (&LeafValue, usize)> {
        self.nodes.iter().filter_map(|n| match n {
            TreeNode::Leaf { value, count } => Some((value, *count)),
            TreeNode::Split { .. } => None,
        })
    }

    pub fn predict_value(&self, x: &[f64]) -> f64 {
        match self.leaf(x).0 {
            LeafValue::Mean(m) => *m,
            LeafValue::Distribution(d) => d.get(1).copied().unwrap_or(0.0),
        }
    }
}

/// Incremental mean; exact when every value is equal.
fn running_mean(values: impl Iterator<Item = f64>) -> f64 {
    let mut mean = 0.0;
    for (i, v) in values.enumerate() {
        mean += (v - mean) / (i + 1) as f64;
    }
    mean
}

/// Stream for tree `index` of a forest seeded with `seed`.
pub fn tree_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

fn check_matrix(x: &[Vec<f64>]) -> Result<usize> {
    let Some(first) = x.first() else {
        return Err(Error::InsufficientExamples { needed: 1, got: 0 });
    };
    let d = first.len();
    if d == 0 {
        return Err(Error::InvalidArgument("feature rows are empty".into()));
    }
    for (i, row) in x.iter().enumerate() {
        if row.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: row.len(),
            });
        }
        if row.iter().any(|v| v.is_nan()) {
            return Err(Error::InvalidArgument(format!("NaN feature in row {i}")));
        }
    }
    Ok(d)
}

struct Builder<'a> {
    x: &'a [Vec<f64>],
    y: Targets<'a>,
    n_features: usize,
    features_per_split: usize,
    max_depth: Option<usize>,
    min_leaf: usize,
    nodes: Vec<TreeNode>,
}

struct Candidate {
    gain: f64,
    feature: usize,
    threshold: f64,
}

impl Builder<'_> {
    fn leaf_value(&self, idx: &[usize]) -> LeafValue {
        let n = idx.len() as f64;
        match self.y {
            Targets::Classes { labels, n_classes } => {
                let mut counts = vec![0.0; n_classes];
                for &i in idx {
                    counts[labels[i]] += 1.0;
                }
                LeafValue::Distribution(counts.into_iter().map(|c| c / n).collect())
            }
            Targets::Values(v) => LeafValue::Mean(running_mean(idx.iter().map(|&i| v[i]))),
        }
    }

    fn is_pure(&self, idx: &[usize]) -> bool {
        match self.y {
            Targets::Classes { labels, .. } => idx.iter().all(|&i| labels[i] == labels[idx[0]]),
            Targets::Values(v) => idx.iter().all(|&i| v[i] == v[idx[0]]),
        }
    }

    fn build(&mut self, idx: &mut [usize], depth: usize, rng: &mut ChaCha8Rng) -> usize {
        let stop = self.is_pure(idx)
            || self.max_depth.is_some_and(|m| depth >= m)
            || idx.len() < 2 * self.min_leaf;
        let split = if stop {
            None
        } else {
            self.best_split(idx, rng)
        };
        let Some(best) = split else {
            self.nodes.push(TreeNode::Leaf {
                value: self.leaf_value(idx),
                count: idx.len(),
            });
            return self.nodes.len() - 1;
        };

        let at = self.nodes.len();
        self.nodes.push(TreeNode::Leaf {
            value: LeafValue::Mean(0.0),
            count: 0,
        });
        let (mut left, mut right): (Vec<usize>, Vec<usize>) = idx
            .iter()
            .partition(|&&i| self.x[i][best.feature] <= best.threshold);
        let l = self.build(&mut left, depth + 1, rng);
        let r = self.build(&mut right, depth + 1, rng);
        self.nodes[at] = TreeNode::Split {
            feature_index: best.feature,
            threshold: best.threshold,
            left: l,
            right: r,
        };
        at
    }

    /// Best admissible split of the node, or `None` when no candidate keeps
    /// `min_leaf` samples on both sides.
    fn best_split(&self, idx: &[usize], rng: &mut ChaCha8Rng) -> Option<Candidate> {
        let mut features: Vec<usize> = if self.features_per_split == self.n_features {
            (0..self.n_features).collect()
        } else {
            sample(rng, self.n_features, self.features_per_split).into_vec()
        };
        features.sort_unstable();

        let n = idx.len();
        let scale = match self.y {
            Targets::Classes { .. } => n as f64,
            Targets::Values(v) => idx
                .iter()
                .map(|&i| v[i] * v[i])
                .sum::<f64>()
                .max(f64::MIN_POSITIVE),
        };
        let tie = 1e-12 * scale;
        let mut best: Option<Candidate> = None;
        let mut order = idx.to_vec();

        for f in features {
            order.sort_by(|&a, &b| self.x[a][f].total_cmp(&self.x[b][f]));
            let scan = SplitScan::new(self.y, &order);
            for (pos, gain) in scan {
                let left_n = pos + 1;
                if left_n < self.min_leaf || n - left_n < self.min_leaf {
                    continue;
                }
                let (a, b) = (self.x[order[pos]][f], self.x[order[pos + 1]][f]);
                if a >= b {
                    continue;
                }
                if best.as_ref().is_some_and(|c| gain <= c.gain + tie) {
                    continue;
                }
                let mut threshold = a + (b - a) / 2.0;
                if threshold >= b {
                    threshold = a;
                }
                best = Some(Candidate {
                    gain,
                    feature: f,
                    threshold,
                });
            }
        }
        best.filter(|c| c.gain >= -tie)
    }
}

/// Walks a sorted index list once, yielding `(position, gain)` for the
/// boundary after every position. Gain is the criterion's impurity
/// reduction times the node size, so it is exactly zero for splits that do
/// not separate anything.
struct SplitScan<'a> {
    y: Targets<'a>,
    order: &'a [usize],
    pos: usize,
    left_counts: Vec<f64>,
    total_counts: Vec<f64>,
    left_sum: f64,
    total_sum: f64,
    parent: f64,
}

impl<'a> SplitScan<'a> {
    fn new(y: Targets<'a>, order: &'a [usize]) -> Self {
        let n = order.len() as f64;
        let (total_counts, total_sum, parent) = match y {
            Targets::Classes { labels, n_classes } => {
                let mut c = vec![0.0; n_classes];
                for &i in order {
                    c[labels[i]] += 1.0;
                }
                let parent = c.iter().map(|v| v * v).sum::<f64>() / n;
                (c, 0.0, parent)
            }
            Targets::Values(v) => {
                let s: f64 = order.iter().map(|&i| v[i]).sum();
                (Vec::new(), s, s * s / n)
            }
        };
        SplitScan {
            y,
            order,
            pos: 0,
            left_counts: vec![0.0; total_counts.len()],
            total_counts,
            left_sum: 0.0,
            total_sum,
            parent,
        }
    }
}

impl Iterator for SplitScan<'_> {
    type Item = (usize, f64);

    fn next(&mut self) -> Option<(usize, f64)> {
        if self.pos + 1 >= self.order.len() {
            return None;
        }
        let pos = self.pos;
        let i = self.order[pos];
        let n = self.order.len() as f64;
        let nl = (pos + 1) as f64;
        let nr = n - nl;
        let score = match self.y {
            Targets::Classes { labels, .. } => {
                self.left_counts[labels[i]] += 1.0;
                let l: f64 = self.left_counts.iter().map(|c| c * c).sum();
                let r: f64 = self
                    .left_counts
                    .iter()
                    .zip(&self.total_counts)
                    .map(|(l, t)| (t - l) * (t - l))
                    .sum();
                l / nl + r / nr
            }
            Targets::Values(v) => {
                self.left_sum += v[i];
                let rs = self.total_sum - self.left_sum;
                self.left_sum * self.left_sum / nl + rs * rs / nr
            }
        };
        self.pos += 1;
        Some((pos, score - self.parent))
    }
}

fn fit_tree_on(
    x: &[Vec<f64>],
    y: Targets<'_>,
    rows: &mut [usize],
    params: &ForestParams,
    n_features: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Tree> {
    let mut builder = Builder {
        x,
        y,
        n_features,
        features_per_split: params.resolved_features_per_split(n_features)?,
        max_depth: params.max_depth,
        min_leaf: params.min_leaf,
        nodes: Vec::new(),
    };
    builder.build(rows, 0, rng);
    Ok(Tree {
        nodes: builder.nodes,
    })
}

fn check_inputs(x: &[Vec<f64>], y: Targets<'_>, params: &ForestParams) -> Result<usize> {
    let d = check_matrix(x)?;
    if y.len() != x.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            found: y.len(),
        });
    }
    y.validate()?;
    if y.criterion() != params.criterion {
        return Err(Error::InvalidArgument(format!(
            "{:?} criterion does not match {:?} targets",
            params.criterion,
            y.criterion()
        )));
    }
    params.validate()?;
    Ok(d)
}

/// Fits one tree on all rows of `x` (no bootstrap).
pub fn fit_tree(
    x: &[Vec<f64>],
    y: Targets<'_>,
    params: &ForestParams,
    rng: &mut ChaCha8Rng,
) -> Result<Tree> {
    let d = check_inputs(x, y, params)?;
    let mut rows: Vec<usize> = (0..x.len()).collect();
    fit_tree_on(x, y, &mut rows, params, d, rng)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum ForestKind {
    Classifier { n_classes: usize },
    Regressor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Forest {
    pub kind: ForestKind,
    pub n_features: usize,
    pub params: ForestParams,
    pub trees: Vec<Tree>,
}

pub fn fit_forest(x: &[Vec<f64>], y: Targets<'_>, params: &ForestParams) -> Result<Forest> {
    let d = check_inputs(x, y, params)?;
    let n = x.len();
    let trees = (0..params.n_trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = tree_rng(params.seed, t);
            let mut rows: Vec<usize> = if params.bootstrap {
                (0..n).map(|_| rng.random_range(0..n)).collect()
            } else {
                (0..n).collect()
            };
            fit_tree_on(x, y, &mut rows, params, d, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    let kind = match y {
        Targets::Classes { n_classes, .. } => ForestKind::Classifier { n_classes },
        Targets::Values(_) => ForestKind::Regressor,
    };
    Ok(Forest {
        kind,
        n_features: d,
        params: params.clone(),
        trees,
    })
}

impl Forest {
    fn check(&self, x: &[f64]) -> Result<()> {
        if self.trees.is_empty() {
            return Err(Error::NotFitted);
        }
        if x.len() != self.n_features {
            return Err(Error::DimensionMismatch {
                expected: self.n_features,
                found: x.len(),
            });
        }
        Ok(())
    }

    /// Mean of the per-tree leaf class distributions.
    pub fn predict_class_proba(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check(x)?;
        let ForestKind::Classifier { n_classes } = self.kind else {
            return Err(Error::Unsupported(
                "class probabilities from a regression forest".into(),
            ));
        };
        let mut acc = vec![0.0; n_classes];
        for tree in &self.trees {
            let LeafValue::Distribution(d) = tree.leaf(x).0 else {
                return Err(Error::Serialization(
                    "classifier tree with a mean leaf".into(),
                ));
            };
            for (a, p) in acc.iter_mut().zip(d) {
                *a += p;
            }
        }
        let m = self.trees.len() as f64;
        Ok(acc.into_iter().map(|a| a / m).collect())
    }

    /// Mean of the per-tree leaf means, before clamping.
    pub fn predict_value_raw(&self, x: &[f64]) -> Result<f64> {
        self.check(x)?;
        if self.kind != ForestKind::Regressor {
            return Err(Error::Unsupported(
                "real values from a classification forest".into(),
            ));
        }
        Ok(running_mean(self.trees.iter().map(|t| t.predict_value(x))))
    }

    /// Regression output clamped to `[0, 1]`.
    pub fn predict_value(&self, x: &[f64]) -> Result<f64> {
        self.predict_value_raw(x).map(|v| v.clamp(0.0, 1.0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(criterion: Criterion) -> ForestParams {
        ForestParams {
            n_trees: 1,
            bootstrap: false,
            features_per_split: None,
            ..match criterion {
                Criterion::Gini => ForestParams::classifier(),
                Criterion::Mse => ForestParams::regressor(),
            }
        }
    }

    #[test]
    fn constant_target_is_a_single_leaf() {
        let x = vec![vec![0.0], vec![1.0], vec![2.0]];
        let y = [0.7, 0.7, 0.7];
        let tree = fit_tree(
            &x,
            Targets::Values(&y),
            &single(Criterion::Mse),
            &mut tree_rng(0, 0),
        )
        .unwrap();
        assert_eq!(tree.nodes.len(), 1);
        assert_eq!(tree.predict_value(&[5.0]), 0.7);

        let forest = fit_forest(
            &x,
            Targets::Values(&y),
            &ForestParams {
                n_trees: 7,
                ..ForestParams::regressor()
            },
        )
        .unwrap();
        for v in [-3.0, 0.5, 9.0] {
            assert_eq!(forest.predict_value(&[v]).unwrap(), 0.7);
        }
    }

    #[test]
    fn one_dimensional_identity_splits_at_half() {
        let x = vec![vec![0.0], vec![1.0], vec![0.0], vec![1.0]];
        let labels = [0, 1, 0, 1];
        let y = Targets::Classes {
            labels: &labels,
            n_classes: 2,
        };
        let tree = fit_tree(&x, y, &single(Criterion::Gini), &mut tree_rng(0, 0)).unwrap();
        match &tree.nodes[0] {
            TreeNode::Split {
                feature_index,
                threshold,
                ..
            } => {
                assert_eq!((*feature_index, *threshold), (0, 0.5));
            }
            other => panic!("expected a split, got {other:?}"),
        }
        for (row, &l) in x.iter().zip(&labels) {
            let TreeNode::Leaf { .. } = tree.nodes[1] else {
                panic!()
            };
            assert_eq!(tree.predict_value(row), l as f64);
        }
    }

    #[test]
    fn depth_zero_is_majority_or_mean() {
        let x = vec![vec![0.0], vec![1.0], vec![2.0]];
        let labels = [1, 1, 0];
        let p = ForestParams {
            max_depth: Some(0),
            ..single(Criterion::Gini)
        };
        let tree = fit_tree(
            &x,
            Targets::Classes {
                labels: &labels,
                n_classes: 2,
            },
            &p,
            &mut tree_rng(0, 0),
        )
        .unwrap();
        assert_eq!(tree.nodes.len(), 1);
        let (LeafValue::Distribution(d), 3) = tree.leaf(&[0.0]) else {
            panic!()
        };
        assert!(d[1] > d[0]);

        let p = ForestParams {
            max_depth: Some(0),
            ..single(Criterion::Mse)
        };
        let tree = fit_tree(
            &x,
            Targets::Values(&[0.0, 0.3, 0.9]),
            &p,
            &mut tree_rng(0, 0),
        )
        .unwrap();
        assert!((tree.predict_value(&[1.0]) - 0.4).abs() < 1e-15);
    }

    #[test]
    fn input_errors() {
        let p = single(Criterion::Mse);
        assert!(matches!(
            fit_tree(&[], Targets::Values(&[]), &p, &mut tree_rng(0, 0)),
            Err(Error::InsufficientExamples { .. })
        ));
        let x = vec![vec![f64::NAN], vec![1.0]];
        assert!(fit_tree(&x, Targets::Values(&[0.0, 1.0]), &p, &mut tree_rng(0, 0)).is_err());
        let x = vec![vec![0.0], vec![1.0]];
        let labels = [0, 1];
        assert!(fit_tree(
            &x,
            Targets::Classes {
                labels: &labels,
                n_classes: 2
            },
            &p,
            &mut tree_rng(0, 0)
        )
        .is_err());
        let p = ForestParams {
            features_per_split: Some(2),
            ..p
        };
        assert!(fit_tree(&x, Targets::Values(&[0.0, 1.0]), &p, &mut tree_rng(0, 0)).is_err());
    }

    #[test]
    fn prediction_errors() {
        let x = vec![vec![0.0, 1.0], vec![1.0, 0.0]];
        let forest = fit_forest(
            &x,
            Targets::Values(&[0.0, 1.0]),
            &ForestParams {
                n_trees: 2,
                ..ForestParams::regressor()
            },
        )
        .unwrap();
        assert!(matches!(
            forest.predict_value(&[1.0]),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(forest.predict_class_proba(&[1.0, 0.0]).is_err());
        let empty = Forest {
            trees: Vec::new(),
            ..forest
        };
        assert!(matches!(
            empty.predict_value(&[1.0, 0.0]),
            Err(Error::NotFitted)
        ));
    }

    #[test]
    fn min_leaf_is_respected() {
        let x: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64]).collect();
        let y: Vec<f64> = (0..20).map(|i| (i * 7 % 5) as f64).collect();
        let p = ForestParams {
            min_leaf: 4,
            ..single(Criterion::Mse)
        };
        let tree = fit_tree(&x, Targets::Values(&y), &p, &mut tree_rng(0, 0)).unwrap();
        assert!(tree.leaves().all(|(_, c)| c >= 4));
        let p = ForestParams {
            max_depth: Some(2),
            ..single(Criterion::Mse)
        };
        let tree = fit_tree(&x, Targets::Values(&y), &p, &mut tree_rng(0, 0)).unwrap();
        assert!(tree.depth() <= 2);
    }

    #[test]
    fn serde_round_trip_is_exact() {
        let x: Vec<Vec<f64>> = (0..30)
            .map(|i| vec![(i as f64).sin(), (i as f64 * 0.37).cos()])
            .collect();
        let y: Vec<f64> = x.iter().map(|r| (r[0] * r[1]).abs() / 3.0).collect();
        let forest = fit_forest(
            &x,
            Targets::Values(&y),
            &ForestParams {
                n_trees: 5,
                seed: 3,
                ..ForestParams::regressor()
            },
        )
        .unwrap();
        let text = serde_json::to_string(&forest).unwrap();
        let back: Forest = serde_json::from_str(&text).unwrap();
        assert_eq!(back, forest);
    }
}
