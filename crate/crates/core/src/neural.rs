//! Feedforward calibrators trained with plain mini-batch SGD.
//!
//! Hidden layers use ReLU. A single output unit gets a sigmoid and a
//! mean-squared-error loss; two or more outputs get a softmax and mean
//! cross-entropy. All parameters live in one flat vector, layer by layer,
//! weights (row-major, `out x in`) before biases.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Head {
    /// Scalar in (0, 1), trained with MSE.
    Sigmoid,
    /// Probability vector, trained with cross-entropy.
    Softmax,
}

/// Supervision for a batch.
#[derive(Debug, Clone, Copy)]
pub enum Targets<'a> {
    Classes(&'a [usize]),
    Values(&'a [f64]),
}

impl Targets<'_> {
    pub fn len(&self) -> usize {
        match self {
            Targets::Classes(c) => c.len(),
            Targets::Values(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn select(&self, rows: &[usize]) -> OwnedTargets {
        match self {
            Targets::Classes(c) => OwnedTargets::Classes(rows.iter().map(|&i| c[i]).collect()),
            Targets::Values(v) => OwnedTargets::Values(rows.iter().map(|&i| v[i]).collect()),
        }
    }
}

enum OwnedTargets {
    Classes(Vec<usize>),
    Values(Vec<f64>),
}

impl OwnedTargets {
    fn view(&self) -> Targets<'_> {
        match self {
            OwnedTargets::Classes(c) => Targets::Classes(c),
            OwnedTargets::Values(v) => Targets::Values(v),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub hidden: Vec<usize>,
    pub outputs: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl MlpSpec {
    /// Two-way softmax head.
    pub fn classification() -> Self {
        MlpSpec {
            hidden: vec![64, 64],
            outputs: 2,
            learning_rate: 1e-3,
            epochs: 200,
            batch_size: 32,
            seed: 0,
        }
    }

    /// Sigmoid scalar head.
    pub fn regression() -> Self {
        MlpSpec {
            outputs: 1,
            ..Self::classification()
        }
    }

    pub fn layer_sizes(&self, inputs: usize) -> Vec<usize> {
        let mut sizes = vec![inputs];
        sizes.extend(&self.hidden);
        sizes.push(self.outputs);
        sizes
    }

    /// Calibrator networks must have at least one hidden layer.
    pub fn validate_calibrator(&self) -> Result<()> {
        if self.hidden.is_empty() {
            return Err(Error::InvalidArgument(
                "calibrator networks need at least one hidden layer".into(),
            ));
        }
        self.validate()
    }

    fn validate(&self) -> Result<()> {
        if self.outputs == 0 {
            return Err(Error::InvalidArgument(
                "network needs at least one output".into(),
            ));
        }
        if self.hidden.contains(&0) {
            return Err(Error::InvalidArgument(
                "hidden layers cannot be empty".into(),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be positive".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in z.iter_mut() {
        *v /= total;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    sizes: Vec<usize>,
    params: Vec<f64>,
}

/// Pre-activations of every layer for one input, plus the head output.
struct Trace {
    activations: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    output: Vec<f64>,
}

impl Mlp {
    /// Network with every weight and bias set to zero.
    pub fn zeros(sizes: &[usize]) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "invalid layer sizes {sizes:?}"
            )));
        }
        let count = sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        Ok(Mlp {
            sizes: sizes.to_vec(),
            params: vec![0.0; count],
        })
    }

    /// He-uniform weights, zero biases.
    pub fn he_uniform(sizes: &[usize], seed: u64) -> Result<Self> {
        let mut mlp = Self::zeros(sizes)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut offset = 0;
        for w in sizes.windows(2) {
            let (fan_in, out) = (w[0], w[1]);
            let limit = (6.0 / fan_in as f64).sqrt();
            for p in &mut mlp.params[offset..offset + fan_in * out] {
                *p = rng.random_range(-limit..limit);
            }
            offset += fan_in * out + out;
        }
        Ok(mlp)
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn inputs(&self) -> usize {
        self.sizes[0]
    }

    pub fn outputs(&self) -> usize {
        *self.sizes.last().expect("at least two layers")
    }

    pub fn head(&self) -> Head {
        if self.outputs() == 1 {
            Head::Sigmoid
        } else {
            Head::Softmax
        }
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn layer_offsets(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        self.sizes.windows(2).scan(0, |offset, w| {
            let at = *offset;
            *offset += w[0] * w[1] + w[1];
            Some((at, w[0], w[1]))
        })
    }

    fn trace(&self, x: &[f64]) -> Trace {
        let layers = self.sizes.len() - 1;
        let mut activations = vec![x.to_vec()];
        let mut pre = Vec::with_capacity(layers);
        for (l, (at, n_in, n_out)) in self.layer_offsets().enumerate() {
            let (weights, biases) =
                self.params[at..at + n_in * n_out + n_out].split_at(n_in * n_out);
            let input = &activations[l];
            let z: Vec<f64> = (0..n_out)
                .map(|o| {
                    let row = &weights[o * n_in..(o + 1) * n_in];
                    biases[o] + row.iter().zip(input).map(|(w, a)| w * a).sum::<f64>()
                })
                .collect();
            if l + 1 < layers {
                activations.push(z.iter().map(|v| v.max(0.0)).collect());
            }
            pre.push(z);
        }
        let mut output = pre.last().expect("at least one layer").clone();
        match self.head() {
            Head::Sigmoid => output[0] = sigmoid(output[0]),
            Head::Softmax => softmax_in_place(&mut output),
        }
        Trace {
            activations,
            pre,
            output,
        }
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.inputs() {
            return Err(Error::DimensionMismatch {
                expected: self.inputs(),
                found: x.len(),
            });
        }
        Ok(self.trace(x).output)
    }

    fn check_batch(&self, x: &[Vec<f64>], y: Targets<'_>) -> Result<()> {
        if x.is_empty() {
            return Err(Error::InsufficientExamples { needed: 1, got: 0 });
        }
        if x.len() != y.len() {
            return Err(Error::DimensionMismatch {
                expected: x.len(),
                found: y.len(),
            });
        }
        if let Some(row) = x.iter().find(|r| r.len() != self.inputs()) {
            return Err(Error::DimensionMismatch {
                expected: self.inputs(),
                found: row.len(),
            });
        }
        match (self.head(), y) {
            (Head::Sigmoid, Targets::Values(_)) => Ok(()),
            (Head::Softmax, Targets::Classes(c)) => {
                match c.iter().find(|&&c| c >= self.outputs()) {
                    Some(c) => Err(Error::InvalidArgument(format!(
                        "class {c} outside [0, {})",
                        self.outputs()
                    ))),
                    None => Ok(()),
                }
            }
            (head, _) => Err(Error::InvalidArgument(format!(
                "{head:?} head cannot train on these targets"
            ))),
        }
    }

    /// Mean loss over a batch.
    pub fn loss(&self, x: &[Vec<f64>], y: Targets<'_>) -> Result<f64> {
        self.check_batch(x, y)?;
        let total: f64 = x
            .iter()
            .enumerate()
            .map(|(i, xi)| {
                let out = self.trace(xi).output;
                match y {
                    Targets::Values(t) => (out[0] - t[i]).powi(2),
                    Targets::Classes(c) => -out[c[i]].max(f64::MIN_POSITIVE).ln(),
                }
            })
            .sum();
        Ok(total / x.len() as f64)
    }

    /// Gradient of [`Mlp::loss`] with respect to every parameter, in
    /// parameter order.
    pub fn grad(&self, x: &[Vec<f64>], y: Targets<'_>) -> Result<Vec<f64>> {
        self.check_batch(x, y)?;
        let offsets: Vec<_> = self.layer_offsets().collect();
        let mut grad = vec![0.0; self.params.len()];
        let scale = 1.0 / x.len() as f64;

        for (i, xi) in x.iter().enumerate() {
            let trace = self.trace(xi);
            let mut delta: Vec<f64> = match y {
                Targets::Values(t) => {
                    let s = trace.output[0];
                    vec![2.0 * (s - t[i]) * s * (1.0 - s) * scale]
                }
                Targets::Classes(c) => trace
                    .output
                    .iter()
                    .enumerate()
                    .map(|(j, p)| (p - if j == c[i] { 1.0 } else { 0.0 }) * scale)
                    .collect(),
            };
            for l in (0..offsets.len()).rev() {
                let (at, n_in, n_out) = offsets[l];
                let input = &trace.activations[l];
                for o in 0..n_out {
                    let row = &mut grad[at + o * n_in..at + (o + 1) * n_in];
                    for (g, a) in row.iter_mut().zip(input) {
                        *g += delta[o] * a;
                    }
                    grad[at + n_in * n_out + o] += delta[o];
                }
                if l > 0 {
                    let weights = &self.params[at..at + n_in * n_out];
                    let below = &trace.pre[l - 1];
                    delta = (0..n_in)
                        .map(|j| {
                            if below[j] <= 0.0 {
                                return 0.0;
                            }
                            (0..n_out).map(|o| weights[o * n_in + j] * delta[o]).sum()
                        })
                        .collect();
                }
            }
        }
        Ok(grad)
    }

    /// One pass over the data in a shuffled order, one SGD step per batch.
    /// Returns the loss over all rows after the pass.
    pub fn sgd_epoch(
        &mut self,
        x: &[Vec<f64>],
        y: Targets<'_>,
        learning_rate: f64,
        batch_size: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<f64> {
        self.check_batch(x, y)?;
        let mut order: Vec<usize> = (0..x.len()).collect();
        order.shuffle(rng);
        for chunk in order.chunks(batch_size) {
            let bx: Vec<Vec<f64>> = chunk.iter().map(|&i| x[i].clone()).collect();
            let by = y.select(chunk);
            let g = self.grad(&bx, by.view())?;
            for (p, gi) in self.params.iter_mut().zip(g) {
                *p -= learning_rate * gi;
            }
        }
        let loss = self.loss(x, y)?;
        if !loss.is_finite() || self.params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Diverged(format!(
                "loss became {loss} at learning rate {learning_rate}"
            )));
        }
        Ok(loss)
    }
}

/// Loss after initialization and after every epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub losses: Vec<f64>,
}

/// Trains a fresh network. Deterministic for a fixed `spec.seed`.
pub fn train(x: &[Vec<f64>], y: Targets<'_>, spec: &MlpSpec) -> Result<(Mlp, TrainReport)> {
    spec.validate()?;
    if x.len() < spec.batch_size {
        return Err(Error::InsufficientExamples {
            needed: spec.batch_size,
            got: x.len(),
        });
    }
    let d = x[0].len();
    let mut mlp = Mlp::he_uniform(&spec.layer_sizes(d), spec.seed)?;
    let mut rng = shuffle_rng(spec.seed);
    let mut losses = vec![mlp.loss(x, y)?];
    for _ in 0..spec.epochs {
        losses.push(mlp.sgd_epoch(x, y, spec.learning_rate, spec.batch_size, &mut rng)?);
    }
    Ok((mlp, TrainReport { losses }))
}

/// Stream used for batch shuffling, separate from the initialization stream.
pub fn shuffle_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_network_outputs() {
        let reg = Mlp::zeros(&[3, 4, 1]).unwrap();
        assert_eq!(reg.forward(&[1.0, -2.0, 3.0]).unwrap(), vec![0.5]);
        let cls = Mlp::zeros(&[3, 4, 2]).unwrap();
        assert_eq!(cls.forward(&[1.0, -2.0, 3.0]).unwrap(), vec![0.5, 0.5]);
        assert!(reg.forward(&[1.0]).is_err());
    }

    #[test]
    fn seeded_init_is_deterministic() {
        let a = Mlp::he_uniform(&[4, 8, 2], 11).unwrap();
        let b = Mlp::he_uniform(&[4, 8, 2], 11).unwrap();
        let x = [0.1, 0.2, 0.3, 0.4];
        assert_eq!(a.forward(&x).unwrap(), b.forward(&x).unwrap());
        assert_ne!(a, Mlp::he_uniform(&[4, 8, 2], 12).unwrap());
        let limit = (6.0f64 / 4.0).sqrt();
        assert!(a.params()[..32].iter().all(|w| w.abs() < limit));
        assert!(a.params()[32..40].iter().all(|b| *b == 0.0));
    }

    #[test]
    fn hand_chain_rule_single_unit() {
        let mlp = Mlp::zeros(&[1, 1]).unwrap();
        let g = mlp.grad(&[vec![1.0]], Targets::Values(&[1.0])).unwrap();
        assert!((g[0] + 0.25).abs() < 1e-15);
        assert!((g[1] + 0.25).abs() < 1e-15);
    }

    #[test]
    fn exact_fit_has_zero_gradient() {
        let mlp = Mlp::he_uniform(&[3, 5, 1], 2).unwrap();
        let x = vec![vec![0.3, -0.1, 0.8], vec![1.0, 0.5, -0.5]];
        let t: Vec<f64> = x.iter().map(|r| mlp.forward(r).unwrap()[0]).collect();
        let g = mlp.grad(&x, Targets::Values(&t)).unwrap();
        assert!(g.iter().map(|v| v * v).sum::<f64>().sqrt() < 1e-10);
    }

    #[test]
    fn head_and_target_mismatch() {
        let mlp = Mlp::zeros(&[2, 2]).unwrap();
        assert!(mlp
            .grad(&[vec![0.0, 0.0]], Targets::Values(&[1.0]))
            .is_err());
        assert!(mlp.grad(&[vec![0.0, 0.0]], Targets::Classes(&[2])).is_err());
    }

    #[test]
    fn insufficient_examples() {
        let x = vec![vec![0.0]; 10];
        let y = vec![0.0; 10];
        let err = train(&x, Targets::Values(&y), &MlpSpec::regression()).unwrap_err();
        assert!(matches!(
            err,
            Error::InsufficientExamples {
                needed: 32,
                got: 10
            }
        ));
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let x = vec![vec![0.5, 0.5]; 4];
        let y = vec![1.0; 4];
        let spec = MlpSpec {
            epochs: 0,
            batch_size: 2,
            seed: 5,
            ..MlpSpec::regression()
        };
        let (mlp, report) = train(&x, Targets::Values(&y), &spec).unwrap();
        assert_eq!(mlp, Mlp::he_uniform(&spec.layer_sizes(2), 5).unwrap());
        assert_eq!(report.losses.len(), 1);
    }

    #[test]
    fn divergence_is_reported() {
        let x: Vec<Vec<f64>> = (0..8).map(|i| vec![1e200 * i as f64]).collect();
        let y: Vec<usize> = (0..8).map(|i| i % 2).collect();
        let spec = MlpSpec {
            hidden: vec![],
            epochs: 50,
            batch_size: 4,
            learning_rate: 1e200,
            ..MlpSpec::classification()
        };
        assert!(matches!(
            train(&x, Targets::Classes(&y), &spec),
            Err(Error::Diverged(_))
        ));
    }
}
