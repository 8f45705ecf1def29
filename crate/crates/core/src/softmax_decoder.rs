//! Differentiable softmax decoding.
//!
//! Removing `sgn` from Hamming decoding and flipping the sign of the codewords
//! turns the per-class distance into `t_k = 1/2 * sum_j (1 + M_kj o_j)`, which
//! is a linear model `t_k = 1/2 (theta_k . o + b_k)` with `theta_k = M_k` and
//! `b_k = L`. Softmax over `t` gives class probabilities, and the decoder is
//! trained by mini-batch gradient descent on
//!
//! ```text
//! J = -sum_k [ (1 - y_k) log(1 - p_k) + y_k log(p_k) ]
//! ```
//!
//! i.e. a sum of per-class binary cross-entropies on the softmax outputs.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::codebook::CodingMatrix;
use crate::error::{Error, Result};
use crate::matrix::{argmax, dot, Matrix};
use crate::textfmt;

const HEADER: &str = "lightmc-decoder";

/// Clamp applied to probabilities before taking logarithms.
pub const PROB_EPSILON: f64 = 1e-12;

pub const DEFAULT_LEARNING_RATE: f64 = 0.1;
pub const DEFAULT_BATCH_SIZE: usize = 256;

/// Weights (K x L) and biases (K) of the softmax decoding model.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams {
    weights: Matrix,
    biases: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeResult {
    pub scores: Vec<f64>,
    pub probabilities: Vec<f64>,
    pub predicted: usize,
}

/// Gradients of the loss for a single instance.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGradients {
    pub weights: Matrix,
    pub biases: Vec<f64>,
    pub outputs: Vec<f64>,
}

/// Mini-batch gradient descent settings for [`train_decoding`].
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderTraining {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub l2: f64,
    pub seed: u64,
}

impl Default for DecoderTraining {
    fn default() -> Self {
        Self {
            learning_rate: DEFAULT_LEARNING_RATE,
            batch_size: DEFAULT_BATCH_SIZE,
            epochs: 1,
            l2: 0.0,
            seed: 0,
        }
    }
}

impl DecoderParams {
    pub fn new(weights: Matrix, biases: Vec<f64>) -> Result<Self> {
        if biases.len() != weights.rows() {
            return Err(Error::DimensionMismatch {
                what: "decoder biases",
                expected: weights.rows(),
                found: biases.len(),
            });
        }
        if weights.rows() == 0 || weights.cols() == 0 {
            return Err(Error::InvalidArg("decoder needs at least one class and column".into()));
        }
        if !weights.is_finite() || biases.iter().any(|b| !b.is_finite()) {
            return Err(Error::NonFiniteInput("decoder parameters"));
        }
        Ok(Self { weights, biases })
    }

    /// Weights copied from the codewords, every bias equal to L.
    pub fn from_matrix(matrix: &CodingMatrix) -> Self {
        let l = matrix.code_length() as f64;
        Self {
            weights: matrix.entries().clone(),
            biases: vec![l; matrix.num_classes()],
        }
    }

    /// Identity weights with zero biases: decoding then picks the largest raw
    /// output, which is how one-versus-all predicts.
    pub fn argmax_identity(num_classes: usize) -> Self {
        let mut weights = Matrix::zeros(num_classes, num_classes);
        for k in 0..num_classes {
            weights[(k, k)] = 1.0;
        }
        Self {
            weights,
            biases: vec![0.0; num_classes],
        }
    }

    #[inline]
    pub fn num_classes(&self) -> usize {
        self.weights.rows()
    }

    #[inline]
    pub fn code_length(&self) -> usize {
        self.weights.cols()
    }

    pub fn weights(&self) -> &Matrix {
        &self.weights
    }

    pub fn biases(&self) -> &[f64] {
        &self.biases
    }

    fn check_outputs(&self, outputs: &[f64]) -> Result<()> {
        if outputs.len() != self.code_length() {
            return Err(Error::DimensionMismatch {
                what: "base learner outputs",
                expected: self.code_length(),
                found: outputs.len(),
            });
        }
        if outputs.iter().any(|o| !o.is_finite()) {
            return Err(Error::NonFiniteInput("base learner outputs"));
        }
        Ok(())
    }

    fn scores_unchecked(&self, outputs: &[f64]) -> Vec<f64> {
        self.weights
            .iter_rows()
            .zip(&self.biases)
            .map(|(theta, b)| 0.5 * (dot(theta, outputs) + b))
            .collect()
    }

    /// Similarity scores `t_k = 1/2 (theta_k . o + b_k)`.
    pub fn scores(&self, outputs: &[f64]) -> Result<Vec<f64>> {
        self.check_outputs(outputs)?;
        Ok(self.scores_unchecked(outputs))
    }

    pub fn decode(&self, outputs: &[f64]) -> Result<DecodeResult> {
        let scores = self.scores(outputs)?;
        let probabilities = softmax(&scores);
        // argmax over scores equals argmax over probabilities, without the
        // ties that exp() rounding can introduce
        let predicted = argmax(&scores);
        Ok(DecodeResult {
            scores,
            probabilities,
            predicted,
        })
    }

    pub fn predict(&self, outputs: &[f64]) -> Result<usize> {
        self.check_outputs(outputs)?;
        Ok(argmax(&self.scores_unchecked(outputs)))
    }

    /// Exact gradients of `J` with respect to weights, biases, and outputs.
    pub fn loss_gradients(&self, outputs: &[f64], label: usize) -> Result<LossGradients> {
        self.check_outputs(outputs)?;
        self.check_label(label)?;
        let dt = self.score_gradient(outputs, label);
        let (k, l) = (self.num_classes(), self.code_length());
        let mut weights = Matrix::zeros(k, l);
        for (c, &g) in dt.iter().enumerate() {
            for (w, o) in weights.row_mut(c).iter_mut().zip(outputs) {
                *w = 0.5 * g * o;
            }
        }
        let biases = dt.iter().map(|g| 0.5 * g).collect();
        let outputs = self.output_gradient(&dt);
        Ok(LossGradients {
            weights,
            biases,
            outputs,
        })
    }

    /// `dJ/do` for one instance; the data-wise gradient used to refine the
    /// coding matrix.
    pub fn output_gradient_for(&self, outputs: &[f64], label: usize) -> Result<Vec<f64>> {
        self.check_outputs(outputs)?;
        self.check_label(label)?;
        Ok(self.output_gradient(&self.score_gradient(outputs, label)))
    }

    fn output_gradient(&self, dt: &[f64]) -> Vec<f64> {
        let mut grad = vec![0.0; self.code_length()];
        for (theta, g) in self.weights.iter_rows().zip(dt) {
            for (d, w) in grad.iter_mut().zip(theta) {
                *d += 0.5 * g * w;
            }
        }
        grad
    }

    /// `dJ/dt_m = h_m - p_m * sum_k h_k` where `h_y = -1` for the true class
    /// and `h_k = p_k / (1 - p_k)` otherwise.
    fn score_gradient(&self, outputs: &[f64], label: usize) -> Vec<f64> {
        let scores = self.scores_unchecked(outputs);
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|t| (t - max).exp()).collect();
        let total: f64 = exps.iter().sum();

        // 1 - p_k computed from the other classes' mass, avoiding cancellation
        let k = exps.len();
        let mut suffix = vec![0.0; k + 1];
        for c in (0..k).rev() {
            suffix[c] = suffix[c + 1] + exps[c];
        }
        let mut prefix = 0.0;
        let mut h = vec![0.0; k];
        for c in 0..k {
            let rest = prefix + suffix[c + 1];
            prefix += exps[c];
            h[c] = if c == label {
                -1.0
            } else {
                let p = exps[c] / total;
                p / (rest / total).max(PROB_EPSILON)
            };
        }
        let h_sum: f64 = h.iter().sum();
        h.iter()
            .zip(&exps)
            .map(|(hc, e)| hc - (e / total) * h_sum)
            .collect()
    }

    fn check_label(&self, label: usize) -> Result<()> {
        if label >= self.num_classes() {
            return Err(Error::IndexOutOfRange {
                index: label,
                bound: self.num_classes(),
            });
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(
            s,
            "{HEADER} v1 {} {}",
            self.num_classes(),
            self.code_length()
        )
        .unwrap();
        for row in self.weights.iter_rows() {
            textfmt::push_reals(&mut s, row);
        }
        textfmt::push_reals(&mut s, &self.biases);
        s
    }

    pub fn from_text(text: &str, origin: &Path) -> Result<Self> {
        let mut lines = textfmt::Lines::new(text, "decoder", origin);
        let (k, l) = lines.header(HEADER)?;
        let mut weights = Matrix::zeros(k, l);
        for i in 0..k {
            let row = lines.reals(l)?;
            weights.row_mut(i).copy_from_slice(&row);
        }
        let biases = lines.reals(k)?;
        lines.finish()?;
        Self::new(weights, biases).map_err(|e| lines.error(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?, path)
    }
}

/// Softmax with max-subtraction.
pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|t| (t - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Sum of per-class binary cross-entropies against the one-hot label.
pub fn loss(probabilities: &[f64], label: usize) -> Result<f64> {
    if label >= probabilities.len() {
        return Err(Error::IndexOutOfRange {
            index: label,
            bound: probabilities.len(),
        });
    }
    let hi = 1.0 - PROB_EPSILON;
    Ok(-probabilities
        .iter()
        .enumerate()
        .map(|(k, &p)| {
            let p = p.clamp(PROB_EPSILON, hi);
            if k == label {
                p.ln()
            } else {
                (1.0 - p).ln()
            }
        })
        .sum::<f64>())
}

/// Mean of [`loss`] over a batch of output rows.
pub fn mean_loss(params: &DecoderParams, outputs: &Matrix, labels: &[usize]) -> Result<f64> {
    check_batch(params, outputs, labels)?;
    if labels.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut total = 0.0;
    for (o, &y) in outputs.iter_rows().zip(labels) {
        total += loss(&params.decode(o)?.probabilities, y)?;
    }
    Ok(total / labels.len() as f64)
}

fn check_batch(params: &DecoderParams, outputs: &Matrix, labels: &[usize]) -> Result<()> {
    if outputs.rows() != labels.len() {
        return Err(Error::DimensionMismatch {
            what: "output rows vs labels",
            expected: labels.len(),
            found: outputs.rows(),
        });
    }
    if outputs.cols() != params.code_length() {
        return Err(Error::DimensionMismatch {
            what: "output columns",
            expected: params.code_length(),
            found: outputs.cols(),
        });
    }
    Ok(())
}

/// Mini-batch gradient descent on the decoder parameters.
///
/// Each epoch reshuffles the instances with a generator seeded from
/// `config.seed`; the last short batch is kept. Weights follow
/// `theta <- theta - lr * (mean batch gradient + l2 * theta)`; biases take the
/// plain gradient step. Gradients are summed in batch order so a seeded run is
/// reproducible.
pub fn train_decoding(
    params: &DecoderParams,
    outputs: &Matrix,
    labels: &[usize],
    config: &DecoderTraining,
) -> Result<DecoderParams> {
    check_batch(params, outputs, labels)?;
    if !(config.learning_rate > 0.0) || !config.learning_rate.is_finite() {
        return Err(Error::InvalidArg("decoder learning rate must be positive".into()));
    }
    if config.batch_size == 0 {
        return Err(Error::InvalidArg("decoder batch size must be positive".into()));
    }
    if !(config.l2 >= 0.0) {
        return Err(Error::InvalidArg("l2 penalty must be nonnegative".into()));
    }
    let mut params = params.clone();
    if config.epochs == 0 {
        return Ok(params);
    }
    if labels.is_empty() {
        return Err(Error::EmptyDataset);
    }
    for o in outputs.iter_rows() {
        params.check_outputs(o)?;
    }
    for &y in labels {
        params.check_label(y)?;
    }

    let (k, l) = (params.num_classes(), params.code_length());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..labels.len()).collect();
    let mut grad_w = Matrix::zeros(k, l);
    let mut grad_b = vec![0.0; k];

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            grad_w.as_mut_slice().fill(0.0);
            grad_b.fill(0.0);
            for &i in batch {
                let o = outputs.row(i);
                let dt = params.score_gradient(o, labels[i]);
                for (c, &g) in dt.iter().enumerate() {
                    grad_b[c] += 0.5 * g;
                    for (w, x) in grad_w.row_mut(c).iter_mut().zip(o) {
                        *w += 0.5 * g * x;
                    }
                }
            }
            if !grad_w.is_finite() || grad_b.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteGradient(format!(
                    "decoder gradient in epoch {epoch}, batch of {} instances",
                    batch.len()
                )));
            }
            let scale = 1.0 / batch.len() as f64;
            let lr = config.learning_rate;
            for (w, g) in params
                .weights
                .as_mut_slice()
                .iter_mut()
                .zip(grad_w.as_slice())
            {
                *w -= lr * (g * scale + config.l2 * *w);
            }
            for (b, g) in params.biases.iter_mut().zip(&grad_b) {
                *b -= lr * g * scale;
            }
            if !params.weights.is_finite() || params.biases.iter().any(|b| !b.is_finite()) {
                return Err(Error::NonFiniteGradient(format!(
                    "decoder parameters diverged in epoch {epoch}"
                )));
            }
        }
    }
    Ok(params)
}
