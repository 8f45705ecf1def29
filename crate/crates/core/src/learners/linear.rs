//! Linear least-squares learner trained by normalized SGD.
//!
//! Each step moves the weights by `lr * (y - f(x)) * x / (1 + |x|^2)`, which
//! stays stable for any `lr` in (0, 2) regardless of feature scale.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data_io::{SparseDataset, SparseRow};

#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl LinearModel {
    pub fn zeros(num_features: usize) -> Self {
        Self {
            weights: vec![0.0; num_features],
            bias: 0.0,
        }
    }

    /// Features beyond the trained width carry no weight.
    #[inline]
    pub fn predict(&self, row: SparseRow<'_>) -> f64 {
        self.bias
            + row
                .iter()
                .filter_map(|(f, v)| self.weights.get(f).map(|w| w * v))
                .sum::<f64>()
    }

    /// `epochs` passes over `data` in a freshly shuffled order per pass.
    pub fn train(&mut self, data: &SparseDataset, targets: &[f64], lr: f64, epochs: usize, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..data.len()).collect();
        for _ in 0..epochs {
            order.shuffle(&mut rng);
            for &i in &order {
                let row = data.row(i);
                let err = targets[i] - self.predict(row);
                let norm: f64 = 1.0 + row.values.iter().map(|v| v * v).sum::<f64>();
                let step = lr * err / norm;
                for (f, v) in row.iter() {
                    self.weights[f] += step * v;
                }
                self.bias += step;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_io::LabelMap;

    #[test]
    fn recovers_linear_function() {
        let rows: Vec<Vec<f64>> = (0..60)
            .map(|i| vec![(i % 7) as f64 * 0.3 - 1.0, (i % 5) as f64 * 0.5 - 1.0])
            .collect();
        let targets: Vec<f64> = rows.iter().map(|r| 2.0 * r[0] - r[1] + 0.5).collect();
        let d = SparseDataset::from_dense(&rows, vec![0; 60], LabelMap::numbered(1)).unwrap();
        let mut m = LinearModel::zeros(2);
        m.train(&d, &targets, 0.5, 200, 1);
        assert!((m.weights[0] - 2.0).abs() < 1e-3, "{:?}", m);
        assert!((m.weights[1] + 1.0).abs() < 1e-3);
        assert!((m.bias - 0.5).abs() < 1e-3);
    }
}
