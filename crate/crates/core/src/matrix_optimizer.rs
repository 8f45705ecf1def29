//! Coding-matrix refinement from class-averaged output gradients.
//!
//! If base learners fit their targets exactly, every instance of class k
//! outputs `o = M_k`, so `dJ/dM_kj` equals the output gradient `dJ/do_j`. Real
//! learners do not, so the per-class mean of the data-wise output gradients is
//! used as the estimate and `M_k <- M_k - gamma2 * mean_k(G)`.

use crate::codebook::CodingMatrix;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::softmax_decoder::DecoderParams;

pub const DEFAULT_LEARNING_RATE: f64 = 0.2;

/// Per-class sums of output gradients and per-class instance counts.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassGradientStats {
    pub sums: Matrix,
    pub counts: Vec<usize>,
}

impl ClassGradientStats {
    pub fn zeros(num_classes: usize, code_length: usize) -> Self {
        Self {
            sums: Matrix::zeros(num_classes, code_length),
            counts: vec![0; num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    /// Adds one instance's gradient row to its class.
    pub fn add(&mut self, label: usize, gradient: &[f64]) -> Result<()> {
        if label >= self.num_classes() {
            return Err(Error::IndexOutOfRange {
                index: label,
                bound: self.num_classes(),
            });
        }
        if gradient.len() != self.sums.cols() {
            return Err(Error::DimensionMismatch {
                what: "gradient row",
                expected: self.sums.cols(),
                found: gradient.len(),
            });
        }
        for (s, g) in self.sums.row_mut(label).iter_mut().zip(gradient) {
            *s += g;
        }
        self.counts[label] += 1;
        Ok(())
    }
}

/// Sums gradient rows by class label, in row order.
pub fn accumulate(gradients: &Matrix, labels: &[usize], num_classes: usize) -> Result<ClassGradientStats> {
    if gradients.rows() != labels.len() {
        return Err(Error::DimensionMismatch {
            what: "gradient rows vs labels",
            expected: labels.len(),
            found: gradients.rows(),
        });
    }
    let mut stats = ClassGradientStats::zeros(num_classes, gradients.cols());
    for (g, &y) in gradients.iter_rows().zip(labels) {
        stats.add(y, g)?;
    }
    Ok(stats)
}

/// Data-wise output gradients `G_i = dJ/do` under the given decoder.
pub fn output_gradients(decoder: &DecoderParams, outputs: &Matrix, labels: &[usize]) -> Result<Matrix> {
    if outputs.rows() != labels.len() {
        return Err(Error::DimensionMismatch {
            what: "output rows vs labels",
            expected: labels.len(),
            found: outputs.rows(),
        });
    }
    let mut grads = Matrix::zeros(outputs.rows(), decoder.code_length());
    for (i, (o, &y)) in outputs.iter_rows().zip(labels).enumerate() {
        let g = decoder.output_gradient_for(o, y)?;
        grads.row_mut(i).copy_from_slice(&g);
    }
    Ok(grads)
}

/// Applies `M_kj <- M_kj - lr * S_kj / C_k` to every class seen in `stats`.
/// Classes with no instances keep their row bit-for-bit.
pub fn update_matrix(matrix: &CodingMatrix, stats: &ClassGradientStats, lr: f64) -> Result<CodingMatrix> {
    CodingMatrix::new(update_entries(matrix.entries(), stats, lr)?)
}

/// [`update_matrix`] on a bare K x L array, without the coding-matrix shape
/// rules.
pub fn update_entries(entries: &Matrix, stats: &ClassGradientStats, lr: f64) -> Result<Matrix> {
    if !(lr > 0.0) || !lr.is_finite() {
        return Err(Error::InvalidArg("matrix learning rate must be positive".into()));
    }
    if stats.num_classes() != entries.rows() {
        return Err(Error::DimensionMismatch {
            what: "gradient stats classes",
            expected: entries.rows(),
            found: stats.num_classes(),
        });
    }
    if stats.sums.cols() != entries.cols() {
        return Err(Error::DimensionMismatch {
            what: "gradient stats columns",
            expected: entries.cols(),
            found: stats.sums.cols(),
        });
    }
    let mut entries = entries.clone();
    for (k, &count) in stats.counts.iter().enumerate() {
        if count == 0 {
            continue;
        }
        let c = count as f64;
        for (m, s) in entries.row_mut(k).iter_mut().zip(stats.sums.row(k)) {
            *m -= lr * (s / c);
        }
    }
    if !entries.is_finite() {
        return Err(Error::NonFiniteGradient(
            "coding matrix update produced a non-finite entry".into(),
        ));
    }
    Ok(entries)
}

/// Mini-batch variant: one averaged update per contiguous slice of `batch`
/// instances, applied in order.
pub fn update_matrix_minibatch(
    matrix: &CodingMatrix,
    gradients: &Matrix,
    labels: &[usize],
    lr: f64,
    batch: usize,
) -> Result<CodingMatrix> {
    if batch == 0 {
        return Err(Error::InvalidArg("matrix batch size must be positive".into()));
    }
    if gradients.rows() != labels.len() {
        return Err(Error::DimensionMismatch {
            what: "gradient rows vs labels",
            expected: labels.len(),
            found: gradients.rows(),
        });
    }
    let mut current = matrix.clone();
    let mut start = 0;
    while start < labels.len() {
        let end = (start + batch).min(labels.len());
        let mut stats = ClassGradientStats::zeros(matrix.num_classes(), gradients.cols());
        for i in start..end {
            stats.add(labels[i], gradients.row(i))?;
        }
        current = update_matrix(&current, &stats, lr)?;
        start = end;
    }
    Ok(current)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn accumulate_hand_example() {
        let g = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]).unwrap();
        let s = accumulate(&g, &[0, 0, 1], 4).unwrap();
        assert_eq!(s.sums.row(0), &[4.0, 6.0]);
        assert_eq!(s.sums.row(1), &[5.0, 6.0]);
        assert_eq!(s.sums.row(2), &[0.0, 0.0]);
        assert_eq!(s.counts, vec![2, 1, 0, 0]);
        assert_eq!(s.total(), 3);
    }

    #[test]
    fn accumulate_zero_gradients() {
        let s = accumulate(&Matrix::zeros(5, 3), &[2, 0, 1, 2, 2], 3).unwrap();
        assert!(s.sums.as_slice().iter().all(|&v| v == 0.0));
        assert_eq!(s.counts, vec![1, 1, 3]);
    }

    #[test]
    fn accumulate_errors() {
        let g = Matrix::zeros(2, 2);
        assert!(matches!(accumulate(&g, &[0], 3), Err(Error::DimensionMismatch { .. })));
        assert!(matches!(accumulate(&g, &[0, 3], 3), Err(Error::IndexOutOfRange { .. })));
    }

    fn two_by_one() -> CodingMatrix {
        // CodingMatrix needs K >= 3; the third class stays absent
        CodingMatrix::from_rows(&[[1.0], [-1.0], [0.25]]).unwrap()
    }

    #[test]
    fn update_hand_example() {
        let stats = ClassGradientStats {
            sums: Matrix::from_rows(&[[0.5], [-0.5], [0.0]]).unwrap(),
            counts: vec![1, 1, 0],
        };
        let m = update_matrix(&two_by_one(), &stats, 0.2).unwrap();
        assert_eq!(m.codeword(0), &[0.9]);
        assert_eq!(m.codeword(1), &[-0.9]);
        assert_eq!(m.codeword(2), &[0.25]);
    }

    #[test]
    fn update_two_class_example_on_raw_entries() {
        let entries = Matrix::from_rows(&[[1.0], [-1.0]]).unwrap();
        let stats = ClassGradientStats {
            sums: Matrix::from_rows(&[[0.5], [-0.5]]).unwrap(),
            counts: vec![1, 1],
        };
        let m = update_entries(&entries, &stats, 0.2).unwrap();
        assert_eq!(m.as_slice(), &[0.9, -0.9]);
    }

    #[test]
    fn update_with_zero_stats_is_identity() {
        let m = CodingMatrix::init_random(5, 4, 2).unwrap();
        let stats = ClassGradientStats {
            sums: Matrix::zeros(5, 4),
            counts: vec![3, 0, 1, 2, 7],
        };
        assert_eq!(update_matrix(&m, &stats, DEFAULT_LEARNING_RATE).unwrap(), m);
    }

    #[test]
    fn update_errors() {
        let m = two_by_one();
        let stats = ClassGradientStats::zeros(3, 1);
        assert!(update_matrix(&m, &stats, 0.0).is_err());
        assert!(matches!(
            update_matrix(&m, &ClassGradientStats::zeros(4, 1), 0.2),
            Err(Error::DimensionMismatch { .. })
        ));
        let huge = ClassGradientStats {
            sums: Matrix::from_rows(&[[f64::MAX], [0.0], [0.0]]).unwrap(),
            counts: vec![1, 0, 0],
        };
        assert!(matches!(update_matrix(&m, &huge, 1e10), Err(Error::NonFiniteGradient(_))));
    }

    #[test]
    fn minibatch_with_one_batch_matches_full_batch() {
        let m = CodingMatrix::init_random(3, 3, 9).unwrap();
        let g = Matrix::from_rows(&[[0.1, 0.2, -0.3], [0.5, -0.1, 0.0], [0.2, 0.2, 0.2]]).unwrap();
        let labels = [0, 2, 0];
        let full = update_matrix(&m, &accumulate(&g, &labels, 3).unwrap(), 0.2).unwrap();
        let mini = update_matrix_minibatch(&m, &g, &labels, 0.2, 10).unwrap();
        assert_eq!(full, mini);
    }

    proptest! {
        #[test]
        fn absent_classes_untouched(
            seed in 0u64..1000,
            labels in prop::collection::vec(0usize..3, 1..40),
        ) {
            // classes 3..8 never appear
            let m = CodingMatrix::init_random(8, 5, seed).unwrap();
            let grads: Vec<Vec<f64>> = labels
                .iter()
                .enumerate()
                .map(|(i, _)| (0..5).map(|j| ((i * 7 + j * 3) % 11) as f64 - 5.0).collect())
                .collect();
            let g = Matrix::from_rows(&grads).unwrap();
            let updated = update_matrix(&m, &accumulate(&g, &labels, 8).unwrap(), 0.2).unwrap();
            for k in 3..8 {
                let same = m.codeword(k).iter().zip(updated.codeword(k)).all(|(a, b)| a.to_bits() == b.to_bits());
                prop_assert!(same);
            }
        }

        #[test]
        fn permuting_instances_preserves_stats(
            labels in prop::collection::vec(0usize..4, 1..20),
            rotate in 0usize..20,
        ) {
            // integer-valued gradients keep the sums exact under reordering
            let rows: Vec<Vec<f64>> = (0..labels.len()).map(|i| vec![i as f64, (i * i) as f64]).collect();
            let g = Matrix::from_rows(&rows).unwrap();
            let n = labels.len();
            let perm: Vec<usize> = (0..n).map(|i| (i + rotate) % n).collect();
            let pl: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();
            let a = accumulate(&g, &labels, 4).unwrap();
            let b = accumulate(&g.select_rows(&perm), &pl, 4).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn update_is_linear_in_sums(
            seed in 0u64..200,
            s1 in prop::collection::vec(-2f64..2.0, 16),
            s2 in prop::collection::vec(-2f64..2.0, 16),
            counts in prop::collection::vec(1usize..9, 4),
        ) {
            let m = CodingMatrix::init_random(4, 4, seed).unwrap();
            let a = ClassGradientStats { sums: Matrix::from_vec(4, 4, s1.clone()).unwrap(), counts: counts.clone() };
            let b = ClassGradientStats { sums: Matrix::from_vec(4, 4, s2.clone()).unwrap(), counts: counts.clone() };
            let sum: Vec<f64> = s1.iter().zip(&s2).map(|(x, y)| x + y).collect();
            let ab = ClassGradientStats { sums: Matrix::from_vec(4, 4, sum).unwrap(), counts };
            let twice = update_matrix(&update_matrix(&m, &a, 0.2).unwrap(), &b, 0.2).unwrap();
            let once = update_matrix(&m, &ab, 0.2).unwrap();
            for (x, y) in twice.entries().as_slice().iter().zip(once.entries().as_slice()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
