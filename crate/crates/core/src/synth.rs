//! Seeded Gaussian-blob datasets for tests and benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data_io::{LabelMap, SparseDataset};
use crate::error::{Error, Result};

/// Classes come in pairs `(2p, 2p+1)` that share a base center and differ by
/// a small offset. Pair `p + num_pairs/2` sits at the mirror image of pair
/// `p`, so classes from those two pairs are far apart.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedBlobs {
    pub num_pairs: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub num_features: usize,
    /// Standard deviation of the base-center coordinates.
    pub center_scale: f64,
    /// Distance between the two members of a pair.
    pub pair_offset: f64,
    /// Per-coordinate noise of the instances.
    pub noise: f64,
    pub seed: u64,
}

impl Default for PairedBlobs {
    fn default() -> Self {
        Self {
            num_pairs: 10,
            train_per_class: 200,
            test_per_class: 100,
            num_features: 20,
            center_scale: 2.0,
            pair_offset: 1.0,
            noise: 1.0,
            seed: 0,
        }
    }
}

pub struct Generated {
    pub train: SparseDataset,
    pub test: SparseDataset,
    pub centers: Vec<Vec<f64>>,
}

impl PairedBlobs {
    pub fn num_classes(&self) -> usize {
        2 * self.num_pairs
    }

    /// The two members of each pair.
    pub fn correlated_pairs(&self) -> Vec<(usize, usize)> {
        (0..self.num_pairs).map(|p| (2 * p, 2 * p + 1)).collect()
    }

    /// First member of pair `p` with first member of its mirror pair.
    pub fn anti_correlated_pairs(&self) -> Vec<(usize, usize)> {
        let half = self.num_pairs / 2;
        (0..half).map(|p| (2 * p, 2 * (p + half))).collect()
    }

    pub fn class_centers(&self) -> Result<Vec<Vec<f64>>> {
        if self.num_pairs < 2 || self.num_features == 0 {
            return Err(Error::InvalidArg("paired blobs need at least 2 pairs and 1 feature".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let base_dist = normal(0.0, self.center_scale)?;
        let unit = normal(0.0, 1.0)?;
        let half = self.num_pairs / 2;
        let mut base: Vec<Vec<f64>> = Vec::with_capacity(self.num_pairs);
        for p in 0..self.num_pairs {
            let c = if p >= half && p - half < half {
                base[p - half].iter().map(|v: &f64| -v).collect()
            } else {
                (0..self.num_features).map(|_| base_dist.sample(&mut rng)).collect()
            };
            base.push(c);
        }
        let mut centers = Vec::with_capacity(self.num_classes());
        for c in &base {
            let dir: Vec<f64> = (0..self.num_features).map(|_| unit.sample(&mut rng)).collect();
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            let half_offset = 0.5 * self.pair_offset / norm;
            for sign in [1.0, -1.0] {
                centers.push(c.iter().zip(&dir).map(|(x, d)| x + sign * half_offset * d).collect());
            }
        }
        Ok(centers)
    }

    pub fn generate(&self) -> Result<Generated> {
        let centers = self.class_centers()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x5eed_b10b);
        let train = sample(&centers, self.train_per_class, self.noise, &mut rng)?;
        let test = sample(&centers, self.test_per_class, self.noise, &mut rng)?;
        Ok(Generated { train, test, centers })
    }
}

/// Isotropic blobs with centers drawn from N(0, separation^2).
pub fn blobs(
    num_classes: usize,
    per_class: usize,
    num_features: usize,
    separation: f64,
    seed: u64,
) -> Result<SparseDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = normal(0.0, separation)?;
    let centers: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| (0..num_features).map(|_| dist.sample(&mut rng)).collect())
        .collect();
    sample(&centers, per_class, 1.0, &mut rng)
}

fn normal(mean: f64, sd: f64) -> Result<Normal<f64>> {
    Normal::new(mean, sd).map_err(|e| Error::InvalidArg(format!("bad normal parameters: {e}")))
}

/// Instances cycle through the classes so every prefix is roughly balanced
/// and first-appearance label order equals class order.
fn sample<R: Rng>(centers: &[Vec<f64>], per_class: usize, noise: f64, rng: &mut R) -> Result<SparseDataset> {
    let dist = normal(0.0, noise)?;
    let mut rows = Vec::with_capacity(centers.len() * per_class);
    let mut labels = Vec::with_capacity(rows.capacity());
    for _ in 0..per_class {
        for (k, c) in centers.iter().enumerate() {
            rows.push(c.iter().map(|x| x + dist.sample(rng)).collect::<Vec<f64>>());
            labels.push(k);
        }
    }
    SparseDataset::from_dense(&rows, labels, LabelMap::numbered(centers.len()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dist(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
    }

    #[test]
    fn pair_structure() {
        let spec = PairedBlobs::default();
        let c = spec.class_centers().unwrap();
        assert_eq!(c.len(), 20);
        for (a, b) in spec.correlated_pairs() {
            assert!((dist(&c[a], &c[b]) - 1.0).abs() < 1e-9);
        }
        assert_eq!(spec.anti_correlated_pairs(), vec![(0, 10), (2, 12), (4, 14), (6, 16), (8, 18)]);
        let near: f64 = spec.correlated_pairs().iter().map(|&(a, b)| dist(&c[a], &c[b])).sum();
        let far: f64 = spec.anti_correlated_pairs().iter().map(|&(a, b)| dist(&c[a], &c[b])).sum();
        assert!(far / 5.0 > 5.0 * near / 10.0);
    }

    #[test]
    fn sizes_and_determinism() {
        let spec = PairedBlobs {
            num_pairs: 3,
            train_per_class: 4,
            test_per_class: 2,
            num_features: 5,
            seed: 11,
            ..Default::default()
        };
        let a = spec.generate().unwrap();
        assert_eq!(a.train.len(), 24);
        assert_eq!(a.test.len(), 12);
        assert_eq!(a.train.class_counts(), vec![4; 6]);
        let b = spec.generate().unwrap();
        assert_eq!(a.train, b.train);
        let b5 = blobs(3, 5, 4, 3.0, 1).unwrap();
        assert_eq!(b5.len(), 15);
        assert_eq!(b5, blobs(3, 5, 4, 3.0, 1).unwrap());
    }
}
