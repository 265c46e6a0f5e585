//! Seeded synthetic classification tasks for tests, benchmarks and demos.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::data::{Dataset, SparseExample, SparseVec};
use crate::rng::{self, Purpose};

/// Isotropic Gaussian components, each carrying a class label.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture {
    pub centers: Vec<Vec<f64>>,
    pub labels: Vec<f64>,
    pub std: f64,
}

impl GaussianMixture {
    /// `k` blobs with centers uniform in `[-half_width, half_width]^dim`,
    /// alternately labelled +1 and -1.
    pub fn blobs(k: usize, dim: usize, half_width: f64, std: f64, seed: u64) -> Self {
        let mut rng = rng::stream(seed, Purpose::Synthetic, u64::MAX);
        let centers = (0..k)
            .map(|_| (0..dim).map(|_| rng.random_range(-half_width..half_width)).collect())
            .collect();
        let labels = (0..k).map(|c| if c % 2 == 0 { 1.0 } else { -1.0 }).collect();
        GaussianMixture { centers, labels, std }
    }

    /// Two overlapping 2-D classes, each a mixture of `per_class` bumps whose
    /// centers scatter around (1, 0) and (0, 1) respectively.
    pub fn two_class(per_class: usize, std: f64, seed: u64) -> Self {
        let mut rng = rng::stream(seed, Purpose::Synthetic, u64::MAX);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let mut centers = Vec::new();
        let mut labels = Vec::new();
        for (label, mean) in [(1.0, [1.0, 0.0]), (-1.0, [0.0, 1.0])] {
            for _ in 0..per_class {
                centers.push(mean.iter().map(|m| m + normal.sample(&mut rng)).collect());
                labels.push(label);
            }
        }
        GaussianMixture { centers, labels, std }
    }

    pub fn dim(&self) -> usize {
        self.centers.first().map_or(0, Vec::len)
    }

    /// `n` examples; component chosen uniformly per example.
    pub fn sample(&self, n: usize, seed: u64) -> Vec<SparseExample> {
        let mut rng = rng::stream(seed, Purpose::Synthetic, 0);
        let noise = Normal::new(0.0, self.std).expect("finite std");
        (0..n)
            .map(|_| {
                let c = rng::below(&mut rng, self.centers.len() as u64) as usize;
                let x: Vec<f64> = self.centers[c].iter().map(|m| m + noise.sample(&mut rng)).collect();
                SparseExample { features: SparseVec::from_dense(&x), label: self.labels[c] }
            })
            .collect()
    }
}

/// Two interleaved 2-D spirals with Gaussian jitter.
pub fn two_spirals(n: usize, turns: f64, noise: f64, seed: u64) -> Vec<SparseExample> {
    let mut rng = rng::stream(seed, Purpose::Synthetic, 1);
    let jitter = Normal::new(0.0, noise).expect("finite noise");
    (0..n)
        .map(|i| {
            let t: f64 = rng.random_range(0.05..1.0);
            let angle = t * turns * std::f64::consts::TAU;
            let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
            let x = [
                sign * t * angle.cos() + jitter.sample(&mut rng),
                sign * t * angle.sin() + jitter.sample(&mut rng),
            ];
            SparseExample { features: SparseVec::from_dense(&x), label: sign }
        })
        .collect()
}

/// Wraps examples with the given feature dimension.
pub fn dataset(examples: Vec<SparseExample>, dim: usize) -> Dataset {
    Dataset { examples, dim }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_data() {
        let g = GaussianMixture::blobs(10, 3, 5.0, 0.5, 1);
        assert_eq!(g.sample(50, 2), g.sample(50, 2));
        assert_ne!(g.sample(50, 2), g.sample(50, 3));
        assert_eq!(two_spirals(20, 1.5, 0.05, 4), two_spirals(20, 1.5, 0.05, 4));
    }

    #[test]
    fn blob_points_stay_near_their_center() {
        let g = GaussianMixture::blobs(4, 2, 10.0, 0.1, 7);
        for ex in g.sample(200, 0) {
            let x = ex.features.to_dense(2);
            let near = g
                .centers
                .iter()
                .zip(&g.labels)
                .any(|(c, &l)| l == ex.label && ((x[0] - c[0]).powi(2) + (x[1] - c[1]).powi(2)).sqrt() < 1.0);
            assert!(near);
        }
    }

    #[test]
    fn classes_are_balanced_ish() {
        let g = GaussianMixture::two_class(5, 0.45, 3);
        let pos = g.sample(2000, 1).iter().filter(|e| e.label > 0.0).count();
        assert!((800..1200).contains(&pos));
        assert_eq!(g.dim(), 2);
    }
}
