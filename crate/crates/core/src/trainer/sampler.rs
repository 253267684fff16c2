use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;

use crate::error::{Error, Result};
use crate::rng::{self, Rng};

/// Per-case draw probabilities proportional to `1 / count(class(case))`.
pub fn inverse_frequency_weights(labels: &[usize]) -> Result<Vec<f64>> {
    if labels.is_empty() {
        return Err(Error::InvalidConfig("no training cases to sample from".into()));
    }
    let n_classes = labels.iter().max().unwrap() + 1;
    let mut counts = vec![0usize; n_classes];
    for &l in labels {
        counts[l] += 1;
    }
    let raw: Vec<f64> = labels.iter().map(|&l| 1.0 / counts[l] as f64).collect();
    let total: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|w| w / total).collect())
}

/// Endless with-replacement stream of case indices, class-balanced in expectation.
#[derive(Debug, Clone)]
pub struct WeightedSampler {
    dist: WeightedIndex<f64>,
    rng: Rng,
}

impl WeightedSampler {
    pub fn new(labels: &[usize], seed: u64) -> Result<Self> {
        let weights = inverse_frequency_weights(labels)?;
        let dist = WeightedIndex::new(&weights)
            .map_err(|e| Error::InvalidConfig(format!("sampler weights: {e}")))?;
        Ok(WeightedSampler {
            dist,
            rng: rng::seeded(seed),
        })
    }
}

impl Iterator for WeightedSampler {
    type Item = usize;

    fn next(&mut self) -> Option<usize> {
        Some(self.dist.sample(&mut self.rng))
    }
}

pub fn weighted_sampler(labels: &[usize], seed: u64) -> Result<WeightedSampler> {
    WeightedSampler::new(labels, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalizes_inverse_counts_over_cases() {
        let w = inverse_frequency_weights(&[0, 1, 2, 2]).unwrap();
        // class weights 1, 1, ½ spread over four cases
        let expected = [1.0 / 3.0, 1.0 / 3.0, 1.0 / 6.0, 1.0 / 6.0];
        for (a, b) in w.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn single_class_is_uniform() {
        let w = inverse_frequency_weights(&[0; 5]).unwrap();
        assert!(w.iter().all(|&x| (x - 0.2).abs() < 1e-15));
    }

    #[test]
    fn imbalanced_classes_are_drawn_evenly() {
        let mut labels = vec![0; 75];
        labels.extend([1; 25]);
        let draws = 100_000;
        let hits_b = weighted_sampler(&labels, 42)
            .unwrap()
            .take(draws)
            .filter(|&i| labels[i] == 1)
            .count();
        assert!((hits_b as f64 / draws as f64 - 0.5).abs() < 0.01);
    }

    #[test]
    fn deterministic_per_seed() {
        let labels = [0, 0, 1, 2, 2, 2];
        let a: Vec<usize> = weighted_sampler(&labels, 9).unwrap().take(50).collect();
        let b: Vec<usize> = weighted_sampler(&labels, 9).unwrap().take(50).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_labels_rejected() {
        assert!(weighted_sampler(&[], 0).is_err());
    }
}
