use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub const DEFAULT_PERMUTATIONS: usize = 10_000;
pub const ALPHA: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PermTestResult {
    pub n_pairs: usize,
    /// Mean of `a − b`.
    pub observed: f64,
    pub p_value: f64,
    pub n_permutations: usize,
    pub seed: u64,
    pub bonferroni_factor: usize,
    pub alpha: f64,
    /// `alpha / bonferroni_factor`.
    pub alpha_corrected: f64,
    pub significant: bool,
}

/// Two-sided paired permutation test on the mean difference. Every
/// permutation flips the sign of each pair's difference with probability ½.
pub fn perm_test(
    a: &[f64],
    b: &[f64],
    n_permutations: usize,
    seed: u64,
    n_comparisons: usize,
) -> Result<PermTestResult> {
    if a.len() != b.len() {
        return Err(Error::Metric(format!(
            "paired samples differ in length ({} vs {})",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(Error::Metric("permutation test needs at least one pair".into()));
    }
    if n_permutations == 0 || n_comparisons == 0 {
        return Err(Error::Metric("n_permutations and n_comparisons must be positive".into()));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    if diffs.iter().any(|d| !d.is_finite()) {
        return Err(Error::Metric("non-finite paired value".into()));
    }
    let n = diffs.len() as f64;
    let observed = diffs.iter().sum::<f64>() / n;
    // absorbs summation-order noise so equal statistics compare as equal
    let slack = 1e-12 * diffs.iter().map(|d| d.abs()).sum::<f64>().max(1.0) / n;
    let threshold = observed.abs() - slack;

    let mut rng = rng::seeded(seed);
    let mut extreme = 0usize;
    for _ in 0..n_permutations {
        let mut sum = 0.0;
        for chunk in diffs.chunks(64) {
            let bits = rng.next_u64();
            for (j, d) in chunk.iter().enumerate() {
                sum += if bits >> j & 1 == 1 { -d } else { *d };
            }
        }
        if (sum / n).abs() >= threshold {
            extreme += 1;
        }
    }
    let p_value = (1 + extreme) as f64 / (n_permutations + 1) as f64;
    let alpha_corrected = ALPHA / n_comparisons as f64;
    Ok(PermTestResult {
        n_pairs: diffs.len(),
        observed,
        p_value,
        n_permutations,
        seed,
        bonferroni_factor: n_comparisons,
        alpha: ALPHA,
        alpha_corrected,
        significant: p_value < alpha_corrected,
    })
}
