use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::manifest::{CohortManifest, LabelLevel};
use crate::error::{Error, Result};
use crate::rng;

/// Train/validation/test proportions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions {
            train: 0.5,
            val: 0.2,
            test: 0.3,
        }
    }
}

impl SplitFractions {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|f| !(f.is_finite() && *f > 0.0)) {
            return Err(Error::InvalidConfig(format!(
                "split fractions must be positive, got {parts:?}"
            )));
        }
        if (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!(
                "split fractions must sum to 1, got {parts:?}"
            )));
        }
        Ok(())
    }

    fn as_array(&self) -> [f64; 3] {
        [self.train, self.val, self.test]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub replicate_id: usize,
    pub seed: u64,
    pub stratify_level: LabelLevel,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

/// Per-class (train, val, test) counts: largest-remainder rounding of
/// `n · fraction`, then at least one case in every partition.
pub fn allocate(n: usize, fractions: &SplitFractions) -> Result<[usize; 3]> {
    if n < 3 {
        return Err(Error::ClassTooSmall {
            class: String::new(),
            count: n,
            needed: 3,
        });
    }
    let quotas = fractions.as_array().map(|f| f * n as f64);
    let mut counts = quotas.map(|q| q.floor() as usize);
    let mut order = [0usize, 1, 2];
    // largest fractional part first; earlier partitions win ties
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    let mut remaining = n - counts.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if remaining == 0 {
            break;
        }
        counts[i] += 1;
        remaining -= 1;
    }
    for i in 0..3 {
        if counts[i] == 0 {
            let donor = (0..3).max_by_key(|&j| (counts[j], 3 - j)).unwrap();
            counts[donor] -= 1;
            counts[i] += 1;
        }
    }
    Ok(counts)
}

/// Class-stratified subject-level splits, one per replicate. Replicate `i` is
/// drawn from seed `base_seed ^ i`, so any replicate can be rebuilt alone.
pub fn make_splits(
    manifest: &CohortManifest,
    level: LabelLevel,
    fractions: &SplitFractions,
    n_replicates: usize,
    base_seed: u64,
) -> Result<Vec<SplitPlan>> {
    fractions.validate()?;
    let mut by_class: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for c in &manifest.cases {
        if let Some(label) = c.label(level) {
            by_class.entry(label).or_default().push(c.case_id.as_str());
        }
    }
    let mut allocations = Vec::with_capacity(by_class.len());
    for (class, ids) in by_class.iter_mut() {
        ids.sort_unstable();
        let counts = allocate(ids.len(), fractions).map_err(|_| Error::ClassTooSmall {
            class: (*class).to_owned(),
            count: ids.len(),
            needed: 3,
        })?;
        allocations.push(counts);
    }

    (0..n_replicates)
        .map(|replicate_id| {
            let seed = rng::replicate_seed(base_seed, replicate_id);
            let mut rng = rng::seeded(rng::derive(seed, rng::stream::SPLIT));
            let mut plan = SplitPlan {
                replicate_id,
                seed,
                stratify_level: level,
                train: Vec::new(),
                val: Vec::new(),
                test: Vec::new(),
            };
            for (ids, counts) in by_class.values().zip(&allocations) {
                let mut pool = ids.clone();
                pool.shuffle(&mut rng);
                let (train, rest) = pool.split_at(counts[0]);
                let (val, test) = rest.split_at(counts[1]);
                plan.train.extend(train.iter().map(|s| s.to_string()));
                plan.val.extend(val.iter().map(|s| s.to_string()));
                plan.test.extend(test.iter().map(|s| s.to_string()));
            }
            Ok(plan)
        })
        .collect()
}
