//! Synthetic cohorts with known signal instances, for exercising the MIL
//! pipeline without an image encoder.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::bagio::{write_bag, CaseRecord, CohortManifest, FeatureBag, LabelTaxonomy, PatchCoord};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticBagSpec {
    pub n_classes: usize,
    pub dim: usize,
    pub bag_size_min: usize,
    pub bag_size_max: usize,
    /// Fraction of each bag's instances drawn from the class signal distribution.
    pub signal_fraction: f64,
    /// Distance of each class signal mean from the background mean, in units of `noise_scale`.
    pub separation: f64,
    pub noise_scale: f64,
    pub seed: u64,
}

impl Default for SyntheticBagSpec {
    fn default() -> Self {
        SyntheticBagSpec {
            n_classes: 3,
            dim: 64,
            bag_size_min: 24,
            bag_size_max: 48,
            signal_fraction: 0.2,
            separation: 6.0,
            noise_scale: 1.0,
            seed: 0,
        }
    }
}

impl SyntheticBagSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.n_classes == 0 || self.dim == 0 {
            return bad("n_classes and dim must be positive".into());
        }
        if self.dim < self.n_classes {
            return bad(format!(
                "dim {} cannot hold {} orthogonal class directions",
                self.dim, self.n_classes
            ));
        }
        if self.bag_size_min == 0 || self.bag_size_min > self.bag_size_max {
            return bad(format!(
                "bag size range [{}, {}] invalid",
                self.bag_size_min, self.bag_size_max
            ));
        }
        if !(self.signal_fraction > 0.0 && self.signal_fraction <= 1.0) {
            return bad(format!("signal fraction {} outside (0, 1]", self.signal_fraction));
        }
        if !(self.separation >= 0.0 && self.separation.is_finite()) {
            return bad(format!("separation {} must be finite and non-negative", self.separation));
        }
        if !(self.noise_scale > 0.0 && self.noise_scale.is_finite()) {
            return bad(format!("noise scale {} must be positive", self.noise_scale));
        }
        Ok(())
    }

    /// Mean of class `class`'s signal instances: `separation·σ` along axis `class`.
    pub fn class_mean(&self, class: usize) -> Vec<f64> {
        let mut mu = vec![0.0; self.dim];
        mu[class] = self.separation * self.noise_scale;
        mu
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCase {
    pub bag: FeatureBag,
    pub label: usize,
    /// Ground truth per instance: drawn from the class signal distribution.
    pub signal: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCohort {
    pub manifest: CohortManifest,
    pub cases: Vec<SyntheticCase>,
}

pub fn class_name(c: usize) -> String {
    format!("class_{c}")
}

/// Generates `n_cases_per_class` bags per class. Sites are assigned
/// round-robin over `sites` in case order.
pub fn synth_cohort(
    spec: &SyntheticBagSpec,
    n_cases_per_class: usize,
    sites: &[String],
) -> Result<SyntheticCohort> {
    spec.validate()?;
    if sites.is_empty() {
        return Err(Error::InvalidConfig("at least one site name is required".into()));
    }
    let noise = Normal::new(0.0, spec.noise_scale).expect("validated noise scale");
    let mut taxonomy = LabelTaxonomy::default();
    for c in 0..spec.n_classes {
        taxonomy.type_to_family.insert(format!("type_{c}"), format!("family_{c}"));
        taxonomy.family_to_category.insert(format!("family_{c}"), class_name(c));
    }

    let mut records = Vec::new();
    let mut cases = Vec::new();
    for class in 0..spec.n_classes {
        let mu = spec.class_mean(class);
        for i in 0..n_cases_per_class {
            let index = records.len();
            let case_id = format!("synth-c{class}-{i:04}");
            let mut rng = rng::seeded(rng::derive(
                rng::derive(spec.seed, rng::stream::SYNTH),
                index as u64,
            ));
            let n = rng.random_range(spec.bag_size_min..=spec.bag_size_max);
            let n_signal = ((spec.signal_fraction * n as f64).round() as usize).clamp(1, n);
            let mut signal = vec![false; n];
            signal[..n_signal].fill(true);
            signal.shuffle(&mut rng);

            let mut features = Vec::with_capacity(n * spec.dim);
            for &is_signal in &signal {
                for m in &mu {
                    let shift = if is_signal { *m } else { 0.0 };
                    features.push((shift + noise.sample(&mut rng)) as f32);
                }
            }
            let coords = (0..n)
                .map(|k| PatchCoord {
                    slide: 0,
                    x: (k % 16) as i32 * 224,
                    y: (k / 16) as i32 * 224,
                })
                .collect();
            let bag = FeatureBag::new(case_id.clone(), spec.dim, coords, features)?;
            records.push(CaseRecord {
                case_id: case_id.clone(),
                site: sites[index % sites.len()].clone(),
                label_category: class_name(class),
                label_family: Some(format!("family_{class}")),
                label_type: Some(format!("type_{class}")),
                bag_path: format!("bags/{case_id}.fbag"),
                n_instances: Some(n as u64),
                excluded_reason: None,
            });
            cases.push(SyntheticCase {
                bag,
                label: class,
                signal,
            });
        }
    }
    Ok(SyntheticCohort {
        manifest: CohortManifest {
            cases: records,
            label_taxonomy: taxonomy,
        },
        cases,
    })
}

impl SyntheticCohort {
    /// Writes `manifest.json` and one FBAG per case under `dir/bags/`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let bags = dir.join("bags");
        std::fs::create_dir_all(&bags).map_err(|e| Error::io(&bags, e))?;
        for (record, case) in self.manifest.cases.iter().zip(&self.cases) {
            write_bag(&case.bag, dir.join(&record.bag_path))?;
        }
        self.manifest.save(dir.join("manifest.json"))
    }
}
