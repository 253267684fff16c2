use std::collections::HashMap;
use std::path::Path;

use crate::bagio::{read_bag, CohortManifest, FeatureBag, LabelLevel};
use crate::error::{Error, Result};
use crate::tiler::SyntheticCohort;
use crate::trainer::Sample;

/// A labelled case held in memory.
#[derive(Debug, Clone)]
pub struct DataCase {
    pub case_id: String,
    pub site: String,
    pub label: usize,
    pub bag: FeatureBag,
}

/// Bags of a curated cohort with class indices at one label level.
/// Class `i` is `classes[i]`.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub level: LabelLevel,
    pub classes: Vec<String>,
    manifest: CohortManifest,
    cases: Vec<DataCase>,
    index: HashMap<String, usize>,
}

impl Dataset {
    /// Reads every bag of `manifest`; classes are the sorted labels present.
    pub fn load(manifest: &CohortManifest, base_dir: &Path, level: LabelLevel) -> Result<Self> {
        let classes = manifest.classes(level);
        Self::load_with_classes(manifest, base_dir, level, &classes)
    }

    /// Like [`Dataset::load`] with a fixed class list, so a held-out cohort
    /// shares the class indices of its training cohort.
    pub fn load_with_classes(
        manifest: &CohortManifest,
        base_dir: &Path,
        level: LabelLevel,
        classes: &[String],
    ) -> Result<Self> {
        let mut bags = Vec::with_capacity(manifest.cases.len());
        for case in &manifest.cases {
            let bag = read_bag(manifest.bag_path(case, base_dir))?;
            if bag.case_id != case.case_id {
                log::warn!(
                    "bag {:?} carries case id {:?}, manifest says {:?}",
                    case.bag_path,
                    bag.case_id,
                    case.case_id
                );
            }
            bags.push(bag);
        }
        Self::from_bags(manifest, level, classes, bags)
    }

    /// Builds a dataset from bags given in manifest case order.
    pub fn from_bags(
        manifest: &CohortManifest,
        level: LabelLevel,
        classes: &[String],
        bags: Vec<FeatureBag>,
    ) -> Result<Self> {
        if bags.len() != manifest.cases.len() {
            return Err(Error::InvalidManifest(format!(
                "{} bags for {} cases",
                bags.len(),
                manifest.cases.len()
            )));
        }
        if classes.is_empty() {
            return Err(Error::InvalidManifest("no classes".into()));
        }
        let class_index: HashMap<&str, usize> =
            classes.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
        let mut cases = Vec::with_capacity(bags.len());
        let mut index = HashMap::new();
        let mut dim = None;
        for (record, bag) in manifest.cases.iter().zip(bags) {
            let label = record.label(level).ok_or_else(|| {
                Error::InvalidManifest(format!("case {:?} has no {level} label", record.case_id))
            })?;
            let label = *class_index.get(label).ok_or_else(|| {
                Error::InvalidManifest(format!(
                    "case {:?}: class {label:?} is not among {classes:?}",
                    record.case_id
                ))
            })?;
            match dim {
                None => dim = Some(bag.dim()),
                Some(d) if d != bag.dim() => {
                    return Err(Error::DimensionMismatch(format!(
                        "case {:?} has dimension {}, earlier cases {d}",
                        record.case_id,
                        bag.dim()
                    )))
                }
                _ => {}
            }
            if index.insert(record.case_id.clone(), cases.len()).is_some() {
                return Err(Error::InvalidManifest(format!("duplicate case {:?}", record.case_id)));
            }
            cases.push(DataCase {
                case_id: record.case_id.clone(),
                site: record.site.clone(),
                label,
                bag,
            });
        }
        Ok(Dataset {
            level,
            classes: classes.to_vec(),
            manifest: manifest.clone(),
            cases,
            index,
        })
    }

    /// In-memory dataset over a synthetic cohort.
    pub fn from_synthetic(cohort: &SyntheticCohort, level: LabelLevel) -> Result<Self> {
        let classes = cohort.manifest.classes(level);
        let bags = cohort.cases.iter().map(|c| c.bag.clone()).collect();
        Self::from_bags(&cohort.manifest, level, &classes, bags)
    }

    pub fn manifest(&self) -> &CohortManifest {
        &self.manifest
    }

    pub fn cases(&self) -> &[DataCase] {
        &self.cases
    }

    pub fn len(&self) -> usize {
        self.cases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cases.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    /// Feature dimension; 0 for an empty dataset.
    pub fn dim(&self) -> usize {
        self.cases.first().map_or(0, |c| c.bag.dim())
    }

    pub fn case(&self, case_id: &str) -> Option<&DataCase> {
        self.index.get(case_id).map(|&i| &self.cases[i])
    }

    pub fn samples(&self, case_ids: &[String]) -> Result<Vec<Sample<'_>>> {
        case_ids
            .iter()
            .map(|id| {
                self.case(id)
                    .map(|c| (&c.bag, c.label))
                    .ok_or_else(|| Error::InvalidManifest(format!("unknown case {id:?}")))
            })
            .collect()
    }
}
