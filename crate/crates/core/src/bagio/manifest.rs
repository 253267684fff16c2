use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Level of the diagnostic hierarchy a task classifies at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelLevel {
    Category,
    Family,
    Type,
}

impl LabelLevel {
    pub fn as_str(self) -> &'static str {
        match self {
            LabelLevel::Category => "category",
            LabelLevel::Family => "family",
            LabelLevel::Type => "type",
        }
    }
}

impl fmt::Display for LabelLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LabelLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "category" => Ok(LabelLevel::Category),
            "family" => Ok(LabelLevel::Family),
            "type" => Ok(LabelLevel::Type),
            other => Err(Error::InvalidConfig(format!(
                "unknown label level {other:?} (expected category, family or type)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseRecord {
    pub case_id: String,
    pub site: String,
    pub label_category: String,
    #[serde(default)]
    pub label_family: Option<String>,
    #[serde(default)]
    pub label_type: Option<String>,
    pub bag_path: String,
    /// Instance count of the case's bag; stands in for segmented tissue area.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_instances: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub excluded_reason: Option<String>,
}

impl CaseRecord {
    pub fn label(&self, level: LabelLevel) -> Option<&str> {
        match level {
            LabelLevel::Category => Some(self.label_category.as_str()),
            LabelLevel::Family => self.label_family.as_deref(),
            LabelLevel::Type => self.label_type.as_deref(),
        }
    }
}

/// type → family → category lookup tables.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LabelTaxonomy {
    #[serde(default)]
    pub type_to_family: BTreeMap<String, String>,
    #[serde(default)]
    pub family_to_category: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CohortManifest {
    pub cases: Vec<CaseRecord>,
    #[serde(default)]
    pub label_taxonomy: LabelTaxonomy,
}

/// Kept/dropped case counts per class after thresholding.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CurationReport {
    pub level: Option<LabelLevel>,
    pub min_cases: usize,
    pub missing_label: usize,
    pub excluded: usize,
    pub classes: BTreeMap<String, ClassCount>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCount {
    pub kept: usize,
    pub dropped: usize,
}

impl CurationReport {
    pub fn kept_classes(&self) -> Vec<&str> {
        self.classes
            .iter()
            .filter(|(_, c)| c.kept > 0)
            .map(|(k, _)| k.as_str())
            .collect()
    }
}

impl fmt::Display for CurationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let level = self.level.map(|l| l.as_str()).unwrap_or("-");
        writeln!(f, "curation at level {level}, min_cases {}", self.min_cases)?;
        for (class, c) in &self.classes {
            let status = if c.kept > 0 { "kept" } else { "dropped" };
            writeln!(f, "  {class:<40} {status:<8} kept={} dropped={}", c.kept, c.dropped)?;
        }
        writeln!(f, "  missing label: {}, excluded: {}", self.missing_label, self.excluded)
    }
}

impl CohortManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: CohortManifest = serde_json::from_str(&text)?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        super::format::write_atomic(path.as_ref(), text.as_bytes())
    }

    /// Checks id uniqueness and that case labels agree with the taxonomy.
    pub fn validate(&self) -> Result<()> {
        let mut ids = BTreeSet::new();
        for case in &self.cases {
            if !ids.insert(case.case_id.as_str()) {
                return Err(Error::InvalidManifest(format!(
                    "duplicate case_id {:?}",
                    case.case_id
                )));
            }
        }
        let tax = &self.label_taxonomy;
        for (ty, fam) in &tax.type_to_family {
            if !tax.family_to_category.is_empty() && !tax.family_to_category.contains_key(fam) {
                return Err(Error::InvalidManifest(format!(
                    "type {ty:?} maps to family {fam:?}, which has no category"
                )));
            }
        }
        for case in &self.cases {
            if let (Some(ty), Some(fam)) = (&case.label_type, &case.label_family) {
                if let Some(expected) = tax.type_to_family.get(ty) {
                    if expected != fam {
                        return Err(Error::InvalidManifest(format!(
                            "case {:?}: type {ty:?} belongs to family {expected:?}, not {fam:?}",
                            case.case_id
                        )));
                    }
                }
            }
            if let Some(fam) = &case.label_family {
                if let Some(expected) = tax.family_to_category.get(fam) {
                    if expected != &case.label_category {
                        return Err(Error::InvalidManifest(format!(
                            "case {:?}: family {fam:?} belongs to category {expected:?}, not {:?}",
                            case.case_id, case.label_category
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Resolves a case's bag path relative to `base_dir` unless it is absolute.
    pub fn bag_path(&self, case: &CaseRecord, base_dir: &Path) -> PathBuf {
        let p = Path::new(&case.bag_path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            base_dir.join(p)
        }
    }

    pub fn sites(&self) -> BTreeSet<&str> {
        self.cases.iter().map(|c| c.site.as_str()).collect()
    }

    /// Case counts per class at `level`, ignoring cases without a label there.
    pub fn class_counts(&self, level: LabelLevel) -> BTreeMap<String, usize> {
        let mut counts = BTreeMap::new();
        for c in &self.cases {
            if let Some(label) = c.label(level) {
                *counts.entry(label.to_owned()).or_insert(0) += 1;
            }
        }
        counts
    }

    /// Sorted class names present at `level`.
    pub fn classes(&self, level: LabelLevel) -> Vec<String> {
        self.class_counts(level).into_keys().collect()
    }

    fn with_cases(&self, cases: Vec<CaseRecord>) -> CohortManifest {
        CohortManifest {
            cases,
            label_taxonomy: self.label_taxonomy.clone(),
        }
    }
}

/// Keeps the cases of classes with at least `min_cases` labelled cases at `level`.
/// Cases with no label at `level`, or marked excluded, are dropped first.
pub fn curate(
    manifest: &CohortManifest,
    level: LabelLevel,
    min_cases: usize,
) -> Result<(CohortManifest, CurationReport)> {
    if min_cases == 0 {
        return Err(Error::InvalidConfig("min_cases must be positive".into()));
    }
    let mut report = CurationReport {
        level: Some(level),
        min_cases,
        ..Default::default()
    };
    let eligible: Vec<&CaseRecord> = manifest
        .cases
        .iter()
        .filter(|c| {
            if c.excluded_reason.is_some() {
                report.excluded += 1;
                false
            } else if c.label(level).is_none() {
                report.missing_label += 1;
                false
            } else {
                true
            }
        })
        .collect();

    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for c in &eligible {
        *counts.entry(c.label(level).unwrap()).or_insert(0) += 1;
    }
    for (class, n) in &counts {
        let entry = report.classes.entry((*class).to_owned()).or_default();
        if *n >= min_cases {
            entry.kept = *n;
        } else {
            entry.dropped = *n;
        }
    }
    let kept: Vec<CaseRecord> = eligible
        .into_iter()
        .filter(|c| counts[c.label(level).unwrap()] >= min_cases)
        .cloned()
        .collect();
    if kept.is_empty() {
        return Err(Error::NoClassesSurvive {
            level: level.to_string(),
            min_cases,
        });
    }
    Ok((manifest.with_cases(kept), report))
}

/// Train/test manifests for a site-holdout study.
#[derive(Debug, Clone, PartialEq)]
pub struct SiteHoldout {
    pub train: CohortManifest,
    pub test: CohortManifest,
    pub roster: HoldoutRoster,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct HoldoutRoster {
    pub train_sites: Vec<String>,
    pub test_sites: Vec<String>,
    pub curation: CurationReport,
    /// Surviving class → (train cases, test cases).
    pub classes: BTreeMap<String, (usize, usize)>,
    pub warnings: Vec<String>,
}

/// Splits the cohort by site. The case threshold is applied on the training
/// side only; the test side keeps the classes that survive it.
pub fn make_site_holdout(
    manifest: &CohortManifest,
    train_sites: &BTreeSet<String>,
    level: LabelLevel,
    min_cases: usize,
) -> Result<SiteHoldout> {
    let all_sites = manifest.sites();
    if train_sites.is_empty() {
        return Err(Error::InvalidConfig("no training sites given".into()));
    }
    for s in train_sites {
        if !all_sites.contains(s.as_str()) {
            return Err(Error::InvalidConfig(format!("training site {s:?} not in manifest")));
        }
    }
    if train_sites.len() >= all_sites.len() {
        return Err(Error::InvalidConfig(
            "training sites must leave at least one test site".into(),
        ));
    }
    let (train_cases, test_cases): (Vec<_>, Vec<_>) = manifest
        .cases
        .iter()
        .cloned()
        .partition(|c| train_sites.contains(&c.site));
    let (train, curation) = curate(&manifest.with_cases(train_cases), level, min_cases)?;
    let surviving: BTreeSet<String> = curation.kept_classes().into_iter().map(String::from).collect();
    let test_cases: Vec<CaseRecord> = test_cases
        .into_iter()
        .filter(|c| c.excluded_reason.is_none())
        .filter(|c| c.label(level).is_some_and(|l| surviving.contains(l)))
        .collect();
    let test = manifest.with_cases(test_cases);

    let train_counts = train.class_counts(level);
    let test_counts = test.class_counts(level);
    let mut roster = HoldoutRoster {
        train_sites: train_sites.iter().cloned().collect(),
        test_sites: all_sites
            .iter()
            .filter(|s| !train_sites.contains(**s))
            .map(|s| s.to_string())
            .collect(),
        curation,
        ..Default::default()
    };
    for class in &surviving {
        let n_train = train_counts.get(class).copied().unwrap_or(0);
        let n_test = test_counts.get(class).copied().unwrap_or(0);
        if n_test == 0 {
            let msg = format!("class {class:?} has no cases at any test site");
            log::warn!("{msg}");
            roster.warnings.push(msg);
        }
        roster.classes.insert(class.clone(), (n_train, n_test));
    }
    Ok(SiteHoldout {
        train,
        test,
        roster,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BalanceMode {
    Cases,
    TissueArea,
}

/// Balanced subset per class, either by case count or by total instance count.
///
/// `Cases` samples exactly `target` cases per class. `TissueArea` shuffles each
/// class and takes cases until the running instance total first reaches the
/// smallest class total; `target` is unused in that mode.
pub fn balance_subset(
    manifest: &CohortManifest,
    level: LabelLevel,
    mode: BalanceMode,
    target: usize,
    seed: u64,
) -> Result<CohortManifest> {
    let mut by_class: BTreeMap<&str, Vec<&CaseRecord>> = BTreeMap::new();
    for c in &manifest.cases {
        if let Some(l) = c.label(level) {
            by_class.entry(l).or_default().push(c);
        }
    }
    let mut rng = rng::seeded(rng::derive(seed, rng::stream::BALANCE));
    let mut selected: BTreeSet<&str> = BTreeSet::new();
    match mode {
        BalanceMode::Cases => {
            for (class, cases) in &by_class {
                if cases.len() < target {
                    return Err(Error::ClassTooSmall {
                        class: (*class).to_owned(),
                        count: cases.len(),
                        needed: target,
                    });
                }
                let mut pool = cases.clone();
                pool.shuffle(&mut rng);
                selected.extend(pool[..target].iter().map(|c| c.case_id.as_str()));
            }
        }
        BalanceMode::TissueArea => {
            let area = |c: &CaseRecord| {
                c.n_instances.ok_or_else(|| {
                    Error::InvalidManifest(format!(
                        "case {:?} has no n_instances; needed for tissue-area balancing",
                        c.case_id
                    ))
                })
            };
            let mut totals = BTreeMap::new();
            for (class, cases) in &by_class {
                let mut total = 0u64;
                for c in cases {
                    total += area(c)?;
                }
                totals.insert(*class, total);
            }
            let floor = totals.values().copied().min().unwrap_or(0);
            for (class, cases) in &by_class {
                let mut pool = cases.clone();
                pool.shuffle(&mut rng);
                let mut acc = 0u64;
                for c in pool {
                    if acc >= floor {
                        break;
                    }
                    acc += area(c)?;
                    selected.insert(c.case_id.as_str());
                }
                debug_assert!(acc >= floor, "class {class} short of area floor");
            }
        }
    }
    let cases = manifest
        .cases
        .iter()
        .filter(|c| selected.contains(c.case_id.as_str()))
        .cloned()
        .collect();
    Ok(manifest.with_cases(cases))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn case(id: &str, site: &str, cat: &str, fam: Option<&str>, ty: Option<&str>) -> CaseRecord {
        CaseRecord {
            case_id: id.into(),
            site: site.into(),
            label_category: cat.into(),
            label_family: fam.map(Into::into),
            label_type: ty.map(Into::into),
            bag_path: format!("{id}.fbag"),
            n_instances: None,
            excluded_reason: None,
        }
    }

    fn cohort(sizes: &[(&str, usize)]) -> CohortManifest {
        let mut cases = Vec::new();
        for (class, n) in sizes {
            for i in 0..*n {
                cases.push(case(&format!("{class}-{i}"), "S", class, None, None));
            }
        }
        CohortManifest {
            cases,
            label_taxonomy: LabelTaxonomy::default(),
        }
    }

    #[test]
    fn curate_threshold_boundaries() {
        // 166 pilocytic astrocytoma cases survive a 10-case threshold, a 9-case class does not
        let m = cohort(&[("pilocytic", 166), ("rare", 9), ("eight", 8)]);
        let (kept, report) = curate(&m, LabelLevel::Category, 10).unwrap();
        assert_eq!(kept.class_counts(LabelLevel::Category).len(), 1);
        assert_eq!(report.classes["pilocytic"].kept, 166);
        assert_eq!(report.classes["rare"].dropped, 9);

        let (kept, _) = curate(&m, LabelLevel::Category, 8).unwrap();
        assert_eq!(kept.class_counts(LabelLevel::Category)["eight"], 8);
    }

    #[test]
    fn curate_drops_missing_labels_and_reports_empty() {
        let mut m = cohort(&[("a", 3)]);
        m.cases[0].label_type = Some("t".into());
        let err = curate(&m, LabelLevel::Type, 2).unwrap_err();
        assert!(matches!(err, Error::NoClassesSurvive { .. }));
        let (kept, report) = curate(&m, LabelLevel::Type, 1).unwrap();
        assert_eq!(kept.cases.len(), 1);
        assert_eq!(report.missing_label, 2);
    }

    #[test]
    fn curate_is_idempotent() {
        let m = cohort(&[("a", 12), ("b", 4), ("c", 10)]);
        let (once, _) = curate(&m, LabelLevel::Category, 10).unwrap();
        let (twice, _) = curate(&once, LabelLevel::Category, 10).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn validate_rejects_taxonomy_conflicts() {
        let mut m = cohort(&[]);
        m.cases.push(case("x", "S", "glioma", Some("circumscribed"), Some("pilocytic")));
        m.label_taxonomy
            .type_to_family
            .insert("pilocytic".into(), "ependymal".into());
        assert!(m.validate().is_err());
        m.label_taxonomy
            .type_to_family
            .insert("pilocytic".into(), "circumscribed".into());
        m.label_taxonomy
            .family_to_category
            .insert("circumscribed".into(), "glioma".into());
        m.validate().unwrap();
        m.cases.push(m.cases[0].clone());
        assert!(m.validate().is_err());
    }

    #[test]
    fn manifest_json_ignores_unknown_fields() {
        let text = r#"{"cases":[{"case_id":"a","site":"S","label_category":"c",
            "bag_path":"a.fbag","scanner":"XR"}],"extra":1}"#;
        let m: CohortManifest = serde_json::from_str(text).unwrap();
        assert_eq!(m.cases[0].label_family, None);
    }

    fn sited(rows: &[(&str, &str, usize)]) -> CohortManifest {
        let mut cases = Vec::new();
        for (site, class, n) in rows {
            for i in 0..*n {
                cases.push(case(&format!("{site}-{class}-{i}"), site, class, None, None));
            }
        }
        CohortManifest {
            cases,
            label_taxonomy: LabelTaxonomy::default(),
        }
    }

    #[test]
    fn holdout_partitions_by_site() {
        let m = sited(&[
            ("A", "x", 6),
            ("B", "x", 6),
            ("C", "x", 2),
            ("D", "x", 2),
            ("E", "x", 1),
            ("F", "x", 1),
        ]);
        let train: BTreeSet<String> = ["A", "B"].iter().map(|s| s.to_string()).collect();
        let h = make_site_holdout(&m, &train, LabelLevel::Category, 10).unwrap();
        assert!(h.train.cases.iter().all(|c| c.site == "A" || c.site == "B"));
        let test_sites: BTreeSet<&str> = h.test.cases.iter().map(|c| c.site.as_str()).collect();
        assert_eq!(test_sites, ["C", "D", "E", "F"].into_iter().collect());
        assert_eq!(h.test.cases.len(), 6);
    }

    #[test]
    fn holdout_threshold_applies_to_training_side() {
        // five types at the training sites, one of which is below threshold there
        let m = sited(&[
            ("A", "t1", 10),
            ("B", "t2", 11),
            ("A", "t3", 6),
            ("B", "t3", 6),
            ("A", "t4", 20),
            ("B", "t5", 9),
            ("C", "t1", 5),
            ("C", "t2", 5),
            ("D", "t3", 5),
            ("D", "t4", 5),
            ("D", "t5", 30),
        ]);
        let train: BTreeSet<String> = ["A", "B"].iter().map(|s| s.to_string()).collect();
        let h = make_site_holdout(&m, &train, LabelLevel::Category, 10).unwrap();
        assert_eq!(h.roster.classes.len(), 4);
        assert!(h.test.cases.iter().all(|c| c.label_category != "t5"));
        assert!(h.roster.warnings.is_empty());
    }

    #[test]
    fn holdout_warns_on_class_missing_from_test_sites() {
        let m = sited(&[("A", "x", 12), ("B", "y", 12), ("C", "y", 3)]);
        let train: BTreeSet<String> = ["A", "B"].iter().map(|s| s.to_string()).collect();
        let h = make_site_holdout(&m, &train, LabelLevel::Category, 10).unwrap();
        assert_eq!(h.roster.classes["x"], (12, 0));
        assert_eq!(h.roster.warnings.len(), 1);
    }

    #[test]
    fn holdout_rejects_bad_site_sets() {
        let m = sited(&[("A", "x", 12), ("B", "x", 12)]);
        let all: BTreeSet<String> = ["A", "B"].iter().map(|s| s.to_string()).collect();
        assert!(make_site_holdout(&m, &all, LabelLevel::Category, 1).is_err());
        assert!(make_site_holdout(&m, &BTreeSet::new(), LabelLevel::Category, 1).is_err());
    }

    #[test]
    fn balance_by_cases() {
        let sizes: Vec<(String, usize)> = (0..7).map(|c| (format!("c{c}"), 10 + 3 * c)).collect();
        let refs: Vec<(&str, usize)> = sizes.iter().map(|(s, n)| (s.as_str(), *n)).collect();
        let m = cohort(&refs);
        let b = balance_subset(&m, LabelLevel::Category, BalanceMode::Cases, 10, 5).unwrap();
        assert_eq!(b.cases.len(), 70);
        // smallest class is returned whole
        assert_eq!(b.cases.iter().filter(|c| c.label_category == "c0").count(), 10);
        assert!(balance_subset(&m, LabelLevel::Category, BalanceMode::Cases, 11, 5).is_err());
    }

    #[test]
    fn balance_by_tissue_area_stops_at_smallest_total() {
        // class totals 100, 250, 400 instances
        let per_case: [(&str, &[u64]); 3] = [
            ("a", &[40, 60]),
            ("b", &[50, 30, 70, 100]),
            ("c", &[80, 120, 90, 60, 50]),
        ];
        let mut cases = Vec::new();
        for (class, sizes) in per_case {
            for (i, n) in sizes.iter().enumerate() {
                let mut r = case(&format!("{class}{i}"), "S", class, None, None);
                r.n_instances = Some(*n);
                cases.push(r);
            }
        }
        let m = CohortManifest {
            cases,
            label_taxonomy: LabelTaxonomy::default(),
        };
        for seed in 0..20 {
            let b = balance_subset(&m, LabelLevel::Category, BalanceMode::TissueArea, 0, seed).unwrap();
            for (class, sizes) in per_case {
                let total: u64 = b
                    .cases
                    .iter()
                    .filter(|c| c.label_category == class)
                    .map(|c| c.n_instances.unwrap())
                    .sum();
                let max_single = *sizes.iter().max().unwrap();
                assert!(total >= 100 && total < 100 + max_single, "{class}: {total}");
            }
        }
    }
}
