//! Feature bags on disk, cohort manifests, curation and splitting.

mod format;
mod manifest;
mod split;

pub use format::{
    concat_case, read_bag, write_bag, FeatureBag, PatchCoord, COORD_RECORD_LEN, HEADER_LEN,
    MAGIC, VERSION,
};
pub(crate) use format::write_atomic;
pub use manifest::{
    balance_subset, curate, make_site_holdout, BalanceMode, CaseRecord, ClassCount,
    CohortManifest, CurationReport, HoldoutRoster, LabelLevel, LabelTaxonomy, SiteHoldout,
};
pub use split::{allocate, make_splits, SplitFractions, SplitPlan};
