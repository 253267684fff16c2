//! Tissue segmentation, patch grids and synthetic cohorts.

mod patches;
mod segment;
mod synth;

pub use patches::{extract_patches, PatchGrid, DEFAULT_MIN_TISSUE_FRACTION, DEFAULT_PATCH_SIZE};
pub use segment::{
    downsample, median_filter, otsu_threshold, remove_small_components, saturation,
    segment_tissue, TissueMask, MEDIAN_WINDOW, MIN_COMPONENT_CELLS,
};
pub use synth::{class_name, synth_cohort, SyntheticBagSpec, SyntheticCase, SyntheticCohort};
