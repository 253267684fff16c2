//! Experiment configuration files.
//!
//! Relative paths in a config file resolve against the file's directory.
//! Command-line flags override file values; the resolved configuration is
//! echoed as `effective_config.json` into every output directory.

use std::path::{Path, PathBuf};

use milpath::bagio::{BalanceMode, LabelLevel, SplitFractions};
use milpath::evalstat::{BootstrapConfig, DEFAULT_HOLDOUT_REPLICATES, DEFAULT_REPLICATES};
use milpath::milnet::{MilMode, ModelConfig, DEFAULT_ATTN_DIM, DEFAULT_HIDDEN_DIM, DEFAULT_K_SAMPLE};
use milpath::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const DEFAULT_MIN_CASES: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub level: LabelLevel,
    /// Curation threshold: classes with fewer labelled cases are dropped.
    pub min_cases: usize,
    pub manifest: Option<PathBuf>,
    /// Base directory of the manifest's bag paths; defaults to the manifest's directory.
    pub bag_dir: Option<PathBuf>,
    /// Not echoed, so runs into different directories produce identical echoes.
    #[serde(skip_serializing)]
    pub output_dir: Option<PathBuf>,
    /// Source of all randomness. `train.seed` is replaced by it.
    pub seed: u64,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub bootstrap: BootstrapSection,
    pub holdout: HoldoutSection,
    pub balance: Option<BalanceSection>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            level: LabelLevel::Category,
            min_cases: DEFAULT_MIN_CASES,
            manifest: None,
            bag_dir: None,
            output_dir: None,
            seed: 0,
            model: ModelSection::default(),
            train: TrainConfig::default(),
            bootstrap: BootstrapSection::default(),
            holdout: HoldoutSection::default(),
            balance: None,
        }
    }
}

/// Model settings; input and output widths come from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub mode: MilMode,
    pub hidden_dim: usize,
    pub attn_dim: usize,
    pub dropout_input: f64,
    pub dropout_hidden: f64,
    pub k_sample: usize,
    pub subtyping: bool,
    /// Defaults depend on the mode (ABMIL 1.0/0.0, CLAM 0.7/0.3).
    pub bag_weight: Option<f64>,
    pub instance_weight: Option<f64>,
    pub svm_margin: f64,
    pub svm_tau: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = ModelConfig::new(MilMode::Abmil, 1, 1);
        ModelSection {
            mode: MilMode::Abmil,
            hidden_dim: DEFAULT_HIDDEN_DIM,
            attn_dim: DEFAULT_ATTN_DIM,
            dropout_input: d.dropout_input,
            dropout_hidden: d.dropout_hidden,
            k_sample: DEFAULT_K_SAMPLE,
            subtyping: false,
            bag_weight: None,
            instance_weight: None,
            svm_margin: d.svm_margin,
            svm_tau: d.svm_tau,
        }
    }
}

impl ModelSection {
    pub fn resolve(&self, input_dim: usize, n_classes: usize) -> ModelConfig {
        let mut cfg = ModelConfig::new(self.mode, input_dim, n_classes);
        cfg.hidden_dim = self.hidden_dim;
        cfg.attn_dim = self.attn_dim;
        cfg.dropout_input = self.dropout_input;
        cfg.dropout_hidden = self.dropout_hidden;
        cfg.k_sample = self.k_sample;
        cfg.subtyping = self.subtyping;
        cfg.bag_weight = self.bag_weight.unwrap_or(cfg.bag_weight);
        cfg.instance_weight = self.instance_weight.unwrap_or(cfg.instance_weight);
        cfg.svm_margin = self.svm_margin;
        cfg.svm_tau = self.svm_tau;
        cfg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BootstrapSection {
    pub n_replicates: usize,
    pub fractions: SplitFractions,
}

impl Default for BootstrapSection {
    fn default() -> Self {
        BootstrapSection {
            n_replicates: DEFAULT_REPLICATES,
            fractions: SplitFractions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HoldoutSection {
    pub train_sites: Vec<String>,
    pub n_replicates: usize,
    /// Training-side threshold; falls back to the top-level `min_cases`.
    pub min_cases: Option<usize>,
}

impl Default for HoldoutSection {
    fn default() -> Self {
        HoldoutSection {
            train_sites: Vec::new(),
            n_replicates: DEFAULT_HOLDOUT_REPLICATES,
            min_cases: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BalanceSection {
    pub mode: BalanceMode,
    /// Cases per class; unused for `tissue_area`.
    #[serde(default)]
    pub target: usize,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.manifest, &mut cfg.bag_dir, &mut cfg.output_dir].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    /// Parses JSON, naming the offending field and position on error.
    pub fn parse(text: &str) -> Result<Self, String> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let field = e.path().to_string();
            if field == "." {
                e.inner().to_string()
            } else {
                format!("field `{field}`: {}", e.inner())
            }
        })
    }

    /// Checks everything that can be checked before data is read.
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.min_cases == 0 {
            return bad("min_cases must be positive".into());
        }
        if self.bootstrap.n_replicates == 0 {
            return bad("bootstrap.n_replicates must be positive".into());
        }
        if self.holdout.n_replicates == 0 {
            return bad("holdout.n_replicates must be positive".into());
        }
        if self.holdout.min_cases == Some(0) {
            return bad("holdout.min_cases must be positive".into());
        }
        self.bootstrap.fractions.validate()?;
        self.train.validate()?;
        self.model.resolve(1, 1).validate()?;
        Ok(())
    }

    pub fn manifest_path(&self) -> Result<&Path, CliError> {
        self.manifest
            .as_deref()
            .ok_or_else(|| CliError::Usage("no manifest: set `manifest` in the config or pass --manifest".into()))
    }

    pub fn output_path(&self) -> Result<&Path, CliError> {
        self.output_dir
            .as_deref()
            .ok_or_else(|| CliError::Usage("no output directory: set `output_dir` in the config or pass --out".into()))
    }

    pub fn bootstrap_config(&self, workers: usize) -> BootstrapConfig {
        BootstrapConfig {
            n_replicates: self.bootstrap.n_replicates,
            fractions: self.bootstrap.fractions,
            base_seed: self.seed,
            workers,
        }
    }

    pub fn holdout_min_cases(&self) -> usize {
        self.holdout.min_cases.unwrap_or(self.min_cases)
    }
}
