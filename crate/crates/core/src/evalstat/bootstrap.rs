use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::dataset::Dataset;
use super::metrics::{
    confusion, metric_vector, per_class_f1, Confusion, MetricVector, Prediction, PredictionSet, METRIC_NAMES,
};
use crate::bagio::{make_splits, LabelLevel, SplitFractions, SplitPlan};
use crate::error::{Error, Result};
use crate::milnet::{predict, MilMode, MilModel, ModelConfig};
use crate::rng;
use crate::trainer::{fit, StopReason, TrainConfig, TrainLog};

pub const DEFAULT_REPLICATES: usize = 150;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BootstrapConfig {
    pub n_replicates: usize,
    pub fractions: SplitFractions,
    pub base_seed: u64,
    /// Width of the replicate worker pool; 0 means available parallelism.
    pub workers: usize,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig {
            n_replicates: DEFAULT_REPLICATES,
            fractions: SplitFractions::default(),
            base_seed: 0,
            workers: 0,
        }
    }
}

/// Settings a report was produced under, echoed verbatim.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolEcho {
    pub level: LabelLevel,
    pub mode: MilMode,
    pub fractions: SplitFractions,
    pub n_replicates: usize,
    pub base_seed: u64,
    pub min_epochs: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub lr0: f64,
    pub k_sample: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl ProtocolEcho {
    pub fn new(level: LabelLevel, model: &ModelConfig, train: &TrainConfig, boot: &BootstrapConfig) -> Self {
        ProtocolEcho {
            level,
            mode: model.mode,
            fractions: boot.fractions,
            n_replicates: boot.n_replicates,
            base_seed: boot.base_seed,
            min_epochs: train.min_epochs,
            max_epochs: train.max_epochs,
            patience: train.patience,
            lr0: train.lr0,
            k_sample: model.k_sample,
            model: model.clone(),
            train: train.clone(),
        }
    }
}

/// Outcome of one replicate on one test set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateResult {
    pub replicate_id: usize,
    pub seed: u64,
    pub metrics: Option<MetricVector>,
    pub per_class_f1: Vec<Option<f64>>,
    pub confusion: Option<Confusion>,
    pub best_epoch: Option<usize>,
    pub epochs_run: Option<usize>,
    pub stop_reason: Option<StopReason>,
    pub predictions: Vec<Prediction>,
    pub error: Option<String>,
}

impl ReplicateResult {
    pub(crate) fn failed(replicate_id: usize, seed: u64, err: &Error) -> Self {
        ReplicateResult {
            replicate_id,
            seed,
            metrics: None,
            per_class_f1: Vec::new(),
            confusion: None,
            best_epoch: None,
            epochs_run: None,
            stop_reason: None,
            predictions: Vec::new(),
            error: Some(err.to_string()),
        }
    }

    pub(crate) fn scored(replicate_id: usize, seed: u64, log: &TrainLog, preds: PredictionSet) -> Self {
        let cm = confusion(&preds);
        let (metrics, error) = match metric_vector(&preds) {
            Ok(m) => (Some(m), None),
            Err(e) => (None, Some(e.to_string())),
        };
        ReplicateResult {
            replicate_id,
            seed,
            metrics,
            per_class_f1: per_class_f1(&cm),
            confusion: Some(cm),
            best_epoch: Some(log.best_epoch),
            epochs_run: Some(log.epochs.len()),
            stop_reason: Some(log.stop_reason),
            predictions: preds.predictions,
            error,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    pub std: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

impl MetricSummary {
    /// Mean, sample standard deviation and 2.5/97.5 percentile interval.
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Some(MetricSummary {
            mean,
            std,
            ci_low: percentile(values, 2.5),
            ci_high: percentile(values, 97.5),
        })
    }
}

/// Linearly interpolated percentile, `q` in [0, 100].
pub fn percentile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q / 100.0 * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummaries {
    pub mcc: MetricSummary,
    pub balanced_accuracy: MetricSummary,
    pub weighted_f1: MetricSummary,
    pub auroc_macro_ovr: MetricSummary,
}

impl MetricSummaries {
    pub fn get(&self, name: &str) -> Option<&MetricSummary> {
        match name {
            "mcc" => Some(&self.mcc),
            "balanced_accuracy" => Some(&self.balanced_accuracy),
            "weighted_f1" => Some(&self.weighted_f1),
            "auroc" | "auroc_macro_ovr" => Some(&self.auroc_macro_ovr),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassF1 {
    pub class: String,
    /// Replicates in which the class had true test cases.
    pub n_evaluable: usize,
    pub mean: Option<f64>,
    pub std: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapReport {
    pub protocol: ProtocolEcho,
    pub classes: Vec<String>,
    /// False when any replicate failed to train or score.
    pub complete: bool,
    pub n_failed: usize,
    pub summary: Option<MetricSummaries>,
    pub per_class_f1: Vec<ClassF1>,
    /// Mean count matrix over replicates, each row divided by its sum.
    pub confusion_normalized: Vec<Vec<f64>>,
    pub median_replicate: Option<usize>,
    pub replicates: Vec<ReplicateResult>,
}

impl BootstrapReport {
    /// Aggregates replicates in replicate-id order.
    pub fn aggregate(protocol: ProtocolEcho, classes: Vec<String>, mut replicates: Vec<ReplicateResult>) -> Self {
        replicates.sort_by_key(|r| r.replicate_id);
        let scored: Vec<&ReplicateResult> = replicates.iter().filter(|r| r.metrics.is_some()).collect();
        let column = |i: usize| -> Vec<f64> { scored.iter().map(|r| r.metrics.unwrap().values()[i]).collect() };
        let summary = (!scored.is_empty()).then(|| MetricSummaries {
            mcc: MetricSummary::of(&column(0)).unwrap(),
            balanced_accuracy: MetricSummary::of(&column(1)).unwrap(),
            weighted_f1: MetricSummary::of(&column(2)).unwrap(),
            auroc_macro_ovr: MetricSummary::of(&column(3)).unwrap(),
        });

        let per_class_f1 = classes
            .iter()
            .enumerate()
            .map(|(k, class)| {
                let vals: Vec<f64> = scored.iter().filter_map(|r| r.per_class_f1.get(k).copied().flatten()).collect();
                let s = MetricSummary::of(&vals);
                ClassF1 {
                    class: class.clone(),
                    n_evaluable: vals.len(),
                    mean: s.map(|s| s.mean),
                    std: s.map(|s| s.std),
                }
            })
            .collect();

        let c = classes.len();
        let mut sum = vec![vec![0.0; c]; c];
        let matrices: Vec<&Confusion> = scored.iter().filter_map(|r| r.confusion.as_ref()).collect();
        for m in &matrices {
            for i in 0..c {
                for j in 0..c {
                    sum[i][j] += m.counts[i][j] as f64;
                }
            }
        }
        let confusion_normalized = sum
            .into_iter()
            .map(|row| {
                let total: f64 = row.iter().sum();
                row.into_iter().map(|v| if total > 0.0 { v / total } else { 0.0 }).collect()
            })
            .collect();

        let mccs: Vec<(usize, f64)> = scored.iter().map(|r| (r.replicate_id, r.metrics.unwrap().mcc)).collect();
        let n_failed = replicates.len() - scored.len();
        BootstrapReport {
            complete: n_failed == 0 && replicates.len() == protocol.n_replicates,
            protocol,
            classes,
            n_failed,
            summary,
            per_class_f1,
            confusion_normalized,
            median_replicate: select_median(&mccs),
            replicates,
        }
    }

    /// Per-replicate values of `metric`, `None` for failed replicates.
    pub fn metric_values(&self, metric: &str) -> Result<Vec<Option<f64>>> {
        if !METRIC_NAMES.contains(&metric) && metric != "auroc" {
            return Err(Error::Metric(format!("unknown metric {metric:?}")));
        }
        Ok(self
            .replicates
            .iter()
            .map(|r| r.metrics.and_then(|m| m.get(metric)))
            .collect())
    }

    /// Replicate id whose test MCC is closest to the median MCC.
    pub fn select_median_model(&self) -> Result<usize> {
        self.median_replicate
            .ok_or_else(|| Error::Metric("no scored replicate to select a median model from".into()))
    }
}

/// Id minimizing `|mcc − median|`; ties go to the lowest id.
pub fn select_median(mccs: &[(usize, f64)]) -> Option<usize> {
    if mccs.is_empty() {
        return None;
    }
    let mut sorted: Vec<f64> = mccs.iter().map(|m| m.1).collect();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    };
    mccs.iter()
        .min_by(|a, b| {
            (a.1 - median)
                .abs()
                .total_cmp(&(b.1 - median).abs())
                .then(a.0.cmp(&b.0))
        })
        .map(|m| m.0)
}

/// Runs `f(0..n)` on up to `workers` threads and returns results in index order.
pub fn parallel_map<T, F>(n: usize, workers: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    let workers = match workers {
        0 => std::thread::available_parallelism().map_or(1, |n| n.get()),
        w => w,
    }
    .min(n.max(1));
    if workers <= 1 {
        return (0..n).map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<T>>> = Mutex::new((0..n).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let out = f(i);
                slots.lock().unwrap()[i] = Some(out);
            });
        }
    });
    slots
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|v| v.expect("every index is processed"))
        .collect()
}

/// Model and training settings of replicate `seed`, sized to `dataset`.
pub fn replicate_configs(
    dataset: &Dataset,
    model: &ModelConfig,
    train: &TrainConfig,
    seed: u64,
) -> (ModelConfig, TrainConfig) {
    let mut model = model.clone();
    model.input_dim = dataset.dim();
    model.n_classes = dataset.n_classes();
    model.init_seed = rng::derive(seed, rng::stream::MODEL_INIT);
    let mut train = train.clone();
    train.seed = seed;
    (model, train)
}

/// Trains one replicate on its train/val split.
pub fn train_replicate(
    dataset: &Dataset,
    plan: &SplitPlan,
    model: &ModelConfig,
    train: &TrainConfig,
) -> Result<(MilModel, TrainLog)> {
    let (model_cfg, train_cfg) = replicate_configs(dataset, model, train, plan.seed);
    let net = MilModel::new(model_cfg)?;
    let train_set = dataset.samples(&plan.train)?;
    let val_set = dataset.samples(&plan.val)?;
    fit(net, &train_set, &val_set, &train_cfg)
}

/// Evaluation-mode predictions for `case_ids`.
pub fn predict_cases(model: &MilModel, dataset: &Dataset, case_ids: &[String]) -> Result<PredictionSet> {
    let mut predictions = Vec::with_capacity(case_ids.len());
    for id in case_ids {
        let case = dataset
            .case(id)
            .ok_or_else(|| Error::InvalidManifest(format!("unknown case {id:?}")))?;
        predictions.push(Prediction::from_probs(id.clone(), case.label, predict(model, &case.bag)?));
    }
    Ok(PredictionSet {
        n_classes: dataset.n_classes(),
        predictions,
    })
}

/// Splits of a bootstrap run, one per replicate.
pub fn replicate_plans(dataset: &Dataset, boot: &BootstrapConfig) -> Result<Vec<SplitPlan>> {
    make_splits(
        dataset.manifest(),
        dataset.level,
        &boot.fractions,
        boot.n_replicates,
        boot.base_seed,
    )
}

fn check_run(dataset: &Dataset, model: &ModelConfig, train: &TrainConfig, boot: &BootstrapConfig) -> Result<()> {
    boot.fractions.validate()?;
    train.validate()?;
    if boot.n_replicates == 0 {
        return Err(Error::InvalidConfig("n_replicates must be at least 1".into()));
    }
    if dataset.n_classes() < 2 {
        return Err(Error::InvalidConfig(format!(
            "need at least two classes, got {:?}",
            dataset.classes
        )));
    }
    let (m, _) = replicate_configs(dataset, model, train, 0);
    m.validate()
}

/// Repeated stratified resplitting and retraining. Each replicate fits on its
/// train/val split and is scored on its test split only.
pub fn bootstrap_run(
    dataset: &Dataset,
    model: &ModelConfig,
    train: &TrainConfig,
    boot: &BootstrapConfig,
) -> Result<BootstrapReport> {
    check_run(dataset, model, train, boot)?;
    let plans = replicate_plans(dataset, boot)?;
    let results = parallel_map(plans.len(), boot.workers, |i| {
        let plan = &plans[i];
        let outcome = train_replicate(dataset, plan, model, train).and_then(|(net, log)| {
            let preds = predict_cases(&net, dataset, &plan.test)?;
            Ok(ReplicateResult::scored(i, plan.seed, &log, preds))
        });
        outcome.unwrap_or_else(|e| {
            log::error!("replicate {i} failed: {e}");
            ReplicateResult::failed(i, plan.seed, &e)
        })
    });
    let n = results.iter().filter(|r| r.metrics.is_none()).count();
    if n > 0 {
        log::warn!("{n} of {} replicates did not produce metrics", results.len());
    }
    let protocol = ProtocolEcho::new(dataset.level, model, train, boot);
    Ok(BootstrapReport::aggregate(protocol, dataset.classes.clone(), results))
}

/// Rebuilds the model of one replicate; training is deterministic, so this is
/// the model that replicate scored with.
pub fn retrain_replicate(
    dataset: &Dataset,
    model: &ModelConfig,
    train: &TrainConfig,
    boot: &BootstrapConfig,
    replicate_id: usize,
) -> Result<(MilModel, TrainLog)> {
    let plans = make_splits(
        dataset.manifest(),
        dataset.level,
        &boot.fractions,
        replicate_id + 1,
        boot.base_seed,
    )?;
    train_replicate(dataset, &plans[replicate_id], model, train)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn summary_statistics() {
        let s = MetricSummary::of(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(s.mean, 2.5);
        assert!((s.std - (5.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert!((s.ci_low - 1.075).abs() < 1e-12);
        assert!((s.ci_high - 3.925).abs() < 1e-12);
        let s = MetricSummary::of(&[0.7; 5]).unwrap();
        assert_eq!((s.std, s.ci_low, s.ci_high), (0.0, 0.7, 0.7));
        assert_eq!(MetricSummary::of(&[0.3]).unwrap().std, 0.0);
        assert!(MetricSummary::of(&[]).is_none());
    }

    #[test]
    fn median_selection() {
        assert_eq!(select_median(&[(0, 0.1), (1, 0.5), (2, 0.9)]), Some(1));
        assert_eq!(select_median(&[(0, 0.0), (1, 1.0)]), Some(0));
        assert_eq!(select_median(&[]), None);
    }

    #[test]
    fn median_matches_scan() {
        use rand::Rng;
        let mut r = rng::seeded(11);
        for _ in 0..20 {
            let mccs: Vec<(usize, f64)> = (0..150).map(|i| (i, r.random_range(-1.0..1.0))).collect();
            let mut v: Vec<f64> = mccs.iter().map(|m| m.1).collect();
            v.sort_by(f64::total_cmp);
            let med = (v[74] + v[75]) / 2.0;
            let mut best = 0;
            for (i, m) in mccs.iter().enumerate() {
                if (m.1 - med).abs() < (mccs[best].1 - med).abs() {
                    best = i;
                }
            }
            assert_eq!(select_median(&mccs), Some(best));
        }
    }

    #[test]
    fn pool_preserves_order() {
        for workers in [0, 1, 3, 16] {
            let out = parallel_map(40, workers, |i| i * i);
            assert_eq!(out, (0..40).map(|i| i * i).collect::<Vec<_>>());
        }
        assert!(parallel_map(0, 4, |i| i).is_empty());
    }
}
