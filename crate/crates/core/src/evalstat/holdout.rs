use serde::{Deserialize, Serialize};

use super::bootstrap::{
    parallel_map, predict_cases, replicate_plans, train_replicate, BootstrapConfig, BootstrapReport,
    ProtocolEcho, ReplicateResult,
};
use super::dataset::Dataset;
use super::metrics::METRIC_NAMES;
use crate::bagio::HoldoutRoster;
use crate::error::{Error, Result};
use crate::milnet::ModelConfig;
use crate::trainer::TrainConfig;

pub const DEFAULT_HOLDOUT_REPLICATES: usize = 5;

/// Out-of-site minus in-site mean of one metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricDrop {
    pub metric: String,
    pub in_site: f64,
    pub out_of_site: f64,
    pub difference: f64,
    /// "↓" when out-of-site is lower, "↑" when higher, "=" when equal.
    pub direction: String,
}

impl MetricDrop {
    fn new(metric: &str, in_site: f64, out_of_site: f64) -> Self {
        let difference = out_of_site - in_site;
        let direction = if difference < 0.0 {
            "↓"
        } else if difference > 0.0 {
            "↑"
        } else {
            "="
        };
        MetricDrop {
            metric: metric.to_owned(),
            in_site,
            out_of_site,
            difference,
            direction: direction.to_owned(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HoldoutReport {
    pub roster: Option<HoldoutRoster>,
    pub in_site: BootstrapReport,
    pub out_of_site: BootstrapReport,
    /// One entry per metric, MCC first.
    pub drops: Vec<MetricDrop>,
}

impl HoldoutReport {
    pub fn mcc_drop(&self) -> Option<&MetricDrop> {
        self.drops.iter().find(|d| d.metric == "mcc")
    }
}

/// Site-holdout study: every replicate splits the training-site cohort,
/// fits, then scores both its in-site test split and the whole held-out cohort.
pub fn holdout_run(
    train_sites: &Dataset,
    test_sites: &Dataset,
    model: &ModelConfig,
    train: &TrainConfig,
    boot: &BootstrapConfig,
    roster: Option<HoldoutRoster>,
) -> Result<HoldoutReport> {
    if train_sites.classes != test_sites.classes {
        return Err(Error::InvalidConfig(format!(
            "held-out cohort classes {:?} differ from training classes {:?}",
            test_sites.classes, train_sites.classes
        )));
    }
    if test_sites.is_empty() {
        return Err(Error::InvalidConfig("held-out cohort is empty".into()));
    }
    if test_sites.dim() != train_sites.dim() {
        return Err(Error::DimensionMismatch(format!(
            "held-out bags have dimension {}, training bags {}",
            test_sites.dim(),
            train_sites.dim()
        )));
    }
    boot.fractions.validate()?;
    train.validate()?;
    let plans = replicate_plans(train_sites, boot)?;
    let outside: Vec<String> = test_sites.cases().iter().map(|c| c.case_id.clone()).collect();

    let pairs = parallel_map(plans.len(), boot.workers, |i| {
        let plan = &plans[i];
        let outcome = train_replicate(train_sites, plan, model, train).and_then(|(net, log)| {
            let inside = predict_cases(&net, train_sites, &plan.test)?;
            let out = predict_cases(&net, test_sites, &outside)?;
            Ok((
                ReplicateResult::scored(i, plan.seed, &log, inside),
                ReplicateResult::scored(i, plan.seed, &log, out),
            ))
        });
        outcome.unwrap_or_else(|e| {
            log::error!("holdout replicate {i} failed: {e}");
            (
                ReplicateResult::failed(i, plan.seed, &e),
                ReplicateResult::failed(i, plan.seed, &e),
            )
        })
    });
    let (inside, outside): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
    let protocol = ProtocolEcho::new(train_sites.level, model, train, boot);
    let in_site = BootstrapReport::aggregate(protocol.clone(), train_sites.classes.clone(), inside);
    let out_of_site = BootstrapReport::aggregate(protocol, test_sites.classes.clone(), outside);

    let drops = match (&in_site.summary, &out_of_site.summary) {
        (Some(a), Some(b)) => METRIC_NAMES
            .iter()
            .map(|m| MetricDrop::new(m, a.get(m).unwrap().mean, b.get(m).unwrap().mean))
            .collect(),
        _ => Vec::new(),
    };
    Ok(HoldoutReport {
        roster,
        in_site,
        out_of_site,
        drops,
    })
}
