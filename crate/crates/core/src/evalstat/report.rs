use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use super::bootstrap::BootstrapReport;
use super::holdout::HoldoutReport;
use super::metrics::METRIC_NAMES;
use crate::bagio::write_atomic;
use crate::error::Result;

/// Pretty JSON with a trailing newline, written atomically.
pub fn write_json<T: Serialize + ?Sized>(value: &T, path: impl AsRef<Path>) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path.as_ref(), text.as_bytes())
}

pub fn write_text(text: &str, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), text.as_bytes())
}

fn mean_pm_std(mean: f64, std: f64) -> String {
    format!("{mean:.2}±{std:.2}")
}

/// One row per metric: mean, std, 95% CI and the `mean±std` cell.
pub fn bootstrap_csv(report: &BootstrapReport, configuration: &str) -> String {
    let mut out = String::from("configuration,metric,n_replicates,mean,std,ci_low,ci_high,mean_pm_std\n");
    let n = report.replicates.len() - report.n_failed;
    for m in METRIC_NAMES {
        match report.summary.as_ref().and_then(|s| s.get(m)) {
            Some(s) => writeln!(
                out,
                "{configuration},{m},{n},{:.6},{:.6},{:.6},{:.6},{}",
                s.mean,
                s.std,
                s.ci_low,
                s.ci_high,
                mean_pm_std(s.mean, s.std)
            ),
            None => writeln!(out, "{configuration},{m},0,,,,,"),
        }
        .unwrap();
    }
    out
}

/// Per-class F1 table: class, evaluable replicates, mean, std.
pub fn class_f1_csv(report: &BootstrapReport) -> String {
    let mut out = String::from("class,n_evaluable,mean,std\n");
    for c in &report.per_class_f1 {
        let fmt = |v: Option<f64>| v.map(|v| format!("{v:.6}")).unwrap_or_else(|| "not-evaluable".into());
        writeln!(out, "{},{},{},{}", c.class, c.n_evaluable, fmt(c.mean), fmt(c.std)).unwrap();
    }
    out
}

/// In-site and out-of-site columns with the difference and its direction.
pub fn holdout_csv(report: &HoldoutReport) -> String {
    let mut out = String::from(
        "metric,in_site_mean,in_site_std,out_of_site_mean,out_of_site_std,difference,direction,in_site,out_of_site\n",
    );
    for d in &report.drops {
        let a = report.in_site.summary.as_ref().and_then(|s| s.get(&d.metric)).unwrap();
        let b = report.out_of_site.summary.as_ref().and_then(|s| s.get(&d.metric)).unwrap();
        writeln!(
            out,
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{},{},{}",
            d.metric,
            a.mean,
            a.std,
            b.mean,
            b.std,
            d.difference,
            d.direction,
            mean_pm_std(a.mean, a.std),
            mean_pm_std(b.mean, b.std)
        )
        .unwrap();
    }
    out
}
