use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::milnet::argmax;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub case_id: String,
    pub truth: usize,
    pub predicted: usize,
    pub probs: Vec<f64>,
}

impl Prediction {
    /// Builds a prediction whose class is the argmax of `probs`.
    pub fn from_probs(case_id: impl Into<String>, truth: usize, probs: Vec<f64>) -> Self {
        Prediction {
            case_id: case_id.into(),
            truth,
            predicted: argmax(&probs),
            probs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub n_classes: usize,
    pub predictions: Vec<Prediction>,
}

impl PredictionSet {
    pub fn validate(&self) -> Result<()> {
        for p in &self.predictions {
            if p.truth >= self.n_classes || p.predicted >= self.n_classes || p.probs.len() != self.n_classes {
                return Err(Error::Metric(format!(
                    "prediction for {:?} does not fit {} classes",
                    p.case_id, self.n_classes
                )));
            }
            if p.probs.iter().any(|&q| !(q >= 0.0)) || (p.probs.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
                return Err(Error::Metric(format!(
                    "probabilities for {:?} are not a distribution",
                    p.case_id
                )));
            }
        }
        Ok(())
    }
}

/// Square count matrix, rows = truth, columns = prediction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub counts: Vec<Vec<u64>>,
}

impl Confusion {
    pub fn n_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    fn row_sums(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    fn col_sums(&self) -> Vec<u64> {
        (0..self.n_classes())
            .map(|j| self.counts.iter().map(|r| r[j]).sum())
            .collect()
    }
}

pub fn confusion(preds: &PredictionSet) -> Confusion {
    let c = preds.n_classes;
    let mut counts = vec![vec![0u64; c]; c];
    for p in &preds.predictions {
        counts[p.truth][p.predicted] += 1;
    }
    Confusion { counts }
}

/// Multiclass MCC (Gorodkin's R_K); 0 when the denominator vanishes.
pub fn mcc(cm: &Confusion) -> f64 {
    let s = cm.total() as f64;
    let c: f64 = (0..cm.n_classes()).map(|k| cm.counts[k][k] as f64).sum();
    let p: Vec<f64> = cm.col_sums().into_iter().map(|v| v as f64).collect();
    let t: Vec<f64> = cm.row_sums().into_iter().map(|v| v as f64).collect();
    let pt: f64 = p.iter().zip(&t).map(|(a, b)| a * b).sum();
    let pp: f64 = p.iter().map(|a| a * a).sum();
    let tt: f64 = t.iter().map(|a| a * a).sum();
    let denom = (s * s - pp) * (s * s - tt);
    if denom <= 0.0 {
        return 0.0;
    }
    (c * s - pt) / denom.sqrt()
}

/// Mean recall over classes that have at least one true case.
pub fn balanced_accuracy(cm: &Confusion) -> Result<f64> {
    let recalls: Vec<f64> = cm
        .counts
        .iter()
        .enumerate()
        .filter_map(|(k, row)| {
            let n: u64 = row.iter().sum();
            (n > 0).then(|| row[k] as f64 / n as f64)
        })
        .collect();
    if recalls.is_empty() {
        return Err(Error::Metric("balanced accuracy of an empty confusion matrix".into()));
    }
    Ok(recalls.iter().sum::<f64>() / recalls.len() as f64)
}

/// Per-class F1; `None` for classes without true cases.
pub fn per_class_f1(cm: &Confusion) -> Vec<Option<f64>> {
    let rows = cm.row_sums();
    let cols = cm.col_sums();
    (0..cm.n_classes())
        .map(|k| {
            if rows[k] == 0 {
                return None;
            }
            let tp = cm.counts[k][k] as f64;
            let precision = if cols[k] > 0 { tp / cols[k] as f64 } else { 0.0 };
            let recall = tp / rows[k] as f64;
            Some(if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            })
        })
        .collect()
}

/// Per-class F1 weighted by true-class counts.
pub fn weighted_f1(cm: &Confusion) -> f64 {
    let rows = cm.row_sums();
    let total = cm.total() as f64;
    if total == 0.0 {
        return 0.0;
    }
    per_class_f1(cm)
        .iter()
        .zip(&rows)
        .map(|(f, &n)| f.unwrap_or(0.0) * n as f64 / total)
        .sum()
}

/// Rank-based binary AUROC with midranks for ties.
pub fn binary_auroc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[i].total_cmp(&scores[j]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = midrank;
        }
        i = j + 1;
    }
    let rank_sum: f64 = ranks.iter().zip(positive).filter(|(_, &p)| p).map(|(r, _)| r).sum();
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos * n_neg) as f64)
}

/// Macro one-vs-rest AUROC over classes with both positives and negatives.
pub fn auroc(preds: &PredictionSet) -> Result<f64> {
    let mut values = Vec::new();
    for c in 0..preds.n_classes {
        let scores: Vec<f64> = preds.predictions.iter().map(|p| p.probs[c]).collect();
        let positive: Vec<bool> = preds.predictions.iter().map(|p| p.truth == c).collect();
        match binary_auroc(&scores, &positive) {
            Some(v) => values.push(v),
            None => log::debug!("AUROC: class {c} skipped (one-sided labels)"),
        }
    }
    if values.is_empty() {
        return Err(Error::Metric("AUROC undefined: no class has both positives and negatives".into()));
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricVector {
    pub mcc: f64,
    pub balanced_accuracy: f64,
    pub weighted_f1: f64,
    pub auroc_macro_ovr: f64,
}

pub const METRIC_NAMES: [&str; 4] = ["mcc", "balanced_accuracy", "weighted_f1", "auroc_macro_ovr"];

impl MetricVector {
    pub fn get(&self, name: &str) -> Option<f64> {
        match name {
            "mcc" => Some(self.mcc),
            "balanced_accuracy" => Some(self.balanced_accuracy),
            "weighted_f1" => Some(self.weighted_f1),
            "auroc" | "auroc_macro_ovr" => Some(self.auroc_macro_ovr),
            _ => None,
        }
    }

    pub fn values(&self) -> [f64; 4] {
        [self.mcc, self.balanced_accuracy, self.weighted_f1, self.auroc_macro_ovr]
    }
}

pub fn metric_vector(preds: &PredictionSet) -> Result<MetricVector> {
    preds.validate()?;
    let cm = confusion(preds);
    Ok(MetricVector {
        mcc: mcc(&cm),
        balanced_accuracy: balanced_accuracy(&cm)?,
        weighted_f1: weighted_f1(&cm),
        auroc_macro_ovr: auroc(preds)?,
    })
}
