//! CLAM-SB instance branch: attention-ranked instance selection and the
//! smooth top-1 SVM loss on pseudo-labelled instances.

use super::forward::{head_logits, ForwardTrace};
use super::model::{MilMode, MilModel};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Selection {
    pub top: Vec<usize>,
    pub bottom: Vec<usize>,
    /// Effective k after clamping to `floor(K/2)`.
    pub k: usize,
    pub reduced: bool,
}

/// Indices of the `k` highest and `k` lowest attention weights.
///
/// Top is taken first, ordering by descending weight then ascending index;
/// bottom is taken from the remaining instances by ascending weight then
/// ascending index, so the two sets never overlap.
pub fn clam_select(attention: &[f64], k: usize) -> Selection {
    let n = attention.len();
    let eff = k.min(n / 2);
    let reduced = eff < k;
    if reduced {
        log::warn!("bag of {n} instances cannot supply 2×{k} instances; using k = {eff}");
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| attention[j].total_cmp(&attention[i]).then(i.cmp(&j)));
    let top: Vec<usize> = order[..eff].to_vec();
    let mut rest: Vec<usize> = order[eff..].to_vec();
    rest.sort_by(|&i, &j| attention[i].total_cmp(&attention[j]).then(i.cmp(&j)));
    let bottom = rest[..eff].to_vec();
    Selection {
        top,
        bottom,
        k: eff,
        reduced,
    }
}

/// Smooth top-1 multiclass SVM loss and its gradient w.r.t. `logits`:
/// `τ·log Σ_j exp((margin·[j≠target] + l_j − l_target)/τ)`.
pub fn smooth_svm(logits: &[f64], target: usize, margin: f64, tau: f64) -> (f64, Vec<f64>) {
    let lt = logits[target];
    let e: Vec<f64> = logits
        .iter()
        .enumerate()
        .map(|(j, &l)| {
            let delta = if j == target { 0.0 } else { margin };
            (delta + l - lt) / tau
        })
        .collect();
    let m = e.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = e.iter().map(|v| (v - m).exp()).sum();
    let loss = tau * (m + sum.ln());
    let mut grad: Vec<f64> = e.iter().map(|v| (v - m).exp() / sum).collect();
    grad[target] -= 1.0;
    (loss, grad)
}

/// One pseudo-labelled instance evaluated by one instance head.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceTerm {
    pub head: usize,
    pub instance: usize,
    pub target: usize,
    pub logits: [f64; 2],
    /// Contribution weight of this term to the instance loss.
    pub weight: f64,
    /// d(instance loss)/d(logits), already scaled by `weight`.
    pub grad: [f64; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstanceLoss {
    pub loss: f64,
    pub selection: Selection,
    pub terms: Vec<InstanceTerm>,
}

/// Instance-branch loss for a bag of class `label`.
///
/// The target head sees top-k instances as positives (1) and bottom-k as
/// negatives (0); its loss is the mean over those 2k instances. With
/// `subtyping`, every other head also sees the top-k as negatives (mean over
/// k) and the per-head losses are averaged over all C heads.
pub fn instance_loss(model: &MilModel, trace: &ForwardTrace, label: usize, k: usize) -> Result<InstanceLoss> {
    let cfg = &model.config;
    if cfg.mode != MilMode::Clam {
        return Err(Error::InvalidConfig("instance loss requires a CLAM model".into()));
    }
    if label >= cfg.n_classes {
        return Err(Error::DimensionMismatch(format!(
            "label {label} out of range for {} classes",
            cfg.n_classes
        )));
    }
    let selection = clam_select(&trace.attention, k);
    let mut terms = Vec::new();
    let mut loss = 0.0;
    if selection.k == 0 {
        return Ok(InstanceLoss {
            loss,
            selection,
            terms,
        });
    }
    let head_scale = if cfg.subtyping { 1.0 / cfg.n_classes as f64 } else { 1.0 };
    let mut add = |head: usize, instance: usize, target: usize, weight: f64| {
        let logits = head_logits(&model.params.instance_heads[head], trace.hidden_row(instance));
        let (l, g) = smooth_svm(&logits, target, cfg.svm_margin, cfg.svm_tau);
        loss += weight * l;
        terms.push(InstanceTerm {
            head,
            instance,
            target,
            logits,
            weight,
            grad: [weight * g[0], weight * g[1]],
        });
    };
    let in_weight = head_scale / (2 * selection.k) as f64;
    for &i in &selection.top {
        add(label, i, 1, in_weight);
    }
    for &i in &selection.bottom {
        add(label, i, 0, in_weight);
    }
    if cfg.subtyping {
        let out_weight = head_scale / selection.k as f64;
        for head in (0..cfg.n_classes).filter(|&c| c != label) {
            for &i in &selection.top {
                add(head, i, 0, out_weight);
            }
        }
    }
    Ok(InstanceLoss {
        loss,
        selection,
        terms,
    })
}
