use serde::{Deserialize, Serialize};

use super::clam::{instance_loss, InstanceLoss};
use super::forward::{bag_cross_entropy, ForwardTrace};
use super::model::{MilMode, MilModel, MilParams};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub bag_loss: f64,
    pub instance_loss: f64,
    pub total: f64,
}

fn check_trace(model: &MilModel, trace: &ForwardTrace, label: usize) -> Result<()> {
    if trace.generation != model.generation() {
        return Err(Error::StaleTrace {
            trace: trace.generation,
            model: model.generation(),
        });
    }
    if trace.pooled.len() != model.config.hidden_dim || trace.logits.len() != model.config.n_classes {
        return Err(Error::DimensionMismatch("trace does not match model dims".into()));
    }
    if label >= model.config.n_classes {
        return Err(Error::DimensionMismatch(format!(
            "label {label} out of range for {} classes",
            model.config.n_classes
        )));
    }
    Ok(())
}

fn instance_part(model: &MilModel, trace: &ForwardTrace, label: usize) -> Result<Option<InstanceLoss>> {
    match model.config.mode {
        MilMode::Abmil => Ok(None),
        MilMode::Clam => instance_loss(model, trace, label, model.config.k_sample).map(Some),
    }
}

/// `bag_weight·CE + instance_weight·SVM` for a traced bag.
pub fn compute_loss(model: &MilModel, trace: &ForwardTrace, label: usize) -> Result<LossReport> {
    check_trace(model, trace, label)?;
    let bag_loss = bag_cross_entropy(trace, label);
    let inst = instance_part(model, trace, label)?.map_or(0.0, |l| l.loss);
    let cfg = &model.config;
    Ok(LossReport {
        bag_loss,
        instance_loss: inst,
        total: cfg.bag_weight * bag_loss + cfg.instance_weight * inst,
    })
}

/// Exact gradient of [`LossReport::total`] w.r.t. every parameter, reusing the
/// trace's dropout masks. Instance selection is treated as fixed.
pub fn backward(model: &MilModel, trace: &ForwardTrace, label: usize) -> Result<(LossReport, MilParams)> {
    check_trace(model, trace, label)?;
    let cfg = &model.config;
    let prm = &model.params;
    let (d, p, a) = (cfg.input_dim, cfg.hidden_dim, cfg.attn_dim);
    let n = trace.n_instances;
    let mut grad = MilParams::zeros(cfg);

    let bag_loss = bag_cross_entropy(trace, label);
    let inst = instance_part(model, trace, label)?;
    let report = LossReport {
        bag_loss,
        instance_loss: inst.as_ref().map_or(0.0, |l| l.loss),
        total: cfg.bag_weight * bag_loss + cfg.instance_weight * inst.as_ref().map_or(0.0, |l| l.loss),
    };

    // bag head: d CE / d logits = softmax − onehot
    let mut dlogits: Vec<f64> = trace.probs.iter().map(|&q| cfg.bag_weight * q).collect();
    dlogits[label] -= cfg.bag_weight;
    let mut dpooled = vec![0.0; p];
    prm.bag_head
        .backprop(&trace.pooled, &dlogits, &mut grad.bag_head, Some(&mut dpooled));

    // pooling z = Σ a_k h_k and the softmax Jacobian
    let mut dhidden = vec![0.0; n * p];
    let da: Vec<f64> = (0..n)
        .map(|k| super::model::dot(&dpooled, trace.hidden_row(k)))
        .collect();
    let mean_da: f64 = trace.attention.iter().zip(&da).map(|(a, g)| a * g).sum();
    let w = prm.attn_w.row(0);
    let mut dpre_v = vec![0.0; a];
    let mut dpre_u = vec![0.0; a];
    for k in 0..n {
        let ak = trace.attention[k];
        let dh = &mut dhidden[k * p..(k + 1) * p];
        super::model::axpy(ak, &dpooled, dh);

        let ds = ak * (da[k] - mean_da);
        if ds == 0.0 {
            continue;
        }
        let t = &trace.attn_tanh[k * a..(k + 1) * a];
        let g = &trace.attn_gate[k * a..(k + 1) * a];
        for j in 0..a {
            grad.attn_w.weight[j] += ds * t[j] * g[j];
            dpre_v[j] = ds * w[j] * g[j] * (1.0 - t[j] * t[j]);
            dpre_u[j] = ds * w[j] * t[j] * g[j] * (1.0 - g[j]);
        }
        let h = trace.hidden_row(k);
        prm.attn_v.backprop(h, &dpre_v, &mut grad.attn_v, Some(dh));
        prm.attn_u.backprop(h, &dpre_u, &mut grad.attn_u, Some(dh));
    }

    // instance heads
    if let Some(inst) = &inst {
        if cfg.instance_weight != 0.0 {
            for term in &inst.terms {
                let dl = [cfg.instance_weight * term.grad[0], cfg.instance_weight * term.grad[1]];
                let head = &prm.instance_heads[term.head];
                let dh = &mut dhidden[term.instance * p..(term.instance + 1) * p];
                head.backprop(
                    trace.hidden_row(term.instance),
                    &dl,
                    &mut grad.instance_heads[term.head],
                    Some(dh),
                );
            }
        }
    }

    // hidden dropout, ReLU and projection
    if let Some(m) = &trace.masks.hidden {
        for (g, s) in dhidden.iter_mut().zip(m) {
            *g *= s;
        }
    }
    for (g, u) in dhidden.iter_mut().zip(&trace.pre_relu) {
        if *u <= 0.0 {
            *g = 0.0;
        }
    }
    for k in 0..n {
        prm.proj.backprop(
            &trace.inputs[k * d..(k + 1) * d],
            &dhidden[k * p..(k + 1) * p],
            &mut grad.proj,
            None,
        );
    }
    Ok((report, grad))
}
