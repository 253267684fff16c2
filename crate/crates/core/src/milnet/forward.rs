use rand::Rng as _;

use super::model::{dot, MilModel};
use crate::bagio::FeatureBag;
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Inverted-dropout scale factors: 0 for dropped units, `1/(1-p)` for kept ones.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMasks {
    /// K×D, applied to the input features before projection.
    pub input: Option<Vec<f64>>,
    /// K×P, applied to the projected instances.
    pub hidden: Option<Vec<f64>>,
}

impl DropoutMasks {
    pub fn none() -> Self {
        DropoutMasks {
            input: None,
            hidden: None,
        }
    }

    pub fn sample(k: usize, d: usize, p: usize, p_in: f64, p_hidden: f64, rng: &mut Rng) -> Self {
        let mut draw = |n: usize, rate: f64| {
            (rate > 0.0).then(|| {
                let keep = 1.0 / (1.0 - rate);
                (0..n)
                    .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
                    .collect()
            })
        };
        let input = draw(k * d, p_in);
        let hidden = draw(k * p, p_hidden);
        DropoutMasks { input, hidden }
    }
}

/// Everything the backward pass needs from one forward evaluation.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub n_instances: usize,
    pub training: bool,
    /// Model generation the trace was computed at.
    pub generation: u64,
    pub masks: DropoutMasks,
    /// K×D inputs after dropout.
    pub inputs: Vec<f64>,
    /// K×P projection before ReLU.
    pub pre_relu: Vec<f64>,
    /// K×P projected instances `h_k` (after ReLU and hidden dropout).
    pub hidden: Vec<f64>,
    /// K×A `tanh(V h_k + b)`.
    pub attn_tanh: Vec<f64>,
    /// K×A `σ(U h_k + b)`.
    pub attn_gate: Vec<f64>,
    /// Pre-softmax attention scores `s_k`.
    pub scores: Vec<f64>,
    /// Attention weights `a_k = softmax(s)_k`.
    pub attention: Vec<f64>,
    /// Pooled representation `z = Σ a_k h_k`.
    pub pooled: Vec<f64>,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

impl ForwardTrace {
    pub fn hidden_row(&self, k: usize) -> &[f64] {
        let p = self.pooled.len();
        &self.hidden[k * p..(k + 1) * p]
    }

    /// Predicted class: argmax of the probabilities, lowest index on ties.
    pub fn predicted(&self) -> usize {
        argmax(&self.probs)
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Softmax with max subtraction. The normalizer is summed in sorted order so
/// the result does not depend on the order of `s`.
pub fn softmax(s: &[f64]) -> Vec<f64> {
    let m = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = s.iter().map(|x| (x - m).exp()).collect();
    let mut sorted = e.clone();
    sorted.sort_by(f64::total_cmp);
    let total: f64 = sorted.iter().sum();
    e.into_iter().map(|x| x / total).collect()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_finite(values: &[f64], layer: &'static str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFiniteActivation(layer))
    }
}

/// Forward pass. Dropout masks are drawn from `rng` only when `training`.
pub fn forward(model: &MilModel, bag: &FeatureBag, training: bool, rng: &mut Rng) -> Result<ForwardTrace> {
    let cfg = &model.config;
    let masks = if training {
        DropoutMasks::sample(
            bag.len(),
            cfg.input_dim,
            cfg.hidden_dim,
            cfg.dropout_input,
            cfg.dropout_hidden,
            rng,
        )
    } else {
        DropoutMasks::none()
    };
    forward_with_masks(model, bag, masks, training)
}

/// Forward pass with explicit dropout masks.
pub fn forward_with_masks(
    model: &MilModel,
    bag: &FeatureBag,
    masks: DropoutMasks,
    training: bool,
) -> Result<ForwardTrace> {
    let cfg = &model.config;
    let prm = &model.params;
    let (d, p, a) = (cfg.input_dim, cfg.hidden_dim, cfg.attn_dim);
    if bag.dim() != d {
        return Err(Error::DimensionMismatch(format!(
            "bag {:?} has feature dim {}, model expects {d}",
            bag.case_id,
            bag.dim()
        )));
    }
    let k = bag.len();
    if let Some(m) = &masks.input {
        if m.len() != k * d {
            return Err(Error::DimensionMismatch("input dropout mask size".into()));
        }
    }
    if let Some(m) = &masks.hidden {
        if m.len() != k * p {
            return Err(Error::DimensionMismatch("hidden dropout mask size".into()));
        }
    }

    let mut inputs: Vec<f64> = bag.features().iter().map(|&v| v as f64).collect();
    if let Some(m) = &masks.input {
        for (x, s) in inputs.iter_mut().zip(m) {
            *x *= s;
        }
    }

    let mut pre_relu = vec![0.0; k * p];
    for (x, u) in inputs.chunks_exact(d).zip(pre_relu.chunks_exact_mut(p)) {
        prm.proj.apply(x, u);
    }
    check_finite(&pre_relu, "projection")?;
    let mut hidden: Vec<f64> = pre_relu.iter().map(|&u| u.max(0.0)).collect();
    if let Some(m) = &masks.hidden {
        for (h, s) in hidden.iter_mut().zip(m) {
            *h *= s;
        }
    }

    let mut attn_tanh = vec![0.0; k * a];
    let mut attn_gate = vec![0.0; k * a];
    let mut scores = vec![0.0; k];
    let w = prm.attn_w.row(0);
    for i in 0..k {
        let h = &hidden[i * p..(i + 1) * p];
        let t = &mut attn_tanh[i * a..(i + 1) * a];
        prm.attn_v.apply(h, t);
        t.iter_mut().for_each(|v| *v = v.tanh());
        let g = &mut attn_gate[i * a..(i + 1) * a];
        prm.attn_u.apply(h, g);
        g.iter_mut().for_each(|v| *v = sigmoid(*v));
        scores[i] = t.iter().zip(g.iter()).zip(w).map(|((t, g), w)| w * t * g).sum();
    }
    check_finite(&scores, "attention")?;
    let attention = softmax(&scores);

    let mut pooled = vec![0.0; p];
    for (i, &ai) in attention.iter().enumerate() {
        super::model::axpy(ai, &hidden[i * p..(i + 1) * p], &mut pooled);
    }
    check_finite(&pooled, "pooling")?;

    let mut logits = vec![0.0; cfg.n_classes];
    prm.bag_head.apply(&pooled, &mut logits);
    check_finite(&logits, "bag_head")?;
    let probs = softmax(&logits);

    Ok(ForwardTrace {
        n_instances: k,
        training,
        generation: model.generation(),
        masks,
        inputs,
        pre_relu,
        hidden,
        attn_tanh,
        attn_gate,
        scores,
        attention,
        pooled,
        logits,
        probs,
    })
}

/// Bag-level cross-entropy `-log p_label`, computed from the logits.
pub fn bag_cross_entropy(trace: &ForwardTrace, label: usize) -> f64 {
    let m = trace.logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + trace.logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
    lse - trace.logits[label]
}

/// Instance logits of a 2-way head on projected instance `k`.
pub(crate) fn head_logits(head: &super::model::Linear, h: &[f64]) -> [f64; 2] {
    let b = head.bias.as_ref();
    [
        dot(head.row(0), h) + b.map_or(0.0, |b| b[0]),
        dot(head.row(1), h) + b.map_or(0.0, |b| b[1]),
    ]
}
