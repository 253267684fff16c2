use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWHyper {
    fn default() -> Self {
        AdamWHyper {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

/// First/second moment accumulators for a list of tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
    pub lr: f64,
}

impl OptimizerState {
    pub fn new(shapes: &[usize], lr: f64) -> Self {
        OptimizerState {
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
            lr,
        }
    }
}

/// One AdamW update with decoupled weight decay:
/// `θ ← θ − lr·(m̂/(√v̂ + ε) + λθ)`.
///
/// Refuses the whole step, leaving parameters and state untouched, if any
/// gradient entry is non-finite.
pub fn adamw_step(
    state: &mut OptimizerState,
    params: &mut [&mut Vec<f64>],
    grads: &[&[f64]],
    hyper: &AdamWHyper,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} parameter tensors, {} gradients, {} optimizer slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() || p.len() != state.m[i].len() {
            return Err(Error::DimensionMismatch(format!("tensor {i} shape mismatch")));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient(format!("#{i}")));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - hyper.beta1.powi(t);
    let bc2 = 1.0 - hyper.beta2.powi(t);
    let lr = state.lr;
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for j in 0..p.len() {
            let gj = g[j];
            m[j] = hyper.beta1 * m[j] + (1.0 - hyper.beta1) * gj;
            v[j] = hyper.beta2 * v[j] + (1.0 - hyper.beta2) * gj * gj;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            p[j] -= lr * (m_hat / (v_hat.sqrt() + hyper.eps) + hyper.weight_decay * p[j]);
        }
    }
    Ok(())
}
