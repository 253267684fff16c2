use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MilMode {
    Abmil,
    Clam,
}

/// Architecture and loss settings of a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub mode: MilMode,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub attn_dim: usize,
    pub n_classes: usize,
    pub dropout_input: f64,
    pub dropout_hidden: f64,
    /// Instances taken from each end of the attention ranking for the CLAM branch.
    pub k_sample: usize,
    /// Also push top-k instances to label 0 under every non-target instance head.
    pub subtyping: bool,
    pub bag_weight: f64,
    pub instance_weight: f64,
    pub svm_margin: f64,
    pub svm_tau: f64,
    pub init_seed: u64,
}

pub const DEFAULT_HIDDEN_DIM: usize = 512;
pub const DEFAULT_ATTN_DIM: usize = 384;
pub const DEFAULT_K_SAMPLE: usize = 8;

impl ModelConfig {
    /// Defaults for `mode`: CLAM mixes bag and instance losses 0.7/0.3, ABMIL
    /// uses the bag loss alone.
    pub fn new(mode: MilMode, input_dim: usize, n_classes: usize) -> Self {
        let (bag_weight, instance_weight) = match mode {
            MilMode::Abmil => (1.0, 0.0),
            MilMode::Clam => (0.7, 0.3),
        };
        ModelConfig {
            mode,
            input_dim,
            hidden_dim: DEFAULT_HIDDEN_DIM,
            attn_dim: DEFAULT_ATTN_DIM,
            n_classes,
            dropout_input: 0.1,
            dropout_hidden: 0.25,
            k_sample: DEFAULT_K_SAMPLE,
            subtyping: false,
            bag_weight,
            instance_weight,
            svm_margin: 1.0,
            svm_tau: 1.0,
            init_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.input_dim == 0 || self.hidden_dim == 0 || self.attn_dim == 0 || self.n_classes == 0 {
            return bad(format!(
                "model dims must be positive (D={}, P={}, A={}, C={})",
                self.input_dim, self.hidden_dim, self.attn_dim, self.n_classes
            ));
        }
        for (name, p) in [("dropout_input", self.dropout_input), ("dropout_hidden", self.dropout_hidden)] {
            if !(0.0..1.0).contains(&p) {
                return bad(format!("{name} = {p} outside [0, 1)"));
            }
        }
        if !(self.bag_weight >= 0.0 && self.instance_weight >= 0.0) {
            return bad("loss weights must be non-negative".into());
        }
        if !(self.svm_tau > 0.0) {
            return bad(format!("svm_tau = {} must be positive", self.svm_tau));
        }
        Ok(())
    }
}

/// Affine map `y = W x + b` with `W` stored row-major as `out × inp`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub out: usize,
    pub inp: usize,
    pub weight: Vec<f64>,
    pub bias: Option<Vec<f64>>,
}

impl Linear {
    pub fn zeros(out: usize, inp: usize, bias: bool) -> Self {
        Linear {
            out,
            inp,
            weight: vec![0.0; out * inp],
            bias: bias.then(|| vec![0.0; out]),
        }
    }

    /// Xavier-normal weights, `std = √(2 / (fan_in + fan_out))`, zero bias.
    fn xavier(out: usize, inp: usize, bias: bool, rng: &mut rng::Rng) -> Self {
        let std = (2.0 / (inp + out) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        let mut layer = Linear::zeros(out, inp, bias);
        for w in &mut layer.weight {
            *w = normal.sample(rng);
        }
        layer
    }

    pub fn row(&self, o: usize) -> &[f64] {
        &self.weight[o * self.inp..(o + 1) * self.inp]
    }

    /// Applies the map to one input vector, writing into `y`.
    pub fn apply(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.inp);
        for (o, yo) in y.iter_mut().enumerate() {
            *yo = dot(self.row(o), x) + self.bias.as_ref().map_or(0.0, |b| b[o]);
        }
    }

    /// Accumulates this layer's parameter gradient for one sample and adds `Wᵀ dy` into `dx`.
    pub(crate) fn backprop(&self, x: &[f64], dy: &[f64], grad: &mut Linear, dx: Option<&mut [f64]>) {
        for (o, &g) in dy.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            axpy(g, x, &mut grad.weight[o * self.inp..(o + 1) * self.inp]);
        }
        if let Some(b) = grad.bias.as_mut() {
            for (bo, &g) in b.iter_mut().zip(dy) {
                *bo += g;
            }
        }
        if let Some(dx) = dx {
            for (o, &g) in dy.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                axpy(g, self.row(o), dx);
            }
        }
    }
}

/// Dot product with four partial sums.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let chunks = n / 4;
    for i in 0..chunks {
        let j = 4 * i;
        acc[0] += a[j] * b[j];
        acc[1] += a[j + 1] * b[j + 1];
        acc[2] += a[j + 2] * b[j + 2];
        acc[3] += a[j + 3] * b[j + 3];
    }
    let mut tail = 0.0;
    for j in 4 * chunks..n {
        tail += a[j] * b[j];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Every trainable tensor. Gradients share this layout.
#[derive(Debug, Clone, PartialEq)]
pub struct MilParams {
    pub proj: Linear,
    pub attn_v: Linear,
    pub attn_u: Linear,
    /// Scoring vector `w`, stored as a 1×A map without bias.
    pub attn_w: Linear,
    pub bag_head: Linear,
    /// One 2-way head per class (CLAM only).
    pub instance_heads: Vec<Linear>,
}

impl MilParams {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let (d, p, a, c) = (cfg.input_dim, cfg.hidden_dim, cfg.attn_dim, cfg.n_classes);
        MilParams {
            proj: Linear::zeros(p, d, true),
            attn_v: Linear::zeros(a, p, true),
            attn_u: Linear::zeros(a, p, true),
            attn_w: Linear::zeros(1, a, false),
            bag_head: Linear::zeros(c, p, true),
            instance_heads: match cfg.mode {
                MilMode::Abmil => Vec::new(),
                MilMode::Clam => (0..c).map(|_| Linear::zeros(2, p, true)).collect(),
            },
        }
    }

    /// Initialization order is fixed so that the shared layers of ABMIL and
    /// CLAM models built from the same seed are identical.
    pub fn init(cfg: &ModelConfig) -> Self {
        let (d, p, a, c) = (cfg.input_dim, cfg.hidden_dim, cfg.attn_dim, cfg.n_classes);
        let mut rng = rng::seeded(rng::derive(cfg.init_seed, rng::stream::MODEL_INIT));
        let proj = Linear::xavier(p, d, true, &mut rng);
        let attn_v = Linear::xavier(a, p, true, &mut rng);
        let attn_u = Linear::xavier(a, p, true, &mut rng);
        let attn_w = Linear::xavier(1, a, false, &mut rng);
        let bag_head = Linear::xavier(c, p, true, &mut rng);
        let instance_heads = match cfg.mode {
            MilMode::Abmil => Vec::new(),
            MilMode::Clam => (0..c).map(|_| Linear::xavier(2, p, true, &mut rng)).collect(),
        };
        MilParams {
            proj,
            attn_v,
            attn_u,
            attn_w,
            bag_head,
            instance_heads,
        }
    }

    fn layers(&self) -> Vec<(String, &Linear)> {
        let mut v = vec![
            ("proj".to_string(), &self.proj),
            ("attn_v".to_string(), &self.attn_v),
            ("attn_u".to_string(), &self.attn_u),
            ("attn_w".to_string(), &self.attn_w),
            ("bag_head".to_string(), &self.bag_head),
        ];
        for (c, h) in self.instance_heads.iter().enumerate() {
            v.push((format!("instance_heads.{c}"), h));
        }
        v
    }

    /// `(name, rows, cols, values)` for every tensor in a fixed order.
    pub fn tensors(&self) -> Vec<(String, usize, usize, &[f64])> {
        let mut out = Vec::new();
        for (name, layer) in self.layers() {
            out.push((format!("{name}.weight"), layer.out, layer.inp, layer.weight.as_slice()));
            if let Some(b) = &layer.bias {
                out.push((format!("{name}.bias"), layer.out, 1, b.as_slice()));
            }
        }
        out
    }

    /// Mutable views in the same order as [`MilParams::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out = Vec::new();
        let MilParams {
            proj,
            attn_v,
            attn_u,
            attn_w,
            bag_head,
            instance_heads,
        } = self;
        for layer in [proj, attn_v, attn_u, attn_w, bag_head]
            .into_iter()
            .chain(instance_heads.iter_mut())
        {
            out.push(&mut layer.weight);
            if let Some(b) = layer.bias.as_mut() {
                out.push(b);
            }
        }
        out
    }

    pub fn n_params(&self) -> usize {
        self.tensors().iter().map(|t| t.3.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.3.iter().all(|v| v.is_finite()))
    }
}

/// Model parameters plus a generation counter that advances on every update.
#[derive(Debug, Clone, PartialEq)]
pub struct MilModel {
    pub config: ModelConfig,
    pub params: MilParams,
    generation: u64,
}

impl MilModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let params = MilParams::init(&config);
        Ok(MilModel {
            config,
            params,
            generation: 0,
        })
    }

    pub fn from_params(config: ModelConfig, params: MilParams) -> Result<Self> {
        config.validate()?;
        let expected = MilParams::zeros(&config);
        let shapes = |p: &MilParams| -> Vec<(String, usize, usize, usize)> {
            p.tensors()
                .into_iter()
                .map(|(n, r, c, v)| (n, r, c, v.len()))
                .collect()
        };
        if shapes(&expected) != shapes(&params) {
            return Err(Error::DimensionMismatch("parameter shapes do not match config".into()));
        }
        if !params.all_finite() {
            return Err(Error::InvalidCheckpoint("non-finite parameter".into()));
        }
        Ok(MilModel {
            config,
            params,
            generation: 0,
        })
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    /// Mutable parameter access; invalidates outstanding traces.
    pub fn params_mut(&mut self) -> &mut MilParams {
        self.generation += 1;
        &mut self.params
    }
}
