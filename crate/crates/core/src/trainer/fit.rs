use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::adamw::{adamw_step, AdamWHyper, OptimizerState};
use super::sampler::WeightedSampler;
use super::schedule::{cosine_lr, EarlyStopping};
use crate::bagio::FeatureBag;
use crate::error::{Error, Result};
use crate::milnet::{backward, compute_loss, forward, MilModel};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr0: f64,
    pub min_epochs: usize,
    pub max_epochs: usize,
    pub patience: usize,
    /// Fixed at 1: one bag per optimizer step.
    pub batch_size: usize,
    pub weight_decay: f64,
    pub eta_min: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub improvement_tolerance: f64,
    /// Count the CLAM instance loss in the validation loss used for early stopping.
    pub val_includes_instance_loss: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 1e-4,
            min_epochs: 10,
            max_epochs: 20,
            patience: 5,
            batch_size: 1,
            weight_decay: 1e-2,
            eta_min: 1e-6,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            improvement_tolerance: 1e-6,
            val_includes_instance_loss: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.lr0 > 0.0) {
            return bad(format!("lr0 = {} must be positive", self.lr0));
        }
        if self.max_epochs == 0 || self.min_epochs > self.max_epochs {
            return bad(format!(
                "need 0 < max_epochs and min_epochs <= max_epochs (got {} / {})",
                self.min_epochs, self.max_epochs
            ));
        }
        if self.patience == 0 {
            return bad("patience must be at least 1".into());
        }
        if self.batch_size != 1 {
            return bad(format!("batch_size must be 1, got {}", self.batch_size));
        }
        if !(self.eta_min >= 0.0 && self.eta_min <= self.lr0) {
            return bad(format!("eta_min = {} must lie in [0, lr0]", self.eta_min));
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative".into());
        }
        Ok(())
    }

    pub fn hyper(&self) -> AdamWHyper {
        AdamWHyper {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    EarlyStop,
    MaxEpochs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stop_reason: StopReason,
}

impl TrainLog {
    /// One JSON object per epoch, then a summary line.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.epochs {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        out.push_str(&serde_json::to_string(&serde_json::json!({
            "best_epoch": self.best_epoch,
            "best_val_loss": self.best_val_loss,
            "stop_reason": self.stop_reason,
        }))?);
        out.push('\n');
        Ok(out)
    }

    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_jsonl()?.as_bytes())
            .map_err(|e| Error::io(path, e))
    }
}

/// A bag with its class index.
pub type Sample<'a> = (&'a FeatureBag, usize);

/// Mean loss over `samples` in evaluation mode.
pub fn evaluate_loss(model: &MilModel, samples: &[Sample<'_>], include_instance: bool) -> Result<f64> {
    let mut unused = rng::seeded(0);
    let mut total = 0.0;
    for (bag, label) in samples {
        let trace = forward(model, bag, false, &mut unused)?;
        let report = compute_loss(model, &trace, *label)?;
        total += if include_instance { report.total } else { report.bag_loss };
    }
    Ok(total / samples.len() as f64)
}

/// Trains `model` with one bag per AdamW step, cosine-annealed per epoch,
/// drawing bags with inverse class-frequency weights. Returns the parameters
/// of the epoch with the lowest validation loss.
pub fn fit(
    mut model: MilModel,
    train: &[Sample<'_>],
    val: &[Sample<'_>],
    cfg: &TrainConfig,
) -> Result<(MilModel, TrainLog)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::InvalidConfig("training set is empty".into()));
    }
    if val.is_empty() {
        return Err(Error::InvalidConfig("validation set is empty".into()));
    }
    let labels: Vec<usize> = train.iter().map(|s| s.1).collect();
    let mut sampler = WeightedSampler::new(&labels, rng::derive(cfg.seed, rng::stream::SAMPLER))?;
    let mut dropout_rng = rng::seeded(rng::derive(cfg.seed, rng::stream::DROPOUT));
    let shapes: Vec<usize> = model.params.tensors().iter().map(|t| t.3.len()).collect();
    let mut opt = OptimizerState::new(&shapes, cfg.lr0);
    let hyper = cfg.hyper();

    let mut stopper = EarlyStopping::new(cfg.min_epochs, cfg.patience, cfg.improvement_tolerance);
    let mut best = model.clone();
    let mut epochs = Vec::with_capacity(cfg.max_epochs);
    let mut stop_reason = StopReason::MaxEpochs;

    for epoch in 1..=cfg.max_epochs {
        let lr = cosine_lr(epoch - 1, cfg.max_epochs, cfg.lr0, cfg.eta_min);
        opt.lr = lr;
        let mut train_loss = 0.0;
        for _ in 0..train.len() {
            let (bag, label) = train[sampler.next().expect("sampler is endless")];
            let trace = forward(&model, bag, true, &mut dropout_rng)?;
            let (report, grad) = backward(&model, &trace, label)?;
            train_loss += report.total;
            let grads: Vec<&[f64]> = grad.tensors().into_iter().map(|t| t.3).collect();
            let mut params = model.params_mut().tensors_mut();
            adamw_step(&mut opt, &mut params, &grads, &hyper)?;
        }
        train_loss /= train.len() as f64;

        let val_loss = evaluate_loss(&model, val, cfg.val_includes_instance_loss)?;
        if !val_loss.is_finite() {
            log::error!("epoch {epoch}: validation loss {val_loss}; aborting");
            return Err(Error::Diverged { epoch, loss: val_loss });
        }
        log::debug!("epoch {epoch}: train {train_loss:.5} val {val_loss:.5} lr {lr:.3e}");
        epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            lr,
        });
        let (improved, stop) = stopper.observe(epoch, val_loss);
        if improved {
            best = model.clone();
        }
        if stop {
            stop_reason = StopReason::EarlyStop;
            break;
        }
    }
    let log = TrainLog {
        epochs,
        best_epoch: stopper.best_epoch(),
        best_val_loss: stopper.best_loss(),
        stop_reason,
    };
    Ok((best, log))
}
