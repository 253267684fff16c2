//! Gated-attention MIL models (ABMIL and single-branch CLAM) with
//! hand-written gradients.
//!
//! For a bag of K instances `x_k`:
//!
//! ```text
//! h_k = ReLU(W x_k + b)                       (dropout on x_k and h_k while training)
//! s_k = wᵀ (tanh(V h_k + b_v) ⊙ σ(U h_k + b_u))
//! a   = softmax(s)
//! z   = Σ_k a_k h_k
//! y   = softmax(W_c z + b_c)
//! ```
//!
//! CLAM adds one 2-way head per class, trained with a smooth SVM loss on the
//! top- and bottom-k attended instances.

mod backward;
pub mod checkpoint;
mod clam;
mod forward;
mod model;

pub use backward::{backward, compute_loss, LossReport};
pub use clam::{clam_select, instance_loss, smooth_svm, InstanceLoss, InstanceTerm, Selection};
pub use forward::{
    argmax, bag_cross_entropy, forward, forward_with_masks, softmax, DropoutMasks, ForwardTrace,
};
pub use model::{
    Linear, MilMode, MilModel, MilParams, ModelConfig, DEFAULT_ATTN_DIM, DEFAULT_HIDDEN_DIM,
    DEFAULT_K_SAMPLE,
};

use crate::bagio::FeatureBag;
use crate::error::Result;

/// Evaluation-mode class probabilities for a bag.
pub fn predict(model: &MilModel, bag: &FeatureBag) -> Result<Vec<f64>> {
    let mut unused = crate::rng::seeded(0);
    Ok(forward(model, bag, false, &mut unused)?.probs)
}
