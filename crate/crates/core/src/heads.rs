//! Linear task heads and the training losses.

use famnet_tensor::{Scalar, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::Task;
use crate::data::{AuVector, CoarseEmotion};
use crate::error::{Error, Result};
use crate::model::{ForwardCtx, Initializer, ModelConfig, LOG_SIGMA};

pub const N_CLASSES: usize = 3;
/// Probability clamp of the action-unit cross-entropy.
pub const BCE_EPS: f64 = 1e-7;

fn head_prefix(task: Task) -> &'static str {
    match task {
        Task::Mer => "head.mer",
        Task::Faud => "head.au",
    }
}

pub(crate) fn init<T: Scalar, R: Rng>(init: &mut Initializer<'_, T, R>, cfg: &ModelConfig) {
    let c = cfg.channels()[3];
    init.linear(head_prefix(Task::Mer), N_CLASSES, c);
    init.linear(head_prefix(Task::Faud), cfg.n_au, c);
}

/// Global average pooling over every non-channel axis, then the task's
/// linear layer.
pub fn head_forward<T: Scalar>(ctx: &mut ForwardCtx<'_, T>, feature: Var, task: Task) -> Result<Var> {
    let pooled = ctx.graph.mean_spatial(feature)?;
    ctx.linear(pooled, head_prefix(task))
}

pub fn one_hot<T: Scalar>(labels: &[CoarseEmotion]) -> Tensor<T> {
    let mut t = Tensor::zeros([labels.len(), N_CLASSES]);
    for (i, l) in labels.iter().enumerate() {
        t.data_mut()[i * N_CLASSES + l.index()] = T::one();
    }
    t
}

pub fn au_targets<T: Scalar>(aus: &[&AuVector]) -> Result<Tensor<T>> {
    let n = aus.first().map_or(0, |a| a.len());
    let mut data = Vec::with_capacity(aus.len() * n);
    for a in aus {
        if a.len() != n {
            return Err(Error::invalid("AU vectors of differing length in one batch"));
        }
        data.extend(a.bits().iter().map(|&b| if b { T::one() } else { T::zero() }));
    }
    Ok(Tensor::new([aus.len(), n], data)?)
}

/// `Σ_c y(1−ŷ)² + ½(1−y)ŷ²` on softmax probabilities, batch-meaned.
pub fn loss_me<T: Scalar>(ctx: &mut ForwardCtx<'_, T>, logits: Var, labels: &[CoarseEmotion]) -> Result<Var> {
    let p = ctx.graph.softmax_rows(logits)?;
    Ok(ctx.graph.margin_loss(p, &one_hot(labels))?)
}

/// Weighted binary cross-entropy on sigmoid probabilities, meaned over
/// action units and batch.
pub fn loss_au<T: Scalar>(ctx: &mut ForwardCtx<'_, T>, logits: Var, targets: &Tensor<T>, weights: &[f64]) -> Result<Var> {
    let p = ctx.graph.sigmoid(logits);
    let w: Vec<T> = weights.iter().map(|&w| T::cast(w)).collect();
    Ok(ctx.graph.weighted_bce(p, targets, &w, BCE_EPS)?)
}

/// `e^{−2s₁} L_me + e^{−2s₂} L_au + s₁ + s₂` with the stored `log σ`.
pub fn uncertainty_combine<T: Scalar>(ctx: &mut ForwardCtx<'_, T>, l_me: Var, l_au: Var) -> Result<Var> {
    let s = ctx.param(LOG_SIGMA)?;
    Ok(ctx.graph.uncertainty_combine(l_me, l_au, s)?)
}

/// How the per-unit cross-entropy weights are chosen.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuWeighting {
    #[default]
    Uniform,
    /// Inverse positive frequency over the training fold, scaled to mean 1.
    InverseFrequency,
}

pub fn au_weights(mode: AuWeighting, train: &[&AuVector], n_au: usize) -> Vec<f64> {
    match mode {
        AuWeighting::Uniform => vec![1.0; n_au],
        AuWeighting::InverseFrequency => {
            let n = train.len().max(1) as f64;
            let raw: Vec<f64> = (0..n_au)
                .map(|i| {
                    let pos = train.iter().filter(|a| a.get(i)).count() as f64;
                    1.0 / (pos / n).max(1.0 / n)
                })
                .collect();
            let mean = raw.iter().sum::<f64>() / n_au as f64;
            raw.iter().map(|r| r / mean).collect()
        }
    }
}
