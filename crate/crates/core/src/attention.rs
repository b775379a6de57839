//! Hierarchical attention: four chained per-stage modules per task.
//!
//! Stage 1: `M1 = softmax(conv(tap[1][1]))`, `F1 = tap[1][2] ⊙ M1`.
//! Stage k: `Mk = softmax(conv(concat(pool(F_{k-1}), tap[k][1])))`,
//! `Fk = tap[k][2] ⊙ Mk`. The softmax runs over every spatial (and
//! temporal) position, separately per channel; the convolutions are 1×1.

use famnet_tensor::{Scalar, Var, WindowSpec};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::FeatureTaps;
use crate::error::{Error, Result};
use crate::model::{ForwardCtx, Initializer, ModelConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Task {
    /// Emotion recognition.
    Mer,
    /// Action-unit detection.
    Faud,
}

impl Task {
    pub fn key(self) -> &'static str {
        match self {
            Task::Mer => "mer",
            Task::Faud => "faud",
        }
    }
}

const POINTWISE: WindowSpec = WindowSpec {
    kernel: [1, 1, 1],
    stride: [1, 1, 1],
    padding: [0, 0, 0],
};

fn conv_prefix(task: Task, k: usize) -> String {
    format!("attention.{}.{k}", task.key())
}

pub(crate) fn init<T: Scalar, R: Rng>(init: &mut Initializer<'_, T, R>, cfg: &ModelConfig, task: Task) {
    let ch = cfg.channels();
    init.conv(&conv_prefix(task, 1), ch[0], ch[0], [1, 1, 1], true);
    for k in 2..=4 {
        init.conv(&conv_prefix(task, k), ch[k - 1], ch[k - 2] + ch[k - 1], [1, 1, 1], true);
    }
}

/// Attention matrices and gated features of one task stack, stage 1 first.
#[derive(Clone, Debug)]
pub struct AttentionState {
    pub task: Task,
    pub m: Vec<Var>,
    pub f: Vec<Var>,
}

impl AttentionState {
    pub fn final_feature(&self) -> Var {
        *self.f.last().expect("stack has four stages")
    }
}

fn gate<T: Scalar>(ctx: &mut ForwardCtx<'_, T>, logits: Var, tap2: Var) -> Result<(Var, Var)> {
    let m = ctx.graph.spatial_softmax(logits)?;
    if ctx.graph.shape(m) != ctx.graph.shape(tap2) {
        return Err(Error::invalid(format!(
            "attention matrix {:?} does not match tap {:?}",
            ctx.graph.shape(m),
            ctx.graph.shape(tap2)
        )));
    }
    let f = ctx.graph.mul(tap2, m)?;
    Ok((m, f))
}

pub fn attention_first<T: Scalar>(ctx: &mut ForwardCtx<'_, T>, task: Task, tap1: Var, tap2: Var) -> Result<(Var, Var)> {
    if ctx.graph.shape(tap1) != ctx.graph.shape(tap2) {
        return Err(Error::invalid(format!(
            "stage-1 taps differ: {:?} vs {:?}",
            ctx.graph.shape(tap1),
            ctx.graph.shape(tap2)
        )));
    }
    let logits = ctx.conv(tap1, &conv_prefix(task, 1), POINTWISE)?;
    gate(ctx, logits, tap2)
}

/// Stage `k ∈ {2, 3, 4}`. `f_prev` is average-pooled down to the extent of
/// `tap1` before concatenation.
pub fn attention_step<T: Scalar>(
    ctx: &mut ForwardCtx<'_, T>,
    task: Task,
    k: usize,
    f_prev: Var,
    tap1: Var,
    tap2: Var,
) -> Result<(Var, Var)> {
    if !(2..=4).contains(&k) {
        return Err(Error::invalid(format!("attention stage {k} outside 2..=4")));
    }
    let target = ctx.graph.shape(tap1);
    if target.len() != 5 {
        return Err(Error::invalid(format!("tap must be 5-D, got {target:?}")));
    }
    let extent = [target[2], target[3], target[4]];
    let pooled = ctx.graph.adaptive_avg_pool(f_prev, extent)?;
    let joined = ctx.graph.concat_channels(&[pooled, tap1])?;
    let logits = ctx.conv(joined, &conv_prefix(task, k), POINTWISE)?;
    gate(ctx, logits, tap2)
}

pub fn run_task_stack<T: Scalar>(ctx: &mut ForwardCtx<'_, T>, task: Task, taps: &FeatureTaps) -> Result<AttentionState> {
    let (m1, f1) = attention_first(ctx, task, taps.tap(1, 1), taps.tap(1, 2))?;
    let mut state = AttentionState { task, m: vec![m1], f: vec![f1] };
    for k in 2..=4 {
        let prev = state.final_feature();
        let (m, f) = attention_step(ctx, task, k, prev, taps.tap(k, 1), taps.tap(k, 2))?;
        state.m.push(m);
        state.f.push(f);
    }
    Ok(state)
}
