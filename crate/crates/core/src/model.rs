//! Model configuration, parameter initialisation and the forward context
//! shared by the backbone, attention stacks and heads.

use famnet_tensor::{BatchStats, Graph, NormMode, ParamKind, ParamStore, Scalar, Tensor, Var, WindowSpec};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::attention::{self, Task};
use crate::backbone::{self, FeatureTaps};
use crate::error::{Error, Result};
use crate::heads;
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Branch {
    /// Apex frame through a planar residual network.
    #[serde(rename = "2d")]
    TwoD,
    /// Whole clip through a volumetric residual network.
    #[serde(rename = "3d")]
    ThreeD,
}

impl Branch {
    pub fn as_str(self) -> &'static str {
        match self {
            Branch::TwoD => "2d",
            Branch::ThreeD => "3d",
        }
    }
}

impl std::fmt::Display for Branch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Branch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "2d" | "twod" => Ok(Branch::TwoD),
            "3d" | "threed" => Ok(Branch::ThreeD),
            _ => Err(Error::Config(format!("unknown branch `{s}` (expected 2d or 3d)"))),
        }
    }
}

/// Architecture of one branch network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub branch: Branch,
    /// Channel multiplier applied to every stage.
    pub width: f64,
    pub n_au: usize,
    /// Hierarchical attention stacks; without them the heads read the last
    /// backbone tap directly.
    pub attention: bool,
}

impl ModelConfig {
    pub fn new(branch: Branch, width: f64, n_au: usize, attention: bool) -> Self {
        ModelConfig { branch, width, n_au, attention }
    }

    pub fn channels(&self) -> [usize; 4] {
        backbone::stage_channels(self.width)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.width > 0.0 && self.width.is_finite()) {
            return Err(Error::Config(format!("width multiplier {} must be positive", self.width)));
        }
        if self.n_au == 0 {
            return Err(Error::Config("n_au must be positive".into()));
        }
        Ok(())
    }
}

const BN_EPS: f64 = 1e-5;
/// Weight of the newest batch in running statistics.
pub const BN_MOMENTUM: f64 = 0.1;

/// Graph under construction plus the parameters it reads.
pub struct ForwardCtx<'a, T: Scalar> {
    pub graph: Graph<T>,
    store: &'a ParamStore<T>,
    train: bool,
    bn_stats: Vec<(String, BatchStats<T>)>,
}

impl<'a, T: Scalar> ForwardCtx<'a, T> {
    /// `train` selects batch statistics in batch norm and records a tape
    /// for back-propagation; otherwise running statistics are used.
    pub fn new(store: &'a ParamStore<T>, train: bool) -> Self {
        ForwardCtx {
            graph: if train { Graph::new() } else { Graph::inference() },
            store,
            train,
            bn_stats: Vec::new(),
        }
    }

    /// Tracked graph with running batch-norm statistics, for gradient
    /// checks of a deterministic forward pass.
    pub fn frozen_tracked(store: &'a ParamStore<T>) -> Self {
        ForwardCtx {
            graph: Graph::new(),
            store,
            train: false,
            bn_stats: Vec::new(),
        }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        Ok(self.graph.param(self.store, name)?)
    }

    /// Convolution reading `{prefix}.weight` and, when stored,
    /// `{prefix}.bias`.
    pub fn conv(&mut self, x: Var, prefix: &str, spec: WindowSpec) -> Result<Var> {
        let w = self.param(&format!("{prefix}.weight"))?;
        let bias_name = format!("{prefix}.bias");
        let b = if self.store.contains(&bias_name) {
            Some(self.param(&bias_name)?)
        } else {
            None
        };
        Ok(self.graph.conv(x, w, b, spec)?)
    }

    pub fn batch_norm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let gamma = self.param(&format!("{prefix}.weight"))?;
        let beta = self.param(&format!("{prefix}.bias"))?;
        if self.train {
            let (y, stats) = self.graph.batch_norm(x, gamma, beta, BN_EPS, NormMode::Batch)?;
            self.bn_stats.push((prefix.to_string(), stats.expect("batch mode returns stats")));
            Ok(y)
        } else {
            let missing = |n: &str| Error::Tensor(famnet_tensor::TensorError::UnknownParam(n.to_string()));
            let mean_name = format!("{prefix}.running_mean");
            let var_name = format!("{prefix}.running_var");
            let store = self.store;
            let mean = store.tensor(&mean_name).ok_or_else(|| missing(&mean_name))?;
            let var = store.tensor(&var_name).ok_or_else(|| missing(&var_name))?;
            let mode = NormMode::Running { mean: mean.data(), var: var.data() };
            Ok(self.graph.batch_norm(x, gamma, beta, BN_EPS, mode)?.0)
        }
    }

    pub fn linear(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let w = self.param(&format!("{prefix}.weight"))?;
        let b = self.param(&format!("{prefix}.bias"))?;
        Ok(self.graph.linear(x, w, Some(b))?)
    }

    pub fn into_parts(self) -> (Graph<T>, Vec<(String, BatchStats<T>)>) {
        (self.graph, self.bn_stats)
    }
}

/// Folds training-batch statistics into the stored running averages.
pub fn apply_bn_updates<T: Scalar>(store: &mut ParamStore<T>, stats: &[(String, BatchStats<T>)]) {
    let m = T::cast(BN_MOMENTUM);
    let keep = T::one() - m;
    for (prefix, s) in stats {
        for (suffix, batch) in [("running_mean", &s.mean), ("running_var", &s.var)] {
            if let Some(t) = store.tensor_mut(&format!("{prefix}.{suffix}")) {
                for (r, &b) in t.data_mut().iter_mut().zip(batch) {
                    *r = keep * *r + m * b;
                }
            }
        }
    }
}

/// Score vectors of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Outputs {
    /// `(B, 3)` emotion logits.
    pub mer_logits: Var,
    /// `(B, n_au)` action-unit logits, when requested.
    pub au_logits: Option<Var>,
}

/// Full branch network. Inputs are `(B, 3, D, H, W)` with `D = 1` for the
/// 2D branch.
pub fn forward<T: Scalar>(ctx: &mut ForwardCtx<'_, T>, cfg: &ModelConfig, x: Var, with_au: bool) -> Result<Outputs> {
    let taps = backbone::forward(ctx, cfg, x)?;
    heads_from_taps(ctx, cfg, &taps, with_au)
}

pub fn heads_from_taps<T: Scalar>(
    ctx: &mut ForwardCtx<'_, T>,
    cfg: &ModelConfig,
    taps: &FeatureTaps,
    with_au: bool,
) -> Result<Outputs> {
    let feature = |ctx: &mut ForwardCtx<'_, T>, task| -> Result<Var> {
        if cfg.attention {
            Ok(attention::run_task_stack(ctx, task, taps)?.final_feature())
        } else {
            Ok(taps.tap(4, 2))
        }
    };
    let f_mer = feature(ctx, Task::Mer)?;
    let mer_logits = heads::head_forward(ctx, f_mer, Task::Mer)?;
    let au_logits = if with_au {
        let f_au = feature(ctx, Task::Faud)?;
        Some(heads::head_forward(ctx, f_au, Task::Faud)?)
    } else {
        None
    };
    Ok(Outputs { mer_logits, au_logits })
}

pub const LOG_SIGMA: &str = "uncertainty.log_sigma";

fn kaiming_fan_out<T: Scalar>(shape: [usize; 5], rng: &mut impl Rng) -> Tensor<T> {
    let fan_out = shape[0] * shape[2] * shape[3] * shape[4];
    let normal = Normal::new(0.0, (2.0 / fan_out as f64).sqrt()).expect("finite std");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::cast(normal.sample(rng))).collect();
    Tensor::new(shape, data).expect("shape matches")
}

fn uniform<T: Scalar>(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::cast(rng.random_range(-bound..=bound))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

/// Incrementally builds a parameter store with deterministic draws.
pub(crate) struct Initializer<'s, T: Scalar, R: Rng> {
    pub store: &'s mut ParamStore<T>,
    pub rng: R,
}

impl<T: Scalar, R: Rng> Initializer<'_, T, R> {
    pub fn conv(&mut self, prefix: &str, cout: usize, cin: usize, kernel: [usize; 3], bias: bool) {
        let w = kaiming_fan_out([cout, cin, kernel[0], kernel[1], kernel[2]], &mut self.rng);
        self.store.insert(format!("{prefix}.weight"), w, ParamKind::Trainable);
        if bias {
            self.store.insert(format!("{prefix}.bias"), Tensor::zeros([cout]), ParamKind::Trainable);
        }
    }

    pub fn batch_norm(&mut self, prefix: &str, c: usize) {
        self.store.insert(format!("{prefix}.weight"), Tensor::ones([c]), ParamKind::Trainable);
        self.store.insert(format!("{prefix}.bias"), Tensor::zeros([c]), ParamKind::Trainable);
        self.store.insert(format!("{prefix}.running_mean"), Tensor::zeros([c]), ParamKind::Buffer);
        self.store.insert(format!("{prefix}.running_var"), Tensor::ones([c]), ParamKind::Buffer);
    }

    pub fn linear(&mut self, prefix: &str, out: usize, inp: usize) {
        let bound = 1.0 / (inp as f64).sqrt();
        let w = uniform(&[out, inp], bound, &mut self.rng);
        let b = uniform(&[out], bound, &mut self.rng);
        self.store.insert(format!("{prefix}.weight"), w, ParamKind::Trainable);
        self.store.insert(format!("{prefix}.bias"), b, ParamKind::Trainable);
    }
}

/// Fresh parameters: Kaiming-normal (fan-out) convolutions, unit/zero batch
/// norm, uniform linear heads and `log sigma = 0`.
pub fn init_params<T: Scalar>(cfg: &ModelConfig, base_seed: u64) -> Result<ParamStore<T>> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    let mut init = Initializer {
        store: &mut store,
        rng: seed::rng(base_seed, &[seed::tag("init")]),
    };
    backbone::init(&mut init, cfg);
    if cfg.attention {
        for task in [Task::Mer, Task::Faud] {
            attention::init(&mut init, cfg, task);
        }
    }
    heads::init(&mut init, cfg);
    store.insert(LOG_SIGMA, Tensor::zeros([2]), ParamKind::Trainable);
    Ok(store)
}

/// Lifts a `(3, D, H, W)` sample tensor list into one `(B, 3, D, H, W)`
/// batch.
pub fn stack_batch<T: Scalar>(items: &[Tensor<T>]) -> Result<Tensor<T>> {
    let first = items.first().ok_or_else(|| Error::invalid("empty batch"))?;
    let shape = first.shape().to_vec();
    let mut data = Vec::with_capacity(items.len() * first.numel());
    for t in items {
        if t.shape() != shape.as_slice() {
            return Err(Error::invalid(format!("batch items differ: {:?} vs {:?}", shape, t.shape())));
        }
        data.extend_from_slice(t.data());
    }
    let mut full = vec![items.len()];
    full.extend(shape);
    Ok(Tensor::new(full, data)?)
}
