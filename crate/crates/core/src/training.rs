//! Leave-one-subject-out training and evaluation of the branch networks,
//! late fusion of the two branches and the ablation table.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use famnet_tensor::{ParamKind, ParamStore, Tensor};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::attention::Task;
use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::data::{expand_apex_neighbors, CoarseEmotion, Dataset, Fold};
use crate::error::{Error, Result};
use crate::heads::{self, AuWeighting};
use crate::metrics::{self, Confusion, FoldMetrics, MetricsReport, RunReport};
use crate::model::{self, Branch, ForwardCtx, ModelConfig};
use crate::preprocess::{
    assemble_clip, image_tensor, resize_and_crop, AugmentPolicy, CropGeometry, CropMode,
};
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskMode {
    /// Emotion loss only.
    Single,
    /// Emotion and action-unit losses under uncertainty weighting.
    Dual,
}

impl std::str::FromStr for TaskMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "single" => Ok(TaskMode::Single),
            "dual" => Ok(TaskMode::Dual),
            _ => Err(Error::Config(format!("unknown task mode `{s}` (expected single or dual)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub branch: Branch,
    pub task: TaskMode,
    pub attention: bool,
    pub lr: f64,
    /// Per-epoch multiplicative learning-rate decay.
    pub decay: f64,
    pub epochs: usize,
    /// Defaults to 16 for the 2D branch and 4 for the 3D branch.
    pub batch_size: Option<usize>,
    pub seed: u64,
    pub width: f64,
    pub image_size: usize,
    /// Frames per clip fed to the 3D branch.
    pub depth: usize,
    /// Train the 2D branch on the apex frame and its six neighbours.
    pub apex_neighbors: bool,
    pub augment: AugmentPolicy,
    pub au_weighting: AuWeighting,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    pub parallel_folds: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            branch: Branch::TwoD,
            task: TaskMode::Dual,
            attention: true,
            lr: 1e-4,
            decay: 0.92,
            epochs: 100,
            batch_size: None,
            seed: 0,
            width: 1.0,
            image_size: 224,
            depth: 16,
            apex_neighbors: true,
            augment: AugmentPolicy::default(),
            au_weighting: AuWeighting::Uniform,
            grad_clip: 5.0,
            parallel_folds: 1,
        }
    }
}

impl TrainConfig {
    pub fn batch_size(&self) -> usize {
        self.batch_size.unwrap_or(match self.branch {
            Branch::TwoD => 16,
            Branch::ThreeD => 4,
        })
    }

    pub fn model(&self, n_au: usize) -> ModelConfig {
        ModelConfig::new(self.branch, self.width, n_au, self.attention)
    }

    /// Learning rate of epoch `t` (counted from 0).
    pub fn lr_at(&self, t: usize) -> f64 {
        lr_schedule(self.lr, self.decay, t)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr {} must be positive", self.lr));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return bad(format!("decay {} must lie in (0, 1]", self.decay));
        }
        if self.batch_size() < 2 {
            return bad("batch size must be at least 2 for batch normalisation".into());
        }
        if self.image_size < 8 {
            return bad("image_size must be at least 8".into());
        }
        if self.branch == Branch::ThreeD && self.depth < crate::backbone::MIN_DEPTH {
            return bad(format!("depth {} below the minimum of {}", self.depth, crate::backbone::MIN_DEPTH));
        }
        if self.task == TaskMode::Dual && !self.attention {
            log::debug!("dual task without attention: both heads read the last backbone tap");
        }
        Ok(())
    }
}

/// `lr₀ · γᵗ`.
pub fn lr_schedule(lr0: f64, gamma: f64, epoch: usize) -> f64 {
    lr0 * gamma.powi(epoch as i32)
}

/// Index kept by the second-highest rule: drop one occurrence (the first)
/// of the maximum and return the arg-max of what remains (first on ties).
pub fn select_final_index(values: &[f64]) -> Result<usize> {
    if values.len() < 2 {
        return Err(Error::invalid(format!(
            "selection needs at least two values, got {}",
            values.len()
        )));
    }
    let top = metrics::argmax(values);
    let mut best: Option<usize> = None;
    for (i, &v) in values.iter().enumerate() {
        if i != top && best.is_none_or(|b| v > values[b]) {
            best = Some(i);
        }
    }
    Ok(best.expect("at least one value remains"))
}

pub fn select_final(values: &[f64]) -> Result<f64> {
    Ok(values[select_final_index(values)?])
}

/// Adam with per-parameter step counts.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    slots: BTreeMap<String, AdamSlot>,
}

#[derive(Clone, Debug)]
struct AdamSlot {
    m: Vec<f32>,
    v: Vec<f32>,
    t: i32,
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            slots: BTreeMap::new(),
        }
    }
}

impl Adam {
    pub fn step(&mut self, store: &mut ParamStore<f32>, grads: &[(String, Tensor<f32>)], lr: f64) {
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        for (name, g) in grads {
            let Some(p) = store.tensor_mut(name) else { continue };
            let slot = self.slots.entry(name.clone()).or_insert_with(|| AdamSlot {
                m: vec![0.0; g.numel()],
                v: vec![0.0; g.numel()],
                t: 0,
            });
            slot.t += 1;
            let c1 = 1.0 - self.beta1.powi(slot.t);
            let c2 = 1.0 - self.beta2.powi(slot.t);
            let step = (lr / c1) as f32;
            let c2 = c2 as f32;
            let eps = self.eps as f32;
            for (((w, &gi), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(&mut slot.m).zip(&mut slot.v) {
                *m = b1 * *m + (1.0 - b1) * gi;
                *v = b2 * *v + (1.0 - b2) * gi * gi;
                *w -= step * *m / ((*v / c2).sqrt() + eps);
            }
        }
    }
}

/// Rescales gradients so their joint L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [(String, Tensor<f32>)], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|(_, g)| g.data())
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = (max_norm / norm) as f32;
        for (_, g) in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}

/// Network inputs for one dataset under one configuration.
pub struct InputPipeline<'d> {
    pub dataset: &'d Dataset,
    cfg: TrainConfig,
    geom: CropGeometry,
    eval_cache: Vec<Option<Tensor<f32>>>,
}

/// One training example: a sample and (2D branch) the frame to use.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TrainItem {
    pub sample: usize,
    pub frame: usize,
}

impl<'d> InputPipeline<'d> {
    pub fn new(dataset: &'d Dataset, cfg: &TrainConfig) -> Self {
        InputPipeline {
            dataset,
            cfg: cfg.clone(),
            geom: CropGeometry::for_size(cfg.image_size),
            eval_cache: vec![None; dataset.samples.len()],
        }
    }

    pub fn train_items(&self, samples: &[usize]) -> Result<Vec<TrainItem>> {
        let mut items = Vec::new();
        for &i in samples {
            let s = &self.dataset.samples[i];
            match self.cfg.branch {
                Branch::TwoD if self.cfg.apex_neighbors => {
                    for f in expand_apex_neighbors(s.apex_index, s.frames.len())? {
                        items.push(TrainItem { sample: i, frame: f });
                    }
                }
                _ => items.push(TrainItem { sample: i, frame: s.apex_index }),
            }
        }
        Ok(items)
    }

    /// Augmented training tensor; every draw comes from `tags`.
    pub fn train_tensor(&self, item: TrainItem, tags: &[u64]) -> Result<Tensor<f32>> {
        let mut rng = seed::rng(self.cfg.seed, tags);
        let (top, left) = self.geom.random_offset(&mut rng);
        let aug = self.cfg.augment.sample(&mut rng);
        let mode = CropMode::Train { top, left };
        let sample = &self.dataset.samples[item.sample];
        match self.cfg.branch {
            Branch::TwoD => {
                let img = resize_and_crop(&sample.frames[item.frame], &self.geom, mode)?;
                Ok(image_tensor(&aug.apply(&img)))
            }
            Branch::ThreeD => {
                let frames = sample
                    .frames
                    .iter()
                    .map(|f| Ok(aug.apply(&resize_and_crop(f, &self.geom, mode)?)))
                    .collect::<Result<Vec<_>>>()?;
                assemble_clip(&frames, self.cfg.depth)
            }
        }
    }

    /// Deterministic evaluation tensor: apex frame (2D) or whole clip (3D),
    /// centre crop, no augmentation.
    pub fn eval_tensor(&mut self, sample: usize) -> Result<Tensor<f32>> {
        if let Some(t) = &self.eval_cache[sample] {
            return Ok(t.clone());
        }
        let s = &self.dataset.samples[sample];
        let t = match self.cfg.branch {
            Branch::TwoD => image_tensor(&resize_and_crop(s.apex_frame(), &self.geom, CropMode::Eval)?),
            Branch::ThreeD => {
                let frames = s
                    .frames
                    .iter()
                    .map(|f| resize_and_crop(f, &self.geom, CropMode::Eval))
                    .collect::<Result<Vec<_>>>()?;
                assemble_clip(&frames, self.cfg.depth)?
            }
        };
        self.eval_cache[sample] = Some(t.clone());
        Ok(t)
    }
}

const EVAL_BATCH: usize = 16;

/// Emotion logits of `samples` under inference-mode batch norm.
pub fn predict(
    store: &ParamStore<f32>,
    model: &ModelConfig,
    pipeline: &mut InputPipeline<'_>,
    samples: &[usize],
) -> Result<Vec<[f64; 3]>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_BATCH) {
        let xs = chunk.iter().map(|&i| pipeline.eval_tensor(i)).collect::<Result<Vec<_>>>()?;
        let mut ctx = ForwardCtx::new(store, false);
        let x = ctx.graph.constant(model::stack_batch(&xs)?);
        let o = model::forward(&mut ctx, model, x, false)?;
        for row in ctx.graph.value(o.mer_logits).data().chunks(3) {
            out.push([row[0] as f64, row[1] as f64, row[2] as f64]);
        }
    }
    Ok(out)
}

fn confusion_of(dataset: &Dataset, samples: &[usize], logits: &[[f64; 3]]) -> Confusion {
    Confusion::from_pairs(samples.iter().zip(logits).map(|(&i, l)| {
        let pred = CoarseEmotion::from_index(metrics::argmax(l)).expect("three classes");
        (dataset.samples[i].emotion.coarse, pred)
    }))
}

/// Metrics of one epoch of one fold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// Counted from 1.
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub loss_me: f64,
    pub loss_au: Option<f64>,
    pub sigma: [f64; 2],
    pub uar: f64,
    pub uf1: f64,
}

/// Outcome of training one fold.
#[derive(Clone, Debug)]
pub struct FoldResult {
    pub subject: String,
    pub trace: Vec<EpochRecord>,
    /// Loss of every optimisation step.
    pub step_losses: Vec<f64>,
    /// Epoch (from 1) whose weights were kept; `None` for the initial
    /// weights.
    pub selected_epoch: Option<usize>,
    pub params: ParamStore<f32>,
    pub test_samples: Vec<usize>,
    pub test_logits: Vec<[f64; 3]>,
    pub report: MetricsReport,
}

impl FoldResult {
    pub fn fold_metrics(&self) -> FoldMetrics {
        FoldMetrics {
            subject: self.subject.clone(),
            epoch: self.selected_epoch.unwrap_or(0),
            report: self.report.clone(),
        }
    }
}

struct Snapshot {
    epoch: usize,
    uar: f64,
    params: ParamStore<f32>,
    logits: Vec<[f64; 3]>,
}

/// Keeps the two epochs ranked first under (UAR desc, epoch asc); the
/// second of them is what [`select_final_index`] picks.
fn keep_top_two(top: &mut Vec<Snapshot>, snap: Snapshot) {
    let pos = top
        .iter()
        .position(|s| snap.uar > s.uar)
        .unwrap_or(top.len());
    if pos < 2 {
        top.insert(pos, snap);
        top.truncate(2);
    }
}

fn sigma_of(store: &ParamStore<f32>) -> [f64; 2] {
    let s = store.tensor(model::LOG_SIGMA).map(|t| t.to_f64_vec()).unwrap_or_else(|| vec![0.0, 0.0]);
    [s[0].exp(), s[1].exp()]
}

/// Trains one branch on the fold's training subjects, evaluating the
/// held-out subject after every epoch.
pub fn train_fold(cfg: &TrainConfig, dataset: &Dataset, fold: &Fold) -> Result<FoldResult> {
    cfg.validate()?;
    let model_cfg = cfg.model(dataset.n_au());
    let fold_tag = seed::tag(&fold.test_subject);
    let mut params = model::init_params::<f32>(&model_cfg, seed::derive(cfg.seed, &[fold_tag]))?;
    let mut pipeline = InputPipeline::new(dataset, cfg);
    let train_samples = dataset.indices_for(&fold.train);
    let test_samples = dataset.indices_for(&fold.test);
    if train_samples.is_empty() {
        return Err(Error::invalid(format!("fold {} has no training samples", fold.test_subject)));
    }
    let items = pipeline.train_items(&train_samples)?;
    let train_aus: Vec<_> = train_samples.iter().map(|&i| &dataset.samples[i].aus).collect();
    let au_w = heads::au_weights(cfg.au_weighting, &train_aus, dataset.n_au());
    let dual = cfg.task == TaskMode::Dual;
    let bs = cfg.batch_size();

    let mut adam = Adam::default();
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut step_losses = Vec::new();
    let mut top: Vec<Snapshot> = Vec::new();

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let mut order: Vec<usize> = (0..items.len()).collect();
        order.shuffle(&mut seed::rng(cfg.seed, &[fold_tag, seed::tag("shuffle"), epoch as u64]));
        let (mut sum, mut sum_me, mut sum_au, mut batches) = (0.0, 0.0, 0.0, 0usize);
        for batch in order.chunks(bs) {
            if batch.len() < 2 {
                continue;
            }
            let xs = batch
                .iter()
                .map(|&k| pipeline.train_tensor(items[k], &[fold_tag, epoch as u64, k as u64]))
                .collect::<Result<Vec<_>>>()?;
            let samples: Vec<_> = batch.iter().map(|&k| &dataset.samples[items[k].sample]).collect();
            let labels: Vec<CoarseEmotion> = samples.iter().map(|s| s.emotion.coarse).collect();

            let mut ctx = ForwardCtx::new(&params, true);
            let x = ctx.graph.constant(model::stack_batch(&xs)?);
            let out = model::forward(&mut ctx, &model_cfg, x, dual)?;
            let l_me = heads::loss_me(&mut ctx, out.mer_logits, &labels)?;
            let (loss, l_au) = match out.au_logits {
                Some(au) => {
                    let targets = heads::au_targets(&samples.iter().map(|s| &s.aus).collect::<Vec<_>>())?;
                    let l_au = heads::loss_au(&mut ctx, au, &targets, &au_w)?;
                    (heads::uncertainty_combine(&mut ctx, l_me, l_au)?, Some(l_au))
                }
                None => (l_me, None),
            };
            let value = ctx.graph.value(loss).item().expect("scalar loss") as f64;
            if !value.is_finite() {
                return Err(Error::Diverged {
                    fold: fold.test_subject.clone(),
                    epoch: epoch + 1,
                    detail: format!("loss became {value}"),
                });
            }
            let me_value = ctx.graph.value(l_me).item().expect("scalar") as f64;
            let au_value = l_au.map(|v| ctx.graph.value(v).item().expect("scalar") as f64);
            let grads = ctx.graph.backward(loss)?;
            let mut named: Vec<(String, Tensor<f32>)> = ctx
                .graph
                .bound_params()
                .filter(|(n, _)| params.get(n).is_some_and(|p| p.kind == ParamKind::Trainable))
                .filter_map(|(n, v)| grads.get(v).map(|g| (n.to_string(), g.clone())))
                .collect();
            let (_, stats) = ctx.into_parts();
            let norm = clip_grad_norm(&mut named, cfg.grad_clip);
            if !norm.is_finite() {
                return Err(Error::Diverged {
                    fold: fold.test_subject.clone(),
                    epoch: epoch + 1,
                    detail: "non-finite gradient norm".into(),
                });
            }
            adam.step(&mut params, &named, lr);
            model::apply_bn_updates(&mut params, &stats);

            step_losses.push(value);
            sum += value;
            sum_me += me_value;
            sum_au += au_value.unwrap_or(0.0);
            batches += 1;
        }
        let logits = predict(&params, &model_cfg, &mut pipeline, &test_samples)?;
        let report = MetricsReport::from_confusion(confusion_of(dataset, &test_samples, &logits));
        let n = batches.max(1) as f64;
        let rec = EpochRecord {
            epoch: epoch + 1,
            lr,
            loss: sum / n,
            loss_me: sum_me / n,
            loss_au: dual.then_some(sum_au / n),
            sigma: sigma_of(&params),
            uar: report.uar,
            uf1: report.uf1,
        };
        log::info!(
            "fold {} epoch {:>3} lr {:.3e} L_ME {:.4} L_AU {} sigma1 {:.4} sigma2 {:.4} UAR {:.4} UF1 {:.4}",
            fold.test_subject,
            rec.epoch,
            rec.lr,
            rec.loss_me,
            rec.loss_au.map_or("-".to_string(), |v| format!("{v:.4}")),
            rec.sigma[0],
            rec.sigma[1],
            rec.uar,
            rec.uf1
        );
        keep_top_two(
            &mut top,
            Snapshot {
                epoch: epoch + 1,
                uar: rec.uar,
                params: params.clone(),
                logits,
            },
        );
        trace.push(rec);
    }

    let (selected_epoch, params, test_logits) = match trace.len() {
        0 => {
            let logits = predict(&params, &model_cfg, &mut pipeline, &test_samples)?;
            (None, params, logits)
        }
        1 => {
            log::warn!("fold {}: a single epoch leaves nothing to select; keeping it", fold.test_subject);
            let s = top.remove(0);
            (Some(s.epoch), s.params, s.logits)
        }
        _ => {
            let s = top.remove(1);
            let uars: Vec<f64> = trace.iter().map(|r| r.uar).collect();
            debug_assert_eq!(select_final_index(&uars).ok(), Some(s.epoch - 1));
            (Some(s.epoch), s.params, s.logits)
        }
    };
    let report = MetricsReport::from_confusion(confusion_of(dataset, &test_samples, &test_logits));
    Ok(FoldResult {
        subject: fold.test_subject.clone(),
        trace,
        step_losses,
        selected_epoch,
        params,
        test_samples,
        test_logits,
        report,
    })
}

/// Runs `f` over `n` jobs on up to `workers` threads, keeping job order.
fn parallel_map<R: Send>(n: usize, workers: usize, f: impl Fn(usize) -> Result<R> + Sync) -> Result<Vec<R>> {
    let workers = workers.clamp(1, n.max(1));
    if workers == 1 {
        return (0..n).map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<R>>>> = Mutex::new((0..n).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= n {
                    break;
                }
                let r = f(i);
                results.lock().expect("no poisoned lock")[i] = Some(r);
            });
        }
    });
    results
        .into_inner()
        .expect("no poisoned lock")
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect()
}

/// All folds of one configuration.
#[derive(Clone, Debug)]
pub struct LosoRun {
    pub config: TrainConfig,
    pub folds: Vec<FoldResult>,
    pub report: RunReport,
}

impl LosoRun {
    pub fn checkpoint_meta(&self, dataset: &Dataset, fold: &FoldResult) -> CheckpointMeta {
        CheckpointMeta {
            model: self.config.model(dataset.n_au()),
            image_size: self.config.image_size,
            depth: self.config.depth,
            au_vocabulary: dataset.au_vocabulary.clone(),
            fold: Some(fold.subject.clone()),
        }
    }

    /// Writes `fold_<subject>.safetensors` for every fold into `dir`.
    pub fn save_checkpoints(&self, dataset: &Dataset, dir: &Path) -> Result<()> {
        for f in &self.folds {
            let ck = Checkpoint {
                meta: self.checkpoint_meta(dataset, f),
                params: f.params.clone(),
            };
            ck.save(&checkpoint_path(dir, &f.subject))?;
        }
        Ok(())
    }
}

pub fn checkpoint_path(dir: &Path, subject: &str) -> std::path::PathBuf {
    dir.join(format!("fold_{subject}.safetensors"))
}

pub fn run_loso(cfg: &TrainConfig, dataset: &Dataset, label: &str, config_hash: &str) -> Result<LosoRun> {
    cfg.validate()?;
    let folds = dataset.loso_folds()?;
    log::info!("{label}: {} folds, {} samples", folds.len(), dataset.samples.len());
    let results = parallel_map(folds.len(), cfg.parallel_folds, |i| train_fold(cfg, dataset, &folds[i]))?;
    let report = RunReport::new(
        dataset.dataset_id.as_str(),
        config_hash,
        label,
        results.iter().map(FoldResult::fold_metrics).collect(),
    );
    Ok(LosoRun {
        config: cfg.clone(),
        folds: results,
        report,
    })
}

/// Parameters of one trained branch for one fold.
pub struct BranchModel<'a> {
    pub meta: CheckpointMeta,
    pub params: &'a ParamStore<f32>,
}

fn pipeline_config(meta: &CheckpointMeta) -> TrainConfig {
    TrainConfig {
        branch: meta.model.branch,
        image_size: meta.image_size,
        depth: meta.depth,
        augment: AugmentPolicy::disabled(),
        ..TrainConfig::default()
    }
}

/// Emotion logits of one branch on `samples`.
pub fn branch_logits(model: &BranchModel<'_>, dataset: &Dataset, samples: &[usize]) -> Result<Vec<[f64; 3]>> {
    let mut pipeline = InputPipeline::new(dataset, &pipeline_config(&model.meta));
    predict(model.params, &model.meta.model, &mut pipeline, samples)
}

/// Evaluates a fold's held-out subject with one branch, or with the late
/// fusion of two.
pub fn evaluate_fold(
    models: &[BranchModel<'_>],
    dataset: &Dataset,
    fold: &Fold,
) -> Result<(Vec<usize>, Vec<[f64; 3]>, MetricsReport)> {
    let samples = dataset.indices_for(&fold.test);
    let mut fused: Option<Vec<[f64; 3]>> = None;
    for m in models {
        let l = branch_logits(m, dataset, &samples)?;
        fused = Some(match fused {
            None => l,
            Some(prev) => prev
                .iter()
                .zip(&l)
                .map(|(a, b)| {
                    let f = metrics::late_fuse(a, b).expect("equal lengths");
                    [f[0], f[1], f[2]]
                })
                .collect(),
        });
    }
    let logits = fused.ok_or_else(|| Error::invalid("no branch models to evaluate"))?;
    let report = MetricsReport::from_confusion(confusion_of(dataset, &samples, &logits));
    Ok((samples, logits, report))
}

fn fold_of<'r>(run: &'r LosoRun, subject: &str) -> Result<&'r FoldResult> {
    run.folds
        .iter()
        .find(|f| f.subject == subject)
        .ok_or_else(|| Error::MissingArtifact(format!("{} model for fold {subject}", run.config.branch)))
}

/// Fuses the fold-wise 2D and 3D models of two finished runs.
pub fn fuse_runs(run2d: &LosoRun, run3d: &LosoRun, dataset: &Dataset, label: &str, config_hash: &str) -> Result<RunReport> {
    let folds = dataset.loso_folds()?;
    let mut out = Vec::new();
    for fold in &folds {
        let (a, b) = (fold_of(run2d, &fold.test_subject)?, fold_of(run3d, &fold.test_subject)?);
        let models = [
            BranchModel { meta: run2d.checkpoint_meta(dataset, a), params: &a.params },
            BranchModel { meta: run3d.checkpoint_meta(dataset, b), params: &b.params },
        ];
        let (_, _, report) = evaluate_fold(&models, dataset, fold)?;
        out.push(FoldMetrics {
            subject: fold.test_subject.clone(),
            epoch: 0,
            report,
        });
    }
    Ok(RunReport::new(dataset.dataset_id.as_str(), config_hash, label, out))
}

/// Fold-wise evaluation from checkpoint directories (one per branch).
pub fn evaluate_checkpoints(dirs: &[&Path], dataset: &Dataset, label: &str, config_hash: &str) -> Result<RunReport> {
    let folds = dataset.loso_folds()?;
    let mut out = Vec::new();
    for fold in &folds {
        let cks = dirs
            .iter()
            .map(|d| Checkpoint::load(&checkpoint_path(d, &fold.test_subject)))
            .collect::<Result<Vec<_>>>()?;
        for ck in &cks {
            if ck.meta.au_vocabulary.len() != dataset.n_au() {
                return Err(Error::invalid(format!(
                    "checkpoint expects {} action units, dataset has {}",
                    ck.meta.au_vocabulary.len(),
                    dataset.n_au()
                )));
            }
        }
        let models: Vec<BranchModel<'_>> = cks
            .iter()
            .map(|c| BranchModel { meta: c.meta.clone(), params: &c.params })
            .collect();
        let (_, _, report) = evaluate_fold(&models, dataset, fold)?;
        out.push(FoldMetrics {
            subject: fold.test_subject.clone(),
            epoch: 0,
            report,
        });
    }
    Ok(RunReport::new(dataset.dataset_id.as_str(), config_hash, label, out))
}

/// Rows of the ablation table, in display order.
pub const ABLATION_ROWS: [&str; 6] = [
    "Baseline",
    "Single+HA(2D)",
    "Dual+HA(2D)",
    "Single+HA(3D)",
    "Dual+HA(3D)",
    "FAMNet",
];

/// Training configuration of an ablation row (`None` for the fused row).
pub fn ablation_config(base: &TrainConfig, row: &str) -> Option<TrainConfig> {
    let (branch, task, attention) = match row {
        "Baseline" => (Branch::TwoD, TaskMode::Single, false),
        "Single+HA(2D)" => (Branch::TwoD, TaskMode::Single, true),
        "Dual+HA(2D)" => (Branch::TwoD, TaskMode::Dual, true),
        "Single+HA(3D)" => (Branch::ThreeD, TaskMode::Single, true),
        "Dual+HA(3D)" => (Branch::ThreeD, TaskMode::Dual, true),
        _ => return None,
    };
    Some(TrainConfig {
        branch,
        task,
        attention,
        ..base.clone()
    })
}

#[derive(Clone, Debug)]
pub struct Ablation {
    pub rows: Vec<(String, RunReport)>,
    /// Trained runs by row label.
    pub runs: BTreeMap<String, LosoRun>,
}

impl Ablation {
    pub fn report(&self, row: &str) -> Option<&RunReport> {
        self.rows.iter().find(|(r, _)| r == row).map(|(_, rep)| rep)
    }

    /// Plain-text table with one line per configuration.
    pub fn table(&self) -> String {
        let mut s = format!("| {:<14} | {:>6} | {:>6} |\n|{}|{}|{}|\n", "Method", "UAR", "UF1", "-".repeat(16), "-".repeat(8), "-".repeat(8));
        for (row, rep) in &self.rows {
            s.push_str(&format!("| {:<14} | {:>6.4} | {:>6.4} |\n", row, rep.uar(), rep.uf1()));
        }
        s
    }
}

/// Trains the five single-branch rows selected by `rows` (all six when
/// empty) and fuses the two dual-task rows for the last one.
pub fn run_ablation(base: &TrainConfig, dataset: &Dataset, rows: &[&str], config_hash: &str) -> Result<Ablation> {
    let wanted: Vec<&str> = if rows.is_empty() { ABLATION_ROWS.to_vec() } else { rows.to_vec() };
    if let Some(bad) = wanted.iter().find(|r| !ABLATION_ROWS.contains(r)) {
        return Err(Error::Config(format!("unknown ablation row `{bad}`")));
    }
    let mut needed: Vec<&str> = wanted.iter().copied().filter(|r| *r != "FAMNet").collect();
    if wanted.contains(&"FAMNet") {
        for dep in ["Dual+HA(2D)", "Dual+HA(3D)"] {
            if !needed.contains(&dep) {
                needed.push(dep);
            }
        }
    }
    let mut runs = BTreeMap::new();
    for row in ABLATION_ROWS.iter().filter(|r| needed.contains(r)) {
        let cfg = ablation_config(base, row).expect("trainable row");
        runs.insert(row.to_string(), run_loso(&cfg, dataset, row, config_hash)?);
    }
    let mut out = Vec::new();
    for row in ABLATION_ROWS.iter().filter(|r| wanted.contains(r)) {
        let rep = if *row == "FAMNet" {
            fuse_runs(&runs["Dual+HA(2D)"], &runs["Dual+HA(3D)"], dataset, row, config_hash)?
        } else {
            runs[*row].report.clone()
        };
        log::info!("{row}: UAR {:.4} UF1 {:.4}", rep.uar(), rep.uf1());
        out.push((row.to_string(), rep));
    }
    Ok(Ablation { rows: out, runs })
}

/// Parameters touched by the emotion-only objective never include the
/// action-unit stack or head.
pub fn task_param_prefixes(task: Task) -> [&'static str; 2] {
    match task {
        Task::Mer => ["attention.mer.", "head.mer."],
        Task::Faud => ["attention.faud.", "head.au."],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn second_highest_rule() {
        assert_eq!(select_final(&[0.9, 0.85, 0.7]).unwrap(), 0.85);
        assert_eq!(select_final(&[0.9, 0.9, 0.7]).unwrap(), 0.9);
        assert_eq!(select_final_index(&[0.9, 0.9, 0.7]).unwrap(), 1);
        assert_eq!(select_final_index(&[0.1, 0.5, 0.3, 0.5]).unwrap(), 3);
        assert!(select_final(&[0.5]).is_err());
    }

    #[test]
    fn top_two_tracks_selection() {
        let uars = [0.3, 0.7, 0.5, 0.7, 0.6, 0.2];
        let mut top = Vec::new();
        for (i, &u) in uars.iter().enumerate() {
            keep_top_two(&mut top, Snapshot { epoch: i + 1, uar: u, params: ParamStore::new(), logits: vec![] });
        }
        assert_eq!(top[1].epoch - 1, select_final_index(&uars).unwrap());
    }

    #[test]
    fn decay_schedule() {
        assert!((lr_schedule(1e-4, 0.92, 10) - 4.3438845e-5).abs() < 1e-12);
        assert_eq!(lr_schedule(2e-3, 0.95, 0), 2e-3);
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut g = vec![("a".to_string(), Tensor::from_f64([2], &[3.0, 4.0]).unwrap())];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g[0].1.data()[0] - 0.6).abs() < 1e-6);
    }

    #[test]
    fn ablation_rows_resolve() {
        let base = TrainConfig::default();
        assert!(!ablation_config(&base, "Baseline").unwrap().attention);
        assert_eq!(ablation_config(&base, "Dual+HA(3D)").unwrap().branch, Branch::ThreeD);
        assert!(ablation_config(&base, "FAMNet").is_none());
    }
}
