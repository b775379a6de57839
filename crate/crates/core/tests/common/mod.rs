//! Independent reference implementations and the checks shared by the
//! integration tests and the acceptance runner.
#![allow(dead_code)]

use std::collections::BTreeSet;

use famnet::attention::{self, Task};
use famnet::backbone::{self, FeatureTaps};
use famnet::data::{loso_folds, CoarseEmotion};
use famnet::heads;
use famnet::metrics::{compute_uar, compute_uf1, Confusion};
use famnet::model::{self, Branch, ForwardCtx, ModelConfig, LOG_SIGMA};
use famnet::training::lr_schedule;
use famnet_tensor::{Graph, ParamKind, ParamStore, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// ---------------------------------------------------------------------------
// Reference formulas, written from the definitions and sharing no code with
// the library.

/// Softmax via log-sum-exp.
pub fn ref_softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::MIN, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    z.iter().map(|v| (v - lse).exp()).collect()
}

/// Batch mean of the per-sample margin loss on softmax probabilities.
pub fn ref_loss_me(logits: &[Vec<f64>], labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (z, &y) in logits.iter().zip(labels) {
        let p = ref_softmax(z);
        for (c, pc) in p.iter().enumerate() {
            total += if c == y { (1.0 - pc).powi(2) } else { 0.5 * pc.powi(2) };
        }
    }
    total / logits.len() as f64
}

/// Weighted binary cross-entropy averaged over samples and units.
pub fn ref_loss_au(logits: &[Vec<f64>], targets: &[Vec<bool>], weights: &[f64]) -> f64 {
    let eps = 1e-7;
    let mut total = 0.0;
    let mut count = 0.0;
    for (z, y) in logits.iter().zip(targets) {
        for ((zi, &yi), w) in z.iter().zip(y).zip(weights) {
            let p = (1.0 / (1.0 + (-zi).exp())).clamp(eps, 1.0 - eps);
            total -= w * if yi { p.ln() } else { (1.0 - p).ln() };
            count += 1.0;
        }
    }
    total / count
}

/// Written in σ form: `L₁/σ₁² + L₂/σ₂² + ln σ₁ + ln σ₂`.
pub fn ref_uncertainty(l_me: f64, l_au: f64, s: [f64; 2]) -> f64 {
    let (v1, v2) = (s[0].exp().powi(2), s[1].exp().powi(2));
    l_me / v1 + l_au / v2 + v1.sqrt().ln() + v2.sqrt().ln()
}

/// Recall per class present in `truth`, averaged.
pub fn ref_uar(truth: &[usize], pred: &[usize]) -> f64 {
    let present: BTreeSet<usize> = truth.iter().copied().collect();
    let recalls: Vec<f64> = present
        .iter()
        .map(|&c| {
            let n = truth.iter().filter(|&&t| t == c).count();
            let hit = truth.iter().zip(pred).filter(|(&t, &p)| t == c && p == c).count();
            hit as f64 / n as f64
        })
        .collect();
    if recalls.is_empty() {
        0.0
    } else {
        recalls.iter().sum::<f64>() / recalls.len() as f64
    }
}

/// F1 per class present in `truth` (0 when it has no TP, FP or FN),
/// averaged.
pub fn ref_uf1(truth: &[usize], pred: &[usize]) -> f64 {
    let present: BTreeSet<usize> = truth.iter().copied().collect();
    let f1s: Vec<f64> = present
        .iter()
        .map(|&c| {
            let pairs = truth.iter().zip(pred);
            let tp = pairs.clone().filter(|(&t, &p)| t == c && p == c).count() as f64;
            let fp = pairs.clone().filter(|(&t, &p)| t != c && p == c).count() as f64;
            let fn_ = pairs.filter(|(&t, &p)| t == c && p != c).count() as f64;
            let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
            let recall = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
            if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            }
        })
        .collect();
    if f1s.is_empty() {
        0.0
    } else {
        f1s.iter().sum::<f64>() / f1s.len() as f64
    }
}

/// Learning rate after `t` decays, by repeated multiplication.
pub fn ref_lr(lr0: f64, gamma: f64, t: usize) -> f64 {
    let mut lr = lr0;
    for _ in 0..t {
        lr *= gamma;
    }
    lr
}

/// Second-highest rule by sorting a copy: drop one copy of the maximum and
/// take the maximum of the rest.
pub fn ref_select_final(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| b.partial_cmp(a).unwrap());
    v[1]
}

/// Output length of a strided window.
pub fn window_out(n: usize, k: usize, s: usize, p: usize) -> usize {
    (n + 2 * p - k) / s + 1
}

/// Expected `(C, D, H, W)` of every tap from stride bookkeeping alone.
pub fn ref_tap_shapes(branch: Branch, width: f64, size: usize, depth: usize) -> [[usize; 4]; 4] {
    let ch = [64.0, 128.0, 256.0, 512.0].map(|c: f64| ((c * width).round() as usize).max(1));
    let mut h = window_out(size, 7, 2, 3); // stem conv
    h = window_out(h, 3, 2, 1); // stem max pool
    let mut d = match branch {
        Branch::TwoD => 1,
        Branch::ThreeD => window_out(depth, 7, 1, 3),
    };
    let mut out = [[0; 4]; 4];
    for stage in 0..4 {
        if stage > 0 {
            h = window_out(h, 3, 2, 1);
            if branch == Branch::ThreeD {
                d = window_out(d, 3, 2, 1);
            }
        }
        out[stage] = [ch[stage], d, h, h];
    }
    out
}

// ---------------------------------------------------------------------------
// Library entry points evaluated in f64.

pub fn emotions(labels: &[usize]) -> Vec<CoarseEmotion> {
    labels.iter().map(|&l| CoarseEmotion::ALL[l]).collect()
}

fn matrix(rows: &[Vec<f64>]) -> Tensor<f64> {
    let cols = rows[0].len();
    Tensor::new([rows.len(), cols], rows.concat()).unwrap()
}

pub fn lib_loss_me(logits: &[Vec<f64>], labels: &[usize]) -> f64 {
    let store = ParamStore::new();
    let mut ctx = ForwardCtx::<f64>::new(&store, false);
    let x = ctx.graph.constant(matrix(logits));
    let l = heads::loss_me(&mut ctx, x, &emotions(labels)).unwrap();
    ctx.graph.value(l).item().unwrap()
}

pub fn bool_matrix(targets: &[Vec<bool>]) -> Tensor<f64> {
    let rows: Vec<Vec<f64>> = targets
        .iter()
        .map(|r| r.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect())
        .collect();
    matrix(&rows)
}

pub fn lib_loss_au(logits: &[Vec<f64>], targets: &[Vec<bool>], weights: &[f64]) -> f64 {
    let store = ParamStore::new();
    let mut ctx = ForwardCtx::<f64>::new(&store, false);
    let x = ctx.graph.constant(matrix(logits));
    let l = heads::loss_au(&mut ctx, x, &bool_matrix(targets), weights).unwrap();
    ctx.graph.value(l).item().unwrap()
}

pub fn sigma_store(s: [f64; 2]) -> ParamStore<f64> {
    let mut store = ParamStore::new();
    store.insert(LOG_SIGMA, Tensor::new([2], s.to_vec()).unwrap(), ParamKind::Trainable);
    store
}

pub fn lib_uncertainty(l_me: f64, l_au: f64, s: [f64; 2]) -> f64 {
    let store = sigma_store(s);
    let mut ctx = ForwardCtx::<f64>::new(&store, false);
    let a = ctx.graph.constant(Tensor::scalar(l_me));
    let b = ctx.graph.constant(Tensor::scalar(l_au));
    let l = heads::uncertainty_combine(&mut ctx, a, b).unwrap();
    ctx.graph.value(l).item().unwrap()
}

fn confusion(truth: &[usize], pred: &[usize]) -> Confusion {
    Confusion::from_pairs(
        truth
            .iter()
            .zip(pred)
            .map(|(&t, &p)| (CoarseEmotion::ALL[t], CoarseEmotion::ALL[p])),
    )
}

pub fn lib_uar(truth: &[usize], pred: &[usize]) -> f64 {
    compute_uar(&confusion(truth, pred))
}

pub fn lib_uf1(truth: &[usize], pred: &[usize]) -> f64 {
    compute_uf1(&confusion(truth, pred))
}

// ---------------------------------------------------------------------------
// Random inputs.

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_rows(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| (0..cols).map(|_| rng.random_range(-scale..scale)).collect())
        .collect()
}

pub fn random_bits(rng: &mut impl Rng, rows: usize, cols: usize) -> Vec<Vec<bool>> {
    (0..rows).map(|_| (0..cols).map(|_| rng.random_bool(0.4)).collect()).collect()
}

/// Labels drawn from a random non-empty subset of the classes, so absent
/// classes get exercised.
pub fn random_labels(rng: &mut impl Rng, n: usize) -> (Vec<usize>, Vec<usize>) {
    let subset: Vec<usize> = loop {
        let s: Vec<usize> = (0..3).filter(|_| rng.random_bool(0.7)).collect();
        if !s.is_empty() {
            break s;
        }
    };
    let truth = (0..n).map(|_| subset[rng.random_range(0..subset.len())]).collect();
    let pred = (0..n).map(|_| rng.random_range(0..3)).collect();
    (truth, pred)
}

// ---------------------------------------------------------------------------
// Criterion 1: closed-form oracles on random inputs.

pub struct OracleResult {
    pub name: &'static str,
    pub cases: usize,
    pub max_err: f64,
    pub tol: f64,
}

impl OracleResult {
    pub fn passed(&self) -> bool {
        self.max_err <= self.tol
    }
}

pub fn equation_oracles(cases: usize, seed: u64) -> Vec<OracleResult> {
    let mut r = rng(seed);
    let mut errs = [0.0f64; 6];
    for _ in 0..cases {
        let b = r.random_range(1..9);
        let logits = random_rows(&mut r, b, 3, 6.0);
        let labels: Vec<usize> = (0..b).map(|_| r.random_range(0..3)).collect();
        errs[0] = errs[0].max((lib_loss_me(&logits, &labels) - ref_loss_me(&logits, &labels)).abs());

        let n_au = r.random_range(1..13);
        // wide range so the probability clamp is reached
        let z = random_rows(&mut r, b, n_au, 25.0);
        let y = random_bits(&mut r, b, n_au);
        let w: Vec<f64> = (0..n_au).map(|_| r.random_range(0.1..3.0)).collect();
        errs[1] = errs[1].max((lib_loss_au(&z, &y, &w) - ref_loss_au(&z, &y, &w)).abs());

        let (l1, l2) = (r.random_range(0.0..5.0), r.random_range(0.0..5.0));
        let s = [r.random_range(-3.0..3.0), r.random_range(-3.0..3.0)];
        let (a, e) = (lib_uncertainty(l1, l2, s), ref_uncertainty(l1, l2, s));
        errs[2] = errs[2].max((a - e).abs() / e.abs().max(1.0));

        let n = r.random_range(1..61);
        let (truth, pred) = random_labels(&mut r, n);
        errs[3] = errs[3].max((lib_uar(&truth, &pred) - ref_uar(&truth, &pred)).abs());
        errs[4] = errs[4].max((lib_uf1(&truth, &pred) - ref_uf1(&truth, &pred)).abs());

        let lr0 = 10f64.powf(r.random_range(-6.0..-1.0));
        let gamma = r.random_range(0.5..=1.0);
        let t = r.random_range(0..200);
        errs[5] = errs[5].max((lr_schedule(lr0, gamma, t) - ref_lr(lr0, gamma, t)).abs() / ref_lr(lr0, gamma, t));
    }
    let names = ["loss_me", "loss_au", "uncertainty_combine", "compute_uar", "compute_uf1", "lr_schedule"];
    let tols = [1e-6, 1e-6, 1e-6, 1e-9, 1e-9, 1e-6];
    (0..6)
        .map(|i| OracleResult {
            name: names[i],
            cases,
            max_err: errs[i],
            tol: tols[i],
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Criterion 2: finite differences.

pub const GRAD_RTOL: f64 = 1e-3;
/// Absolute floor for gradients that are zero up to rounding.
pub const GRAD_ATOL: f64 = 1e-8;
const FD_STEP: f64 = 1e-5;

pub fn grad_close(analytic: f64, numeric: f64) -> bool {
    (analytic - numeric).abs() <= GRAD_RTOL * analytic.abs().max(numeric.abs()) + GRAD_ATOL
}

/// Worst relative mismatch seen by a check, as `|a−n| / (max(|a|,|n|) + atol/rtol)`.
#[derive(Debug, Default, Clone)]
pub struct GradReport {
    pub checked: usize,
    pub failures: Vec<String>,
    pub worst: f64,
}

impl GradReport {
    pub fn record(&mut self, what: impl FnOnce() -> String, analytic: f64, numeric: f64) {
        self.checked += 1;
        let scale = analytic.abs().max(numeric.abs()) + GRAD_ATOL / GRAD_RTOL;
        self.worst = self.worst.max((analytic - numeric).abs() / scale);
        if !grad_close(analytic, numeric) {
            self.failures.push(format!("{}: analytic {analytic:.9e} numeric {numeric:.9e}", what()));
        }
    }

    pub fn merge(&mut self, other: GradReport) {
        self.checked += other.checked;
        self.worst = self.worst.max(other.worst);
        self.failures.extend(other.failures);
    }

    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.checked > 0
    }
}

/// Central difference of `f` along coordinate `i` of input `k`.
fn central<F: Fn(&[Tensor<f64>]) -> f64>(inputs: &[Tensor<f64>], k: usize, i: usize, f: &F) -> f64 {
    let mut plus = inputs.to_vec();
    plus[k].data_mut()[i] += FD_STEP;
    let mut minus = inputs.to_vec();
    minus[k].data_mut()[i] -= FD_STEP;
    (f(&plus) - f(&minus)) / (2.0 * FD_STEP)
}

/// Loss of `margin(softmax(z))` and its gradient in `z`.
pub fn grad_loss_me(seed: u64, batches: usize) -> GradReport {
    let mut r = rng(seed);
    let mut rep = GradReport::default();
    for _ in 0..batches {
        let b = r.random_range(1..6);
        let z = random_rows(&mut r, b, 3, 4.0);
        let labels: Vec<usize> = (0..b).map(|_| r.random_range(0..3)).collect();
        let store = ParamStore::new();
        let mut ctx = ForwardCtx::<f64>::frozen_tracked(&store);
        let v = ctx.graph.variable(matrix(&z));
        let l = heads::loss_me(&mut ctx, v, &emotions(&labels)).unwrap();
        let g = ctx.graph.backward(l).unwrap().get(v).unwrap().clone();
        let f = |t: &[Tensor<f64>]| {
            let rows: Vec<Vec<f64>> = t[0].data().chunks(3).map(<[f64]>::to_vec).collect();
            lib_loss_me(&rows, &labels)
        };
        let inputs = [matrix(&z)];
        for i in 0..g.numel() {
            rep.record(|| format!("loss_me dz[{i}]"), g.data()[i], central(&inputs, 0, i, &f));
        }
    }
    rep
}

pub fn grad_loss_au(seed: u64, batches: usize) -> GradReport {
    let mut r = rng(seed);
    let mut rep = GradReport::default();
    for _ in 0..batches {
        let (b, n) = (r.random_range(1..5), r.random_range(1..9));
        // inside the unclamped range
        let z = random_rows(&mut r, b, n, 6.0);
        let y = random_bits(&mut r, b, n);
        let w: Vec<f64> = (0..n).map(|_| r.random_range(0.2..2.5)).collect();
        let store = ParamStore::new();
        let mut ctx = ForwardCtx::<f64>::frozen_tracked(&store);
        let v = ctx.graph.variable(matrix(&z));
        let l = heads::loss_au(&mut ctx, v, &bool_matrix(&y), &w).unwrap();
        let g = ctx.graph.backward(l).unwrap().get(v).unwrap().clone();
        let f = |t: &[Tensor<f64>]| {
            let rows: Vec<Vec<f64>> = t[0].data().chunks(n).map(<[f64]>::to_vec).collect();
            lib_loss_au(&rows, &y, &w)
        };
        let inputs = [matrix(&z)];
        for i in 0..g.numel() {
            rep.record(|| format!("loss_au dz[{i}]"), g.data()[i], central(&inputs, 0, i, &f));
        }
    }
    rep
}

/// Gradients of the uncertainty combination in both task losses and in
/// both log-variances.
pub fn grad_uncertainty(seed: u64, cases: usize) -> GradReport {
    let mut r = rng(seed);
    let mut rep = GradReport::default();
    for _ in 0..cases {
        let (l1, l2) = (r.random_range(0.01..4.0), r.random_range(0.01..4.0));
        let s = [r.random_range(-2.0..2.0), r.random_range(-2.0..2.0)];
        let store = sigma_store(s);
        let mut ctx = ForwardCtx::<f64>::frozen_tracked(&store);
        let a = ctx.graph.variable(Tensor::scalar(l1));
        let b = ctx.graph.variable(Tensor::scalar(l2));
        let l = heads::uncertainty_combine(&mut ctx, a, b).unwrap();
        let grads = ctx.graph.backward(l).unwrap();
        let sv = ctx.graph.bound_params().find(|(n, _)| *n == LOG_SIGMA).unwrap().1;
        let gs = grads.get(sv).unwrap();
        let f = |t: &[Tensor<f64>]| lib_uncertainty(t[0].data()[0], t[0].data()[1], [t[0].data()[2], t[0].data()[3]]);
        let inputs = [Tensor::new([4], vec![l1, l2, s[0], s[1]]).unwrap()];
        let analytic = [
            grads.get(a).unwrap().data()[0],
            grads.get(b).unwrap().data()[0],
            gs.data()[0],
            gs.data()[1],
        ];
        for (i, an) in analytic.iter().enumerate() {
            let name = ["L_me", "L_au", "s1", "s2"][i];
            rep.record(|| format!("uncertainty d/d{name}"), *an, central(&inputs, 0, i, &f));
        }
    }
    rep
}

fn random_tensor(r: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(-scale..scale)).collect()).unwrap()
}

/// Surrogate backbone taps for a stage-1 extent of `size × size`.
pub fn surrogate_taps(r: &mut impl Rng, cfg: &ModelConfig, batch: usize, size: usize) -> Vec<Tensor<f64>> {
    let ch = cfg.channels();
    let mut out = Vec::new();
    for (k, &c) in ch.iter().enumerate() {
        let s = (size >> k).max(1);
        for _ in 0..2 {
            out.push(random_tensor(r, &[batch, c, 1, s, s], 1.0));
        }
    }
    out
}

/// Dual-task loss of the two attention stacks and heads on fixed taps.
fn attention_loss(
    store: &ParamStore<f64>,
    cfg: &ModelConfig,
    taps: &[Tensor<f64>],
    labels: &[usize],
    aus: &Tensor<f64>,
    track: bool,
) -> (Graph<f64>, Var, Vec<Var>) {
    let mut ctx = if track {
        ForwardCtx::frozen_tracked(store)
    } else {
        ForwardCtx::new(store, false)
    };
    let vars: Vec<Var> = taps
        .iter()
        .map(|t| if track { ctx.graph.variable(t.clone()) } else { ctx.graph.constant(t.clone()) })
        .collect();
    let ft = FeatureTaps::new(std::array::from_fn(|i| [vars[2 * i], vars[2 * i + 1]]));
    let out = model::heads_from_taps(&mut ctx, cfg, &ft, true).unwrap();
    let l_me = heads::loss_me(&mut ctx, out.mer_logits, &emotions(labels)).unwrap();
    let w = vec![1.0; cfg.n_au];
    let l_au = heads::loss_au(&mut ctx, out.au_logits.unwrap(), aus, &w).unwrap();
    let loss = heads::uncertainty_combine(&mut ctx, l_me, l_au).unwrap();
    let (g, _) = ctx.into_parts();
    (g, loss, vars)
}

fn perturbed_sigma(r: &mut impl Rng, store: &mut ParamStore<f64>) {
    let s = store.tensor_mut(LOG_SIGMA).unwrap();
    for v in s.data_mut() {
        *v = r.random_range(-0.5..0.5);
    }
}

/// Attention stacks of a width-0.25 model on surrogate taps with a stage-1
/// extent of `size × size`: every attention, head and uncertainty parameter
/// and every tap, checked coordinate-wise on up to `per_tensor` entries.
pub fn grad_attention_stack(seed: u64, size: usize, per_tensor: usize) -> GradReport {
    let mut r = rng(seed);
    let cfg = ModelConfig::new(Branch::TwoD, 0.25, 5, true);
    let mut store = model::init_params::<f64>(&cfg, seed).unwrap();
    perturbed_sigma(&mut r, &mut store);
    // non-zero biases so the check does not sit on the init symmetry
    let names: Vec<String> = store.names().filter(|n| n.starts_with("attention.")).map(String::from).collect();
    for n in &names {
        for v in store.tensor_mut(n).unwrap().data_mut() {
            *v += r.random_range(-0.1..0.1);
        }
    }
    let batch = 2;
    let taps = surrogate_taps(&mut r, &cfg, batch, size);
    let labels: Vec<usize> = (0..batch).map(|_| r.random_range(0..3)).collect();
    let aus = bool_matrix(&random_bits(&mut r, batch, cfg.n_au));

    let (g, loss, vars) = attention_loss(&store, &cfg, &taps, &labels, &aus, true);
    let grads = g.backward(loss).unwrap();
    let value = |st: &ParamStore<f64>, tp: &[Tensor<f64>]| {
        let (g, l, _) = attention_loss(st, &cfg, tp, &labels, &aus, false);
        g.value(l).item().unwrap()
    };
    let mut rep = GradReport::default();

    let bound: Vec<(String, Var)> = g.bound_params().map(|(n, v)| (n.to_string(), v)).collect();
    for (name, v) in bound {
        let p = store.get(&name).unwrap();
        if p.kind != ParamKind::Trainable {
            continue;
        }
        let an = grads.get(v).unwrap().clone();
        for i in sample_indices(&mut r, an.numel(), per_tensor) {
            let mut plus = store.clone();
            plus.tensor_mut(&name).unwrap().data_mut()[i] += FD_STEP;
            let mut minus = store.clone();
            minus.tensor_mut(&name).unwrap().data_mut()[i] -= FD_STEP;
            let num = (value(&plus, &taps) - value(&minus, &taps)) / (2.0 * FD_STEP);
            rep.record(|| format!("{name}[{i}]"), an.data()[i], num);
        }
    }
    for (k, v) in vars.iter().enumerate() {
        let an = grads.get(*v).unwrap().clone();
        let f = |t: &[Tensor<f64>]| value(&store, t);
        for i in sample_indices(&mut r, an.numel(), per_tensor) {
            rep.record(|| format!("tap{}{}[{i}]", k / 2 + 1, k % 2 + 1), an.data()[i], central(&taps, k, i, &f));
        }
    }
    rep
}

fn sample_indices(r: &mut impl Rng, n: usize, k: usize) -> Vec<usize> {
    if n <= k {
        (0..n).collect()
    } else {
        rand::seq::index::sample(r, n, k).into_vec()
    }
}

// ---------------------------------------------------------------------------
// Criterion 3: shapes and attention normalisation.

pub struct ShapeCheck {
    pub taps: Vec<[usize; 5]>,
    pub expected: [[usize; 4]; 4],
    /// Largest `|Σ M − 1|` over batch, channel, stage and task.
    pub max_mass_err: f64,
}

impl ShapeCheck {
    pub fn shapes_match(&self) -> bool {
        self.taps.len() == 8
            && self
                .taps
                .iter()
                .enumerate()
                .all(|(i, t)| t[1..] == self.expected[i / 2][..])
    }
}

/// Full-resolution inference pass of one branch with both attention stacks.
pub fn shape_suite(branch: Branch, width: f64, size: usize, depth: usize) -> ShapeCheck {
    let cfg = ModelConfig::new(branch, width, 4, true);
    let store = model::init_params::<f32>(&cfg, 3).unwrap();
    let d = if branch == Branch::TwoD { 1 } else { depth };
    let mut r = rng(5);
    let n = 3 * d * size * size;
    let x = Tensor::new([1, 3, d, size, size], (0..n).map(|_| r.random_range(-1.0f32..1.0)).collect()).unwrap();
    let mut ctx = ForwardCtx::new(&store, false);
    let xv = ctx.graph.constant(x);
    let taps = backbone::forward(&mut ctx, &cfg, xv).unwrap();
    let mut shapes = Vec::new();
    for i in 1..=4 {
        for j in 1..=2 {
            let s = ctx.graph.shape(taps.tap(i, j));
            shapes.push([s[0], s[1], s[2], s[3], s[4]]);
        }
    }
    let mut max_err = 0.0f64;
    for task in [Task::Mer, Task::Faud] {
        let state = attention::run_task_stack(&mut ctx, task, &taps).unwrap();
        for m in &state.m {
            let t = ctx.graph.value(*m);
            let per = t.shape()[2..].iter().product::<usize>();
            for chunk in t.data().chunks(per) {
                let mass: f64 = chunk.iter().map(|&v| v as f64).sum();
                max_err = max_err.max((mass - 1.0).abs());
            }
        }
    }
    ShapeCheck {
        taps: shapes,
        expected: ref_tap_shapes(branch, width, size, depth),
        max_mass_err: max_err,
    }
}

// ---------------------------------------------------------------------------
// Criterion 4: stationarity of the uncertainty weighting.

pub struct Stationarity {
    pub losses: [f64; 2],
    pub sigma_sq: [f64; 2],
    pub steps: usize,
    pub rel_err: f64,
}

/// Plain gradient descent on `s = log σ` with the task losses frozen, until
/// both `σ²` are within `tol` of `2L` or `max_steps` runs out.
pub fn descend_log_sigma(losses: [f64; 2], lr: f64, max_steps: usize, tol: f64) -> Stationarity {
    let mut store = sigma_store([0.0, 0.0]);
    let rel = |s: &[f64]| {
        (0..2)
            .map(|i| ((2.0 * s[i]).exp() / (2.0 * losses[i]) - 1.0).abs())
            .fold(0.0, f64::max)
    };
    let mut steps = 0;
    while steps < max_steps && rel(store.tensor(LOG_SIGMA).unwrap().data()) > tol {
        let mut ctx = ForwardCtx::<f64>::frozen_tracked(&store);
        let a = ctx.graph.constant(Tensor::scalar(losses[0]));
        let b = ctx.graph.constant(Tensor::scalar(losses[1]));
        let l = heads::uncertainty_combine(&mut ctx, a, b).unwrap();
        let grads = ctx.graph.backward(l).unwrap();
        let sv = ctx.graph.bound_params().next().unwrap().1;
        let g = grads.get(sv).unwrap().clone();
        let s = store.tensor_mut(LOG_SIGMA).unwrap();
        for (v, gi) in s.data_mut().iter_mut().zip(g.data()) {
            *v -= lr * gi;
        }
        steps += 1;
    }
    let s = store.tensor(LOG_SIGMA).unwrap().data().to_vec();
    Stationarity {
        losses,
        sigma_sq: [(2.0 * s[0]).exp(), (2.0 * s[1]).exp()],
        steps,
        rel_err: rel(&s),
    }
}

// ---------------------------------------------------------------------------
// Criterion 7: fold bookkeeping.

/// Every fold holds out exactly one subject, trains on all others, and the
/// test sets partition the subjects.
pub fn folds_are_disjoint(subjects: &[String]) -> bool {
    let folds = match loso_folds(subjects.iter().map(String::as_str)) {
        Ok(f) => f,
        Err(_) => return false,
    };
    let all: BTreeSet<&String> = subjects.iter().collect();
    let mut covered = BTreeSet::new();
    folds.len() == all.len()
        && folds.iter().all(|f| {
            covered.insert(f.test_subject.clone());
            f.test.len() == 1
                && f.test.contains(&f.test_subject)
                && f.train.is_disjoint(&f.test)
                && f.train.len() + 1 == all.len()
                && f.train.iter().chain(&f.test).all(|s| all.contains(s))
        })
        && covered.len() == all.len()
}
