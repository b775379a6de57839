mod common;

use common::{bool_matrix, random_bits, rng, surrogate_taps};
use famnet::attention::{attention_first, attention_step, run_task_stack, Task};
use famnet::backbone::FeatureTaps;
use famnet::heads;
use famnet::model::{self, Branch, ForwardCtx, ModelConfig};
use famnet::training::task_param_prefixes;
use famnet_tensor::{ParamKind, ParamStore, Tensor};
use rand::Rng;

fn zeroed_attention(cfg: &ModelConfig) -> ParamStore<f64> {
    let mut store = model::init_params::<f64>(cfg, 1).unwrap();
    let names: Vec<String> = store.names().filter(|n| n.starts_with("attention.")).map(String::from).collect();
    for n in names {
        store.tensor_mut(&n).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    store
}

#[test]
fn zero_logits_give_uniform_gating() {
    let cfg = ModelConfig::new(Branch::TwoD, 0.25, 3, true);
    let store = zeroed_attention(&cfg);
    let taps = surrogate_taps(&mut rng(3), &cfg, 2, 8);
    let mut ctx = ForwardCtx::new(&store, false);
    let t1 = ctx.graph.constant(taps[0].clone());
    let t2 = ctx.graph.constant(taps[1].clone());
    let (m, f) = attention_first(&mut ctx, Task::Mer, t1, t2).unwrap();
    assert!(ctx.graph.value(m).data().iter().all(|&v| (v - 1.0 / 64.0).abs() < 1e-15));
    for (fv, tv) in ctx.graph.value(f).data().iter().zip(taps[1].data()) {
        assert!((fv - tv / 64.0).abs() < 1e-15);
    }

    // later stages too: F_k is tap[k][2] over the number of positions
    let t3 = ctx.graph.constant(taps[2].clone());
    let t4 = ctx.graph.constant(taps[3].clone());
    let (m2, f2) = attention_step(&mut ctx, Task::Mer, 2, f, t3, t4).unwrap();
    assert!(ctx.graph.value(m2).data().iter().all(|&v| (v - 1.0 / 16.0).abs() < 1e-15));
    for (fv, tv) in ctx.graph.value(f2).data().iter().zip(taps[3].data()) {
        assert!((fv - tv / 16.0).abs() < 1e-15);
    }
}

#[test]
fn zero_second_tap_annihilates_the_gated_feature() {
    let cfg = ModelConfig::new(Branch::TwoD, 0.25, 3, true);
    let store = model::init_params::<f64>(&cfg, 2).unwrap();
    let taps = surrogate_taps(&mut rng(4), &cfg, 1, 8);
    let mut ctx = ForwardCtx::new(&store, false);
    let t1 = ctx.graph.constant(taps[0].clone());
    let t2 = ctx.graph.constant(Tensor::zeros(taps[1].shape().to_vec()));
    let (_, f) = attention_first(&mut ctx, Task::Faud, t1, t2).unwrap();
    assert!(ctx.graph.value(f).data().iter().all(|&v| v == 0.0));
}

#[test]
fn concatenation_channel_bookkeeping() {
    let cfg = ModelConfig::new(Branch::TwoD, 1.0, 5, true);
    let store = model::init_params::<f32>(&cfg, 0).unwrap();
    for task in ["mer", "faud"] {
        let shape = |k: usize| store.tensor(&format!("attention.{task}.{k}.weight")).unwrap().shape().to_vec();
        assert_eq!(shape(1), [64, 64, 1, 1, 1]);
        assert_eq!(shape(2), [128, 192, 1, 1, 1]);
        assert_eq!(shape(3), [256, 384, 1, 1, 1]);
        assert_eq!(shape(4), [512, 768, 1, 1, 1]);
    }
}

#[test]
fn stage_index_and_shape_errors() {
    let cfg = ModelConfig::new(Branch::TwoD, 0.25, 3, true);
    let store = model::init_params::<f64>(&cfg, 2).unwrap();
    let taps = surrogate_taps(&mut rng(5), &cfg, 1, 8);
    let mut ctx = ForwardCtx::new(&store, false);
    let v: Vec<_> = taps.iter().map(|t| ctx.graph.constant(t.clone())).collect();
    assert!(attention_first(&mut ctx, Task::Mer, v[0], v[2]).is_err());
    assert!(attention_step(&mut ctx, Task::Mer, 5, v[1], v[2], v[3]).is_err());
    assert!(attention_step(&mut ctx, Task::Mer, 1, v[1], v[2], v[3]).is_err());
}

#[test]
fn identical_stacks_give_identical_features() {
    let cfg = ModelConfig::new(Branch::ThreeD, 0.25, 3, true);
    let mut store = model::init_params::<f64>(&cfg, 6).unwrap();
    for k in 1..=4 {
        for suffix in ["weight", "bias"] {
            let src = store.tensor(&format!("attention.mer.{k}.{suffix}")).unwrap().clone();
            *store.tensor_mut(&format!("attention.faud.{k}.{suffix}")).unwrap() = src;
        }
    }
    let mut r = rng(6);
    let shapes = [[16, 4, 8, 8], [32, 2, 4, 4], [64, 1, 2, 2], [128, 1, 1, 1]];
    let mut ctx = ForwardCtx::new(&store, false);
    let mut vars = Vec::new();
    for s in shapes {
        for _ in 0..2 {
            let n = s.iter().product();
            let t = Tensor::new([1, s[0], s[1], s[2], s[3]], (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
            vars.push(ctx.graph.constant(t));
        }
    }
    let taps = FeatureTaps::new(std::array::from_fn(|i| [vars[2 * i], vars[2 * i + 1]]));
    let a = run_task_stack(&mut ctx, Task::Mer, &taps).unwrap().final_feature();
    let b = run_task_stack(&mut ctx, Task::Faud, &taps).unwrap().final_feature();
    assert_eq!(ctx.graph.value(a), ctx.graph.value(b));
    assert_eq!(ctx.graph.shape(a), [1, 128, 1, 1, 1]);
}

/// Gradients of one task loss alone on a small complete network. The input
/// is 64 px so that stage 4 keeps a 2×2 extent; at 1×1 its softmax is
/// constant and no attention stage receives gradient.
fn task_gradients(task: Task) -> Vec<(String, f64)> {
    let cfg = ModelConfig::new(Branch::TwoD, 0.25, 4, true);
    let store = model::init_params::<f64>(&cfg, 8).unwrap();
    let mut r = rng(8);
    let n = 2 * 3 * 64 * 64;
    let x = Tensor::new([2, 3, 1, 64, 64], (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
    let mut ctx = ForwardCtx::new(&store, true);
    let xv = ctx.graph.constant(x);
    let out = model::forward(&mut ctx, &cfg, xv, true).unwrap();
    let loss = match task {
        Task::Mer => heads::loss_me(&mut ctx, out.mer_logits, &common::emotions(&[0, 2])).unwrap(),
        Task::Faud => {
            let y = bool_matrix(&random_bits(&mut r, 2, 4));
            heads::loss_au(&mut ctx, out.au_logits.unwrap(), &y, &[1.0; 4]).unwrap()
        }
    };
    let grads = ctx.graph.backward(loss).unwrap();
    ctx.graph
        .bound_params()
        .filter(|(n, _)| store.get(n).unwrap().kind == ParamKind::Trainable)
        .map(|(n, v)| (n.to_string(), grads.get(v).map_or(0.0, |g| g.sq_norm().sqrt())))
        .collect()
}

#[test]
fn action_unit_loss_moves_backbone_but_not_emotion_stack() {
    let g = task_gradients(Task::Faud);
    let norm = |prefix: &str| g.iter().filter(|(n, _)| n.starts_with(prefix)).map(|(_, v)| v).sum::<f64>();
    assert!(norm("backbone.") > 0.0);
    for p in task_param_prefixes(Task::Faud) {
        assert!(norm(p) > 0.0, "{p}");
    }
    for p in task_param_prefixes(Task::Mer) {
        assert_eq!(norm(p), 0.0, "{p}");
    }

    let g = task_gradients(Task::Mer);
    let norm = |prefix: &str| g.iter().filter(|(n, _)| n.starts_with(prefix)).map(|(_, v)| v).sum::<f64>();
    assert!(norm("backbone.") > 0.0);
    assert_eq!(norm("attention.faud."), 0.0);
    for k in 1..=4 {
        assert!(norm(&format!("attention.mer.{k}.weight")) > 0.0, "stage {k}");
    }
}
