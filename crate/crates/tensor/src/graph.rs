//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! Every op appends a node to the tape; node indices are therefore a valid
//! topological order and [`Graph::backward`] simply walks the tape in reverse.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{shape_err, Result, TensorError};
use crate::kernels::{self, ConvGeom, WindowSpec};
use crate::params::{ParamKind, ParamStore};
use crate::scalar::{gemm, MatRef, Scalar};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch-norm normalisation source.
#[derive(Clone, Copy, Debug)]
pub enum NormMode<'a, T> {
    /// Normalise with the statistics of the current batch.
    Batch,
    /// Normalise with stored running statistics.
    Running { mean: &'a [T], var: &'a [T] },
}

/// Per-channel statistics of a training-mode batch-norm call. `var` is the
/// unbiased estimate used to update running statistics.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

enum Op<T> {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        invstd: Vec<T>,
        batch_stats: bool,
    },
    Relu(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    AdaptiveAvgPool {
        x: Var,
        input: [usize; 3],
        output: [usize; 3],
    },
    ConcatChannels(Vec<Var>),
    SpatialSoftmax(Var),
    MeanSpatial(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    SoftmaxRows(Var),
    Sigmoid(Var),
    SumAll(Var),
    MarginLoss {
        p: Var,
        target: Vec<T>,
    },
    WeightedBce {
        p: Var,
        target: Vec<T>,
        weights: Vec<T>,
        eps: T,
    },
    Uncertainty {
        l_me: Var,
        l_au: Var,
        log_sigma: Var,
    },
}

struct Node<T> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], one slot per node that
/// requires a gradient and is a leaf.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    track: bool,
    params: BTreeMap<String, Var>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn dims5(op: &'static str, shape: &[usize]) -> Result<(usize, usize, [usize; 3])> {
    match shape {
        &[b, c, d, h, w] => Ok((b, c, [d, h, w])),
        _ => shape_err(op, format!("expected (B, C, D, H, W), got {shape:?}")),
    }
}

impl<T: Scalar> Graph<T> {
    /// Graph that records everything needed for [`Graph::backward`].
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            track: true,
            params: BTreeMap::new(),
        }
    }

    /// Graph for inference only; no node requires a gradient.
    pub fn inference() -> Self {
        Graph {
            track: false,
            ..Self::new()
        }
    }

    pub fn is_tracking(&self) -> bool {
        self.track
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = self.track && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf holding data that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: Arc::new(value),
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives a gradient when the graph is tracking.
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.leaf(Arc::new(value), true)
    }

    fn leaf(&mut self, value: Arc<Tensor<T>>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: requires_grad && self.track,
        });
        Var(self.nodes.len() - 1)
    }

    /// Binds a named entry of `store` into the graph. Repeated calls with the
    /// same name return the same node. Buffers never require gradients.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let p = store
            .get(name)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))?;
        let v = self.leaf(Arc::clone(&p.value), p.kind == ParamKind::Trainable);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    /// Names of the store entries bound into this graph.
    pub fn bound_params(&self) -> impl Iterator<Item = (&str, Var)> {
        self.params.iter().map(|(k, &v)| (k.as_str(), v))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Volumetric convolution of `x: (B, Cin, D, H, W)` with
    /// `w: (Cout, Cin, kd, kh, kw)` and optional bias `(Cout)`.
    pub fn conv(&mut self, x: Var, w: Var, b: Option<Var>, spec: WindowSpec) -> Result<Var> {
        let (batch, cin, input) = dims5("conv", self.shape(x))?;
        let ws = self.shape(w).to_vec();
        if ws.len() != 5 || ws[1] != cin || ws[2..] != spec.kernel {
            return shape_err(
                "conv",
                format!("weight {ws:?} incompatible with {cin} input channels and kernel {:?}", spec.kernel),
            );
        }
        let cout = ws[0];
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return shape_err("conv", format!("bias shape {:?}, expected [{cout}]", self.shape(b)));
            }
        }
        let output = spec.output_dims(input).ok_or_else(|| TensorError::Shape {
            op: "conv",
            detail: format!("window {spec:?} does not fit input {input:?}"),
        })?;
        let geom = ConvGeom {
            batch,
            cin,
            cout,
            input,
            output,
            spec,
        };
        let out = kernels::conv_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let value = Tensor::new([batch, cout, output[0], output[1], output[2]], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(value, Op::Conv { x, w, b, geom }, &inputs))
    }

    /// Per-channel normalisation over `(B, D, H, W)` followed by the affine
    /// map `gamma * xhat + beta`. In [`NormMode::Batch`] the batch statistics
    /// are returned for running-average bookkeeping.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
        mode: NormMode<'_, T>,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let (batch, c, sp) = dims5("batch_norm", self.shape(x))?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return shape_err("batch_norm", format!("affine parameters must have shape [{c}]"));
        }
        let s: usize = sp.iter().product();
        let count = batch * s;
        let xv = self.value(x).data();
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        let batch_stats = matches!(mode, NormMode::Batch);
        match mode {
            NormMode::Batch => {
                let inv_n = T::one() / T::cast(count as f64);
                for ch in 0..c {
                    let mut acc = T::zero();
                    for b in 0..batch {
                        acc += xv[(b * c + ch) * s..(b * c + ch + 1) * s].iter().copied().sum::<T>();
                    }
                    mean[ch] = acc * inv_n;
                    let mut sq = T::zero();
                    for b in 0..batch {
                        for &v in &xv[(b * c + ch) * s..(b * c + ch + 1) * s] {
                            let d = v - mean[ch];
                            sq += d * d;
                        }
                    }
                    var[ch] = sq * inv_n;
                }
            }
            NormMode::Running { mean: rm, var: rv } => {
                if rm.len() != c || rv.len() != c {
                    return shape_err("batch_norm", "running statistics length mismatch");
                }
                mean.copy_from_slice(rm);
                var.copy_from_slice(rv);
            }
        }
        let eps = T::cast(eps);
        let invstd: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for b in 0..batch {
            for ch in 0..c {
                let r = (b * c + ch) * s..(b * c + ch + 1) * s;
                for i in r {
                    let h = (xv[i] - mean[ch]) * invstd[ch];
                    xhat[i] = h;
                    out[i] = g[ch] * h + bt[ch];
                }
            }
        }
        let stats = batch_stats.then(|| {
            let corr = if count > 1 {
                T::cast(count as f64 / (count - 1) as f64)
            } else {
                T::one()
            };
            BatchStats {
                mean: mean.clone(),
                var: var.iter().map(|&v| v * corr).collect(),
            }
        });
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        let v = self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                invstd,
                batch_stats,
            },
            &[x, gamma, beta],
        );
        Ok((v, stats))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(T::zero()));
        self.push(value, Op::Relu(x), &[x])
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let bv = self.value(b).data();
        let data = self.value(a).data().iter().zip(bv).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let bv = self.value(b).data();
        let data = self.value(a).data().iter().zip(bv).map(|(&x, &y)| x * y).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let f = T::cast(factor);
        let value = self.value(x).map(|v| v * f);
        self.push(value, Op::Scale(x, f), &[x])
    }

    /// Max pooling over `(D, H, W)`; padded cells never win.
    pub fn max_pool(&mut self, x: Var, spec: WindowSpec) -> Result<Var> {
        let (batch, c, input) = dims5("max_pool", self.shape(x))?;
        let output = spec
            .output_dims(input)
            .filter(|_| spec.padding.iter().zip(&spec.kernel).all(|(&p, &k)| 2 * p <= k))
            .ok_or_else(|| TensorError::Shape {
                op: "max_pool",
                detail: format!("window {spec:?} does not fit input {input:?}"),
            })?;
        let (out, argmax) = kernels::max_pool(self.value(x).data(), batch * c, input, output, &spec);
        let value = Tensor::new([batch, c, output[0], output[1], output[2]], out)?;
        Ok(self.push(value, Op::MaxPool { x, argmax }, &[x]))
    }

    /// Adaptive average pooling to the given `(D, H, W)` extent.
    pub fn adaptive_avg_pool(&mut self, x: Var, output: [usize; 3]) -> Result<Var> {
        let (batch, c, input) = dims5("adaptive_avg_pool", self.shape(x))?;
        if output.iter().zip(&input).any(|(&o, &i)| o == 0 || o > i) {
            return shape_err(
                "adaptive_avg_pool",
                format!("cannot pool {input:?} to {output:?}"),
            );
        }
        if output == input {
            // exact identity; still recorded so the op is visible on the tape
            let value = self.value(x).clone();
            return Ok(self.push(value, Op::Scale(x, T::one()), &[x]));
        }
        let out = kernels::adaptive_avg_pool(self.value(x).data(), batch * c, input, output);
        let value = Tensor::new([batch, c, output[0], output[1], output[2]], out)?;
        Ok(self.push(value, Op::AdaptiveAvgPool { x, input, output }, &[x]))
    }

    /// Concatenation along the channel axis of 5-D tensors.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return shape_err("concat_channels", "no inputs");
        }
        let (batch, _, sp) = dims5("concat_channels", self.shape(xs[0]))?;
        let mut total_c = 0;
        for &x in xs {
            let (b, c, s) = dims5("concat_channels", self.shape(x))?;
            if b != batch || s != sp {
                return shape_err(
                    "concat_channels",
                    format!("{:?} vs {:?}", self.shape(xs[0]), self.shape(x)),
                );
            }
            total_c += c;
        }
        let s: usize = sp.iter().product();
        let mut out = Vec::with_capacity(batch * total_c * s);
        for b in 0..batch {
            for &x in xs {
                let c = self.shape(x)[1];
                out.extend_from_slice(&self.value(x).data()[b * c * s..(b + 1) * c * s]);
            }
        }
        let value = Tensor::new([batch, total_c, sp[0], sp[1], sp[2]], out)?;
        Ok(self.push(value, Op::ConcatChannels(xs.to_vec()), xs))
    }

    /// Softmax over all `D * H * W` positions, independently per
    /// `(batch, channel)`.
    pub fn spatial_softmax(&mut self, x: Var) -> Result<Var> {
        let (_, _, sp) = dims5("spatial_softmax", self.shape(x))?;
        let s: usize = sp.iter().product();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(s) {
            softmax_in_place(row);
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.push(value, Op::SpatialSoftmax(x), &[x]))
    }

    /// Global average over `(D, H, W)`: `(B, C, D, H, W) -> (B, C)`.
    pub fn mean_spatial(&mut self, x: Var) -> Result<Var> {
        let (batch, c, sp) = dims5("mean_spatial", self.shape(x))?;
        let s: usize = sp.iter().product();
        let inv = T::one() / T::cast(s as f64);
        let out = self
            .value(x)
            .data()
            .chunks(s)
            .map(|r| r.iter().copied().sum::<T>() * inv)
            .collect();
        let value = Tensor::new([batch, c], out)?;
        Ok(self.push(value, Op::MeanSpatial(x), &[x]))
    }

    /// `x (B, In) @ w(Out, In)^T + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return shape_err("linear", format!("input {xs:?}, weight {ws:?}"));
        }
        let (batch, fin, fout) = (xs[0], xs[1], ws[0]);
        let mut out = vec![T::zero(); batch * fout];
        if let Some(b) = b {
            let bv = self.value(b).data();
            if bv.len() != fout {
                return shape_err("linear", format!("bias length {}, expected {fout}", bv.len()));
            }
            for row in out.chunks_mut(fout) {
                row.copy_from_slice(bv);
            }
        }
        gemm(
            MatRef::row_major(self.value(x).data(), batch, fin),
            MatRef::row_major(self.value(w).data(), fout, fin).t(),
            T::one(),
            &mut out,
        );
        let value = Tensor::new([batch, fout], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(value, Op::Linear { x, w, b }, &inputs))
    }

    /// Row-wise softmax of a `(B, C)` matrix.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 {
            return shape_err("softmax_rows", format!("expected (B, C), got {shape:?}"));
        }
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(shape[1].max(1)) {
            softmax_in_place(row);
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::SoftmaxRows(x), &[x]))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        self.push(value, Op::Sigmoid(x), &[x])
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::SumAll(x), &[x])
    }

    /// Batch mean of `sum_c [ y (1 - p)^2 + 0.5 (1 - y) p^2 ]` for class
    /// probabilities `p (B, C)` and targets `y (B, C)`.
    pub fn margin_loss(&mut self, p: Var, target: &Tensor<T>) -> Result<Var> {
        let shape = self.shape(p).to_vec();
        if shape.len() != 2 || target.shape() != shape.as_slice() {
            return shape_err("margin_loss", format!("prediction {shape:?}, target {:?}", target.shape()));
        }
        let half = T::cast(0.5);
        let total: T = self
            .value(p)
            .data()
            .iter()
            .zip(target.data())
            .map(|(&p, &y)| y * (T::one() - p) * (T::one() - p) + half * (T::one() - y) * p * p)
            .sum();
        let value = Tensor::scalar(total / T::cast(shape[0].max(1) as f64));
        Ok(self.push(
            value,
            Op::MarginLoss {
                p,
                target: target.data().to_vec(),
            },
            &[p],
        ))
    }

    /// Mean over batch and labels of the weighted binary cross-entropy
    /// `-w_n [ y log p + (1 - y) log(1 - p) ]`, with `p` clamped to
    /// `[eps, 1 - eps]`.
    pub fn weighted_bce(&mut self, p: Var, target: &Tensor<T>, weights: &[T], eps: f64) -> Result<Var> {
        let shape = self.shape(p).to_vec();
        if shape.len() != 2 || target.shape() != shape.as_slice() || weights.len() != shape[1] {
            return shape_err(
                "weighted_bce",
                format!(
                    "prediction {shape:?}, target {:?}, {} weights",
                    target.shape(),
                    weights.len()
                ),
            );
        }
        let eps = T::cast(eps);
        let n = shape[1].max(1);
        let mut total = T::zero();
        for (i, (&pv, &y)) in self.value(p).data().iter().zip(target.data()).enumerate() {
            let q = pv.max(eps).min(T::one() - eps);
            total += -weights[i % n] * (y * q.ln() + (T::one() - y) * (T::one() - q).ln());
        }
        let value = Tensor::scalar(total / T::cast((shape[0] * shape[1]).max(1) as f64));
        Ok(self.push(
            value,
            Op::WeightedBce {
                p,
                target: target.data().to_vec(),
                weights: weights.to_vec(),
                eps,
            },
            &[p],
        ))
    }

    /// `exp(-2 s1) L_me + exp(-2 s2) L_au + s1 + s2` where `s = log sigma`
    /// is a two-element node.
    pub fn uncertainty_combine(&mut self, l_me: Var, l_au: Var, log_sigma: Var) -> Result<Var> {
        if self.value(l_me).numel() != 1 || self.value(l_au).numel() != 1 {
            return shape_err("uncertainty_combine", "task losses must be scalars");
        }
        if self.shape(log_sigma) != [2] {
            return shape_err("uncertainty_combine", format!("log_sigma shape {:?}", self.shape(log_sigma)));
        }
        let s = self.value(log_sigma).data();
        let (s1, s2) = (s[0], s[1]);
        let lme = self.value(l_me).data()[0];
        let lau = self.value(l_au).data()[0];
        let two = T::cast(2.0);
        let total = (-two * s1).exp() * lme + (-two * s2).exp() * lau + s1 + s2;
        Ok(self.push(
            Tensor::scalar(total),
            Op::Uncertainty {
                l_me,
                l_au,
                log_sigma,
            },
            &[l_me, l_au, log_sigma],
        ))
    }

    /// Reverse-mode sweep from a scalar `loss`. Only leaves keep their
    /// gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if !self.track {
            return Err(TensorError::NoGradGraph);
        }
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::full(lv.shape().to_vec(), T::one()));
        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(gy);
                continue;
            }
            self.backprop_node(node, gy, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, data: Vec<T>) -> Result<()> {
        if !self.wants(v) {
            return Ok(());
        }
        let t = Tensor::new(self.shape(v).to_vec(), data)?;
        match &mut grads[v.0] {
            Some(g) => g.add_assign(&t),
            slot => *slot = Some(t),
        }
        Ok(())
    }

    fn backprop_node(&self, node: &Node<T>, gy: Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let dy = gy.data();
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, w, b, geom } => {
                let need = [self.wants(*x), self.wants(*w), b.is_some_and(|b| self.wants(b))];
                let g = kernels::conv_backward(geom, self.value(*x).data(), self.value(*w).data(), dy, need);
                if let Some(dx) = g.dx {
                    self.accumulate(grads, *x, dx)?;
                }
                if let Some(dw) = g.dw {
                    self.accumulate(grads, *w, dw)?;
                }
                if let (Some(b), Some(db)) = (b, g.db) {
                    self.accumulate(grads, *b, db)?;
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                invstd,
                batch_stats,
            } => {
                let (batch, c, sp) = dims5("batch_norm", self.shape(*x))?;
                let s: usize = sp.iter().product();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for b in 0..batch {
                    for ch in 0..c {
                        for i in (b * c + ch) * s..(b * c + ch + 1) * s {
                            dbeta[ch] += dy[i];
                            dgamma[ch] += dy[i] * xhat[i];
                        }
                    }
                }
                if self.wants(*x) {
                    let g = self.value(*gamma).data();
                    let mut dx = vec![T::zero(); dy.len()];
                    let n = T::cast((batch * s) as f64);
                    for b in 0..batch {
                        for ch in 0..c {
                            let k = g[ch] * invstd[ch];
                            for i in (b * c + ch) * s..(b * c + ch + 1) * s {
                                dx[i] = if *batch_stats {
                                    k * (dy[i] - dbeta[ch] / n - xhat[i] * dgamma[ch] / n)
                                } else {
                                    k * dy[i]
                                };
                            }
                        }
                    }
                    self.accumulate(grads, *x, dx)?;
                }
                self.accumulate(grads, *gamma, dgamma)?;
                self.accumulate(grads, *beta, dbeta)?;
            }
            Op::Relu(x) => {
                let dx = dy
                    .iter()
                    .zip(y)
                    .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                    .collect();
                self.accumulate(grads, *x, dx)?;
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, dy.to_vec())?;
                self.accumulate(grads, *b, dy.to_vec())?;
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let bv = self.value(*b).data();
                    self.accumulate(grads, *a, dy.iter().zip(bv).map(|(&g, &v)| g * v).collect())?;
                }
                if self.wants(*b) {
                    let av = self.value(*a).data();
                    self.accumulate(grads, *b, dy.iter().zip(av).map(|(&g, &v)| g * v).collect())?;
                }
            }
            Op::Scale(x, f) => {
                self.accumulate(grads, *x, dy.iter().map(|&g| g * *f).collect())?;
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = vec![T::zero(); self.value(*x).numel()];
                for (&g, &i) in dy.iter().zip(argmax) {
                    if i != usize::MAX {
                        dx[i] += g;
                    }
                }
                self.accumulate(grads, *x, dx)?;
            }
            Op::AdaptiveAvgPool { x, input, output } => {
                let (batch, c, _) = dims5("adaptive_avg_pool", self.shape(*x))?;
                let dx = kernels::adaptive_avg_pool_backward(dy, batch * c, *input, *output);
                self.accumulate(grads, *x, dx)?;
            }
            Op::ConcatChannels(xs) => {
                let (batch, total_c, sp) = dims5("concat_channels", &node.value.shape().to_vec())?;
                let s: usize = sp.iter().product();
                let mut offset = 0;
                for &x in xs {
                    let c = self.shape(x)[1];
                    if self.wants(x) {
                        let mut dx = Vec::with_capacity(batch * c * s);
                        for b in 0..batch {
                            let start = (b * total_c + offset) * s;
                            dx.extend_from_slice(&dy[start..start + c * s]);
                        }
                        self.accumulate(grads, x, dx)?;
                    }
                    offset += c;
                }
            }
            Op::SpatialSoftmax(x) => {
                let s: usize = self.shape(*x)[2..].iter().product();
                self.accumulate(grads, *x, softmax_backward(y, dy, s))?;
            }
            Op::SoftmaxRows(x) => {
                let c = self.shape(*x)[1].max(1);
                self.accumulate(grads, *x, softmax_backward(y, dy, c))?;
            }
            Op::MeanSpatial(x) => {
                let s: usize = self.shape(*x)[2..].iter().product();
                let inv = T::one() / T::cast(s as f64);
                let mut dx = Vec::with_capacity(dy.len() * s);
                for &g in dy {
                    dx.extend(std::iter::repeat_n(g * inv, s));
                }
                self.accumulate(grads, *x, dx)?;
            }
            Op::Linear { x, w, b } => {
                let (batch, fin) = (self.shape(*x)[0], self.shape(*x)[1]);
                let fout = self.shape(*w)[0];
                let dym = MatRef::row_major(dy, batch, fout);
                if self.wants(*x) {
                    let mut dx = vec![T::zero(); batch * fin];
                    gemm(dym, MatRef::row_major(self.value(*w).data(), fout, fin), T::zero(), &mut dx);
                    self.accumulate(grads, *x, dx)?;
                }
                if self.wants(*w) {
                    let mut dw = vec![T::zero(); fout * fin];
                    gemm(dym.t(), MatRef::row_major(self.value(*x).data(), batch, fin), T::zero(), &mut dw);
                    self.accumulate(grads, *w, dw)?;
                }
                if let Some(b) = b {
                    let mut db = vec![T::zero(); fout];
                    for row in dy.chunks(fout) {
                        for (d, &g) in db.iter_mut().zip(row) {
                            *d += g;
                        }
                    }
                    self.accumulate(grads, *b, db)?;
                }
            }
            Op::Sigmoid(x) => {
                let dx = dy.iter().zip(y).map(|(&g, &s)| g * s * (T::one() - s)).collect();
                self.accumulate(grads, *x, dx)?;
            }
            Op::SumAll(x) => {
                let n = self.value(*x).numel();
                self.accumulate(grads, *x, vec![dy[0]; n])?;
            }
            Op::MarginLoss { p, target } => {
                let batch = self.shape(*p)[0].max(1);
                let scale = dy[0] / T::cast(batch as f64);
                let dp = self
                    .value(*p)
                    .data()
                    .iter()
                    .zip(target)
                    .map(|(&p, &y)| scale * (-T::cast(2.0) * y * (T::one() - p) + (T::one() - y) * p))
                    .collect();
                self.accumulate(grads, *p, dp)?;
            }
            Op::WeightedBce {
                p,
                target,
                weights,
                eps,
            } => {
                let shape = self.shape(*p);
                let n = shape[1].max(1);
                let scale = dy[0] / T::cast((shape[0] * shape[1]).max(1) as f64);
                let lo = *eps;
                let hi = T::one() - *eps;
                let dp = self
                    .value(*p)
                    .data()
                    .iter()
                    .zip(target)
                    .enumerate()
                    .map(|(i, (&pv, &yv))| {
                        if pv < lo || pv > hi {
                            T::zero()
                        } else {
                            -scale * weights[i % n] * (yv / pv - (T::one() - yv) / (T::one() - pv))
                        }
                    })
                    .collect();
                self.accumulate(grads, *p, dp)?;
            }
            Op::Uncertainty {
                l_me,
                l_au,
                log_sigma,
            } => {
                let g = dy[0];
                let s = self.value(*log_sigma).data();
                let two = T::cast(2.0);
                let w1 = (-two * s[0]).exp();
                let w2 = (-two * s[1]).exp();
                let lme = self.value(*l_me).data()[0];
                let lau = self.value(*l_au).data()[0];
                self.accumulate(grads, *l_me, vec![g * w1])?;
                self.accumulate(grads, *l_au, vec![g * w2])?;
                self.accumulate(
                    grads,
                    *log_sigma,
                    vec![g * (T::one() - two * w1 * lme), g * (T::one() - two * w2 * lau)],
                )?;
            }
        }
        Ok(())
    }
}

pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// The normaliser is accumulated in f64: rows can span tens of thousands
/// of positions, where an f32 sum drifts by ~1e-5.
pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut z = 0.0f64;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        z += v.as_f64();
    }
    for v in row.iter_mut() {
        *v = T::cast(v.as_f64() / z);
    }
}

fn softmax_backward<T: Scalar>(y: &[T], dy: &[T], width: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); y.len()];
    for ((yr, gr), dr) in y.chunks(width).zip(dy.chunks(width)).zip(dx.chunks_mut(width)) {
        let dot = T::cast(yr.iter().zip(gr).map(|(&a, &b)| a.as_f64() * b.as_f64()).sum::<f64>());
        for ((d, &yv), &g) in dr.iter_mut().zip(yr).zip(gr) {
            *d = yv * (g - dot);
        }
    }
    dx
}
