//! Wengert-list reverse-mode differentiation.
//!
//! Every op appends a node holding its forward value and whatever it needs to
//! run backward. `backward` walks the list in reverse and stores gradients in
//! each node's `Tensor::grad` slot. Nodes that cannot reach a trainable leaf
//! are skipped.

use serde::{Deserialize, Serialize};

use super::gemm::{gemm, narrow, widen, MatRef};
use super::Tensor;
use crate::error::{Error, Result};
use crate::rng::Rng;

pub const BN_EPSILON: f64 = 1e-5;
/// Weight kept by the running statistics on every update.
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    Same,
    Valid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Running per-channel statistics of a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

impl BatchNormState {
    pub fn fresh(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    n: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad_top: usize,
    pad_left: usize,
    h_out: usize,
    w_out: usize,
}

impl ConvGeom {
    fn k(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.h_out * self.w_out
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    MatMul(Var, Var),
    AddBias {
        x: Var,
        bias: Var,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Relu(Var),
    MaxPool {
        x: Var,
        argmax: Vec<u32>,
    },
    GlobalAvgPool(Var),
    Reshape(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Dropout {
        x: Var,
        mask: Vec<f32>,
    },
    SoftmaxXent {
        logits: Var,
        probs: Vec<f64>,
        labels: Vec<usize>,
    },
    Sum {
        x: Var,
        weights: Option<Vec<f64>>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    /// Full-precision value for scalar reductions.
    scalar: Option<f64>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        left: a.to_vec(),
        right: b.to_vec(),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            scalar: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.nodes[v.0].value.grad()
    }

    /// Scalar value of a reduction node, in f64 where available.
    pub fn scalar(&self, v: Var) -> f64 {
        let node = &self.nodes[v.0];
        node.scalar.unwrap_or(node.value.data()[0] as f64)
    }

    pub fn take_value(&mut self, v: Var) -> Tensor {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::scalar(0.0))
    }

    fn check_finite(op: &'static str, t: &Tensor) -> Result<()> {
        if t.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(op.to_string()))
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch("add", ta.shape(), tb.shape()));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x + y)
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Self::check_finite("add", &out)?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    /// `[m x k] * [k x n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(mismatch("matmul", ta.shape(), tb.shape()));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let (wa, wb) = (widen(ta.data()), widen(tb.data()));
        let mut c = vec![0.0; m * n];
        gemm(MatRef::new(&wa, m, k), MatRef::new(&wb, k, n), &mut c, 0.0);
        let out = Tensor::new(vec![m, n], narrow(&c))?;
        Self::check_finite("matmul", &out)?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    /// Adds `bias[c]` along axis 1 of `x` (rank >= 2).
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        if tx.rank() < 2 || tb.rank() != 1 || tb.shape()[0] != tx.shape()[1] {
            return Err(mismatch("add_bias", tx.shape(), tb.shape()));
        }
        let c = tx.shape()[1];
        let inner: usize = tx.shape()[2..].iter().product();
        let b = tb.data();
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + b[(i / inner) % c])
            .collect();
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        Self::check_finite("add_bias", &out)?;
        let ng = self.needs(&[x, bias]);
        Ok(self.push(out, Op::AddBias { x, bias }, ng))
    }

    /// Cross-correlation of `x` (`[N x] C_in x H x W`) with `kernels`
    /// (`C_out x C_in x kh x kw`). Same padding gives `ceil(H / stride)`
    /// outputs, with any odd padding cell placed bottom/right.
    pub fn conv2d(
        &mut self,
        x: Var,
        kernels: Var,
        bias: Option<Var>,
        stride: usize,
        padding: Padding,
    ) -> Result<Var> {
        let tx = self.value(x);
        let tw = self.value(kernels);
        let batched = match tx.rank() {
            4 => true,
            3 => false,
            _ => return Err(mismatch("conv2d", tx.shape(), tw.shape())),
        };
        let xs = if batched {
            tx.shape().to_vec()
        } else {
            [&[1], tx.shape()].concat()
        };
        let (n, c_in, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        if tw.rank() != 4 || tw.shape()[1] != c_in {
            return Err(mismatch("conv2d", tx.shape(), tw.shape()));
        }
        let (c_out, kh, kw) = (tw.shape()[0], tw.shape()[2], tw.shape()[3]);
        if let Some(b) = bias {
            let tb = self.value(b);
            if tb.shape() != [c_out] {
                return Err(mismatch("conv2d bias", tb.shape(), &[c_out]));
            }
        }
        if stride == 0 {
            return Err(Error::InvalidShape {
                shape: xs,
                reason: "stride must be positive".into(),
            });
        }
        let (h_out, w_out, pad_top, pad_left) = match padding {
            Padding::Same => {
                let h_out = h.div_ceil(stride);
                let w_out = w.div_ceil(stride);
                let ph = ((h_out - 1) * stride + kh).saturating_sub(h);
                let pw = ((w_out - 1) * stride + kw).saturating_sub(w);
                if kh > h + ph || kw > w + pw {
                    return Err(Error::KernelTooLarge {
                        op: "conv2d",
                        kernel: (kh, kw),
                        input: (h + ph, w + pw),
                    });
                }
                (h_out, w_out, ph / 2, pw / 2)
            }
            Padding::Valid => {
                if kh > h || kw > w {
                    return Err(Error::KernelTooLarge {
                        op: "conv2d",
                        kernel: (kh, kw),
                        input: (h, w),
                    });
                }
                ((h - kh) / stride + 1, (w - kw) / stride + 1, 0, 0)
            }
        };
        let geom = ConvGeom {
            n,
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            stride,
            pad_top,
            pad_left,
            h_out,
            w_out,
        };
        let cols = im2col(tx.data(), &geom);
        let wk = widen(tw.data());
        let np = n * geom.p();
        let mut out = vec![0.0f64; c_out * np];
        gemm(
            MatRef::new(&wk, c_out, geom.k()),
            MatRef::new(&cols, geom.k(), np),
            &mut out,
            0.0,
        );
        let bias_vals: Option<Vec<f64>> = bias.map(|b| widen(self.value(b).data()));
        let p = geom.p();
        let mut y = vec![0.0f32; n * c_out * p];
        for ni in 0..n {
            for co in 0..c_out {
                let bv = bias_vals.as_ref().map_or(0.0, |b| b[co]);
                let src = &out[co * np + ni * p..co * np + (ni + 1) * p];
                let dst = &mut y[(ni * c_out + co) * p..(ni * c_out + co + 1) * p];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = (s + bv) as f32;
                }
            }
        }
        let shape = if batched {
            vec![n, c_out, h_out, w_out]
        } else {
            vec![c_out, h_out, w_out]
        };
        let out = Tensor::new(shape, y)?;
        Self::check_finite("conv2d", &out)?;
        let mut deps = vec![x, kernels];
        deps.extend(bias);
        let ng = self.needs(&deps);
        Ok(self.push(
            out,
            Op::Conv2d {
                x,
                w: kernels,
                b: bias,
                geom,
            },
            ng,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let data = tx
            .data()
            .iter()
            .map(|&v| if v > 0.0 { v } else { 0.0 })
            .collect();
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let ng = self.needs(&[x]);
        Ok(self.push(out, Op::Relu(x), ng))
    }

    /// Non-overlapping `pool x pool` max pooling over the last two axes;
    /// odd extents are floored. Ties go to the first index in row-major order.
    pub fn maxpool2d(&mut self, x: Var, pool: usize) -> Result<Var> {
        let tx = self.value(x);
        let r = tx.rank();
        if r < 3 || pool == 0 {
            return Err(Error::InvalidShape {
                shape: tx.shape().to_vec(),
                reason: "maxpool2d needs [N x] C x H x W and a positive pool".into(),
            });
        }
        let (h, w) = (tx.shape()[r - 2], tx.shape()[r - 1]);
        let (ho, wo) = (h / pool, w / pool);
        if ho == 0 || wo == 0 {
            return Err(Error::InvalidShape {
                shape: tx.shape().to_vec(),
                reason: format!("pool {pool} collapses spatial extents"),
            });
        }
        let planes: usize = tx.shape()[..r - 2].iter().product();
        let src = tx.data();
        let mut y = Vec::with_capacity(planes * ho * wo);
        let mut argmax = Vec::with_capacity(planes * ho * wo);
        for pl in 0..planes {
            let base = pl * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best_i = base + oy * pool * w + ox * pool;
                    let mut best = src[best_i];
                    for ky in 0..pool {
                        for kx in 0..pool {
                            let i = base + (oy * pool + ky) * w + ox * pool + kx;
                            if src[i] > best {
                                best = src[i];
                                best_i = i;
                            }
                        }
                    }
                    y.push(best);
                    argmax.push(best_i as u32);
                }
            }
        }
        let mut shape = tx.shape()[..r - 2].to_vec();
        shape.extend([ho, wo]);
        let out = Tensor::new(shape, y)?;
        let ng = self.needs(&[x]);
        Ok(self.push(out, Op::MaxPool { x, argmax }, ng))
    }

    /// `N x C x H x W -> N x C`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if tx.rank() != 4 {
            return Err(Error::InvalidShape {
                shape: tx.shape().to_vec(),
                reason: "global_avg_pool needs N x C x H x W".into(),
            });
        }
        let (n, c) = (tx.shape()[0], tx.shape()[1]);
        let s = tx.shape()[2] * tx.shape()[3];
        let data = tx
            .data()
            .chunks(s)
            .map(|plane| (plane.iter().map(|&v| v as f64).sum::<f64>() / s as f64) as f32)
            .collect();
        let out = Tensor::new(vec![n, c], data)?;
        let ng = self.needs(&[x]);
        Ok(self.push(out, Op::GlobalAvgPool(x), ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let ng = self.needs(&[x]);
        Ok(self.push(out, Op::Reshape(x), ng))
    }

    /// Collapses every axis after the first.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).shape();
        let n = s[0];
        let rest: usize = s[1..].iter().product();
        self.reshape(x, &[n, rest])
    }

    /// Per-channel batch normalization over axis 1 of `x` (`N x C x ...`).
    ///
    /// Train mode normalizes with batch statistics and returns the updated
    /// running statistics; infer mode normalizes with `state` and returns `None`.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        state: &BatchNormState,
        mode: Mode,
    ) -> Result<(Var, Option<BatchNormState>)> {
        let tx = self.value(x);
        if tx.rank() < 2 {
            return Err(Error::InvalidShape {
                shape: tx.shape().to_vec(),
                reason: "batchnorm needs N x C x ...".into(),
            });
        }
        let (n, c) = (tx.shape()[0], tx.shape()[1]);
        let (tg, tb) = (self.value(gamma), self.value(beta));
        if tg.shape() != [c] || tb.shape() != [c] {
            return Err(mismatch("batchnorm", tx.shape(), tg.shape()));
        }
        if state.mean.len() != c || state.var.len() != c {
            return Err(mismatch("batchnorm state", tx.shape(), &[state.mean.len()]));
        }
        if mode == Mode::Train && n < 2 {
            return Err(Error::BatchTooSmall(n));
        }
        let s: usize = tx.shape()[2..].iter().product();
        let m = (n * s) as f64;
        let src = tx.data();
        let mut mean = vec![0.0f64; c];
        let mut inv_std = vec![0.0f64; c];
        let mut update = None;
        match mode {
            Mode::Train => {
                let mut var = vec![0.0f64; c];
                for ci in 0..c {
                    let mut acc = 0.0;
                    for ni in 0..n {
                        let off = (ni * c + ci) * s;
                        acc += src[off..off + s].iter().map(|&v| v as f64).sum::<f64>();
                    }
                    mean[ci] = acc / m;
                    let mut sq = 0.0;
                    for ni in 0..n {
                        let off = (ni * c + ci) * s;
                        sq += src[off..off + s]
                            .iter()
                            .map(|&v| (v as f64 - mean[ci]).powi(2))
                            .sum::<f64>();
                    }
                    var[ci] = sq / m;
                    inv_std[ci] = 1.0 / (var[ci] + BN_EPSILON).sqrt();
                }
                let unbias = m / (m - 1.0);
                update = Some(BatchNormState {
                    mean: (0..c)
                        .map(|i| {
                            (BN_MOMENTUM * state.mean[i] as f64 + (1.0 - BN_MOMENTUM) * mean[i])
                                as f32
                        })
                        .collect(),
                    var: (0..c)
                        .map(|i| {
                            (BN_MOMENTUM * state.var[i] as f64
                                + (1.0 - BN_MOMENTUM) * var[i] * unbias)
                                as f32
                        })
                        .collect(),
                });
            }
            Mode::Infer => {
                for ci in 0..c {
                    mean[ci] = state.mean[ci] as f64;
                    inv_std[ci] = 1.0 / (state.var[ci] as f64 + BN_EPSILON).sqrt();
                }
            }
        }
        let (g, b) = (tg.data(), tb.data());
        let mut y = vec![0.0f32; src.len()];
        for (i, (yv, &xv)) in y.iter_mut().zip(src).enumerate() {
            let ci = (i / s) % c;
            let xhat = (xv as f64 - mean[ci]) * inv_std[ci];
            *yv = (g[ci] as f64 * xhat + b[ci] as f64) as f32;
        }
        let out = Tensor::new(tx.shape().to_vec(), y)?;
        Self::check_finite("batchnorm", &out)?;
        let ng = self.needs(&[x, gamma, beta]);
        let v = self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                batch_stats: mode == Mode::Train,
            },
            ng,
        );
        Ok((v, update))
    }

    /// Inverted dropout. Infer mode returns `x` itself.
    pub fn dropout(&mut self, x: Var, rate: f32, rng: &mut Rng, mode: Mode) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidRate(rate));
        }
        if mode == Mode::Infer {
            return Ok(x);
        }
        let keep_scale = 1.0 / (1.0 - rate);
        let tx = self.value(x);
        let mask: Vec<f32> = (0..tx.numel())
            .map(|_| {
                if rng.uniform() < rate as f64 {
                    0.0
                } else {
                    keep_scale
                }
            })
            .collect();
        let data = tx.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let ng = self.needs(&[x]);
        Ok(self.push(out, Op::Dropout { x, mask }, ng))
    }

    /// Mean negative log-likelihood of row-wise softmax over `logits`
    /// (`N x K`). Returns the scalar loss node and the probabilities.
    pub fn softmax_xent(&mut self, logits: Var, labels: &[usize]) -> Result<(Var, Tensor)> {
        let tl = self.value(logits);
        if tl.rank() != 2 || tl.shape()[0] != labels.len() {
            return Err(mismatch("softmax_xent", tl.shape(), &[labels.len()]));
        }
        let (n, k) = (tl.shape()[0], tl.shape()[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                classes: k,
            });
        }
        if !tl.is_finite() {
            return Err(Error::NonFinite("softmax_xent logits".into()));
        }
        let mut probs = vec![0.0f64; n * k];
        let mut loss = 0.0f64;
        for (i, row) in tl.data().chunks(k).enumerate() {
            let max = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
            let mut sum = 0.0;
            for (j, &z) in row.iter().enumerate() {
                let e = (z as f64 - max).exp();
                probs[i * k + j] = e;
                sum += e;
            }
            for p in &mut probs[i * k..(i + 1) * k] {
                *p /= sum;
            }
            loss -= row[labels[i]] as f64 - max - sum.ln();
        }
        loss /= n as f64;
        let probs_t = Tensor::new(vec![n, k], narrow(&probs))?;
        let ng = self.needs(&[logits]);
        let v = self.push(
            Tensor::scalar(loss as f32),
            Op::SoftmaxXent {
                logits,
                probs,
                labels: labels.to_vec(),
            },
            ng,
        );
        self.nodes[v.0].scalar = Some(loss);
        Ok((v, probs_t))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total: f64 = match self.nodes[x.0].scalar {
            Some(s) => s,
            None => self.value(x).data().iter().map(|&v| v as f64).sum(),
        };
        self.push_sum(x, None, total)
    }

    /// `sum_i weights[i] * x[i]`, accumulated in f64.
    pub fn weighted_sum(&mut self, x: Var, weights: &[f64]) -> Result<Var> {
        let tx = self.value(x);
        if weights.len() != tx.numel() {
            return Err(mismatch("weighted_sum", tx.shape(), &[weights.len()]));
        }
        let total: f64 = match self.nodes[x.0].scalar {
            Some(s) => s * weights[0],
            None => tx
                .data()
                .iter()
                .zip(weights)
                .map(|(&v, w)| v as f64 * w)
                .sum(),
        };
        self.push_sum(x, Some(weights.to_vec()), total)
    }

    fn push_sum(&mut self, x: Var, weights: Option<Vec<f64>>, total: f64) -> Result<Var> {
        if !total.is_finite() {
            return Err(Error::NonFinite("sum".into()));
        }
        let ng = self.needs(&[x]);
        let v = self.push(Tensor::scalar(total as f32), Op::Sum { x, weights }, ng);
        self.nodes[v.0].scalar = Some(total);
        Ok(v)
    }

    /// Back-propagates from the scalar `root`, seeding it with 1.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).numel() != 1 {
            return Err(Error::InvalidShape {
                shape: self.value(root).shape().to_vec(),
                reason: "backward root must be scalar".into(),
            });
        }
        for node in &mut self.nodes {
            node.value.take_grad();
        }
        self.nodes[root.0].value.set_grad(vec![1.0])?;
        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = self.nodes[i].value.take_grad() else {
                continue;
            };
            let contributions = self.local_backward(i, &g)?;
            self.nodes[i].value.set_grad(g)?;
            for (v, cg) in contributions {
                if self.nodes[v.0].needs_grad {
                    self.accumulate(v, cg)?;
                }
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, g: Vec<f32>) -> Result<()> {
        let t = &mut self.nodes[v.0].value;
        match t.take_grad() {
            Some(mut existing) => {
                for (e, x) in existing.iter_mut().zip(&g) {
                    *e += x;
                }
                t.set_grad(existing)
            }
            None => t.set_grad(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn local_backward(&self, i: usize, g: &[f32]) -> Result<Vec<(Var, Vec<f32>)>> {
        let node = &self.nodes[i];
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.to_vec()));
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                let dy = widen(g);
                if self.wants(*a) {
                    let wb = widen(tb.data());
                    let mut da = vec![0.0; m * k];
                    gemm(
                        MatRef::new(&dy, m, n),
                        MatRef::new(&wb, k, n).t(),
                        &mut da,
                        0.0,
                    );
                    out.push((*a, narrow(&da)));
                }
                if self.wants(*b) {
                    let wa = widen(ta.data());
                    let mut db = vec![0.0; k * n];
                    gemm(
                        MatRef::new(&wa, m, k).t(),
                        MatRef::new(&dy, m, n),
                        &mut db,
                        0.0,
                    );
                    out.push((*b, narrow(&db)));
                }
            }
            Op::AddBias { x, bias } => {
                out.push((*x, g.to_vec()));
                if self.wants(*bias) {
                    let s = self.value(*x).shape();
                    let c = s[1];
                    let inner: usize = s[2..].iter().product();
                    let mut db = vec![0.0f64; c];
                    for (j, &gv) in g.iter().enumerate() {
                        db[(j / inner) % c] += gv as f64;
                    }
                    out.push((*bias, narrow(&db)));
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                let geom = *geom;
                let (k, p, np) = (geom.k(), geom.p(), geom.n * geom.p());
                let mut dy = vec![0.0f64; geom.c_out * np];
                for ni in 0..geom.n {
                    for co in 0..geom.c_out {
                        let src = &g[(ni * geom.c_out + co) * p..(ni * geom.c_out + co + 1) * p];
                        let dst = &mut dy[co * np + ni * p..co * np + (ni + 1) * p];
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d = s as f64;
                        }
                    }
                }
                if self.wants(*w) {
                    let cols = im2col(self.value(*x).data(), &geom);
                    let mut dw = vec![0.0; geom.c_out * k];
                    gemm(
                        MatRef::new(&dy, geom.c_out, np),
                        MatRef::new(&cols, k, np).t(),
                        &mut dw,
                        0.0,
                    );
                    out.push((*w, narrow(&dw)));
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        let db: Vec<f64> = dy.chunks(np).map(|row| row.iter().sum()).collect();
                        out.push((*b, narrow(&db)));
                    }
                }
                if self.wants(*x) {
                    let wk = widen(self.value(*w).data());
                    let mut dcols = vec![0.0; k * np];
                    gemm(
                        MatRef::new(&wk, geom.c_out, k).t(),
                        MatRef::new(&dy, geom.c_out, np),
                        &mut dcols,
                        0.0,
                    );
                    out.push((*x, narrow(&col2im(&dcols, &geom))));
                }
            }
            Op::Relu(x) => {
                let tx = self.value(*x);
                let dx = tx
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 })
                    .collect();
                out.push((*x, dx));
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = vec![0.0f32; self.value(*x).numel()];
                for (&idx, &gv) in argmax.iter().zip(g) {
                    dx[idx as usize] += gv;
                }
                out.push((*x, dx));
            }
            Op::GlobalAvgPool(x) => {
                let s = self.value(*x).shape();
                let plane = s[2] * s[3];
                let scale = 1.0 / plane as f64;
                let dx = g
                    .iter()
                    .flat_map(|&gv| std::iter::repeat_n((gv as f64 * scale) as f32, plane))
                    .collect();
                out.push((*x, dx));
            }
            Op::Reshape(x) => out.push((*x, g.to_vec())),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                batch_stats,
            } => {
                let tx = self.value(*x);
                let (n, c) = (tx.shape()[0], tx.shape()[1]);
                let s: usize = tx.shape()[2..].iter().product();
                let m = (n * s) as f64;
                let gam = self.value(*gamma).data();
                let src = tx.data();
                let mut dgamma = vec![0.0f64; c];
                let mut dbeta = vec![0.0f64; c];
                // sum(dy) and sum(dy * xhat) per channel
                for ni in 0..n {
                    for ci in 0..c {
                        let off = (ni * c + ci) * s;
                        for j in off..off + s {
                            let xhat = (src[j] as f64 - mean[ci]) * inv_std[ci];
                            dbeta[ci] += g[j] as f64;
                            dgamma[ci] += g[j] as f64 * xhat;
                        }
                    }
                }
                if self.wants(*x) {
                    let mut dx = vec![0.0f32; src.len()];
                    for ni in 0..n {
                        for ci in 0..c {
                            let off = (ni * c + ci) * s;
                            let gm = gam[ci] as f64;
                            for j in off..off + s {
                                let v = if *batch_stats {
                                    let xhat = (src[j] as f64 - mean[ci]) * inv_std[ci];
                                    gm * inv_std[ci] / m
                                        * (m * g[j] as f64 - dbeta[ci] - xhat * dgamma[ci])
                                } else {
                                    gm * inv_std[ci] * g[j] as f64
                                };
                                dx[j] = v as f32;
                            }
                        }
                    }
                    out.push((*x, dx));
                }
                out.push((*gamma, narrow(&dgamma)));
                out.push((*beta, narrow(&dbeta)));
            }
            Op::Dropout { x, mask } => {
                out.push((*x, g.iter().zip(mask).map(|(a, b)| a * b).collect()));
            }
            Op::SoftmaxXent {
                logits,
                probs,
                labels,
            } => {
                let k = probs.len() / labels.len();
                let scale = g[0] as f64 / labels.len() as f64;
                let mut dz: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (i, &l) in labels.iter().enumerate() {
                    dz[i * k + l] -= scale;
                }
                out.push((*logits, narrow(&dz)));
            }
            Op::Sum { x, weights } => {
                let n = self.value(*x).numel();
                let dx = match weights {
                    Some(w) => w.iter().map(|wv| (wv * g[0] as f64) as f32).collect(),
                    None => vec![g[0]; n],
                };
                out.push((*x, dx));
            }
        }
        Ok(out)
    }
}

/// Unfolds `x` into a `K x (N * P)` column matrix, `K = C_in * kh * kw`.
fn im2col(x: &[f32], g: &ConvGeom) -> Vec<f64> {
    let (p, np) = (g.p(), g.n * g.p());
    let mut cols = vec![0.0f64; g.k() * np];
    for ci in 0..g.c_in {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                for ni in 0..g.n {
                    let plane = &x[(ni * g.c_in + ci) * g.h * g.w..][..g.h * g.w];
                    let dst = &mut cols[row * np + ni * p..][..p];
                    for oy in 0..g.h_out {
                        let iy = (oy * g.stride + ki) as isize - g.pad_top as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src_row = &plane[iy as usize * g.w..][..g.w];
                        let dst_row = &mut dst[oy * g.w_out..][..g.w_out];
                        for (ox, d) in dst_row.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kj) as isize - g.pad_left as isize;
                            if ix >= 0 && ix < g.w as isize {
                                *d = src_row[ix as usize] as f64;
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of `im2col`: folds column gradients back onto the input grid.
fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (p, np) = (g.p(), g.n * g.p());
    let mut dx = vec![0.0f64; g.n * g.c_in * g.h * g.w];
    for ci in 0..g.c_in {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                for ni in 0..g.n {
                    let plane = &mut dx[(ni * g.c_in + ci) * g.h * g.w..][..g.h * g.w];
                    let src = &cols[row * np + ni * p..][..p];
                    for oy in 0..g.h_out {
                        let iy = (oy * g.stride + ki) as isize - g.pad_top as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let dst_row = &mut plane[iy as usize * g.w..][..g.w];
                        let src_row = &src[oy * g.w_out..][..g.w_out];
                        for (ox, s) in src_row.iter().enumerate() {
                            let ix = (ox * g.stride + kj) as isize - g.pad_left as isize;
                            if ix >= 0 && ix < g.w as isize {
                                dst_row[ix as usize] += s;
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}
