//! A small define-by-run reverse-mode tape over [`Tensor`]s.
//!
//! Every op records its inputs and whatever it needs for the backward pass.
//! Nodes created from [`Graph::constant`] never receive gradients, and an op
//! only tracks gradients when at least one of its inputs does, so test-time
//! graphs skip work for frozen weights (conv kernels, BN statistics).

use crate::tensor::{gemm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

enum Op {
    Leaf,
    Reshape(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias { x: Var, bias: Var },
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Conv3x3 { x: Var, w: Var, cols: Vec<f64> },
    NormFrozen { x: Var, inv_std: Vec<f64> },
    NormBatch { x: Var, inv_std: Vec<f64> },
    ChannelAffine { x: Var, gamma: Var, beta: Var },
    Relu(Var),
    AvgPool2(Var),
    GlobalAvgPool(Var),
    Softmax(Var),
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    Entropy { logits: Var, probs: Vec<f64>, row_mean_logit: Vec<f64> },
    ProbEntropy(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<f64> },
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize },
}

/// Batch statistics observed by a [`Graph::norm_batch`] node.
#[derive(Clone, Debug)]
pub struct BatchMoments {
    pub mean: Vec<f64>,
    /// Biased (population) variance, the one used for normalization.
    pub var: Vec<f64>,
    /// Number of elements reduced per channel.
    pub count: usize,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of one scalar with respect to every tracked node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of `v`, or zeros of the right shape when nothing flowed into it.
    pub fn take_or_zeros(&mut self, v: Var, shape: &[usize]) -> Tensor {
        self.grads[v.0].take().unwrap_or_else(|| Tensor::zeros(shape.to_vec()))
    }
}

/// `(batch, channels, spatial)` view of a `[B, C, ...]` tensor.
fn channel_layout(shape: &[usize]) -> (usize, usize, usize) {
    assert!(shape.len() >= 2, "channel op on rank-{} tensor", shape.len());
    (shape[0], shape[1], shape[2..].iter().product())
}

fn add_into(acc: &mut Option<Tensor>, g: Tensor) {
    match acc {
        None => *acc = Some(g),
        Some(t) => {
            for (a, b) in t.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
    }
}

fn softmax_rows(x: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (row, o) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (oi, &xi) in o.iter_mut().zip(row) {
            *oi = (xi - max).exp();
            sum += *oi;
        }
        for oi in o.iter_mut() {
            *oi /= sum;
        }
    }
    out
}

impl Graph {
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
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf that gradients are accumulated for.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.ng(v)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let value = self.value(x).clone().reshape(shape.to_vec());
        let ng = self.ng(x);
        self.push(value, Op::Reshape(x), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(va.shape().to_vec(), data);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Add(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mul shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(va.shape().to_vec(), data);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).map(|v| v * c);
        let ng = self.ng(x);
        self.push(value, Op::Scale(x, c), ng)
    }

    /// `x[.., n] + bias[n]`, broadcasting over every leading axis.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let (vx, vb) = (self.value(x), self.value(bias));
        let n = vb.numel();
        assert_eq!(*vx.shape().last().unwrap(), n, "bias length mismatch");
        let mut value = vx.clone();
        for row in value.data_mut().chunks_mut(n) {
            for (r, b) in row.iter_mut().zip(vb.data()) {
                *r += b;
            }
        }
        let ng = self.ng(x) || self.ng(bias);
        self.push(value, Op::AddBias { x, bias }, ng)
    }

    /// Matrix product of rank-2 tensors with optional transposes.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.rank(), 2, "matmul lhs must be rank 2");
        assert_eq!(vb.rank(), 2, "matmul rhs must be rank 2");
        let (m, k) = if ta { (va.dim(1), va.dim(0)) } else { (va.dim(0), va.dim(1)) };
        let (k2, n) = if tb { (vb.dim(1), vb.dim(0)) } else { (vb.dim(0), vb.dim(1)) };
        assert_eq!(k, k2, "matmul inner dimension mismatch");
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, va.data(), ta, vb.data(), tb, &mut out, false);
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::new([m, n], out), Op::MatMul { a, b, ta, tb }, ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, b, false, false)
    }

    /// Linear layer `x w + b` with `w` stored `[in, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let h = self.matmul(x, w);
        self.add_bias(h, b)
    }

    /// 3x3 convolution, stride 1, zero padding 1, no bias.
    /// `x: [B, C, H, W]`, `w: [O, C, 3, 3]` -> `[B, O, H, W]`.
    pub fn conv3x3(&mut self, x: Var, w: Var) -> Var {
        let (vx, vw) = (self.value(x), self.value(w));
        let [b, c, h, wd] = <[usize; 4]>::try_from(vx.shape()).expect("conv input must be rank 4");
        let o = vw.dim(0);
        assert_eq!(vw.shape(), &[o, c, 3, 3], "conv kernel shape mismatch");
        let hw = h * wd;
        let ck = c * 9;
        let mut cols = vec![0.0; b * ck * hw];
        let xd = vx.data();
        for bi in 0..b {
            let col = &mut cols[bi * ck * hw..(bi + 1) * ck * hw];
            for ci in 0..c {
                let plane = &xd[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
                for ky in 0..3 {
                    for kx in 0..3 {
                        let row = &mut col[((ci * 9) + ky * 3 + kx) * hw..((ci * 9) + ky * 3 + kx + 1) * hw];
                        for y in 0..h {
                            let sy = y as isize + ky as isize - 1;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            let src = &plane[sy as usize * wd..(sy as usize + 1) * wd];
                            let dst = &mut row[y * wd..(y + 1) * wd];
                            for xo in 0..wd {
                                let sx = xo as isize + kx as isize - 1;
                                if sx >= 0 && sx < wd as isize {
                                    dst[xo] = src[sx as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        let mut out = vec![0.0; b * o * hw];
        for bi in 0..b {
            gemm(
                o,
                ck,
                hw,
                vw.data(),
                false,
                &cols[bi * ck * hw..(bi + 1) * ck * hw],
                false,
                &mut out[bi * o * hw..(bi + 1) * o * hw],
                false,
            );
        }
        let ng = self.ng(x) || self.ng(w);
        self.push(Tensor::new([b, o, h, wd], out), Op::Conv3x3 { x, w, cols }, ng)
    }

    /// `(x - mean[c]) / sqrt(var[c] + eps)` with fixed statistics.
    pub fn norm_frozen(&mut self, x: Var, mean: &[f64], var: &[f64], eps: f64) -> Var {
        let vx = self.value(x);
        let (b, c, s) = channel_layout(vx.shape());
        assert_eq!(mean.len(), c);
        assert_eq!(var.len(), c);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut value = vx.clone();
        let d = value.data_mut();
        for bi in 0..b {
            for ci in 0..c {
                for e in &mut d[(bi * c + ci) * s..(bi * c + ci + 1) * s] {
                    *e = (*e - mean[ci]) * inv_std[ci];
                }
            }
        }
        let ng = self.ng(x);
        self.push(value, Op::NormFrozen { x, inv_std }, ng)
    }

    /// Normalization with statistics of the current batch (reduced over batch
    /// and spatial axes); gradients flow through the statistics.
    pub fn norm_batch(&mut self, x: Var, eps: f64) -> (Var, BatchMoments) {
        let vx = self.value(x);
        let (b, c, s) = channel_layout(vx.shape());
        let count = b * s;
        let d = vx.data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ci in 0..c {
            let mut sum = 0.0;
            for bi in 0..b {
                sum += d[(bi * c + ci) * s..(bi * c + ci + 1) * s].iter().sum::<f64>();
            }
            let mu = sum / count as f64;
            let mut sq = 0.0;
            for bi in 0..b {
                sq += d[(bi * c + ci) * s..(bi * c + ci + 1) * s]
                    .iter()
                    .map(|v| (v - mu) * (v - mu))
                    .sum::<f64>();
            }
            mean[ci] = mu;
            var[ci] = sq / count as f64;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut value = vx.clone();
        let out = value.data_mut();
        for bi in 0..b {
            for ci in 0..c {
                for e in &mut out[(bi * c + ci) * s..(bi * c + ci + 1) * s] {
                    *e = (*e - mean[ci]) * inv_std[ci];
                }
            }
        }
        let ng = self.ng(x);
        let v = self.push(value, Op::NormBatch { x, inv_std }, ng);
        (v, BatchMoments { mean, var, count })
    }

    /// `gamma[c] * x + beta[c]` broadcast over batch and spatial axes.
    pub fn channel_affine(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let (vx, vg, vb) = (self.value(x), self.value(gamma), self.value(beta));
        let (b, c, s) = channel_layout(vx.shape());
        assert_eq!(vg.numel(), c, "gamma length mismatch");
        assert_eq!(vb.numel(), c, "beta length mismatch");
        let mut value = vx.clone();
        let out = value.data_mut();
        let (g, be) = (vg.data(), vb.data());
        for bi in 0..b {
            for ci in 0..c {
                for e in &mut out[(bi * c + ci) * s..(bi * c + ci + 1) * s] {
                    *e = g[ci] * *e + be[ci];
                }
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(value, Op::ChannelAffine { x, gamma, beta }, ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        let ng = self.ng(x);
        self.push(value, Op::Relu(x), ng)
    }

    /// 2x2 average pooling with stride 2 on `[B, C, H, W]`.
    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let [b, c, h, w] = <[usize; 4]>::try_from(vx.shape()).expect("pool input must be rank 4");
        let (oh, ow) = (h / 2, w / 2);
        let d = vx.data();
        let mut out = vec![0.0; b * c * oh * ow];
        for p in 0..b * c {
            let src = &d[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
            for y in 0..oh {
                for xo in 0..ow {
                    let i = 2 * y * w + 2 * xo;
                    dst[y * ow + xo] = 0.25 * (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]);
                }
            }
        }
        let ng = self.ng(x);
        self.push(Tensor::new([b, c, oh, ow], out), Op::AvgPool2(x), ng)
    }

    /// Mean over spatial axes: `[B, C, ...] -> [B, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let (b, c, s) = channel_layout(vx.shape());
        let out: Vec<f64> = vx.data().chunks(s).map(|p| p.iter().sum::<f64>() / s as f64).collect();
        let ng = self.ng(x);
        self.push(Tensor::new([b, c], out), Op::GlobalAvgPool(x), ng)
    }

    /// Row-wise softmax of a `[m, n]` tensor.
    pub fn softmax(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let n = vx.dim(1);
        let out = softmax_rows(vx.data(), n);
        let value = Tensor::new(vx.shape().to_vec(), out);
        let ng = self.ng(x);
        self.push(value, Op::Softmax(x), ng)
    }

    /// Mean cross-entropy of `[B, K]` logits against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let vl = self.value(logits);
        let (b, k) = (vl.dim(0), vl.dim(1));
        assert_eq!(labels.len(), b, "label count mismatch");
        let probs = softmax_rows(vl.data(), k);
        let mut loss = 0.0;
        for (i, row) in vl.data().chunks(k).enumerate() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[labels[i]];
        }
        let ng = self.ng(logits);
        self.push(
            Tensor::scalar(loss / b as f64),
            Op::CrossEntropy { logits, labels: labels.to_vec(), probs },
            ng,
        )
    }

    /// Mean Shannon entropy (natural log) of the softmax of `[B, K]` logits.
    pub fn entropy(&mut self, logits: Var) -> Var {
        let vl = self.value(logits);
        let (b, k) = (vl.dim(0), vl.dim(1));
        let probs = softmax_rows(vl.data(), k);
        let mut row_entropy = Vec::with_capacity(b);
        let mut row_mean_logit = Vec::with_capacity(b);
        for (row, p) in vl.data().chunks(k).zip(probs.chunks(k)) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            // H = lse - sum_j p_j z_j, which is exactly zero-gradient at uniform logits.
            let pz: f64 = p.iter().zip(row).map(|(a, z)| a * z).sum();
            row_entropy.push(lse - pz);
            row_mean_logit.push(pz);
        }
        let mean = row_entropy.iter().sum::<f64>() / b as f64;
        let ng = self.ng(logits);
        self.push(Tensor::scalar(mean), Op::Entropy { logits, probs, row_mean_logit }, ng)
    }

    /// Mean entropy of rows that are already probability vectors.
    pub fn prob_entropy(&mut self, p: Var) -> Var {
        let vp = self.value(p);
        let b = vp.dim(0);
        let h: f64 = vp.data().iter().map(|&q| if q > 0.0 { -q * q.ln() } else { 0.0 }).sum();
        let ng = self.ng(p);
        self.push(Tensor::scalar(h / b as f64), Op::ProbEntropy(p), ng)
    }

    /// Row-wise layer normalization of `[m, n]` with affine `gamma[n]`, `beta[n]`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let (vx, vg, vb) = (self.value(x), self.value(gamma), self.value(beta));
        let n = vx.dim(1);
        let mut out = vec![0.0; vx.numel()];
        let mut xhat = vec![0.0; vx.numel()];
        let mut inv_std = Vec::with_capacity(vx.dim(0));
        for ((row, o), xh) in vx.data().chunks(n).zip(out.chunks_mut(n)).zip(xhat.chunks_mut(n)) {
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            for j in 0..n {
                xh[j] = (row[j] - mu) * is;
                o[j] = xh[j] * vg.data()[j] + vb.data()[j];
            }
            inv_std.push(is);
        }
        let value = Tensor::new(vx.shape().to_vec(), out);
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(value, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, ng)
    }

    /// Multi-head scaled dot-product self-attention over one `[T, d]` sequence
    /// (already-projected queries, keys and values; no mask).
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Var {
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        let (t, d) = (vq.dim(0), vq.dim(1));
        assert_eq!(vk.shape(), vq.shape());
        assert_eq!(vv.shape(), vq.shape());
        assert_eq!(d % heads, 0, "model dim not divisible by heads");
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; heads * t * t];
        let mut out = vec![0.0; t * d];
        for h in 0..heads {
            let p = &mut probs[h * t * t..(h + 1) * t * t];
            for i in 0..t {
                let qi = &vq.data()[i * d + h * dh..i * d + (h + 1) * dh];
                for j in 0..t {
                    let kj = &vk.data()[j * d + h * dh..j * d + (h + 1) * dh];
                    p[i * t + j] = scale * qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>();
                }
            }
            let sm = softmax_rows(p, t);
            p.copy_from_slice(&sm);
            for i in 0..t {
                for j in 0..t {
                    let a = p[i * t + j];
                    let vj = &vv.data()[j * d + h * dh..j * d + (h + 1) * dh];
                    let oi = &mut out[i * d + h * dh..i * d + (h + 1) * dh];
                    for (o, x) in oi.iter_mut().zip(vj) {
                        *o += a * x;
                    }
                }
            }
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        self.push(Tensor::new([t, d], out), Op::Attention { q, k, v, heads, probs }, ng)
    }

    /// Stacks `[r_i, n]` tensors into `[sum r_i, n]`.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Tensor::concat(&tensors);
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(value, Op::ConcatRows(parts.to_vec()), ng)
    }

    /// Rows `start..start + len` of a `[m, n]` tensor.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let vx = self.value(x);
        let n = vx.numel() / vx.dim(0);
        let data = vx.data()[start * n..(start + len) * n].to_vec();
        let mut shape = vx.shape().to_vec();
        shape[0] = len;
        let ng = self.ng(x);
        self.push(Tensor::new(shape, data), Op::SliceRows { x, start }, ng)
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).numel(), 1, "backward from a non-scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape().to_vec(), 1.0));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn send(&self, grads: &mut [Option<Tensor>], to: Var, g: Tensor) {
        if self.ng(to) {
            add_into(&mut grads[to.0], g);
        }
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                self.send(grads, *x, g.clone().reshape(shape));
            }
            Op::Add(a, b) => {
                self.send(grads, *a, g.clone());
                self.send(grads, *b, g.clone());
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    let d = g.data().iter().zip(self.value(*b).data()).map(|(x, y)| x * y).collect();
                    self.send(grads, *a, Tensor::new(g.shape().to_vec(), d));
                }
                if self.ng(*b) {
                    let d = g.data().iter().zip(self.value(*a).data()).map(|(x, y)| x * y).collect();
                    self.send(grads, *b, Tensor::new(g.shape().to_vec(), d));
                }
            }
            Op::Scale(x, c) => self.send(grads, *x, g.map(|v| v * c)),
            Op::AddBias { x, bias } => {
                self.send(grads, *x, g.clone());
                if self.ng(*bias) {
                    let n = self.value(*bias).numel();
                    let mut gb = vec![0.0; n];
                    for row in g.data().chunks(n) {
                        for (a, b) in gb.iter_mut().zip(row) {
                            *a += b;
                        }
                    }
                    let shape = self.value(*bias).shape().to_vec();
                    self.send(grads, *bias, Tensor::new(shape, gb));
                }
            }
            Op::MatMul { a, b, ta, tb } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, n) = (g.dim(0), g.dim(1));
                let k = if *ta { va.dim(0) } else { va.dim(1) };
                if self.ng(*a) {
                    let mut ga = vec![0.0; m * k];
                    if !*ta {
                        // dA = dC op(B)^T
                        gemm(m, n, k, g.data(), false, vb.data(), !*tb, &mut ga, false);
                    } else {
                        // dA = op(B) dC^T, stored [k, m]
                        gemm(k, n, m, vb.data(), *tb, g.data(), true, &mut ga, false);
                    }
                    self.send(grads, *a, Tensor::new(va.shape().to_vec(), ga));
                }
                if self.ng(*b) {
                    let mut gb = vec![0.0; k * n];
                    if !*tb {
                        // dB = op(A)^T dC
                        gemm(k, m, n, va.data(), !*ta, g.data(), false, &mut gb, false);
                    } else {
                        // dB = dC^T op(A), stored [n, k]
                        gemm(n, m, k, g.data(), true, va.data(), *ta, &mut gb, false);
                    }
                    self.send(grads, *b, Tensor::new(vb.shape().to_vec(), gb));
                }
            }
            Op::Conv3x3 { x, w, cols } => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                let [b, c, h, wd] = <[usize; 4]>::try_from(vx.shape()).unwrap();
                let o = vw.dim(0);
                let (hw, ck) = (h * wd, c * 9);
                let gd = g.data();
                if self.ng(*w) {
                    let mut gw = vec![0.0; o * ck];
                    for bi in 0..b {
                        gemm(
                            o,
                            hw,
                            ck,
                            &gd[bi * o * hw..(bi + 1) * o * hw],
                            false,
                            &cols[bi * ck * hw..(bi + 1) * ck * hw],
                            true,
                            &mut gw,
                            true,
                        );
                    }
                    self.send(grads, *w, Tensor::new(vw.shape().to_vec(), gw));
                }
                if self.ng(*x) {
                    let mut gx = vec![0.0; b * c * hw];
                    let mut gcols = vec![0.0; ck * hw];
                    for bi in 0..b {
                        gemm(ck, o, hw, vw.data(), true, &gd[bi * o * hw..(bi + 1) * o * hw], false, &mut gcols, false);
                        for ci in 0..c {
                            let plane = &mut gx[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let row = &gcols[(ci * 9 + ky * 3 + kx) * hw..(ci * 9 + ky * 3 + kx + 1) * hw];
                                    for y in 0..h {
                                        let sy = y as isize + ky as isize - 1;
                                        if sy < 0 || sy >= h as isize {
                                            continue;
                                        }
                                        for xo in 0..wd {
                                            let sx = xo as isize + kx as isize - 1;
                                            if sx >= 0 && sx < wd as isize {
                                                plane[sy as usize * wd + sx as usize] += row[y * wd + xo];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                    self.send(grads, *x, Tensor::new(vx.shape().to_vec(), gx));
                }
            }
            Op::NormFrozen { x, inv_std } => {
                let (b, c, s) = channel_layout(g.shape());
                let mut gx = g.clone();
                let d = gx.data_mut();
                for bi in 0..b {
                    for ci in 0..c {
                        for e in &mut d[(bi * c + ci) * s..(bi * c + ci + 1) * s] {
                            *e *= inv_std[ci];
                        }
                    }
                }
                self.send(grads, *x, gx);
            }
            Op::NormBatch { x, inv_std } => {
                let (b, c, s) = channel_layout(g.shape());
                let xhat = node.value.data();
                let gd = g.data();
                let count = (b * s) as f64;
                let mut gx = vec![0.0; gd.len()];
                for ci in 0..c {
                    let (mut sg, mut sgx) = (0.0, 0.0);
                    for bi in 0..b {
                        let r = (bi * c + ci) * s..(bi * c + ci + 1) * s;
                        for (gv, xv) in gd[r.clone()].iter().zip(&xhat[r]) {
                            sg += gv;
                            sgx += gv * xv;
                        }
                    }
                    for bi in 0..b {
                        let r = (bi * c + ci) * s..(bi * c + ci + 1) * s;
                        for j in r {
                            gx[j] = inv_std[ci] / count * (count * gd[j] - sg - xhat[j] * sgx);
                        }
                    }
                }
                self.send(grads, *x, Tensor::new(g.shape().to_vec(), gx));
            }
            Op::ChannelAffine { x, gamma, beta } => {
                let (b, c, s) = channel_layout(g.shape());
                let gd = g.data();
                if self.ng(*x) {
                    let gam = self.value(*gamma).data();
                    let mut gx = g.clone();
                    let d = gx.data_mut();
                    for bi in 0..b {
                        for ci in 0..c {
                            for e in &mut d[(bi * c + ci) * s..(bi * c + ci + 1) * s] {
                                *e *= gam[ci];
                            }
                        }
                    }
                    self.send(grads, *x, gx);
                }
                if self.ng(*gamma) {
                    let xd = self.value(*x).data();
                    let mut gg = vec![0.0; c];
                    for bi in 0..b {
                        for (ci, acc) in gg.iter_mut().enumerate() {
                            let r = (bi * c + ci) * s..(bi * c + ci + 1) * s;
                            *acc += gd[r.clone()].iter().zip(&xd[r]).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                    let shape = self.value(*gamma).shape().to_vec();
                    self.send(grads, *gamma, Tensor::new(shape, gg));
                }
                if self.ng(*beta) {
                    let mut gb = vec![0.0; c];
                    for bi in 0..b {
                        for (ci, acc) in gb.iter_mut().enumerate() {
                            *acc += gd[(bi * c + ci) * s..(bi * c + ci + 1) * s].iter().sum::<f64>();
                        }
                    }
                    let shape = self.value(*beta).shape().to_vec();
                    self.send(grads, *beta, Tensor::new(shape, gb));
                }
            }
            Op::Relu(x) => {
                let d = g
                    .data()
                    .iter()
                    .zip(node.value.data())
                    .map(|(gv, y)| if *y > 0.0 { *gv } else { 0.0 })
                    .collect();
                self.send(grads, *x, Tensor::new(g.shape().to_vec(), d));
            }
            Op::AvgPool2(x) => {
                let vx = self.value(*x);
                let [b, c, h, w] = <[usize; 4]>::try_from(vx.shape()).unwrap();
                let (oh, ow) = (h / 2, w / 2);
                let mut gx = vec![0.0; vx.numel()];
                for p in 0..b * c {
                    let src = &g.data()[p * oh * ow..(p + 1) * oh * ow];
                    let dst = &mut gx[p * h * w..(p + 1) * h * w];
                    for y in 0..oh {
                        for xo in 0..ow {
                            let v = 0.25 * src[y * ow + xo];
                            let i = 2 * y * w + 2 * xo;
                            dst[i] += v;
                            dst[i + 1] += v;
                            dst[i + w] += v;
                            dst[i + w + 1] += v;
                        }
                    }
                }
                self.send(grads, *x, Tensor::new(vx.shape().to_vec(), gx));
            }
            Op::GlobalAvgPool(x) => {
                let vx = self.value(*x);
                let (_, _, s) = channel_layout(vx.shape());
                let mut gx = Vec::with_capacity(vx.numel());
                for &gv in g.data() {
                    gx.extend(std::iter::repeat_n(gv / s as f64, s));
                }
                self.send(grads, *x, Tensor::new(vx.shape().to_vec(), gx));
            }
            Op::Softmax(x) => {
                let n = g.dim(1);
                let p = node.value.data();
                let mut gx = vec![0.0; p.len()];
                for ((gr, pr), out) in g.data().chunks(n).zip(p.chunks(n)).zip(gx.chunks_mut(n)) {
                    let dot: f64 = gr.iter().zip(pr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        out[j] = pr[j] * (gr[j] - dot);
                    }
                }
                self.send(grads, *x, Tensor::new(g.shape().to_vec(), gx));
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let vl = self.value(*logits);
                let (b, k) = (vl.dim(0), vl.dim(1));
                let scale = g.item() / b as f64;
                let mut gl = probs.clone();
                for (i, row) in gl.chunks_mut(k).enumerate() {
                    row[labels[i]] -= 1.0;
                    for v in row.iter_mut() {
                        *v *= scale;
                    }
                }
                self.send(grads, *logits, Tensor::new([b, k], gl));
            }
            Op::Entropy { logits, probs, row_mean_logit } => {
                let vl = self.value(*logits);
                let (b, k) = (vl.dim(0), vl.dim(1));
                let scale = g.item() / b as f64;
                let mut gl = vec![0.0; b * k];
                for i in 0..b {
                    for j in 0..k {
                        let p = probs[i * k + j];
                        // dH/dz_j = -p_j (z_j - sum_i p_i z_i)
                        gl[i * k + j] = -scale * p * (vl.data()[i * k + j] - row_mean_logit[i]);
                    }
                }
                self.send(grads, *logits, Tensor::new([b, k], gl));
            }
            Op::ProbEntropy(p) => {
                let vp = self.value(*p);
                let scale = g.item() / vp.dim(0) as f64;
                let gp = vp.map(|q| -scale * (q.max(f64::MIN_POSITIVE).ln() + 1.0));
                self.send(grads, *p, gp);
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let vx = self.value(*x);
                let n = vx.dim(1);
                let gam = self.value(*gamma).data();
                let gd = g.data();
                let rows = vx.dim(0);
                if self.ng(*x) {
                    let mut gx = vec![0.0; rows * n];
                    for r in 0..rows {
                        let (mut s1, mut s2) = (0.0, 0.0);
                        for j in 0..n {
                            let dxh = gd[r * n + j] * gam[j];
                            s1 += dxh;
                            s2 += dxh * xhat[r * n + j];
                        }
                        for j in 0..n {
                            let dxh = gd[r * n + j] * gam[j];
                            gx[r * n + j] = inv_std[r] / n as f64 * (n as f64 * dxh - s1 - xhat[r * n + j] * s2);
                        }
                    }
                    self.send(grads, *x, Tensor::new(vx.shape().to_vec(), gx));
                }
                if self.ng(*gamma) {
                    let mut gg = vec![0.0; n];
                    for r in 0..rows {
                        for j in 0..n {
                            gg[j] += gd[r * n + j] * xhat[r * n + j];
                        }
                    }
                    let shape = self.value(*gamma).shape().to_vec();
                    self.send(grads, *gamma, Tensor::new(shape, gg));
                }
                if self.ng(*beta) {
                    let mut gb = vec![0.0; n];
                    for r in 0..rows {
                        for j in 0..n {
                            gb[j] += gd[r * n + j];
                        }
                    }
                    let shape = self.value(*beta).shape().to_vec();
                    self.send(grads, *beta, Tensor::new(shape, gb));
                }
            }
            Op::Attention { q, k, v, heads, probs } => {
                let (vq, vk, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let (t, d) = (vq.dim(0), vq.dim(1));
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let gd = g.data();
                let mut gq = vec![0.0; t * d];
                let mut gk = vec![0.0; t * d];
                let mut gv = vec![0.0; t * d];
                let mut dp = vec![0.0; t * t];
                for h in 0..*heads {
                    let p = &probs[h * t * t..(h + 1) * t * t];
                    let cols = h * dh..(h + 1) * dh;
                    for i in 0..t {
                        let gi = &gd[i * d + cols.start..i * d + cols.end];
                        for j in 0..t {
                            let vj = &vv.data()[j * d + cols.start..j * d + cols.end];
                            dp[i * t + j] = gi.iter().zip(vj).map(|(a, b)| a * b).sum();
                            let a = p[i * t + j];
                            for (o, x) in gv[j * d + cols.start..j * d + cols.end].iter_mut().zip(gi) {
                                *o += a * x;
                            }
                        }
                    }
                    for i in 0..t {
                        let row_p = &p[i * t..(i + 1) * t];
                        let dot: f64 = row_p.iter().zip(&dp[i * t..(i + 1) * t]).map(|(a, b)| a * b).sum();
                        for j in 0..t {
                            let ds = row_p[j] * (dp[i * t + j] - dot) * scale;
                            if ds == 0.0 {
                                continue;
                            }
                            for c in cols.clone() {
                                gq[i * d + c] += ds * vk.data()[j * d + c];
                                gk[j * d + c] += ds * vq.data()[i * d + c];
                            }
                        }
                    }
                }
                self.send(grads, *q, Tensor::new([t, d], gq));
                self.send(grads, *k, Tensor::new([t, d], gk));
                self.send(grads, *v, Tensor::new([t, d], gv));
            }
            Op::ConcatRows(parts) => {
                let n = g.numel() / g.dim(0);
                let mut offset = 0;
                for &p in parts {
                    let vp = self.value(p);
                    let len = vp.numel();
                    if self.ng(p) {
                        let d = g.data()[offset..offset + len].to_vec();
                        self.send(grads, p, Tensor::new(vp.shape().to_vec(), d));
                    }
                    offset += len;
                }
                debug_assert_eq!(offset, g.dim(0) * n);
            }
            Op::SliceRows { x, start } => {
                let vx = self.value(*x);
                let n = vx.numel() / vx.dim(0);
                let mut gx = vec![0.0; vx.numel()];
                gx[start * n..start * n + g.numel()].copy_from_slice(g.data());
                self.send(grads, *x, Tensor::new(vx.shape().to_vec(), gx));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    /// Central-difference check of d(loss)/d(input) for a graph builder whose
    /// inputs are all tracked leaves.
    fn check<F>(inputs: Vec<Tensor>, build: F, tol: f64)
    where
        F: Fn(&mut Graph, &[Var]) -> Var,
    {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let loss = build(&mut g, &vars);
        let grads = g.backward(loss);
        let eval = |ins: &[Tensor]| {
            let mut g = Graph::new();
            let vars: Vec<Var> = ins.iter().map(|t| g.param(t.clone())).collect();
            let l = build(&mut g, &vars);
            g.value(l).item()
        };
        let h = 1e-5;
        for (idx, input) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[idx]).cloned().unwrap_or_else(|| Tensor::zeros(input.shape().to_vec()));
            for e in 0..input.numel() {
                let mut plus = inputs.clone();
                plus[idx].data_mut()[e] += h;
                let mut minus = inputs.clone();
                minus[idx].data_mut()[e] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic.data()[e];
                let err = (a - fd).abs() / (a.abs().max(fd.abs()).max(1e-3));
                assert!(err < tol, "input {idx} elem {e}: analytic {a} vs fd {fd}");
            }
        }
    }

    /// Contract an arbitrary output with fixed random weights to get a scalar.
    fn contract(g: &mut Graph, y: Var, seed: u64) -> Var {
        let shape = g.value(y).shape().to_vec();
        let n: usize = shape.iter().product();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = Tensor::new([n, 1], (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let w = g.constant(w);
        let flat = g.reshape(y, &[1, n]);
        let s = g.matmul(flat, w);
        g.reshape(s, &[])
    }

    #[test]
    fn matmul_grads_all_transposes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for ta in [false, true] {
            for tb in [false, true] {
                let a = rand_tensor(&mut rng, if ta { &[4, 3] } else { &[3, 4] });
                let b = rand_tensor(&mut rng, if tb { &[2, 4] } else { &[4, 2] });
                check(
                    vec![a, b],
                    |g, v| {
                        let y = g.matmul_t(v[0], v[1], ta, tb);
                        contract(g, y, 7)
                    },
                    1e-6,
                );
            }
        }
    }

    #[test]
    fn conv_pool_affine_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_tensor(&mut rng, &[2, 2, 4, 4]);
        let w = rand_tensor(&mut rng, &[3, 2, 3, 3]);
        let gamma = rand_tensor(&mut rng, &[3]);
        let beta = rand_tensor(&mut rng, &[3]);
        check(
            vec![x, w, gamma, beta],
            |g, v| {
                let h = g.conv3x3(v[0], v[1]);
                let h = g.channel_affine(h, v[2], v[3]);
                let h = g.avg_pool2(h);
                let h = g.global_avg_pool(h);
                contract(g, h, 3)
            },
            1e-6,
        );
    }

    #[test]
    fn batch_norm_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&mut rng, &[3, 2, 2, 2]);
        check(
            vec![x],
            |g, v| {
                let (h, _) = g.norm_batch(v[0], 1e-5);
                contract(g, h, 4)
            },
            1e-5,
        );
        let x = rand_tensor(&mut rng, &[3, 2, 2, 2]);
        check(
            vec![x],
            |g, v| {
                let h = g.norm_frozen(v[0], &[0.1, -0.2], &[0.5, 2.0], 1e-5);
                contract(g, h, 5)
            },
            1e-6,
        );
    }

    #[test]
    fn loss_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let z = rand_tensor(&mut rng, &[4, 5]);
        check(vec![z.clone()], |g, v| g.cross_entropy(v[0], &[0, 3, 4, 1]), 1e-6);
        check(vec![z.clone()], |g, v| g.entropy(v[0]), 1e-6);
        check(
            vec![z],
            |g, v| {
                let p = g.softmax(v[0]);
                g.prob_entropy(p)
            },
            1e-6,
        );
    }

    #[test]
    fn transformer_block_ops_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_tensor(&mut rng, &[3, 4]);
        let wq = rand_tensor(&mut rng, &[4, 4]);
        let lg = rand_tensor(&mut rng, &[4]);
        let lb = rand_tensor(&mut rng, &[4]);
        let bias = rand_tensor(&mut rng, &[4]);
        check(
            vec![x, wq, lg, lb, bias],
            |g, v| {
                let q = g.matmul(v[0], v[1]);
                let q = g.add_bias(q, v[4]);
                let a = g.attention(q, v[0], q, 2);
                let s = g.add(a, v[0]);
                let n = g.layer_norm(s, v[2], v[3], 1e-5);
                let top = g.slice_rows(n, 1, 2);
                let rest = g.slice_rows(n, 0, 1);
                let cat = g.concat_rows(&[top, rest]);
                let m = g.mul(cat, cat);
                let m = g.scale(m, 0.5);
                contract(g, m, 6)
            },
            1e-5,
        );
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::new([1, 2], vec![1.0, 2.0]));
        let b = g.param(Tensor::new([2, 1], vec![3.0, 4.0]));
        let y = g.matmul(a, b);
        let y = g.reshape(y, &[]);
        let grads = g.backward(y);
        assert!(grads.get(a).is_none());
        assert_eq!(grads.get(b).unwrap().data(), &[1.0, 2.0]);
    }
}
