//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every primitive applied during one forward pass.
//! [`Graph::backward`] walks the record in reverse once and returns the
//! gradient of a scalar loss with respect to every node that depends on a
//! `requires_grad` leaf.

mod gradcheck;

pub use gradcheck::finite_diff_grad;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom, PoolGeom};
use crate::tensor::{split_axis, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddN(Vec<usize>),
    WeightedSum { terms: Vec<(usize, usize)>, weights: usize },
    Scale(usize, f64),
    Relu(usize),
    Tanh(usize),
    Sigmoid(usize),
    Log(usize),
    Softmax(usize),
    SoftmaxCrossEntropy { logits: usize, labels: Vec<usize>, probs: Vec<f64> },
    Sum(usize),
    Mean { x: usize, outer: usize, len: usize, inner: usize },
    Linear { x: usize, w: usize, b: Option<usize>, rows: usize, k: usize, out: usize },
    Conv { x: usize, w: usize, geom: ConvGeom },
    MaxPool { x: usize, geom: PoolGeom, arg: Vec<usize> },
    AvgPool { x: usize, geom: PoolGeom },
    BatchNorm { x: usize, xhat: Vec<f64>, inv_std: Vec<f64>, batch_stats: bool, n: usize, c: usize, s: usize },
    ChannelAffine { x: usize, gamma: Option<usize>, beta: Option<usize>, n: usize, c: usize, s: usize },
    Reshape(usize),
    SwapMiddle { x: usize, dims: [usize; 4] },
    Concat { xs: Vec<usize>, outer: usize, lens: Vec<usize>, inner: usize },
    Slice { x: usize, outer: usize, total: usize, start: usize, len: usize, inner: usize },
    LstmCell { pre: usize, c_prev: usize, rows: usize, hidden: usize },
    MulRows { x: usize, s: usize, width: usize },
    Shift2d { x: usize, planes: usize, h: usize, w: usize },
    Subsample2d { x: usize, planes: usize, h: usize, w: usize },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by one backward pass, indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

/// Recorded computation of a single forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    consumed: bool,
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn softmax_rows_in_place(data: &mut [f64], width: usize) {
    for row in data.chunks_mut(width) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
}

fn last_dim(t: &Tensor) -> usize {
    t.shape().last().copied().unwrap_or(1)
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

    fn ng(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].needs_grad)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip_map(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(a, b, what)?;
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| f(*x, *y)).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let ng = self.ng(&[a.0, b.0]);
        Ok(self.push(value, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, "add", |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, "sub", |x, y| x - y, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, "mul", |x, y| x * y, Op::Mul(a.0, b.0))
    }

    pub fn add_n(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| Error::Shape("add_n of nothing".into()))?;
        for &x in &xs[1..] {
            self.same_shape(first, x, "add_n")?;
        }
        let mut data = self.value(first).data().to_vec();
        for &x in &xs[1..] {
            for (d, v) in data.iter_mut().zip(self.value(x).data()) {
                *d += v;
            }
        }
        let value = Tensor::new(self.shape(first).to_vec(), data)?;
        let ids: Vec<usize> = xs.iter().map(|v| v.0).collect();
        let ng = self.ng(&ids);
        Ok(self.push(value, Op::AddN(ids), ng))
    }

    /// `Σ weights[k] · x_k` over `(k, x_k)` terms, on a template `shape`.
    ///
    /// Entries of `weights` without a term contribute zero.
    pub fn weighted_sum(&mut self, terms: &[(usize, Var)], weights: Var, shape: &[usize]) -> Result<Var> {
        let w = self.value(weights).data().to_vec();
        let mut data = vec![0.0; shape.iter().product()];
        for &(k, x) in terms {
            if k >= w.len() {
                return Err(Error::Shape(format!("weight index {k} out of {}", w.len())));
            }
            if self.shape(x) != shape {
                return Err(Error::Shape(format!(
                    "weighted_sum term {:?} vs {shape:?}",
                    self.shape(x)
                )));
            }
            for (d, v) in data.iter_mut().zip(self.value(x).data()) {
                *d += w[k] * v;
            }
        }
        let value = Tensor::new(shape.to_vec(), data)?;
        let mut ids: Vec<usize> = terms.iter().map(|(_, x)| x.0).collect();
        ids.push(weights.0);
        let ng = self.ng(&ids);
        let terms = terms.iter().map(|&(k, x)| (k, x.0)).collect();
        Ok(self.push(value, Op::WeightedSum { terms, weights: weights.0 }, ng))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let va = &self.nodes[a.0].value;
        let data = va.data().iter().map(|&x| f(x)).collect();
        let value = Tensor::new(va.shape().to_vec(), data).expect("same shape");
        let ng = self.nodes[a.0].needs_grad;
        self.push(value, op, ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x * c, Op::Scale(a.0, c))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a.0))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a.0))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a.0))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let va = &self.nodes[a.0].value;
        let width = last_dim(va);
        let mut data = va.data().to_vec();
        softmax_rows_in_place(&mut data, width);
        let value = Tensor::new(va.shape().to_vec(), data).expect("same shape");
        let ng = self.nodes[a.0].needs_grad;
        self.push(value, Op::Softmax(a.0), ng)
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits);
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(Error::Shape(format!(
                "cross entropy logits {shape:?} vs {} labels",
                labels.len()
            )));
        }
        let classes = shape[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Contract(format!("label {bad} out of {classes} classes")));
        }
        let mut probs = self.value(logits).data().to_vec();
        softmax_rows_in_place(&mut probs, classes);
        let loss = labels
            .iter()
            .enumerate()
            .map(|(r, &l)| -probs[r * classes + l].max(f64::MIN_POSITIVE).ln())
            .sum::<f64>()
            / labels.len() as f64;
        let ng = self.nodes[logits.0].needs_grad;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits: logits.0,
                labels: labels.to_vec(),
                probs,
            },
            ng,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let ng = self.nodes[a.0].needs_grad;
        self.push(Tensor::scalar(s), Op::Sum(a.0), ng)
    }

    /// Mean over `axis`, removing it.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(Error::Shape(format!("mean over axis {axis} of {shape:?}")));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.value(a).data();
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let row = &src[(o * len + l) * inner..][..inner];
                for (d, v) in data[o * inner..][..inner].iter_mut().zip(row) {
                    *d += v;
                }
            }
        }
        let inv = 1.0 / len as f64;
        data.iter_mut().for_each(|v| *v *= inv);
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let ng = self.nodes[a.0].needs_grad;
        Ok(self.push(Tensor::new(out_shape, data)?, Op::Mean { x: a.0, outer, len, inner }, ng))
    }

    /// `x · wᵀ + b` for `x: (rows, k)`, `w: (out, k)`, `b: (out)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(Error::Shape(format!("linear x {xs:?} w {ws:?}")));
        }
        let (rows, k, out) = (xs[0], xs[1], ws[0]);
        if let Some(b) = b {
            if self.shape(b) != [out] {
                return Err(Error::Shape(format!("linear bias {:?} vs {out}", self.shape(b))));
            }
        }
        let y = kernels::linear_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            rows,
            k,
            out,
        );
        let mut ids = vec![x.0, w.0];
        ids.extend(b.map(|b| b.0));
        let ng = self.ng(&ids);
        Ok(self.push(
            Tensor::new(vec![rows, out], y)?,
            Op::Linear {
                x: x.0,
                w: w.0,
                b: b.map(|b| b.0),
                rows,
                k,
                out,
            },
            ng,
        ))
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        stride: (usize, usize),
        padding: (usize, usize),
        dilation: (usize, usize),
        groups: usize,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || groups == 0 || xs[1] % groups != 0 || ws[0] % groups != 0 || ws[1] * groups != xs[1] {
            return Err(Error::Shape(format!("conv2d x {xs:?} w {ws:?} groups {groups}")));
        }
        let geom = ConvGeom {
            batch: xs[0],
            in_channels: xs[1],
            height: xs[2],
            width: xs[3],
            out_channels: ws[0],
            kernel: (ws[2], ws[3]),
            stride,
            padding,
            dilation,
            groups,
        };
        if xs[2] + 2 * padding.0 < dilation.0 * (ws[2] - 1) + 1 || xs[3] + 2 * padding.1 < dilation.1 * (ws[3] - 1) + 1 {
            return Err(Error::Shape(format!("conv2d kernel larger than padded input {xs:?}")));
        }
        let (oh, ow) = geom.out_hw();
        let y = kernels::conv2d_forward(self.value(x).data(), self.value(w).data(), &geom);
        let ng = self.ng(&[x.0, w.0]);
        Ok(self.push(
            Tensor::new(vec![xs[0], ws[0], oh, ow], y)?,
            Op::Conv { x: x.0, w: w.0, geom },
            ng,
        ))
    }

    fn pool_geom(&self, x: Var, kernel: usize, stride: usize, padding: usize) -> Result<(PoolGeom, Vec<usize>)> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || padding >= kernel || xs[2] + 2 * padding < kernel || xs[3] + 2 * padding < kernel {
            return Err(Error::Shape(format!("pool k{kernel} p{padding} on {xs:?}")));
        }
        Ok((
            PoolGeom {
                planes: xs[0] * xs[1],
                height: xs[2],
                width: xs[3],
                kernel,
                stride,
                padding,
            },
            xs,
        ))
    }

    pub fn max_pool2d(&mut self, x: Var, kernel: usize, stride: usize, padding: usize) -> Result<Var> {
        let (geom, xs) = self.pool_geom(x, kernel, stride, padding)?;
        let (oh, ow) = geom.out_hw();
        let (y, arg) = kernels::max_pool_forward(self.value(x).data(), &geom);
        let ng = self.nodes[x.0].needs_grad;
        Ok(self.push(
            Tensor::new(vec![xs[0], xs[1], oh, ow], y)?,
            Op::MaxPool { x: x.0, geom, arg },
            ng,
        ))
    }

    pub fn avg_pool2d(&mut self, x: Var, kernel: usize, stride: usize, padding: usize) -> Result<Var> {
        let (geom, xs) = self.pool_geom(x, kernel, stride, padding)?;
        let (oh, ow) = geom.out_hw();
        let y = kernels::avg_pool_forward(self.value(x).data(), &geom);
        let ng = self.nodes[x.0].needs_grad;
        Ok(self.push(Tensor::new(vec![xs[0], xs[1], oh, ow], y)?, Op::AvgPool { x: x.0, geom }, ng))
    }

    fn channel_layout(&self, x: Var) -> Result<(usize, usize, usize)> {
        let xs = self.shape(x);
        if xs.len() < 2 {
            return Err(Error::Shape(format!("channel op on {xs:?}")));
        }
        Ok((xs[0], xs[1], xs[2..].iter().product()))
    }

    /// Per-channel normalization without affine terms.
    ///
    /// With `batch_stats` the mean and variance come from `x` itself and are
    /// returned for running-average bookkeeping; otherwise `stats` is used.
    pub fn batch_norm(&mut self, x: Var, stats: Option<(&[f64], &[f64])>, eps: f64) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let (n, c, s) = self.channel_layout(x)?;
        let src = self.value(x).data();
        let m = (n * s) as f64;
        let (mean, var, batch_stats) = match stats {
            Some((mean, var)) => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::Shape(format!("batch_norm stats for {c} channels")));
                }
                (mean.to_vec(), var.to_vec(), false)
            }
            None => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut acc = 0.0;
                    for b in 0..n {
                        acc += src[(b * c + ch) * s..][..s].iter().sum::<f64>();
                    }
                    let mu = acc / m;
                    let mut sq = 0.0;
                    for b in 0..n {
                        sq += src[(b * c + ch) * s..][..s].iter().map(|v| (v - mu) * (v - mu)).sum::<f64>();
                    }
                    mean[ch] = mu;
                    var[ch] = sq / m;
                }
                (mean, var, true)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; src.len()];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * s;
                for i in 0..s {
                    xhat[off + i] = (src[off + i] - mean[ch]) * inv_std[ch];
                }
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), xhat.clone())?;
        let ng = self.nodes[x.0].needs_grad;
        let v = self.push(
            value,
            Op::BatchNorm {
                x: x.0,
                xhat,
                inv_std,
                batch_stats,
                n,
                c,
                s,
            },
            ng,
        );
        Ok((v, mean, var))
    }

    /// `x · gamma[c] + beta[c]` broadcast over every axis but the second.
    pub fn channel_affine(&mut self, x: Var, gamma: Option<Var>, beta: Option<Var>) -> Result<Var> {
        let (n, c, s) = self.channel_layout(x)?;
        for p in gamma.iter().chain(beta.iter()) {
            if self.shape(*p) != [c] {
                return Err(Error::Shape(format!("channel affine {:?} vs {c} channels", self.shape(*p))));
            }
        }
        let src = self.value(x).data();
        let g = gamma.map(|g| self.value(g).data().to_vec());
        let bt = beta.map(|b| self.value(b).data().to_vec());
        let mut data = src.to_vec();
        for b in 0..n {
            for ch in 0..c {
                let gv = g.as_ref().map_or(1.0, |g| g[ch]);
                let bv = bt.as_ref().map_or(0.0, |b| b[ch]);
                for v in &mut data[(b * c + ch) * s..][..s] {
                    *v = *v * gv + bv;
                }
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        let mut ids = vec![x.0];
        ids.extend(gamma.map(|v| v.0));
        ids.extend(beta.map(|v| v.0));
        let ng = self.ng(&ids);
        Ok(self.push(
            value,
            Op::ChannelAffine {
                x: x.0,
                gamma: gamma.map(|v| v.0),
                beta: beta.map(|v| v.0),
                n,
                c,
                s,
            },
            ng,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        let ng = self.nodes[a.0].needs_grad;
        Ok(self.push(value, Op::Reshape(a.0), ng))
    }

    /// `(d0, d1, d2, d3) -> (d0, d2, d1, d3)`.
    pub fn swap_middle(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 4 {
            return Err(Error::Shape(format!("swap_middle on {s:?}")));
        }
        let dims = [s[0], s[1], s[2], s[3]];
        let data = swap_middle_data(self.value(a).data(), dims);
        let ng = self.nodes[a.0].needs_grad;
        Ok(self.push(
            Tensor::new(vec![s[0], s[2], s[1], s[3]], data)?,
            Op::SwapMiddle { x: a.0, dims },
            ng,
        ))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs.first().ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::Shape(format!("concat axis {axis} on {base:?}")));
        }
        let mut lens = Vec::with_capacity(xs.len());
        for &x in xs {
            let s = self.shape(x);
            if s.len() != base.len() || s[..axis] != base[..axis] || s[axis + 1..] != base[axis + 1..] {
                return Err(Error::Shape(format!("concat {s:?} with {base:?} on axis {axis}")));
            }
            lens.push(s[axis]);
        }
        let mut out_shape = base.clone();
        out_shape[axis] = lens.iter().sum();
        self.concat_raw(xs, axis, lens, out_shape)
    }

    /// Stack equally shaped tensors along a new `axis`.
    pub fn stack(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs.first().ok_or_else(|| Error::Shape("stack of nothing".into()))?;
        let base = self.shape(*first).to_vec();
        if axis > base.len() {
            return Err(Error::Shape(format!("stack axis {axis} on {base:?}")));
        }
        for &x in xs {
            if self.shape(x) != base.as_slice() {
                return Err(Error::Shape(format!("stack {:?} with {base:?}", self.shape(x))));
            }
        }
        let mut out_shape = base.clone();
        out_shape.insert(axis, xs.len());
        self.concat_raw(xs, axis, vec![1; xs.len()], out_shape)
    }

    fn concat_raw(&mut self, xs: &[Var], axis: usize, lens: Vec<usize>, out_shape: Vec<usize>) -> Result<Var> {
        let (outer, total, inner) = split_axis(&out_shape, axis);
        let mut data = vec![0.0; outer * total * inner];
        let mut offset = 0;
        for (&x, &len) in xs.iter().zip(&lens) {
            let src = self.value(x).data();
            for o in 0..outer {
                data[(o * total + offset) * inner..][..len * inner].copy_from_slice(&src[o * len * inner..][..len * inner]);
            }
            offset += len;
        }
        let ids: Vec<usize> = xs.iter().map(|v| v.0).collect();
        let ng = self.ng(&ids);
        Ok(self.push(
            Tensor::new(out_shape, data)?,
            Op::Concat { xs: ids, outer, lens, inner },
            ng,
        ))
    }

    /// `x[..., start..start+len, ...]` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let mut shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::Shape(format!("slice {start}+{len} on axis {axis} of {shape:?}")));
        }
        shape[axis] = len;
        self.slice_raw(x, axis, start, len, shape)
    }

    /// `x[..., index, ...]` along `axis`, removing the axis.
    pub fn select(&mut self, x: Var, axis: usize, index: usize) -> Result<Var> {
        let mut shape = self.shape(x).to_vec();
        if axis >= shape.len() || index >= shape[axis] {
            return Err(Error::Shape(format!("select {index} on axis {axis} of {shape:?}")));
        }
        shape.remove(axis);
        self.slice_raw(x, axis, index, 1, shape)
    }

    fn slice_raw(&mut self, x: Var, axis: usize, start: usize, len: usize, out_shape: Vec<usize>) -> Result<Var> {
        let (outer, total, inner) = split_axis(self.shape(x), axis);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            data.extend_from_slice(&src[(o * total + start) * inner..][..len * inner]);
        }
        let ng = self.nodes[x.0].needs_grad;
        Ok(self.push(
            Tensor::new(out_shape, data)?,
            Op::Slice {
                x: x.0,
                outer,
                total,
                start,
                len,
                inner,
            },
            ng,
        ))
    }

    /// One LSTM step. `pre: (rows, 4H)` holds gate pre-activations in
    /// `i, f, g, o` order; returns `(rows, 2H)` holding `[h | c]`.
    pub fn lstm_cell(&mut self, pre: Var, c_prev: Var) -> Result<Var> {
        let ps = self.shape(pre).to_vec();
        let cs = self.shape(c_prev).to_vec();
        if ps.len() != 2 || cs.len() != 2 || ps[0] != cs[0] || ps[1] != 4 * cs[1] {
            return Err(Error::Shape(format!("lstm_cell pre {ps:?} c {cs:?}")));
        }
        let (rows, hidden) = (cs[0], cs[1]);
        let p = self.value(pre).data();
        let c0 = self.value(c_prev).data();
        let mut out = vec![0.0; rows * 2 * hidden];
        for r in 0..rows {
            let pr = &p[r * 4 * hidden..][..4 * hidden];
            for j in 0..hidden {
                let i = sigmoid(pr[j]);
                let f = sigmoid(pr[hidden + j]);
                let g = pr[2 * hidden + j].tanh();
                let o = sigmoid(pr[3 * hidden + j]);
                let c = f * c0[r * hidden + j] + i * g;
                out[r * 2 * hidden + j] = o * c.tanh();
                out[r * 2 * hidden + hidden + j] = c;
            }
        }
        let ng = self.ng(&[pre.0, c_prev.0]);
        Ok(self.push(
            Tensor::new(vec![rows, 2 * hidden], out)?,
            Op::LstmCell {
                pre: pre.0,
                c_prev: c_prev.0,
                rows,
                hidden,
            },
            ng,
        ))
    }

    /// Scales row `r` of `x` (last axis) by `s[r]`; `s` has the leading shape of `x`.
    pub fn mul_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ss = self.shape(s);
        if xs.is_empty() || ss != &xs[..xs.len() - 1] {
            return Err(Error::Shape(format!("mul_rows x {xs:?} s {ss:?}")));
        }
        let width = *xs.last().expect("non-empty");
        let sv = self.value(s).data();
        let data = self
            .value(x)
            .data()
            .chunks(width)
            .zip(sv)
            .flat_map(|(row, &k)| row.iter().map(move |v| v * k))
            .collect();
        let ng = self.ng(&[x.0, s.0]);
        Ok(self.push(Tensor::new(xs, data)?, Op::MulRows { x: x.0, s: s.0, width }, ng))
    }

    /// `y[.., i, j] = x[.., i+1, j+1]`, zero past the edge.
    pub fn shift2d(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(Error::Shape(format!("shift2d on {xs:?}")));
        }
        let (planes, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
        let src = self.value(x).data();
        let mut data = vec![0.0; src.len()];
        for p in 0..planes {
            for i in 0..h.saturating_sub(1) {
                for j in 0..w.saturating_sub(1) {
                    data[(p * h + i) * w + j] = src[(p * h + i + 1) * w + j + 1];
                }
            }
        }
        let ng = self.nodes[x.0].needs_grad;
        Ok(self.push(Tensor::new(xs, data)?, Op::Shift2d { x: x.0, planes, h, w }, ng))
    }

    /// `y[.., i, j] = x[.., 2i, 2j]`; spatial extents become `ceil(h/2) × ceil(w/2)`.
    pub fn subsample2d(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(Error::Shape(format!("subsample2d on {xs:?}")));
        }
        let (planes, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
        let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(planes * oh * ow);
        for p in 0..planes {
            for i in 0..oh {
                for j in 0..ow {
                    data.push(src[(p * h + 2 * i) * w + 2 * j]);
                }
            }
        }
        let ng = self.nodes[x.0].needs_grad;
        Ok(self.push(
            Tensor::new(vec![xs[0], xs[1], oh, ow], data)?,
            Op::Subsample2d { x: x.0, planes, h, w },
            ng,
        ))
    }

    /// Reverse pass from a scalar `loss`.
    ///
    /// The graph can be differentiated once; a second call is an error.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].needs_grad {
                continue;
            }
            self.backprop_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |i: usize| nodes[i].value.data();
        let mut acc = |i: usize, f: &dyn Fn(&mut [f64])| {
            if !nodes[i].needs_grad {
                return;
            }
            let slot = grads[i].get_or_insert_with(|| vec![0.0; nodes[i].value.numel()]);
            f(slot);
        };
        let out = val(id);
        match &nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &|s| add_into(s, g));
                acc(*b, &|s| add_into(s, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &|s| add_into(s, g));
                acc(*b, &|s| s.iter_mut().zip(g).for_each(|(d, v)| *d -= v));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &|s| s.iter_mut().zip(g).zip(vb).for_each(|((d, gv), y)| *d += gv * y));
                acc(*b, &|s| s.iter_mut().zip(g).zip(va).for_each(|((d, gv), x)| *d += gv * x));
            }
            Op::AddN(xs) => {
                for &x in xs {
                    acc(x, &|s| add_into(s, g));
                }
            }
            Op::WeightedSum { terms, weights } => {
                let w = val(*weights);
                for &(k, x) in terms {
                    let wk = w[k];
                    acc(x, &|s| s.iter_mut().zip(g).for_each(|(d, gv)| *d += gv * wk));
                }
                acc(*weights, &|s| {
                    for &(k, x) in terms {
                        s[k] += g.iter().zip(val(x)).map(|(a, b)| a * b).sum::<f64>();
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &|s| s.iter_mut().zip(g).for_each(|(d, gv)| *d += gv * c)),
            Op::Relu(a) => acc(*a, &|s| {
                s.iter_mut()
                    .zip(g)
                    .zip(out)
                    .for_each(|((d, gv), y)| {
                        if *y > 0.0 {
                            *d += gv
                        }
                    })
            }),
            Op::Tanh(a) => acc(*a, &|s| {
                s.iter_mut().zip(g).zip(out).for_each(|((d, gv), y)| *d += gv * (1.0 - y * y))
            }),
            Op::Sigmoid(a) => acc(*a, &|s| {
                s.iter_mut().zip(g).zip(out).for_each(|((d, gv), y)| *d += gv * y * (1.0 - y))
            }),
            Op::Log(a) => {
                let x = val(*a);
                acc(*a, &|s| s.iter_mut().zip(g).zip(x).for_each(|((d, gv), x)| *d += gv / x))
            }
            Op::Softmax(a) => {
                let width = last_dim(&nodes[id].value);
                acc(*a, &|s| {
                    for ((srow, grow), yrow) in s.chunks_mut(width).zip(g.chunks(width)).zip(out.chunks(width)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for ((d, gv), y) in srow.iter_mut().zip(grow).zip(yrow) {
                            *d += y * (gv - dot);
                        }
                    }
                })
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                let classes = probs.len() / labels.len();
                let scale = g[0] / labels.len() as f64;
                acc(*logits, &|s| {
                    for (r, &l) in labels.iter().enumerate() {
                        for c in 0..classes {
                            let onehot = if c == l { 1.0 } else { 0.0 };
                            s[r * classes + c] += scale * (probs[r * classes + c] - onehot);
                        }
                    }
                })
            }
            Op::Sum(a) => acc(*a, &|s| s.iter_mut().for_each(|d| *d += g[0])),
            Op::Mean { x, outer, len, inner } => {
                let inv = 1.0 / *len as f64;
                acc(*x, &|s| {
                    for o in 0..*outer {
                        let grow = &g[o * inner..][..*inner];
                        for l in 0..*len {
                            for (d, gv) in s[(o * len + l) * inner..][..*inner].iter_mut().zip(grow) {
                                *d += gv * inv;
                            }
                        }
                    }
                })
            }
            Op::Linear { x, w, b, rows, k, out: o } => {
                if nodes[*x].needs_grad {
                    let gx = kernels::linear_backward_input(g, val(*w), *rows, *k, *o);
                    acc(*x, &|s| add_into(s, &gx));
                }
                if nodes[*w].needs_grad {
                    let gw = kernels::linear_backward_weight(g, val(*x), *rows, *k, *o);
                    acc(*w, &|s| add_into(s, &gw));
                }
                if let Some(b) = b {
                    acc(*b, &|s| {
                        for row in g.chunks(*o) {
                            add_into(s, row);
                        }
                    });
                }
            }
            Op::Conv { x, w, geom } => {
                if nodes[*x].needs_grad {
                    let gx = kernels::conv2d_backward_input(g, val(*w), geom);
                    acc(*x, &|s| add_into(s, &gx));
                }
                if nodes[*w].needs_grad {
                    let gw = kernels::conv2d_backward_weight(g, val(*x), geom);
                    acc(*w, &|s| add_into(s, &gw));
                }
            }
            Op::MaxPool { x, geom, arg } => {
                let gx = kernels::max_pool_backward(g, arg, geom);
                acc(*x, &|s| add_into(s, &gx));
            }
            Op::AvgPool { x, geom } => {
                let gx = kernels::avg_pool_backward(g, geom);
                acc(*x, &|s| add_into(s, &gx));
            }
            Op::BatchNorm {
                x,
                xhat,
                inv_std,
                batch_stats,
                n,
                c,
                s: sp,
            } => acc(*x, &|dst| {
                let m = (n * sp) as f64;
                for ch in 0..*c {
                    let (mut sg, mut sgx) = (0.0, 0.0);
                    if *batch_stats {
                        for b in 0..*n {
                            let off = (b * c + ch) * sp;
                            for i in 0..*sp {
                                sg += g[off + i];
                                sgx += g[off + i] * xhat[off + i];
                            }
                        }
                    }
                    for b in 0..*n {
                        let off = (b * c + ch) * sp;
                        for i in 0..*sp {
                            dst[off + i] += if *batch_stats {
                                inv_std[ch] / m * (m * g[off + i] - sg - xhat[off + i] * sgx)
                            } else {
                                inv_std[ch] * g[off + i]
                            };
                        }
                    }
                }
            }),
            Op::ChannelAffine { x, gamma, beta, n, c, s: sp } => {
                let gam = gamma.map(val);
                acc(*x, &|dst| {
                    for b in 0..*n {
                        for ch in 0..*c {
                            let gv = gam.map_or(1.0, |gm| gm[ch]);
                            let off = (b * c + ch) * sp;
                            for i in 0..*sp {
                                dst[off + i] += g[off + i] * gv;
                            }
                        }
                    }
                });
                if let Some(gm) = gamma {
                    let xv = val(*x);
                    acc(*gm, &|dst| {
                        for b in 0..*n {
                            for (ch, d) in dst.iter_mut().enumerate() {
                                let off = (b * c + ch) * sp;
                                *d += (0..*sp).map(|i| g[off + i] * xv[off + i]).sum::<f64>();
                            }
                        }
                    });
                }
                if let Some(bt) = beta {
                    acc(*bt, &|dst| {
                        for b in 0..*n {
                            for (ch, d) in dst.iter_mut().enumerate() {
                                *d += g[(b * c + ch) * sp..][..*sp].iter().sum::<f64>();
                            }
                        }
                    });
                }
            }
            Op::Reshape(a) => acc(*a, &|s| add_into(s, g)),
            Op::SwapMiddle { x, dims } => {
                let [d0, d1, d2, d3] = *dims;
                let back = swap_middle_data(g, [d0, d2, d1, d3]);
                acc(*x, &|s| add_into(s, &back));
            }
            Op::Concat { xs, outer, lens, inner } => {
                let total: usize = lens.iter().sum();
                let mut offset = 0;
                for (&x, &len) in xs.iter().zip(lens) {
                    acc(x, &|s| {
                        for o in 0..*outer {
                            add_into(&mut s[o * len * inner..][..len * inner], &g[(o * total + offset) * inner..][..len * inner]);
                        }
                    });
                    offset += len;
                }
            }
            Op::Slice {
                x,
                outer,
                total,
                start,
                len,
                inner,
            } => acc(*x, &|s| {
                for o in 0..*outer {
                    add_into(&mut s[(o * total + start) * inner..][..len * inner], &g[o * len * inner..][..len * inner]);
                }
            }),
            Op::LstmCell { pre, c_prev, rows, hidden } => {
                let h = *hidden;
                let p = val(*pre);
                let c0 = val(*c_prev);
                let mut gpre = vec![0.0; rows * 4 * h];
                let mut gc0 = vec![0.0; rows * h];
                for r in 0..*rows {
                    let pr = &p[r * 4 * h..][..4 * h];
                    for j in 0..h {
                        let i = sigmoid(pr[j]);
                        let f = sigmoid(pr[h + j]);
                        let gg = pr[2 * h + j].tanh();
                        let o = sigmoid(pr[3 * h + j]);
                        let c = out[r * 2 * h + h + j];
                        let tc = c.tanh();
                        let gh = g[r * 2 * h + j];
                        let gc = g[r * 2 * h + h + j] + gh * o * (1.0 - tc * tc);
                        let dst = &mut gpre[r * 4 * h..][..4 * h];
                        dst[j] = gc * gg * i * (1.0 - i);
                        dst[h + j] = gc * c0[r * h + j] * f * (1.0 - f);
                        dst[2 * h + j] = gc * i * (1.0 - gg * gg);
                        dst[3 * h + j] = gh * tc * o * (1.0 - o);
                        gc0[r * h + j] = gc * f;
                    }
                }
                acc(*pre, &|s| add_into(s, &gpre));
                acc(*c_prev, &|s| add_into(s, &gc0));
            }
            Op::MulRows { x, s: sv, width } => {
                let scales = val(*sv);
                let xv = val(*x);
                acc(*x, &|dst| {
                    for ((drow, grow), &k) in dst.chunks_mut(*width).zip(g.chunks(*width)).zip(scales) {
                        for (d, gv) in drow.iter_mut().zip(grow) {
                            *d += gv * k;
                        }
                    }
                });
                acc(*sv, &|dst| {
                    for ((d, grow), xrow) in dst.iter_mut().zip(g.chunks(*width)).zip(xv.chunks(*width)) {
                        *d += grow.iter().zip(xrow).map(|(a, b)| a * b).sum::<f64>();
                    }
                });
            }
            Op::Shift2d { x, planes, h, w } => acc(*x, &|s| {
                for p in 0..*planes {
                    for i in 0..h.saturating_sub(1) {
                        for j in 0..w.saturating_sub(1) {
                            s[(p * h + i + 1) * w + j + 1] += g[(p * h + i) * w + j];
                        }
                    }
                }
            }),
            Op::Subsample2d { x, planes, h, w } => acc(*x, &|s| {
                let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
                for p in 0..*planes {
                    for i in 0..oh {
                        for j in 0..ow {
                            s[(p * h + 2 * i) * w + 2 * j] += g[(p * oh + i) * ow + j];
                        }
                    }
                }
            }),
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn swap_middle_data(src: &[f64], [d0, d1, d2, d3]: [usize; 4]) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for a in 0..d0 {
        for b in 0..d1 {
            for c in 0..d2 {
                let from = ((a * d1 + b) * d2 + c) * d3;
                let to = ((a * d2 + c) * d1 + b) * d3;
                out[to..to + d3].copy_from_slice(&src[from..from + d3]);
            }
        }
    }
    out
}
