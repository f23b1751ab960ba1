//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation as a node; [`Tape::backward`] walks the
//! nodes in reverse creation order, so the recording order is a valid
//! topological order and cycles cannot be expressed.

use std::fmt;

use super::kernels::{self, ConvGeom};
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Clamp applied to probabilities before taking logarithms.
pub const PROB_EPS: f64 = 1e-7;
/// Variance floor inside batch and instance normalization.
pub const NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for operations implemented outside this module.
pub trait CustomBackward<T: Real>: Send {
    fn name(&self) -> &'static str;

    /// Gradients for each input given the upstream gradient of the output.
    /// `None` marks an input that receives no gradient.
    fn backward(&self, inputs: &[&Tensor<T>], output: &Tensor<T>, grad_out: &[T]) -> Result<Vec<Option<Vec<T>>>>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormKind {
    /// Statistics over every axis but the last (batch norm, train mode).
    Batch,
    /// Statistics over the spatial axes of each sample (instance norm).
    Instance,
}

/// Per-channel statistics produced by a train-mode normalization.
#[derive(Clone, Debug)]
pub struct NormStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub count: usize,
}

enum Op<T: Real> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddBias(Var, Var),
    Matmul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Conv2d { x: Var, w: Var, geom: ConvGeom, cout: usize, cols: Vec<T> },
    ConvTranspose2d { x: Var, w: Var, geom: ConvGeom, cin: usize },
    Relu(Var),
    LeakyRelu(Var, T),
    Tanh(Var),
    Sigmoid(Var),
    MaxPool2 { x: Var, argmax: Vec<usize> },
    GlobalAvgPool { x: Var, spatial: usize, c: usize },
    Normalize { x: Var, block: usize, c: usize, count: usize, inv_std: Vec<T> },
    FixedNormalize { x: Var, inv_std: Vec<T> },
    ChannelAffine { x: Var, gamma: Var, beta: Var },
    Concat { a: Var, b: Var, ca: usize, cb: usize },
    Select { x: Var, indices: Vec<usize> },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    L2NormalizeRows { x: Var, d: usize, norms: Vec<T> },
    Bce { pred: Var, target: Vec<T> },
    L1(Var, Var),
    Mse(Var, Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<T> },
    Nll { probs: Var, targets: Vec<usize> },
    Custom { inputs: Vec<Var>, op: Box<dyn CustomBackward<T>> },
}

struct Node<T: Real> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Recording of a forward computation.
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    backward_done: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> fmt::Debug for Tape<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.nodes.len()).field("backward_done", &self.backward_done).finish()
    }
}

fn same_shape<T: Real>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{what}: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn clamp_prob<T: Real>(p: T) -> T {
    let eps = T::lit(PROB_EPS);
    p.max(eps).min(T::one() - eps)
}

fn in_clamp<T: Real>(p: T) -> bool {
    let eps = T::lit(PROB_EPS);
    p >= eps && p <= T::one() - eps
}

fn nhwc(t: &Tensor<impl Real>, what: &str) -> Result<(usize, usize, usize, usize)> {
    match *t.shape() {
        [n, h, w, c] => Ok((n, h, w, c)),
        [h, w, c] => Ok((1, h, w, c)),
        ref s => Err(Error::Shape(format!("{what}: expected [N,H,W,C] or [H,W,C], got {s:?}"))),
    }
}

fn out_shape(input_rank: usize, n: usize, h: usize, w: usize, c: usize) -> Vec<usize> {
    if input_rank == 3 {
        vec![h, w, c]
    } else {
        vec![n, h, w, c]
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new(), backward_done: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Result<Var> {
        if self.backward_done {
            return Err(Error::State("tape already consumed by backward; start a new tape".into()));
        }
        value.check_finite(op_name(&op))?;
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node { value, requires_grad, op });
        self.grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a leaf. Leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        if self.backward_done {
            return Err(Error::State("tape already consumed by backward; start a new tape".into()));
        }
        value.check_finite("leaf")?;
        self.nodes.push(Node { value, requires_grad, op: Op::Leaf });
        self.grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn param(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated for `v` by the last [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Tensor::new(self.nodes[v.0].value.shape().to_vec(), g.clone()).ok()
    }

    // ---- elementwise -------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(ta, tb, "add")?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(ta, tb, "sub")?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x - y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(ta, tb, "mul")?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let out = self.value(a).map(|x| x * c);
        self.push(out, Op::Scale(a, c), &[a])
    }

    /// `x[..., C] + b[C]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        let c = *tx.shape().last().unwrap_or(&1);
        if tb.len() != c {
            return Err(Error::Shape(format!("add_bias: {} channels vs bias of {}", c, tb.len())));
        }
        let data = tx.data().iter().enumerate().map(|(i, &v)| v + tb.data()[i % c]).collect();
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        self.push(out, Op::AddBias(x, b), &[x, b])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x.max(T::zero()));
        self.push(out, Op::Relu(a), &[a])
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Result<Var> {
        let out = self.value(a).map(|x| if x > T::zero() { x } else { x * slope });
        self.push(out, Op::LeakyRelu(a, slope), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x.tanh());
        self.push(out, Op::Tanh(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a), &[a])
    }

    // ---- linear algebra ----------------------------------------------------

    /// `[M, K] x [K, N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k, n) = match (ta.shape(), tb.shape()) {
            ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
            (sa, sb) => return Err(Error::Shape(format!("matmul: {sa:?} x {sb:?}"))),
        };
        let mut out = vec![T::zero(); m * n];
        kernels::matmul(ta.data(), tb.data(), m, k, n, false, false, &mut out, false);
        let out = Tensor::new(vec![m, n], out)?;
        self.push(out, Op::Matmul { a, b, m, k, n }, &[a, b])
    }

    /// Cross-correlation of `x: [N,H,W,Cin]` (or `[H,W,Cin]`) with
    /// `w: [k,k,Cin,Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        let (n, h, wd, c) = nhwc(tx, "conv2d input")?;
        let (k, cout) = match *tw.shape() {
            [k, k2, cin, cout] if k == k2 && cin == c => (k, cout),
            [_, _, cin, _] if cin != c => {
                return Err(Error::Shape(format!("conv2d: input has {c} channels, kernel expects {cin}")))
            }
            ref s => return Err(Error::Shape(format!("conv2d: kernel must be [k,k,Cin,Cout], got {s:?}"))),
        };
        let geom = ConvGeom::new(n, h, wd, c, k, stride, pad)
            .ok_or_else(|| Error::Shape(format!("conv2d: kernel {k} does not fit {h}x{wd} with padding {pad}")))?;
        let cols = kernels::im2col(tx.data(), &geom);
        let mut out = vec![T::zero(); geom.rows() * cout];
        kernels::matmul(&cols, tw.data(), geom.rows(), geom.patch_len(), cout, false, false, &mut out, false);
        let out = Tensor::new(out_shape(tx.rank(), n, geom.ho, geom.wo, cout), out)?;
        self.push(out, Op::Conv2d { x, w, geom, cout, cols }, &[x, w])
    }

    /// Transposed convolution: the adjoint of `conv2d` with kernel
    /// `w: [k,k,Cout,Cin]` mapping the output grid back onto the input grid.
    /// Output spatial size is `(H-1)*stride - 2*pad + k`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        let (n, h, wd, cin) = nhwc(tx, "conv_transpose2d input")?;
        let (k, cout) = match *tw.shape() {
            [k, k2, cout, c] if k == k2 && c == cin => (k, cout),
            ref s => {
                return Err(Error::Shape(format!(
                    "conv_transpose2d: kernel must be [k,k,Cout,{cin}], got {s:?}"
                )))
            }
        };
        if stride == 0 || (h - 1) * stride + k < 2 * pad + 1 {
            return Err(Error::Shape("conv_transpose2d: empty output".into()));
        }
        let ho = (h - 1) * stride + k - 2 * pad;
        let wo = (wd - 1) * stride + k - 2 * pad;
        let geom = ConvGeom::new(n, ho, wo, cout, k, stride, pad)
            .filter(|g| g.ho == h && g.wo == wd)
            .ok_or_else(|| Error::Shape("conv_transpose2d: inconsistent geometry".into()))?;
        // cols[N*H*W, k*k*Cout] = x[N*H*W, Cin] * w^T
        let mut cols = vec![T::zero(); geom.rows() * geom.patch_len()];
        kernels::matmul(tx.data(), tw.data(), geom.rows(), cin, geom.patch_len(), false, true, &mut cols, false);
        let out = kernels::col2im(&cols, &geom);
        let out = Tensor::new(out_shape(tx.rank(), n, ho, wo, cout), out)?;
        self.push(out, Op::ConvTranspose2d { x, w, geom, cin }, &[x, w])
    }

    // ---- pooling and normalization -------------------------------------------

    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (n, h, w, c) = nhwc(tx, "max_pool2")?;
        if h < 2 || w < 2 {
            return Err(Error::Shape(format!("max_pool2 needs spatial dims >= 2, got {h}x{w}")));
        }
        let (out, argmax) = kernels::max_pool2(tx.data(), n, h, w, c);
        let out = Tensor::new(out_shape(tx.rank(), n, h / 2, w / 2, c), out)?;
        self.push(out, Op::MaxPool2 { x, argmax }, &[x])
    }

    /// `[N,H,W,C] -> [N,C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (n, h, w, c) = nhwc(tx, "global_avg_pool")?;
        let spatial = h * w;
        let inv = T::one() / T::from_usize(spatial).unwrap();
        let mut out = vec![T::zero(); n * c];
        for (i, &v) in tx.data().iter().enumerate() {
            out[(i / (spatial * c)) * c + i % c] += v * inv;
        }
        let out = Tensor::new(vec![n, c], out)?;
        self.push(out, Op::GlobalAvgPool { x, spatial, c }, &[x])
    }

    /// Zero-mean unit-variance normalization with statistics computed from
    /// the input. Returns the batch statistics for running-average updates.
    pub fn normalize(&mut self, x: Var, kind: NormKind) -> Result<(Var, NormStats<T>)> {
        let tx = self.value(x);
        let c = *tx.shape().last().ok_or_else(|| Error::Shape("normalize on scalar".into()))?;
        let block = match kind {
            NormKind::Batch => tx.len(),
            NormKind::Instance => {
                let (_, h, w, c) = nhwc(tx, "instance norm")?;
                h * w * c
            }
        };
        let groups = (tx.len() / block) * c;
        let count = block / c;
        if kind == NormKind::Batch && count < 2 {
            return Err(Error::Shape("batch norm needs more than one value per channel".into()));
        }
        let group = |i: usize| (i / block) * c + i % c;
        let cnt = T::from_usize(count).unwrap();
        let mut mean = vec![T::zero(); groups];
        for (i, &v) in tx.data().iter().enumerate() {
            mean[group(i)] += v;
        }
        mean.iter_mut().for_each(|m| *m /= cnt);
        let mut var = vec![T::zero(); groups];
        for (i, &v) in tx.data().iter().enumerate() {
            let d = v - mean[group(i)];
            var[group(i)] += d * d;
        }
        var.iter_mut().for_each(|v| *v /= cnt);
        let eps = T::lit(NORM_EPS);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let data = tx.data().iter().enumerate().map(|(i, &v)| (v - mean[group(i)]) * inv_std[group(i)]).collect();
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let stats = NormStats { mean, var, count };
        let v = self.push(out, Op::Normalize { x, block, c, count, inv_std }, &[x])?;
        Ok((v, stats))
    }

    /// Normalization with externally supplied per-channel statistics.
    pub fn normalize_fixed(&mut self, x: Var, mean: &[T], var: &[T]) -> Result<Var> {
        let tx = self.value(x);
        let c = *tx.shape().last().unwrap_or(&1);
        if mean.len() != c || var.len() != c {
            return Err(Error::Shape(format!("normalize_fixed: {c} channels vs {} statistics", mean.len())));
        }
        let eps = T::lit(NORM_EPS);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let data = tx.data().iter().enumerate().map(|(i, &v)| (v - mean[i % c]) * inv_std[i % c]).collect();
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        self.push(out, Op::FixedNormalize { x, inv_std }, &[x])
    }

    /// `gamma[c] * x + beta[c]` over the last axis.
    pub fn channel_affine(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let c = *tx.shape().last().unwrap_or(&1);
        if tg.len() != c || tb.len() != c {
            return Err(Error::Shape("channel_affine: parameter length mismatch".into()));
        }
        let data =
            tx.data().iter().enumerate().map(|(i, &v)| tg.data()[i % c] * v + tb.data()[i % c]).collect();
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        self.push(out, Op::ChannelAffine { x, gamma, beta }, &[x, gamma, beta])
    }

    // ---- shape manipulation ------------------------------------------------

    /// Concatenates along the last axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != sb.len() || sa.is_empty() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(Error::Shape(format!("concat: {sa:?} vs {sb:?}")));
        }
        let (ca, cb) = (sa[sa.len() - 1], sb[sb.len() - 1]);
        let rows = ta.len() / ca;
        let mut data = Vec::with_capacity(ta.len() + tb.len());
        for r in 0..rows {
            data.extend_from_slice(&ta.data()[r * ca..(r + 1) * ca]);
            data.extend_from_slice(&tb.data()[r * cb..(r + 1) * cb]);
        }
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = ca + cb;
        let out = Tensor::new(shape, data)?;
        self.push(out, Op::Concat { a, b, ca, cb }, &[a, b])
    }

    /// Flat gather: output is a vector of the selected elements.
    pub fn select(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        if indices.is_empty() {
            return Err(Error::Argument("select with no indices".into()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= tx.len()) {
            return Err(Error::Argument(format!("select index {bad} out of range {}", tx.len())));
        }
        let data = indices.iter().map(|&i| tx.data()[i]).collect();
        let out = Tensor::new(vec![indices.len()], data)?;
        self.push(out, Op::Select { x, indices: indices.to_vec() }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        self.push(out, Op::Reshape(x), &[x])
    }

    // ---- reductions ----------------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = t.data().iter().copied().sum::<T>() / T::from_usize(t.len()).unwrap();
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Divides each row of `[N, D]` by its Euclidean norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let [n, d] = *tx.shape() else {
            return Err(Error::Shape(format!("l2_normalize_rows expects [N,D], got {:?}", tx.shape())));
        };
        let mut norms = Vec::with_capacity(n);
        let mut data = Vec::with_capacity(n * d);
        for r in 0..n {
            let row = tx.row(r);
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            if norm <= T::zero() {
                return Err(Error::Normalization(format!("row {r} has zero norm")));
            }
            norms.push(norm);
            data.extend(row.iter().map(|&v| v / norm));
        }
        let out = Tensor::new(vec![n, d], data)?;
        self.push(out, Op::L2NormalizeRows { x, d, norms }, &[x])
    }

    // ---- losses --------------------------------------------------------------

    /// Mean binary cross-entropy of probabilities against targets in {0, 1}.
    pub fn bce(&mut self, pred: Var, target: &[T]) -> Result<Var> {
        let tp = self.value(pred);
        if tp.len() != target.len() {
            return Err(Error::Shape(format!("bce: {} predictions vs {} targets", tp.len(), target.len())));
        }
        let n = T::from_usize(tp.len()).unwrap();
        let loss = tp
            .data()
            .iter()
            .zip(target)
            .map(|(&p, &t)| {
                let p = clamp_prob(p);
                -(t * p.ln() + (T::one() - t) * (T::one() - p).ln())
            })
            .sum::<T>()
            / n;
        self.push(Tensor::scalar(loss), Op::Bce { pred, target: target.to_vec() }, &[pred])
    }

    /// Mean absolute difference.
    pub fn l1(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(ta, tb, "l1")?;
        let n = T::from_usize(ta.len()).unwrap();
        let loss = ta.data().iter().zip(tb.data()).map(|(&x, &y)| (x - y).abs()).sum::<T>() / n;
        self.push(Tensor::scalar(loss), Op::L1(a, b), &[a, b])
    }

    /// Mean squared difference.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(ta, tb, "mse")?;
        let n = T::from_usize(ta.len()).unwrap();
        let loss = ta.data().iter().zip(tb.data()).map(|(&x, &y)| (x - y) * (x - y)).sum::<T>() / n;
        self.push(Tensor::scalar(loss), Op::Mse(a, b), &[a, b])
    }

    /// Softmax cross-entropy of `[N, K]` logits, mean over rows.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let tl = self.value(logits);
        let [n, k] = *tl.shape() else {
            return Err(Error::Shape(format!("cross_entropy expects [N,K], got {:?}", tl.shape())));
        };
        check_targets(n, k, targets)?;
        let mut probs = Vec::with_capacity(n * k);
        let mut loss = T::zero();
        for (r, &t) in targets.iter().enumerate() {
            let row = tl.row(r);
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&v| (v - mx).exp()).sum();
            loss += z.ln() - (row[t] - mx);
            probs.extend(row.iter().map(|&v| (v - mx).exp() / z));
        }
        let loss = loss / T::from_usize(n).unwrap();
        self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, targets: targets.to_vec(), probs }, &[logits])
    }

    /// Cross-entropy of `[N, K]` rows that are already probabilities.
    pub fn nll_prob(&mut self, probs: Var, targets: &[usize]) -> Result<Var> {
        let tp = self.value(probs);
        let [n, k] = *tp.shape() else {
            return Err(Error::Shape(format!("nll_prob expects [N,K], got {:?}", tp.shape())));
        };
        check_targets(n, k, targets)?;
        let loss = targets.iter().enumerate().map(|(r, &t)| -clamp_prob(tp.row(r)[t]).ln()).sum::<T>()
            / T::from_usize(n).unwrap();
        self.push(Tensor::scalar(loss), Op::Nll { probs, targets: targets.to_vec() }, &[probs])
    }

    /// Records an externally computed result with a custom backward rule.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor<T>, op: Box<dyn CustomBackward<T>>) -> Result<Var> {
        self.push(output, Op::Custom { inputs: inputs.to_vec(), op }, inputs)
    }

    // ---- backward ------------------------------------------------------------

    /// Reverse accumulation from a scalar `loss`. A tape supports a single
    /// backward pass.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::State("backward already ran on this tape".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Shape(format!("backward needs a scalar loss, got {:?}", self.value(loss).shape())));
        }
        self.backward_done = true;
        self.grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            self.propagate(i, &g)?;
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn acc(&mut self, v: Var, f: impl FnOnce(&mut [T])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let len = self.nodes[v.0].value.len();
        let g = self.grads[v.0].get_or_insert_with(|| vec![T::zero(); len]);
        f(g);
    }

    fn acc_vec(&mut self, v: Var, src: &[T]) {
        self.acc(v, |g| g.iter_mut().zip(src).for_each(|(d, &s)| *d += s));
    }

    fn propagate(&mut self, i: usize, g: &[T]) -> Result<()> {
        // Temporarily take the op so `self` can be mutated while reading it.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        let res = self.propagate_op(i, &op, g);
        self.nodes[i].op = op;
        res
    }

    fn propagate_op(&mut self, i: usize, op: &Op<T>, g: &[T]) -> Result<()> {
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc_vec(a, g);
                self.acc_vec(b, g);
            }
            Op::Sub(a, b) => {
                self.acc_vec(a, g);
                self.acc(b, |d| d.iter_mut().zip(g).for_each(|(d, &s)| *d -= s));
            }
            Op::Mul(a, b) => {
                let va = self.value(a).data().to_vec();
                let vb = self.value(b).data().to_vec();
                self.acc(a, |d| d.iter_mut().zip(g.iter().zip(&vb)).for_each(|(d, (&s, &y))| *d += s * y));
                self.acc(b, |d| d.iter_mut().zip(g.iter().zip(&va)).for_each(|(d, (&s, &x))| *d += s * x));
            }
            Op::Scale(a, c) => self.acc(a, |d| d.iter_mut().zip(g).for_each(|(d, &s)| *d += s * c)),
            Op::AddBias(x, b) => {
                self.acc_vec(x, g);
                let c = self.value(b).len();
                self.acc(b, |d| g.iter().enumerate().for_each(|(j, &s)| d[j % c] += s));
            }
            Op::Matmul { a, b, m, k, n } => {
                if self.requires_grad(a) {
                    let vb = self.value(b).data().to_vec();
                    self.acc(a, |d| kernels::matmul(g, &vb, m, n, k, false, true, d, true));
                }
                if self.requires_grad(b) {
                    let va = self.value(a).data().to_vec();
                    self.acc(b, |d| kernels::matmul(&va, g, k, m, n, true, false, d, true));
                }
            }
            Op::Conv2d { x, w, ref geom, cout, ref cols } => {
                if self.requires_grad(w) {
                    self.acc(w, |d| kernels::matmul(cols, g, geom.patch_len(), geom.rows(), cout, true, false, d, true));
                }
                if self.requires_grad(x) {
                    let vw = self.value(w).data().to_vec();
                    let mut dcols = vec![T::zero(); geom.rows() * geom.patch_len()];
                    kernels::matmul(g, &vw, geom.rows(), cout, geom.patch_len(), false, true, &mut dcols, false);
                    let dx = kernels::col2im(&dcols, geom);
                    self.acc_vec(x, &dx);
                }
            }
            Op::ConvTranspose2d { x, w, ref geom, cin } => {
                // output grid is the conv input; the transpose input is the conv output
                let gcols = kernels::im2col(g, geom);
                if self.requires_grad(x) {
                    let vw = self.value(w).data().to_vec();
                    self.acc(x, |d| kernels::matmul(&gcols, &vw, geom.rows(), geom.patch_len(), cin, false, false, d, true));
                }
                if self.requires_grad(w) {
                    let vx = self.value(x).data().to_vec();
                    self.acc(w, |d| kernels::matmul(&gcols, &vx, geom.patch_len(), geom.rows(), cin, true, false, d, true));
                }
            }
            Op::Relu(a) => {
                let va = self.value(a).data().to_vec();
                self.acc(a, |d| {
                    d.iter_mut().zip(g.iter().zip(&va)).for_each(|(d, (&s, &x))| {
                        if x > T::zero() {
                            *d += s
                        }
                    })
                });
            }
            Op::LeakyRelu(a, slope) => {
                let va = self.value(a).data().to_vec();
                self.acc(a, |d| {
                    d.iter_mut()
                        .zip(g.iter().zip(&va))
                        .for_each(|(d, (&s, &x))| *d += if x > T::zero() { s } else { s * slope })
                });
            }
            Op::Tanh(a) => {
                let y = self.nodes[i].value.data().to_vec();
                self.acc(a, |d| d.iter_mut().zip(g.iter().zip(&y)).for_each(|(d, (&s, &y))| *d += s * (T::one() - y * y)));
            }
            Op::Sigmoid(a) => {
                let y = self.nodes[i].value.data().to_vec();
                self.acc(a, |d| d.iter_mut().zip(g.iter().zip(&y)).for_each(|(d, (&s, &y))| *d += s * y * (T::one() - y)));
            }
            Op::MaxPool2 { x, ref argmax } => {
                self.acc(x, |d| argmax.iter().zip(g).for_each(|(&j, &s)| d[j] += s));
            }
            Op::GlobalAvgPool { x, spatial, c } => {
                let inv = T::one() / T::from_usize(spatial).unwrap();
                self.acc(x, |d| {
                    for (j, dj) in d.iter_mut().enumerate() {
                        *dj += g[(j / (spatial * c)) * c + j % c] * inv;
                    }
                });
            }
            Op::Normalize { x, block, c, count, ref inv_std } => {
                let xhat = self.nodes[i].value.data().to_vec();
                let group = |j: usize| (j / block) * c + j % c;
                let mut sum_g = vec![T::zero(); inv_std.len()];
                let mut sum_gx = vec![T::zero(); inv_std.len()];
                for j in 0..g.len() {
                    sum_g[group(j)] += g[j];
                    sum_gx[group(j)] += g[j] * xhat[j];
                }
                let m = T::from_usize(count).unwrap();
                self.acc(x, |d| {
                    for j in 0..d.len() {
                        let q = group(j);
                        d[j] += inv_std[q] / m * (m * g[j] - sum_g[q] - xhat[j] * sum_gx[q]);
                    }
                });
            }
            Op::FixedNormalize { x, ref inv_std } => {
                let c = inv_std.len();
                self.acc(x, |d| d.iter_mut().enumerate().for_each(|(j, dj)| *dj += g[j] * inv_std[j % c]));
            }
            Op::ChannelAffine { x, gamma, beta } => {
                let vx = self.value(x).data().to_vec();
                let vg = self.value(gamma).data().to_vec();
                let c = vg.len();
                self.acc(x, |d| d.iter_mut().enumerate().for_each(|(j, dj)| *dj += g[j] * vg[j % c]));
                self.acc(gamma, |d| g.iter().zip(&vx).enumerate().for_each(|(j, (&s, &v))| d[j % c] += s * v));
                self.acc(beta, |d| g.iter().enumerate().for_each(|(j, &s)| d[j % c] += s));
            }
            Op::Concat { a, b, ca, cb } => {
                let w = ca + cb;
                self.acc(a, |d| {
                    for (r, row) in d.chunks_mut(ca).enumerate() {
                        row.iter_mut().zip(&g[r * w..r * w + ca]).for_each(|(d, &s)| *d += s);
                    }
                });
                self.acc(b, |d| {
                    for (r, row) in d.chunks_mut(cb).enumerate() {
                        row.iter_mut().zip(&g[r * w + ca..(r + 1) * w]).for_each(|(d, &s)| *d += s);
                    }
                });
            }
            Op::Select { x, ref indices } => {
                self.acc(x, |d| indices.iter().zip(g).for_each(|(&j, &s)| d[j] += s));
            }
            Op::Reshape(x) => self.acc_vec(x, g),
            Op::Sum(x) => self.acc(x, |d| d.iter_mut().for_each(|d| *d += g[0])),
            Op::Mean(x) => {
                let n = T::from_usize(self.value(x).len()).unwrap();
                self.acc(x, |d| d.iter_mut().for_each(|d| *d += g[0] / n));
            }
            Op::L2NormalizeRows { x, d: dim, ref norms } => {
                let y = self.nodes[i].value.data().to_vec();
                self.acc(x, |d| {
                    for (r, &norm) in norms.iter().enumerate() {
                        let (yr, gr) = (&y[r * dim..(r + 1) * dim], &g[r * dim..(r + 1) * dim]);
                        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for j in 0..dim {
                            d[r * dim + j] += (gr[j] - yr[j] * dot) / norm;
                        }
                    }
                });
            }
            Op::Bce { pred, ref target } => {
                let vp = self.value(pred).data().to_vec();
                let n = T::from_usize(vp.len()).unwrap();
                self.acc(pred, |d| {
                    for ((dj, &p), &t) in d.iter_mut().zip(&vp).zip(target) {
                        if in_clamp(p) {
                            *dj += -g[0] * (t / p - (T::one() - t) / (T::one() - p)) / n;
                        }
                    }
                });
            }
            Op::L1(a, b) => {
                let (va, vb) = (self.value(a).data().to_vec(), self.value(b).data().to_vec());
                let n = T::from_usize(va.len()).unwrap();
                let sg: Vec<T> = va.iter().zip(&vb).map(|(&x, &y)| sign(x - y) * g[0] / n).collect();
                self.acc_vec(a, &sg);
                self.acc(b, |d| d.iter_mut().zip(&sg).for_each(|(d, &s)| *d -= s));
            }
            Op::Mse(a, b) => {
                let (va, vb) = (self.value(a).data().to_vec(), self.value(b).data().to_vec());
                let n = T::from_usize(va.len()).unwrap();
                let two = T::lit(2.0);
                let sg: Vec<T> = va.iter().zip(&vb).map(|(&x, &y)| two * (x - y) * g[0] / n).collect();
                self.acc_vec(a, &sg);
                self.acc(b, |d| d.iter_mut().zip(&sg).for_each(|(d, &s)| *d -= s));
            }
            Op::CrossEntropy { logits, ref targets, ref probs } => {
                let n = targets.len();
                let k = probs.len() / n;
                let nn = T::from_usize(n).unwrap();
                self.acc(logits, |d| {
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..k {
                            let onehot = if j == t { T::one() } else { T::zero() };
                            d[r * k + j] += g[0] * (probs[r * k + j] - onehot) / nn;
                        }
                    }
                });
            }
            Op::Nll { probs, ref targets } => {
                let vp = self.value(probs).data().to_vec();
                let n = targets.len();
                let k = vp.len() / n;
                let nn = T::from_usize(n).unwrap();
                self.acc(probs, |d| {
                    for (r, &t) in targets.iter().enumerate() {
                        let p = vp[r * k + t];
                        if in_clamp(p) {
                            d[r * k + t] += -g[0] / (nn * p);
                        }
                    }
                });
            }
            Op::Custom { ref inputs, ref op } => {
                let grads = {
                    let vals: Vec<&Tensor<T>> = inputs.iter().map(|v| self.value(*v)).collect();
                    op.backward(&vals, &self.nodes[i].value, g)?
                };
                if grads.len() != inputs.len() {
                    return Err(Error::State(format!("{}: backward returned {} gradients", op.name(), grads.len())));
                }
                for (v, gi) in inputs.iter().zip(grads) {
                    if let Some(gi) = gi {
                        if gi.len() != self.value(*v).len() {
                            return Err(Error::Shape(format!("{}: gradient length mismatch", op.name())));
                        }
                        self.acc_vec(*v, &gi);
                    }
                }
            }
        }
        Ok(())
    }
}

fn check_targets(n: usize, k: usize, targets: &[usize]) -> Result<()> {
    if n == 0 || targets.is_empty() {
        return Err(Error::Argument("empty batch".into()));
    }
    if targets.len() != n {
        return Err(Error::Shape(format!("{n} rows vs {} targets", targets.len())));
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= k) {
        return Err(Error::Argument(format!("class index {t} out of range for {k} classes")));
    }
    Ok(())
}

fn sign<T: Real>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn op_name<T: Real>(op: &Op<T>) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::AddBias(..) => "add_bias",
        Op::Matmul { .. } => "matmul",
        Op::Conv2d { .. } => "conv2d",
        Op::ConvTranspose2d { .. } => "conv_transpose2d",
        Op::Relu(..) => "relu",
        Op::LeakyRelu(..) => "leaky_relu",
        Op::Tanh(..) => "tanh",
        Op::Sigmoid(..) => "sigmoid",
        Op::MaxPool2 { .. } => "max_pool2",
        Op::GlobalAvgPool { .. } => "global_avg_pool",
        Op::Normalize { .. } => "normalize",
        Op::FixedNormalize { .. } => "normalize_fixed",
        Op::ChannelAffine { .. } => "channel_affine",
        Op::Concat { .. } => "concat",
        Op::Select { .. } => "select",
        Op::Reshape(..) => "reshape",
        Op::Sum(..) => "sum",
        Op::Mean(..) => "mean",
        Op::L2NormalizeRows { .. } => "l2_normalize_rows",
        Op::Bce { .. } => "bce",
        Op::L1(..) => "l1",
        Op::Mse(..) => "mse",
        Op::CrossEntropy { .. } => "cross_entropy",
        Op::Nll { .. } => "nll_prob",
        Op::Custom { op, .. } => op.name(),
    }
}
