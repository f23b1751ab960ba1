//! Parameterised layers built on the tape primitives.

use rand::Rng;

use super::params::{ParamId, ParamStore};
use super::tape::{NormKind, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Negative slope of every leaky-ReLU in the crate.
pub const LEAKY_SLOPE: f64 = 0.2;
/// Weight of the previous running statistic in batch-norm updates.
pub const BN_MOMENTUM: f64 = 0.9;

/// Forward-pass context: the tape, the bound parameter leaves and the
/// non-trainable buffers (running statistics).
pub struct Ctx<'a, T: Real> {
    pub tape: &'a mut Tape<T>,
    pub vars: &'a [Var],
    pub buffers: &'a mut ParamStore<T>,
    pub train: bool,
}

impl<'a, T: Real> Ctx<'a, T> {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

/// He-uniform initialisation: `U(-sqrt(6/fan_in), sqrt(6/fan_in))`.
pub fn he_uniform<T: Real>(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor<T> {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape, |_| T::lit(rng.random_range(-bound..bound)))
}

#[derive(Clone, Copy, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        k: usize,
        cin: usize,
        cout: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), he_uniform(&[k, k, cin, cout], k * k * cin, rng));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[cout]));
        Self { weight, bias, stride, pad }
    }

    /// Same-size 3x3 convolution.
    pub fn same3<T: Real>(store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, rng: &mut impl Rng) -> Self {
        Self::new(store, name, 3, cin, cout, 1, 1, rng)
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let (w, b) = (cx.var(self.weight), cx.var(self.bias));
        let y = cx.tape.conv2d(x, w, self.stride, self.pad)?;
        cx.tape.add_bias(y, b)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ConvTranspose2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl ConvTranspose2d {
    /// `k x k` transposed convolution with stride `k` (exact upsampling by `k`).
    pub fn upsample<T: Real>(store: &mut ParamStore<T>, name: &str, k: usize, cin: usize, cout: usize, rng: &mut impl Rng) -> Self {
        let weight = store.add(format!("{name}.weight"), he_uniform(&[k, k, cout, cin], cin, rng));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[cout]));
        Self { weight, bias, stride: k, pad: 0 }
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let (w, b) = (cx.var(self.weight), cx.var(self.bias));
        let y = cx.tape.conv_transpose2d(x, w, self.stride, self.pad)?;
        cx.tape.add_bias(y, b)
    }
}

/// Fully connected layer on `[N, in]`, or applied at every position of an
/// `[N, H, W, in]` map.
#[derive(Clone, Copy, Debug)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Dense {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let weight = store.add(format!("{name}.weight"), he_uniform(&[fan_in, fan_out], fan_in, rng));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out]));
        Self { weight, bias, fan_in, fan_out }
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let shape = cx.tape.value(x).shape().to_vec();
        if shape.last() != Some(&self.fan_in) {
            return Err(Error::Shape(format!("dense expects last dim {}, got {shape:?}", self.fan_in)));
        }
        let rows = shape.iter().product::<usize>() / self.fan_in;
        let flat = if shape.len() == 2 { x } else { cx.tape.reshape(x, &[rows, self.fan_in])? };
        let y = cx.tape.matmul(flat, cx.var(self.weight))?;
        let y = cx.tape.add_bias(y, cx.var(self.bias))?;
        if shape.len() == 2 {
            Ok(y)
        } else {
            let mut out = shape;
            *out.last_mut().unwrap() = self.fan_out;
            cx.tape.reshape(y, &out)
        }
    }
}

/// Batch normalization over every axis but the channel axis.
#[derive(Clone, Copy, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, buffers: &mut ParamStore<T>, name: &str, c: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(&[c], T::one()));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[c]));
        let running_mean = buffers.add(format!("{name}.running_mean"), Tensor::zeros(&[c]));
        let running_var = buffers.add(format!("{name}.running_var"), Tensor::full(&[c], T::one()));
        Self { gamma, beta, running_mean, running_var }
    }

    /// Train mode normalizes with batch statistics and folds them into the
    /// running averages; eval mode uses the running averages.
    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let xhat = if cx.train {
            let (xhat, stats) = cx.tape.normalize(x, NormKind::Batch)?;
            let m = T::lit(BN_MOMENTUM);
            let unbias = T::from_usize(stats.count).unwrap() / T::from_usize(stats.count - 1).unwrap();
            let rm = cx.buffers.get_mut(self.running_mean).data_mut();
            rm.iter_mut().zip(&stats.mean).for_each(|(r, &b)| *r = m * *r + (T::one() - m) * b);
            let rv = cx.buffers.get_mut(self.running_var).data_mut();
            rv.iter_mut().zip(&stats.var).for_each(|(r, &b)| *r = m * *r + (T::one() - m) * b * unbias);
            xhat
        } else {
            let mean = cx.buffers.get(self.running_mean).data().to_vec();
            let var = cx.buffers.get(self.running_var).data().to_vec();
            cx.tape.normalize_fixed(x, &mean, &var)?
        };
        cx.tape.channel_affine(xhat, cx.var(self.gamma), cx.var(self.beta))
    }
}

/// Instance normalization without affine parameters.
pub fn instance_norm<T: Real>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    Ok(tape.normalize(x, NormKind::Instance)?.0)
}
