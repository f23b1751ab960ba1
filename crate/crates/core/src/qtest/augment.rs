//! Weak and strong image augmentations with explicit, sampled parameters.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

pub const FLIP_PROB: f64 = 0.5;
pub const WEAK_TRANSLATE: f64 = 0.2;
pub const SHEAR: (f64, f64) = (-0.3, 0.3);
pub const SCALE: (f64, f64) = (0.51, 0.60);
pub const TRANSLATE: (f64, f64) = (-0.3, 0.3);
pub const BRIGHTNESS: (f64, f64) = (0.05, 0.95);
pub const ROTATION_DEG: (f64, f64) = (-30.0, 30.0);
pub const BLUR_KERNELS: [usize; 2] = [3, 5];
/// Strong operations applied per sample.
pub const DEFAULT_OPS_PER_SAMPLE: usize = 2;

/// Flips, then an integer shift with zero fill.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeakParams {
    pub flip_h: bool,
    pub flip_v: bool,
    pub dx: i64,
    pub dy: i64,
}

impl WeakParams {
    pub fn sample(h: usize, w: usize, rng: &mut impl Rng) -> Self {
        let max_x = (WEAK_TRANSLATE * w as f64).floor() as i64;
        let max_y = (WEAK_TRANSLATE * h as f64).floor() as i64;
        Self {
            flip_h: rng.random_bool(FLIP_PROB),
            flip_v: rng.random_bool(FLIP_PROB),
            dx: rng.random_range(-max_x..=max_x),
            dy: rng.random_range(-max_y..=max_y),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Axis {
    X,
    Y,
}

/// One strong operation with its magnitude. Geometric magnitudes are
/// fractions of the image size or degrees.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum StrongOp {
    Invert,
    Shear { axis: Axis, amount: f64 },
    Scale(f64),
    Translate { dx: f64, dy: f64 },
    Brightness(f64),
    Rotate(f64),
    Blur(usize),
}

/// The operation menu, in application order.
pub const MENU_LEN: usize = 7;

impl StrongOp {
    fn sample_kind(kind: usize, rng: &mut impl Rng) -> Self {
        let u = |rng: &mut dyn rand::RngCore, (lo, hi): (f64, f64)| rng.random_range(lo..=hi);
        match kind {
            0 => StrongOp::Invert,
            1 => StrongOp::Shear { axis: if rng.random_bool(0.5) { Axis::X } else { Axis::Y }, amount: u(rng, SHEAR) },
            2 => StrongOp::Scale(u(rng, SCALE)),
            3 => StrongOp::Translate { dx: u(rng, TRANSLATE), dy: u(rng, TRANSLATE) },
            4 => StrongOp::Brightness(u(rng, BRIGHTNESS)),
            5 => StrongOp::Rotate(u(rng, ROTATION_DEG)),
            _ => StrongOp::Blur(BLUR_KERNELS[rng.random_range(0..BLUR_KERNELS.len())]),
        }
    }

    /// Whether the magnitude lies inside its declared range.
    pub fn in_range(&self) -> bool {
        let within = |v: f64, (lo, hi): (f64, f64)| v >= lo && v <= hi;
        match *self {
            StrongOp::Invert => true,
            StrongOp::Shear { amount, .. } => within(amount, SHEAR),
            StrongOp::Scale(s) => within(s, SCALE),
            StrongOp::Translate { dx, dy } => within(dx, TRANSLATE) && within(dy, TRANSLATE),
            StrongOp::Brightness(b) => within(b, BRIGHTNESS),
            StrongOp::Rotate(d) => within(d, ROTATION_DEG),
            StrongOp::Blur(k) => BLUR_KERNELS.contains(&k),
        }
    }
}

/// `n_ops` distinct menu entries, kept in menu order, with sampled magnitudes.
pub fn sample_strong(n_ops: usize, rng: &mut impl Rng) -> Vec<StrongOp> {
    let n = n_ops.min(MENU_LEN);
    let mut kinds = sample(rng, MENU_LEN, n).into_vec();
    kinds.sort_unstable();
    kinds.into_iter().map(|k| StrongOp::sample_kind(k, rng)).collect()
}

fn dims<T: Real>(x: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [h, w, c] => Ok((h, w, c)),
        _ => Err(Error::Shape(format!("augmentations expect [h, w, ch], got {:?}", x.shape()))),
    }
}

pub fn flip<T: Real>(x: &Tensor<T>, horizontal: bool, vertical: bool) -> Result<Tensor<T>> {
    let (h, w, c) = dims(x)?;
    Ok(Tensor::from_fn(x.shape(), |i| {
        let (y, xx, ch) = (i / (w * c), (i / c) % w, i % c);
        let sy = if vertical { h - 1 - y } else { y };
        let sx = if horizontal { w - 1 - xx } else { xx };
        x.data()[(sy * w + sx) * c + ch]
    }))
}

/// Integer shift; vacated pixels are zero.
pub fn shift<T: Real>(x: &Tensor<T>, dx: i64, dy: i64) -> Result<Tensor<T>> {
    let (h, w, c) = dims(x)?;
    Ok(Tensor::from_fn(x.shape(), |i| {
        let (y, xx, ch) = ((i / (w * c)) as i64, ((i / c) % w) as i64, i % c);
        let (sy, sx) = (y - dy, xx - dx);
        if sy < 0 || sx < 0 || sy >= h as i64 || sx >= w as i64 {
            T::zero()
        } else {
            x.data()[(sy as usize * w + sx as usize) * c + ch]
        }
    }))
}

pub fn weak_augment<T: Real>(x: &Tensor<T>, p: &WeakParams) -> Result<Tensor<T>> {
    shift(&flip(x, p.flip_h, p.flip_v)?, p.dx, p.dy)
}

/// Resamples through the inverse map `m` (2x2, about the image centre)
/// plus `offset` pixels, bilinear with zero outside.
fn warp<T: Real>(x: &Tensor<T>, m: [[f64; 2]; 2], offset: (f64, f64)) -> Result<Tensor<T>> {
    let (h, w, c) = dims(x)?;
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let at = |y: i64, xx: i64, ch: usize| -> f64 {
        if y < 0 || xx < 0 || y >= h as i64 || xx >= w as i64 {
            0.0
        } else {
            x.data()[(y as usize * w + xx as usize) * c + ch].as_f64()
        }
    };
    Ok(Tensor::from_fn(x.shape(), |i| {
        let (y, xx, ch) = ((i / (w * c)) as f64, ((i / c) % w) as f64, i % c);
        let (py, px) = (y - cy - offset.1, xx - cx - offset.0);
        let sx = m[0][0] * px + m[0][1] * py + cx;
        let sy = m[1][0] * px + m[1][1] * py + cy;
        let (x0, y0) = (sx.floor(), sy.floor());
        let (fx, fy) = (sx - x0, sy - y0);
        let (x0, y0) = (x0 as i64, y0 as i64);
        let v = (1.0 - fy) * ((1.0 - fx) * at(y0, x0, ch) + fx * at(y0, x0 + 1, ch))
            + fy * ((1.0 - fx) * at(y0 + 1, x0, ch) + fx * at(y0 + 1, x0 + 1, ch));
        T::lit(v)
    }))
}

/// `k x k` mean filter with clamped borders.
pub fn box_blur<T: Real>(x: &Tensor<T>, k: usize) -> Result<Tensor<T>> {
    let (h, w, c) = dims(x)?;
    let r = (k / 2) as i64;
    let inv = T::one() / T::from_usize(k * k).unwrap();
    Ok(Tensor::from_fn(x.shape(), |i| {
        let (y, xx, ch) = ((i / (w * c)) as i64, ((i / c) % w) as i64, i % c);
        let mut acc = T::zero();
        for dy in -r..=r {
            for dx in -r..=r {
                let sy = (y + dy).clamp(0, h as i64 - 1) as usize;
                let sx = (xx + dx).clamp(0, w as i64 - 1) as usize;
                acc += x.data()[(sy * w + sx) * c + ch];
            }
        }
        acc * inv
    }))
}

pub fn apply_strong_op<T: Real>(x: &Tensor<T>, op: &StrongOp) -> Result<Tensor<T>> {
    let (h, w, _) = dims(x)?;
    match *op {
        StrongOp::Invert => Ok(x.map(|v| T::one() - v)),
        StrongOp::Shear { axis: Axis::X, amount } => warp(x, [[1.0, -amount], [0.0, 1.0]], (0.0, 0.0)),
        StrongOp::Shear { axis: Axis::Y, amount } => warp(x, [[1.0, 0.0], [-amount, 1.0]], (0.0, 0.0)),
        StrongOp::Scale(s) => warp(x, [[1.0 / s, 0.0], [0.0, 1.0 / s]], (0.0, 0.0)),
        StrongOp::Translate { dx, dy } => warp(x, [[1.0, 0.0], [0.0, 1.0]], (dx * w as f64, dy * h as f64)),
        StrongOp::Brightness(b) => Ok(x.map(|v| v * T::lit(b))),
        StrongOp::Rotate(deg) => {
            let (s, c) = deg.to_radians().sin_cos();
            warp(x, [[c, s], [-s, c]], (0.0, 0.0))
        }
        StrongOp::Blur(k) => box_blur(x, k),
    }
}

pub fn strong_augment<T: Real>(x: &Tensor<T>, ops: &[StrongOp]) -> Result<Tensor<T>> {
    let mut out = x.clone();
    for op in ops {
        out = apply_strong_op(&out, op)?;
    }
    Ok(out)
}
