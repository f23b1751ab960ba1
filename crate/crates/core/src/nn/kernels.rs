//! Raw NHWC kernels shared by the forward and backward passes.

use crate::scalar::Real;

/// Geometry of a square-kernel 2-D convolution over an NHWC batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    /// Returns `None` when the kernel does not fit the padded input.
    pub fn new(n: usize, h: usize, w: usize, c: usize, k: usize, stride: usize, pad: usize) -> Option<Self> {
        if stride == 0 || k == 0 || k > h + 2 * pad || k > w + 2 * pad {
            return None;
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        Some(Self { n, h, w, c, k, stride, pad, ho, wo })
    }

    pub fn rows(&self) -> usize {
        self.n * self.ho * self.wo
    }

    pub fn patch_len(&self) -> usize {
        self.k * self.k * self.c
    }
}

/// Unfolds receptive fields into rows of `(ky, kx, c)`-ordered columns.
pub fn im2col<T: Real>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let plen = g.patch_len();
    let mut cols = vec![T::zero(); g.rows() * plen];
    let kc = g.k * g.c;
    for n in 0..g.n {
        let xn = &x[n * g.h * g.w * g.c..(n + 1) * g.h * g.w * g.c];
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let row = ((n * g.ho + oy) * g.wo + ox) * plen;
                for ky in 0..g.k {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let iy = iy as usize;
                    // contiguous run of kx over the valid x-range
                    let x0 = (ox * g.stride) as isize - g.pad as isize;
                    let kx_lo = (-x0).max(0) as usize;
                    let kx_hi = ((g.w as isize - x0).min(g.k as isize)).max(0) as usize;
                    if kx_lo >= kx_hi {
                        continue;
                    }
                    let ix_lo = (x0 + kx_lo as isize) as usize;
                    let src = &xn[(iy * g.w + ix_lo) * g.c..(iy * g.w + ix_lo + kx_hi - kx_lo) * g.c];
                    let dst = row + ky * kc + kx_lo * g.c;
                    cols[dst..dst + src.len()].copy_from_slice(src);
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input grid.
pub fn col2im<T: Real>(cols: &[T], g: &ConvGeom) -> Vec<T> {
    let plen = g.patch_len();
    let mut x = vec![T::zero(); g.n * g.h * g.w * g.c];
    let kc = g.k * g.c;
    for n in 0..g.n {
        let base = n * g.h * g.w * g.c;
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let row = ((n * g.ho + oy) * g.wo + ox) * plen;
                for ky in 0..g.k {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let iy = iy as usize;
                    let x0 = (ox * g.stride) as isize - g.pad as isize;
                    let kx_lo = (-x0).max(0) as usize;
                    let kx_hi = ((g.w as isize - x0).min(g.k as isize)).max(0) as usize;
                    if kx_lo >= kx_hi {
                        continue;
                    }
                    let ix_lo = (x0 + kx_lo as isize) as usize;
                    let len = (kx_hi - kx_lo) * g.c;
                    let dst = base + (iy * g.w + ix_lo) * g.c;
                    let src = row + ky * kc + kx_lo * g.c;
                    for (d, &s) in x[dst..dst + len].iter_mut().zip(&cols[src..src + len]) {
                        *d += s;
                    }
                }
            }
        }
    }
    x
}

/// Row-major `a (m x k) * b (k x n)`, optionally transposing either operand
/// in place of a copy.
pub fn matmul<T: Real>(
    a: &[T],
    b: &[T],
    m: usize,
    k: usize,
    n: usize,
    transpose_a: bool,
    transpose_b: bool,
    out: &mut [T],
    accumulate: bool,
) {
    let sa = if transpose_a { (1, m as isize) } else { (k as isize, 1) };
    let sb = if transpose_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    T::gemm(m, k, n, T::one(), a, sa, b, sb, beta, out, (n as isize, 1));
}

/// 2x2 stride-2 max pooling; returns pooled values and flat argmax indices.
pub fn max_pool2<T: Real>(x: &[T], n: usize, h: usize, w: usize, c: usize) -> (Vec<T>, Vec<usize>) {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * ho * wo * c);
    let mut arg = Vec::with_capacity(n * ho * wo * c);
    for b in 0..n {
        for oy in 0..ho {
            for ox in 0..wo {
                for ch in 0..c {
                    let mut best = usize::MAX;
                    let mut val = T::neg_infinity();
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let idx = ((b * h + 2 * oy + dy) * w + 2 * ox + dx) * c + ch;
                            if best == usize::MAX || x[idx] > val {
                                best = idx;
                                val = x[idx];
                            }
                        }
                    }
                    out.push(val);
                    arg.push(best);
                }
            }
        }
    }
    (out, arg)
}
