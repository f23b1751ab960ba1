//! Independent reference implementations used by the integration tests.
//!
//! Nothing here calls into the crate's numeric kernels: every oracle is a
//! direct, slow transcription of the defining formula.

#![allow(dead_code)]

use num_complex::Complex64;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub mod gradients;
pub mod quantum;

pub type C = Complex64;
pub type Matrix = Vec<Vec<C>>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform_vec(rng: &mut impl Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Uniform values whose magnitude stays at least `gap` away from zero, so
/// piecewise-linear primitives are differentiable at every sample.
pub fn away_from_zero(rng: &mut impl Rng, n: usize, gap: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let m = rng.random_range(gap..1.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect()
}

// ---- finite differences ------------------------------------------------------

/// Central-difference gradient of `f` at `x`.
pub fn fd_gradient(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            p[i] = x[i] + h;
            let up = f(&p);
            p[i] = x[i] - h;
            let down = f(&p);
            p[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `|a - b| / max(|a|, |b|)` in the Euclidean norm; 0 when both vanish.
pub fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

// ---- dense quantum oracle ----------------------------------------------------

pub fn c(re: f64, im: f64) -> C {
    C::new(re, im)
}

pub fn identity(d: usize) -> Matrix {
    (0..d).map(|i| (0..d).map(|j| if i == j { c(1.0, 0.0) } else { c(0.0, 0.0) }).collect()).collect()
}

pub fn kron(a: &Matrix, b: &Matrix) -> Matrix {
    let (ra, rb) = (a.len(), b.len());
    let mut out = vec![vec![c(0.0, 0.0); ra * rb]; ra * rb];
    for i in 0..ra {
        for j in 0..ra {
            for k in 0..rb {
                for l in 0..rb {
                    out[i * rb + k][j * rb + l] = a[i][j] * b[k][l];
                }
            }
        }
    }
    out
}

pub fn matmul(a: &Matrix, b: &Matrix) -> Matrix {
    let n = a.len();
    let mut out = vec![vec![c(0.0, 0.0); n]; n];
    for i in 0..n {
        for k in 0..n {
            if a[i][k] == c(0.0, 0.0) {
                continue;
            }
            for j in 0..n {
                out[i][j] += a[i][k] * b[k][j];
            }
        }
    }
    out
}

pub fn add(a: &Matrix, b: &Matrix) -> Matrix {
    a.iter().zip(b).map(|(r, s)| r.iter().zip(s).map(|(x, y)| x + y).collect()).collect()
}

pub fn apply(m: &Matrix, v: &[C]) -> Vec<C> {
    m.iter().map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum()).collect()
}

pub fn ry(theta: f64) -> Matrix {
    let (s, co) = (theta / 2.0).sin_cos();
    vec![vec![c(co, 0.0), c(-s, 0.0)], vec![c(s, 0.0), c(co, 0.0)]]
}

pub fn rz(phi: f64) -> Matrix {
    vec![vec![C::from_polar(1.0, -phi / 2.0), c(0.0, 0.0)], vec![c(0.0, 0.0), C::from_polar(1.0, phi / 2.0)]]
}

pub fn rx(phi: f64) -> Matrix {
    let (s, co) = (phi / 2.0).sin_cos();
    vec![vec![c(co, 0.0), c(0.0, -s)], vec![c(0.0, -s), c(co, 0.0)]]
}

pub fn pauli_x() -> Matrix {
    vec![vec![c(0.0, 0.0), c(1.0, 0.0)], vec![c(1.0, 0.0), c(0.0, 0.0)]]
}

fn projector(bit: usize) -> Matrix {
    let mut p = vec![vec![c(0.0, 0.0); 2]; 2];
    p[bit][bit] = c(1.0, 0.0);
    p
}

/// `I (x) ... (x) m (x) ... (x) I` with `m` on `wire`; wire 0 is the
/// leftmost (most significant) factor.
pub fn embed(n: usize, factors: &[(usize, Matrix)]) -> Matrix {
    let mut out = identity(1);
    for w in 0..n {
        let f = factors.iter().find(|(q, _)| *q == w).map_or_else(|| identity(2), |(_, m)| m.clone());
        out = kron(&out, &f);
    }
    out
}

pub fn single(n: usize, wire: usize, m: &Matrix) -> Matrix {
    embed(n, &[(wire, m.clone())])
}

/// `|0><0|_c (x) I + |1><1|_c (x) m_t`.
pub fn controlled(n: usize, control: usize, target: usize, m: &Matrix) -> Matrix {
    let off = embed(n, &[(control, projector(0))]);
    let on = embed(n, &[(control, projector(1)), (target, m.clone())]);
    add(&off, &on)
}

/// `CNOT(a -> b) . (Ry(t0)_a (x) Ry(t1)_b)`.
pub fn conv_unitary(n: usize, a: usize, b: usize, t0: f64, t1: f64) -> Matrix {
    let rot = embed(n, &[(a, ry(t0)), (b, ry(t1))]);
    matmul(&controlled(n, a, b, &pauli_x()), &rot)
}

/// `CRx(phi)_{drop->keep} . X_drop . CRz(phi)_{drop->keep}`.
pub fn pool_unitary(n: usize, keep: usize, drop: usize, phi: f64) -> Matrix {
    let crz = controlled(n, drop, keep, &rz(phi));
    let x = single(n, drop, &pauli_x());
    let crx = controlled(n, drop, keep, &rx(phi));
    matmul(&crx, &matmul(&x, &crz))
}

/// Probability that `wire` reads 0, from the reduced density by summation.
pub fn prob_zero(n: usize, amps: &[C], wire: usize) -> f64 {
    amps.iter()
        .enumerate()
        .filter(|(i, _)| (i >> (n - 1 - wire)) & 1 == 0)
        .map(|(_, a)| a.norm_sqr())
        .sum()
}

// ---- convolution -------------------------------------------------------------

/// Direct NHWC cross-correlation with a `[k, k, cin, cout]` kernel.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_direct(
    x: &[f64],
    (n, h, w, cin): (usize, usize, usize, usize),
    kernel: &[f64],
    (k, cout): (usize, usize),
    stride: usize,
    pad: usize,
) -> (Vec<f64>, usize, usize) {
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; n * ho * wo * cout];
    for b in 0..n {
        for oy in 0..ho {
            for ox in 0..wo {
                for co in 0..cout {
                    let mut acc = 0.0;
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            for ci in 0..cin {
                                let xv = x[((b * h + iy as usize) * w + ix as usize) * cin + ci];
                                acc += xv * kernel[((ky * k + kx) * cin + ci) * cout + co];
                            }
                        }
                    }
                    out[((b * ho + oy) * wo + ox) * cout + co] = acc;
                }
            }
        }
    }
    (out, ho, wo)
}

/// Transposed convolution by scattering every input pixel through a
/// `[k, k, cout, cin]` kernel.
#[allow(clippy::too_many_arguments)]
pub fn conv_transpose_direct(
    x: &[f64],
    (n, h, w, cin): (usize, usize, usize, usize),
    kernel: &[f64],
    (k, cout): (usize, usize),
    stride: usize,
    pad: usize,
) -> (Vec<f64>, usize, usize) {
    let ho = (h - 1) * stride + k - 2 * pad;
    let wo = (w - 1) * stride + k - 2 * pad;
    let mut out = vec![0.0; n * ho * wo * cout];
    for b in 0..n {
        for iy in 0..h {
            for ix in 0..w {
                for ky in 0..k {
                    for kx in 0..k {
                        let oy = (iy * stride + ky) as isize - pad as isize;
                        let ox = (ix * stride + kx) as isize - pad as isize;
                        if oy < 0 || ox < 0 || oy >= ho as isize || ox >= wo as isize {
                            continue;
                        }
                        for co in 0..cout {
                            let mut acc = 0.0;
                            for ci in 0..cin {
                                acc += x[((b * h + iy) * w + ix) * cin + ci] * kernel[((ky * k + kx) * cout + co) * cin + ci];
                            }
                            out[((b * ho + oy as usize) * wo + ox as usize) * cout + co] += acc;
                        }
                    }
                }
            }
        }
    }
    (out, ho, wo)
}

// ---- statistics and classification ---------------------------------------------

/// Median of each coordinate by sorting the full column.
pub fn sort_median(vectors: &[Vec<f64>]) -> Vec<f64> {
    let d = vectors[0].len();
    (0..d)
        .map(|j| {
            let mut col: Vec<f64> = vectors.iter().map(|v| v[j]).collect();
            col.sort_by(f64::total_cmp);
            let n = col.len();
            if n % 2 == 1 {
                col[n / 2]
            } else {
                0.5 * (col[n / 2 - 1] + col[n / 2])
            }
        })
        .collect()
}

/// Index of the first maximum by exhaustive comparison.
pub fn brute_argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for i in 0..v.len() {
        if (0..v.len()).all(|j| v[i] >= v[j]) {
            best = i;
            break;
        }
    }
    best
}

/// Explicit formula for the blended similarity.
pub fn similarity(f: &[f64], t: &[f64], alpha: f64) -> f64 {
    let dot: f64 = f.iter().zip(t).map(|(a, b)| a * b).sum();
    let nf = f.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nt = t.iter().map(|a| a * a).sum::<f64>().sqrt();
    let dist = f.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    alpha * dot / (nf * nt) + (1.0 - alpha) / dist.max(1e-8)
}

/// Macro metrics from a full confusion matrix, counting each cell.
pub struct OracleMetrics {
    pub acc: f64,
    pub pre: f64,
    pub rec: f64,
    pub f1: f64,
}

pub fn confusion_oracle(truth: &[usize], pred: &[usize], classes: usize) -> OracleMetrics {
    let mut m = vec![vec![0usize; classes]; classes];
    for (&t, &p) in truth.iter().zip(pred) {
        m[t][p] += 1;
    }
    let total: usize = m.iter().flatten().sum();
    let diag: usize = (0..classes).map(|i| m[i][i]).sum();
    let (mut pre, mut rec, mut f1) = (0.0, 0.0, 0.0);
    for k in 0..classes {
        let tp = m[k][k] as f64;
        let col: usize = (0..classes).map(|i| m[i][k]).sum();
        let row: usize = m[k].iter().sum();
        let p = if col == 0 { 0.0 } else { tp / col as f64 };
        let r = if row == 0 { 0.0 } else { tp / row as f64 };
        pre += p;
        rec += r;
        f1 += if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    }
    let k = classes as f64;
    OracleMetrics { acc: diag as f64 / total as f64, pre: pre / k, rec: rec / k, f1: f1 / k }
}

/// Least-squares linear probe: solves the ridge-regularized normal
/// equations by Gaussian elimination and returns the training accuracy of
/// `sign(w . [x, 1])` for labels in {-1, +1}.
pub fn least_squares_probe(xs: &[Vec<f64>], ys: &[f64], ridge: f64) -> f64 {
    let d = xs[0].len() + 1;
    let mut a = vec![vec![0.0; d + 1]; d];
    for (x, &y) in xs.iter().zip(ys) {
        let xe: Vec<f64> = x.iter().copied().chain(std::iter::once(1.0)).collect();
        for i in 0..d {
            for j in 0..d {
                a[i][j] += xe[i] * xe[j];
            }
            a[i][d] += xe[i] * y;
        }
    }
    for (i, row) in a.iter_mut().enumerate() {
        row[i] += ridge;
    }
    for col in 0..d {
        let piv = (col..d).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
        a.swap(col, piv);
        let p = a[col][col];
        for j in col..=d {
            a[col][j] /= p;
        }
        for i in 0..d {
            if i != col {
                let f = a[i][col];
                if f != 0.0 {
                    for j in col..=d {
                        a[i][j] -= f * a[col][j];
                    }
                }
            }
        }
    }
    let w: Vec<f64> = a.iter().map(|r| r[d]).collect();
    let correct = xs
        .iter()
        .zip(ys)
        .filter(|(x, &y)| {
            let s: f64 = x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + w[d - 1];
            s.signum() == y.signum()
        })
        .count();
    correct as f64 / xs.len() as f64
}
