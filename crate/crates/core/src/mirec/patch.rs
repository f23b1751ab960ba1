//! Patch decomposition with sinusoidal positional encodings, and the
//! masking plan over the patch grid.

use rand::seq::index::sample;

use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::Real;
use crate::tensor::Tensor;

/// An `[h, w, ch]` image cut into `p x p` patches in row-major patch order.
/// Each patch is flattened as `(dy, dx, c)`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSet<T> {
    pub p: usize,
    pub h: usize,
    pub w: usize,
    pub ch: usize,
    patches: Vec<Vec<T>>,
    pe: Vec<Vec<T>>,
}

/// Sinusoidal encoding of patch index `i` over `len` dimensions: even
/// coordinates `sin(i / 10000^(2k/len))`, odd coordinates the matching cosine.
pub fn positional_encoding<T: Real>(n_patches: usize, len: usize) -> Vec<Vec<T>> {
    (0..n_patches)
        .map(|i| {
            (0..len)
                .map(|j| {
                    let k = (j / 2) as f64;
                    let angle = i as f64 / 10000f64.powf(2.0 * k / len as f64);
                    T::lit(if j % 2 == 0 { angle.sin() } else { angle.cos() })
                })
                .collect()
        })
        .collect()
}

/// Flat offsets into an `[h, w, ch]` image (row width `w`) of the pixels of patch `i`, in
/// patch flattening order.
pub fn patch_offsets(w: usize, ch: usize, p: usize, i: usize) -> Vec<usize> {
    let gw = w / p;
    let (py, px) = (i / gw, i % gw);
    let mut out = Vec::with_capacity(p * p * ch);
    for dy in 0..p {
        for dx in 0..p {
            let base = ((py * p + dy) * w + px * p + dx) * ch;
            out.extend(base..base + ch);
        }
    }
    out
}

impl<T: Real> PatchSet<T> {
    pub fn patchify(image: &Tensor<T>, p: usize) -> Result<Self> {
        let [h, w, ch] = *image.shape() else {
            return Err(Error::Shape(format!("patchify expects [h, w, ch], got {:?}", image.shape())));
        };
        if p == 0 || h % p != 0 || w % p != 0 {
            return Err(Error::Argument(format!("image {h}x{w} is not divisible into {p}x{p} patches")));
        }
        let n = (h / p) * (w / p);
        let patches = (0..n)
            .map(|i| patch_offsets(w, ch, p, i).into_iter().map(|o| image.data()[o]).collect())
            .collect();
        Ok(Self { p, h, w, ch, patches, pe: positional_encoding(n, p * p * ch) })
    }

    pub fn n_patches(&self) -> usize {
        self.patches.len()
    }

    pub fn patch_len(&self) -> usize {
        self.p * self.p * self.ch
    }

    /// Patch grid as `(rows, cols)`.
    pub fn grid(&self) -> (usize, usize) {
        (self.h / self.p, self.w / self.p)
    }

    /// Raw patch contents `z_i`.
    pub fn patches(&self) -> &[Vec<T>] {
        &self.patches
    }

    pub fn positional(&self) -> &[Vec<T>] {
        &self.pe
    }

    /// `z_i + PE_i`.
    pub fn embedded(&self, i: usize) -> Vec<T> {
        self.patches[i].iter().zip(&self.pe[i]).map(|(&z, &e)| z + e).collect()
    }

    pub fn unpatchify(&self) -> Tensor<T> {
        let mut data = vec![T::zero(); self.h * self.w * self.ch];
        for (i, patch) in self.patches.iter().enumerate() {
            for (o, &v) in patch_offsets(self.w, self.ch, self.p, i).into_iter().zip(patch) {
                data[o] = v;
            }
        }
        Tensor::new(vec![self.h, self.w, self.ch], data).expect("patch grid covers the image")
    }
}

/// Disjoint partition of the patch indices into masked and visible sets,
/// both sorted ascending.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPlan {
    pub masked: Vec<usize>,
    pub visible: Vec<usize>,
    pub ratio: f64,
    pub seed: u64,
}

impl MaskPlan {
    pub fn n_patches(&self) -> usize {
        self.masked.len() + self.visible.len()
    }

    /// Per-patch flags, `true` where masked.
    pub fn flags(&self) -> Vec<bool> {
        let mut f = vec![false; self.n_patches()];
        self.masked.iter().for_each(|&i| f[i] = true);
        f
    }
}

/// Masks `round(ratio * n_patches)` indices drawn uniformly without
/// replacement from a generator seeded by `seed`.
pub fn sample_mask(n_patches: usize, ratio: f64, seed: u64) -> Result<MaskPlan> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Argument(format!("mask ratio {ratio} outside (0, 1)")));
    }
    if n_patches < 2 {
        return Err(Error::Argument(format!("need at least 2 patches to mask, got {n_patches}")));
    }
    let count = (ratio * n_patches as f64).round() as usize;
    if count == 0 || count == n_patches {
        return Err(Error::DegenerateMask(format!("ratio {ratio} masks {count} of {n_patches} patches")));
    }
    let mut masked = sample(&mut rng::rng(seed), n_patches, count).into_vec();
    masked.sort_unstable();
    let mut flags = vec![false; n_patches];
    masked.iter().for_each(|&i| flags[i] = true);
    let visible = (0..n_patches).filter(|&i| !flags[i]).collect();
    Ok(MaskPlan { masked, visible, ratio, seed })
}

/// `x_rep`: the original content on visible patches and `reconstructed[k]`
/// on the `k`-th masked patch.
pub fn repair<T: Real>(patches: &PatchSet<T>, reconstructed: &[Vec<T>], plan: &MaskPlan) -> Result<Tensor<T>> {
    if plan.n_patches() != patches.n_patches() {
        return Err(Error::Argument(format!(
            "mask plan covers {} patches, image has {}",
            plan.n_patches(),
            patches.n_patches()
        )));
    }
    if reconstructed.len() != plan.masked.len() {
        return Err(Error::Argument(format!(
            "{} reconstructions for {} masked patches",
            reconstructed.len(),
            plan.masked.len()
        )));
    }
    let mut out = patches.clone();
    for (&i, r) in plan.masked.iter().zip(reconstructed) {
        if r.len() != patches.patch_len() {
            return Err(Error::Argument(format!("reconstructed patch has {} values, expected {}", r.len(), patches.patch_len())));
        }
        out.patches[i].clone_from(r);
    }
    Ok(out.unpatchify())
}
