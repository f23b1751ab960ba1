//! Synthetic joint images: two bright horizontal bands separated by a
//! grade-dependent gap, with grade-dependent bright blobs at the gap
//! margins and additive Gaussian noise.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};
use crate::rng::{self, derive_seed};
use crate::scalar::Real;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub image_size: usize,
    /// Samples per grade; its length is the class count.
    pub class_counts: Vec<usize>,
    /// Mean gap between the bands per grade, in pixels.
    pub gap: Vec<f64>,
    /// Uniform jitter half-width applied to each sample's gap.
    pub gap_jitter: f64,
    /// Bright blobs per grade.
    pub blobs: Vec<usize>,
    /// Gaussian noise standard deviation per grade.
    pub noise: Vec<f64>,
    /// Band thickness in pixels.
    pub band: f64,
    pub background: f64,
    pub intensity: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    /// Five grades with counts in the proportions 3857:1770:2578:1286:295,
    /// scaled to 1,250 images.
    fn default() -> Self {
        Self {
            image_size: 32,
            class_counts: vec![493, 226, 329, 164, 38],
            gap: vec![9.0, 7.6, 6.2, 4.8, 3.4],
            gap_jitter: 1.1,
            blobs: vec![0, 0, 1, 2, 3],
            noise: vec![0.1; 5],
            band: 7.0,
            background: 0.1,
            intensity: 0.8,
            seed: 42,
        }
    }
}

impl SyntheticSpec {
    pub fn class_count(&self) -> usize {
        self.class_counts.len()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.class_counts.len();
        if k < 2 {
            return Err(Error::Argument("synthetic data needs at least two grades".into()));
        }
        if self.gap.len() != k || self.blobs.len() != k || self.noise.len() != k {
            return Err(Error::Argument(format!("per-grade lists must all have {k} entries")));
        }
        if self.image_size < 8 {
            return Err(Error::Argument(format!("image size {} too small", self.image_size)));
        }
        let size = self.image_size as f64;
        for (g, &gap) in self.gap.iter().enumerate() {
            if !(gap > 0.0) || gap + 2.0 * self.gap_jitter + 2.0 * self.band >= size {
                return Err(Error::Argument(format!("grade {g}: gap {gap} does not fit a {size}-pixel image")));
            }
        }
        if self.gap.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::Argument("gap must strictly decrease with grade".into()));
        }
        if self.blobs.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Argument("blob count must not decrease with grade".into()));
        }
        if self.gap_jitter < 0.0 || self.noise.iter().any(|&s| !(s >= 0.0)) || !(self.band > 0.0) {
            return Err(Error::Argument("jitter, noise and band must be nonnegative".into()));
        }
        Ok(())
    }

    /// Deterministic image of `grade` for the sample stream `sample_seed`.
    pub fn render<T: Real>(&self, grade: usize, sample_seed: u64) -> Result<Tensor<T>> {
        self.validate()?;
        if grade >= self.class_count() {
            return Err(Error::Argument(format!("grade {grade} out of range {}", self.class_count())));
        }
        let n = self.image_size;
        let size = n as f64;
        let mut rng = rng::rng(sample_seed);
        let gap = self.gap[grade] + if self.gap_jitter > 0.0 { rng.random_range(-self.gap_jitter..=self.gap_jitter) } else { 0.0 };
        let centre = size / 2.0 + rng.random_range(-1.0..=1.0);
        let (top_end, bottom_start) = (centre - gap / 2.0, centre + gap / 2.0);
        let (top_start, bottom_end) = (top_end - self.band, bottom_start + self.band);
        // Fraction of pixel row [y, y+1) covered by [a, b).
        let cover = |y: f64, a: f64, b: f64| (b.min(y + 1.0) - a.max(y)).clamp(0.0, 1.0);
        let mut img = vec![self.background; n * n];
        for y in 0..n {
            let yf = y as f64;
            let c = cover(yf, top_start, top_end) + cover(yf, bottom_start, bottom_end);
            let v = self.background + (self.intensity - self.background) * c.min(1.0);
            img[y * n..(y + 1) * n].iter_mut().for_each(|p| *p = v);
        }
        for _ in 0..self.blobs[grade] {
            // Spurs growing into the gap from either band edge.
            let on_top = rng.random_bool(0.5);
            let x0 = rng.random_range(1.0..size - 4.0);
            let y0 = if on_top { top_end } else { bottom_start - 2.0 };
            for y in 0..n {
                for x in 0..n {
                    let (dx, dy) = (x as f64 + 0.5 - (x0 + 1.5), y as f64 + 0.5 - (y0 + 1.0));
                    if dx * dx / 2.25 + dy * dy <= 1.0 {
                        img[y * n + x] = 1.0;
                    }
                }
            }
        }
        let sigma = self.noise[grade];
        if sigma > 0.0 {
            let normal = Normal::new(0.0, sigma).expect("finite sigma");
            img.iter_mut().for_each(|p| *p += normal.sample(&mut rng));
        }
        Ok(Tensor::from_fn(&[n, n, 1], |i| T::lit(img[i].clamp(0.0, 1.0))))
    }
}

/// Renders every sample of `spec`. Grades are shuffled so ids carry no
/// class order; sample `i` uses the stream `derive_seed(seed, i)`.
pub fn synth_dataset<T: Real>(spec: &SyntheticSpec) -> Result<Dataset<T>> {
    spec.validate()?;
    let mut grades: Vec<usize> = spec.class_counts.iter().enumerate().flat_map(|(g, &c)| std::iter::repeat_n(g, c)).collect();
    if grades.is_empty() {
        return Err(Error::Argument("synthetic spec has no samples".into()));
    }
    grades.shuffle(&mut rng::stream(spec.seed, "synth.order"));
    let images = grades
        .iter()
        .enumerate()
        .map(|(i, &g)| spec.render(g, derive_seed(spec.seed, i as u64)))
        .collect::<Result<Vec<_>>>()?;
    let ids = (0..grades.len()).map(|i| format!("s{i:05}")).collect();
    Dataset::new(ids, images, grades)
}
