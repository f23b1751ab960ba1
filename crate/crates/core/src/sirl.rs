//! Similarity-based proxy labeling: per-class median templates, a blended
//! cosine / inverse-distance score and a threshold filter.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Floor on the Euclidean distance in the inverse-distance term.
pub const DISTANCE_FLOOR: f64 = 1e-8;
/// Default acceptance threshold.
pub const DEFAULT_TAU: f64 = 0.8;
/// Default cosine weight.
pub const DEFAULT_ALPHA: f64 = 0.5;
/// Default number of labeled samples drawn per class.
pub const DEFAULT_SAMPLES_PER_CLASS: usize = 50;

/// One median feature vector per class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemplateLibrary<T> {
    templates: Vec<Vec<T>>,
    samples_per_class: usize,
}

impl<T: Real> TemplateLibrary<T> {
    pub fn from_templates(templates: Vec<Vec<T>>, samples_per_class: usize) -> Result<Self> {
        let d = templates.first().map(Vec::len).ok_or_else(|| Error::Argument("template library needs a class".into()))?;
        if d == 0 || templates.iter().any(|t| t.len() != d) {
            return Err(Error::Argument("templates must share one positive dimension".into()));
        }
        Ok(Self { templates, samples_per_class })
    }

    pub fn class_count(&self) -> usize {
        self.templates.len()
    }

    pub fn dim(&self) -> usize {
        self.templates[0].len()
    }

    pub fn samples_per_class(&self) -> usize {
        self.samples_per_class
    }

    pub fn templates(&self) -> &[Vec<T>] {
        &self.templates
    }
}

/// Coordinate-wise median; an even count averages the two middle values.
pub fn coordinate_median<T: Real>(vectors: &[&[T]]) -> Vec<T> {
    let d = vectors[0].len();
    let n = vectors.len();
    let mut col = Vec::with_capacity(n);
    (0..d)
        .map(|j| {
            col.clear();
            col.extend(vectors.iter().map(|v| v[j]));
            col.sort_by(|a, b| a.partial_cmp(b).expect("finite features"));
            if n % 2 == 1 {
                col[n / 2]
            } else {
                (col[n / 2 - 1] + col[n / 2]) / T::lit(2.0)
            }
        })
        .collect()
}

/// Builds one template per class from up to `k` vectors drawn without
/// replacement (all of them when the class has fewer).
pub fn build_template_library<T: Real>(features: &[Vec<Vec<T>>], k: usize, rng: &mut impl Rng) -> Result<TemplateLibrary<T>> {
    if features.is_empty() || k == 0 {
        return Err(Error::Argument("template library needs classes and k > 0".into()));
    }
    let mut templates = Vec::with_capacity(features.len());
    for (c, class) in features.iter().enumerate() {
        if class.is_empty() {
            return Err(Error::Argument(format!("class {c} has no feature vectors")));
        }
        let chosen: Vec<&[T]> = if class.len() <= k {
            class.iter().map(Vec::as_slice).collect()
        } else {
            let mut idx = sample(rng, class.len(), k).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| class[i].as_slice()).collect()
        };
        if chosen.iter().any(|v| v.len() != chosen[0].len()) {
            return Err(Error::Argument(format!("class {c} mixes feature dimensions")));
        }
        templates.push(coordinate_median(&chosen));
    }
    TemplateLibrary::from_templates(templates, k)
}

/// `alpha * cos(f, t) + (1 - alpha) / max(|f - t|, 1e-8)`.
pub fn similarity_score<T: Real>(f: &[T], t: &[T], alpha: T) -> Result<T> {
    if f.len() != t.len() {
        return Err(Error::Shape(format!("feature dim {} vs template dim {}", f.len(), t.len())));
    }
    if !(alpha >= T::zero() && alpha <= T::one()) {
        return Err(Error::Argument(format!("alpha {alpha} outside [0, 1]")));
    }
    let (nf, nt) = (norm(f), norm(t));
    if nf <= T::zero() || nt <= T::zero() {
        return Err(Error::Argument("similarity of a zero-norm vector".into()));
    }
    let dot: T = f.iter().zip(t).map(|(&a, &b)| a * b).sum();
    let dist = f.iter().zip(t).map(|(&a, &b)| (a - b) * (a - b)).sum::<T>().sqrt();
    Ok(alpha * dot / (nf * nt) + (T::one() - alpha) / dist.max(T::lit(DISTANCE_FLOOR)))
}

fn norm<T: Real>(v: &[T]) -> T {
    v.iter().map(|&x| x * x).sum::<T>().sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProxyLabel<T> {
    /// Winning class, or `None` when the best score is below the threshold.
    pub label: Option<usize>,
    pub score: T,
    pub per_class_scores: Vec<T>,
}

impl<T> ProxyLabel<T> {
    /// The label with `-1` standing for "unassigned".
    pub fn code(&self) -> i64 {
        self.label.map_or(-1, |l| l as i64)
    }
}

/// Scores `f` against every template; the best class (lowest index on
/// ties) is assigned when its score reaches `tau`.
pub fn assign_label<T: Real>(f: &[T], lib: &TemplateLibrary<T>, tau: T, alpha: T) -> Result<ProxyLabel<T>> {
    if f.len() != lib.dim() {
        return Err(Error::Shape(format!("feature dim {} vs library dim {}", f.len(), lib.dim())));
    }
    let per_class_scores = lib.templates.iter().map(|t| similarity_score(f, t, alpha)).collect::<Result<Vec<_>>>()?;
    let (best, score) = per_class_scores
        .iter()
        .enumerate()
        .fold((0, per_class_scores[0]), |(bi, bs), (i, &s)| if s > bs { (i, s) } else { (bi, bs) });
    Ok(ProxyLabel { label: (score >= tau).then_some(best), score, per_class_scores })
}

/// Proxy labels of a reconstructed set.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSubset<T> {
    /// `(sample index, label)` for every accepted sample, in input order.
    pub accepted: Vec<(usize, ProxyLabel<T>)>,
    /// Every sample's label, accepted or not.
    pub all: Vec<ProxyLabel<T>>,
    pub discarded: usize,
}

/// Extracts features for `samples` (in batches) and keeps those whose
/// proxy label clears `tau`.
pub fn label_reconstructed_set<T: Real, S>(
    samples: &[S],
    mut extractor: impl FnMut(&[S]) -> Result<Vec<Vec<T>>>,
    lib: &TemplateLibrary<T>,
    tau: T,
    alpha: T,
) -> Result<LabeledSubset<T>> {
    const CHUNK: usize = 64;
    let mut all = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(CHUNK) {
        let feats = extractor(chunk)?;
        if feats.len() != chunk.len() {
            return Err(Error::Shape(format!("extractor returned {} vectors for {} samples", feats.len(), chunk.len())));
        }
        for f in &feats {
            all.push(assign_label(f, lib, tau, alpha)?);
        }
    }
    let accepted: Vec<_> = all.iter().enumerate().filter(|(_, p)| p.label.is_some()).map(|(i, p)| (i, p.clone())).collect();
    let discarded = all.len() - accepted.len();
    Ok(LabeledSubset { accepted, all, discarded })
}
