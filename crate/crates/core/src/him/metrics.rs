//! Classification metrics and the explanation-map score combiner.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

/// One-vs-rest counts per class plus the overall tallies.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub per_class: Vec<ClassCounts>,
    pub total: usize,
    pub correct: usize,
}

impl ConfusionCounts {
    /// Counts for a single positive class.
    pub fn binary(tp: usize, fp: usize, tn: usize, fn_: usize) -> Self {
        Self { per_class: vec![ClassCounts { tp, fp, tn, fn_ }], total: tp + fp + tn + fn_, correct: tp + tn }
    }

    pub fn from_predictions(truth: &[usize], pred: &[usize], classes: usize) -> Result<Self> {
        if truth.len() != pred.len() {
            return Err(Error::Argument(format!("{} labels vs {} predictions", truth.len(), pred.len())));
        }
        if let Some(&c) = truth.iter().chain(pred).find(|&&c| c >= classes) {
            return Err(Error::Argument(format!("class {c} out of range {classes}")));
        }
        let mut per_class = vec![ClassCounts::default(); classes];
        for (&t, &p) in truth.iter().zip(pred) {
            for (c, k) in per_class.iter_mut().enumerate() {
                match (t == c, p == c) {
                    (true, true) => k.tp += 1,
                    (false, true) => k.fp += 1,
                    (true, false) => k.fn_ += 1,
                    (false, false) => k.tn += 1,
                }
            }
        }
        let correct = truth.iter().zip(pred).filter(|(t, p)| t == p).count();
        Ok(Self { per_class, total: truth.len(), correct })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub acc: f64,
    pub pre: f64,
    pub rec: f64,
    pub f1: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Accuracy over all samples; precision, recall and F1 averaged over the
/// classes. A class whose value has a zero denominator scores 0.
pub fn compute_metrics(counts: &ConfusionCounts) -> Result<Metrics> {
    if counts.total == 0 || counts.per_class.is_empty() {
        return Err(Error::Argument("metrics need at least one sample".into()));
    }
    let k = counts.per_class.len() as f64;
    let (mut pre, mut rec, mut f1) = (0.0, 0.0, 0.0);
    for c in &counts.per_class {
        let p = ratio(c.tp, c.tp + c.fp);
        let r = ratio(c.tp, c.tp + c.fn_);
        pre += p;
        rec += r;
        f1 += if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
    }
    Ok(Metrics { acc: ratio(counts.correct, counts.total), pre: pre / k, rec: rec / k, f1: f1 / k })
}

/// Explanation-map quality components.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdccComponents {
    pub avg_drop: f64,
    pub coherency: f64,
    pub complexity: f64,
}

/// `3 / (1/(1 - avg_drop) + 1/coherency + 1/(1 - complexity))`.
pub fn adcc(c: AdccComponents) -> Result<f64> {
    let finite = [c.avg_drop, c.coherency, c.complexity].iter().all(|v| v.is_finite());
    if !finite || c.avg_drop >= 1.0 || c.coherency <= 0.0 || c.complexity >= 1.0 {
        return Err(Error::Domain(format!("ADCC components out of domain: {c:?}")));
    }
    Ok(3.0 / (1.0 / (1.0 - c.avg_drop) + 1.0 / c.coherency + 1.0 / (1.0 - c.complexity)))
}
