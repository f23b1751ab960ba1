//! Stratified train/test and labeled/unlabeled partitioning.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Share of each grade held out for testing.
pub const TEST_FRACTION: f64 = 0.2;

/// Indices into a dataset; the three sets are disjoint and each is sorted.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
    pub test: Vec<usize>,
}

/// Per grade: shuffle, hold out `round(0.2 n)` for testing, then label
/// `round(label_fraction * n_train)` of the rest.
pub fn split_dataset(labels: &[usize], label_fraction: f64, seed: u64) -> Result<Split> {
    if !(label_fraction > 0.0 && label_fraction < 1.0) {
        return Err(Error::Argument(format!("label fraction {label_fraction} outside (0, 1)")));
    }
    let classes = labels.iter().max().map_or(0, |&m| m + 1);
    let mut rng = rng::stream(seed, "split");
    let mut out = Split { labeled: Vec::new(), unlabeled: Vec::new(), test: Vec::new() };
    for c in 0..classes {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        if idx.is_empty() {
            continue;
        }
        idx.shuffle(&mut rng);
        let n_test = (TEST_FRACTION * idx.len() as f64).round() as usize;
        let train = &idx[n_test..];
        let n_lab = (label_fraction * train.len() as f64).round() as usize;
        if n_lab == 0 {
            return Err(Error::Stratification(format!(
                "grade {c} has {} training samples; fraction {label_fraction} labels none",
                train.len()
            )));
        }
        out.test.extend(&idx[..n_test]);
        out.labeled.extend(&train[..n_lab]);
        out.unlabeled.extend(&train[n_lab..]);
    }
    out.labeled.sort_unstable();
    out.unlabeled.sort_unstable();
    out.test.sort_unstable();
    Ok(out)
}
