//! Datasets on disk and in memory: synthetic generation, splitting, the
//! HSTN tensor format and atomic file writes.

mod hstn;
mod split;
mod synth;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

pub use hstn::{decode_hstn, encode_hstn, read_hstn, write_hstn, MAGIC};
pub use split::{split_dataset, Split, TEST_FRACTION};
pub use synth::{synth_dataset, SyntheticSpec};

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Images with string ids and integer grades.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<T> {
    pub ids: Vec<String>,
    pub images: Vec<Tensor<T>>,
    pub labels: Vec<usize>,
}

pub const LABELS_FILE: &str = "labels.csv";
pub const TENSOR_EXT: &str = "hstn";

impl<T: Real> Dataset<T> {
    pub fn new(ids: Vec<String>, images: Vec<Tensor<T>>, labels: Vec<usize>) -> Result<Self> {
        if ids.len() != images.len() || ids.len() != labels.len() {
            return Err(Error::Argument(format!(
                "dataset has {} ids, {} images and {} labels",
                ids.len(),
                images.len(),
                labels.len()
            )));
        }
        Ok(Self { ids, images, labels })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn class_count(&self) -> usize {
        self.labels.iter().max().map_or(0, |&m| m + 1)
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            ids: indices.iter().map(|&i| self.ids[i].clone()).collect(),
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Writes `<id>.hstn` per image plus `labels.csv` (`id,grade`).
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for (id, img) in self.ids.iter().zip(&self.images) {
            write_hstn(&dir.join(format!("{id}.{TENSOR_EXT}")), img)?;
        }
        write_labels(&dir.join(LABELS_FILE), &self.ids, &self.labels)
    }

    /// Loads a directory written by [`Dataset::save`], in `labels.csv` order.
    pub fn load(dir: &Path) -> Result<Self> {
        let (ids, labels) = read_labels(&dir.join(LABELS_FILE))?;
        let images = ids
            .iter()
            .map(|id| read_hstn(&dir.join(format!("{id}.{TENSOR_EXT}"))))
            .collect::<Result<Vec<_>>>()?;
        Self::new(ids, images, labels)
    }
}

/// Loads every `.hstn` file of a directory, sorted by id, without labels.
pub fn load_images<T: Real>(dir: &Path) -> Result<(Vec<String>, Vec<Tensor<T>>)> {
    let mut found = BTreeMap::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) == Some(TENSOR_EXT) {
            let id = path.file_stem().and_then(|s| s.to_str()).ok_or_else(|| Error::Format(format!("bad file name {path:?}")))?;
            found.insert(id.to_string(), path.clone());
        }
    }
    let mut ids = Vec::with_capacity(found.len());
    let mut images = Vec::with_capacity(found.len());
    for (id, path) in found {
        images.push(read_hstn(&path)?);
        ids.push(id);
    }
    Ok((ids, images))
}

pub fn write_labels(path: &Path, ids: &[String], labels: &[usize]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["id", "grade"]).map_err(csv_err)?;
    for (id, g) in ids.iter().zip(labels) {
        w.write_record([id.as_str(), &g.to_string()]).map_err(csv_err)?;
    }
    write_atomic(path, &w.into_inner().map_err(|e| Error::Format(e.to_string()))?)
}

pub fn read_labels(path: &Path) -> Result<(Vec<String>, Vec<usize>)> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let headers = r.headers().map_err(csv_err)?.clone();
    if headers.iter().collect::<Vec<_>>() != ["id", "grade"] {
        return Err(Error::Format(format!("{path:?}: expected header id,grade, found {headers:?}")));
    }
    let (mut ids, mut labels) = (Vec::new(), Vec::new());
    for rec in r.records() {
        let rec = rec.map_err(csv_err)?;
        let grade = rec[1].trim().parse().map_err(|_| Error::Format(format!("{path:?}: bad grade {:?}", &rec[1])))?;
        ids.push(rec[0].to_string());
        labels.push(grade);
    }
    Ok((ids, labels))
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Format(format!("csv: {e}"))
}

/// Writes through a sibling temporary file and renames it into place, so a
/// reader never observes a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path.file_name().ok_or_else(|| Error::Argument(format!("{path:?} has no file name")))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })?;
    Ok(())
}
