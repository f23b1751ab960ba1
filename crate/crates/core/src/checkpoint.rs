//! Model checkpoints: a directory per model holding its parameter stores
//! (one HSTN file per tensor plus an index) and a `key=value` meta file.
//! Architectures are rebuilt from configuration and the stored tensors
//! must match them exactly.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::data::{read_hstn, write_atomic, write_hstn};
use crate::error::{Error, Result};
use crate::him::{Branch, FlatClassifier, HierarchyModel, HierarchyTree, TreeNode};
use crate::mirec::{MirecConfig, MirecModel};
use crate::nn::ParamStore;
use crate::qcn::{QcnConfig, QcnParams};
use crate::qtest::{BaseConfig, NodeModel};
use crate::scalar::Real;
use crate::sirl::TemplateLibrary;
use crate::tensor::Tensor;

pub const INDEX_FILE: &str = "index.csv";
pub const META_FILE: &str = "meta.txt";
pub const TREE_FILE: &str = "tree.csv";

fn csv_err(e: csv::Error) -> Error {
    Error::Format(format!("csv: {e}"))
}

/// Writes `NNNN.hstn` per tensor and `index.csv` (`file,name`) in store
/// order.
pub fn save_store<T: Real>(dir: &Path, store: &ParamStore<T>) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["file", "name"]).map_err(csv_err)?;
    for (i, (name, t)) in store.iter().enumerate() {
        let file = format!("{i:04}.hstn");
        write_hstn(&dir.join(&file), t)?;
        w.write_record([file.as_str(), name]).map_err(csv_err)?;
    }
    write_atomic(&dir.join(INDEX_FILE), &w.into_inner().map_err(|e| Error::Format(e.to_string()))?)
}

pub fn load_store<T: Real>(dir: &Path) -> Result<ParamStore<T>> {
    let mut r = csv::Reader::from_path(dir.join(INDEX_FILE)).map_err(csv_err)?;
    let mut store = ParamStore::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err)?;
        if rec.len() != 2 {
            return Err(Error::Format(format!("{}: expected file,name rows", dir.display())));
        }
        store.add(&rec[1], read_hstn::<T>(&dir.join(&rec[0]))?);
    }
    Ok(store)
}

pub fn write_meta(dir: &Path, entries: &[(&str, String)]) -> Result<()> {
    let text: String = entries.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
    write_atomic(&dir.join(META_FILE), text.as_bytes())
}

pub fn read_meta(dir: &Path) -> Result<BTreeMap<String, String>> {
    let path = dir.join(META_FILE);
    let text = fs::read_to_string(&path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| Error::Format(format!("{}: bad line {l:?}", path.display())))
        })
        .collect()
}

fn meta_value<V: std::str::FromStr>(meta: &BTreeMap<String, String>, key: &str) -> Result<V> {
    meta.get(key)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Format(format!("checkpoint meta lacks a valid {key}")))
}

fn expect_kind(meta: &BTreeMap<String, String>, kind: &str) -> Result<()> {
    match meta.get("kind") {
        Some(k) if k == kind => Ok(()),
        other => Err(Error::Format(format!("expected a {kind} checkpoint, found {other:?}"))),
    }
}

/// Kind recorded in a checkpoint directory (`node`, `flat`, `mirec`,
/// `hierarchy`).
pub fn checkpoint_kind(dir: &Path) -> Result<String> {
    read_meta(dir)?.remove("kind").ok_or_else(|| Error::Format(format!("{}: no kind in meta", dir.display())))
}

pub fn save_node<T: Real>(dir: &Path, m: &NodeModel<T>) -> Result<()> {
    save_store(&dir.join("student"), &m.student.params)?;
    save_store(&dir.join("student_buffers"), &m.student.buffers)?;
    save_store(&dir.join("teacher"), &m.teacher.params)?;
    save_store(&dir.join("teacher_buffers"), &m.teacher.buffers)?;
    let mut angles = ParamStore::new();
    angles.add("qcn.angles", m.angles.as_tensor());
    save_store(&dir.join("angles"), &angles)?;
    write_meta(
        dir,
        &[
            ("kind", "node".into()),
            ("in_ch", m.student.in_ch.to_string()),
            ("mu", m.mu.to_string()),
            ("omega", m.omega.to_string()),
        ],
    )
}

/// Loads a node saved by [`save_node`] into the architecture given by
/// `base` and `qcn`.
pub fn load_node<T: Real>(dir: &Path, base: &BaseConfig, qcn: QcnConfig) -> Result<NodeModel<T>> {
    let meta = read_meta(dir)?;
    expect_kind(&meta, "node")?;
    let in_ch = meta_value(&meta, "in_ch")?;
    let mut m = NodeModel::new(base, qcn, in_ch, meta_value(&meta, "mu")?, meta_value(&meta, "omega")?, 0)?;
    m.student.params.load_from(load_store(&dir.join("student"))?)?;
    m.student.buffers.load_from(load_store(&dir.join("student_buffers"))?)?;
    m.teacher.params.load_from(load_store(&dir.join("teacher"))?)?;
    m.teacher.buffers.load_from(load_store(&dir.join("teacher_buffers"))?)?;
    let angles: ParamStore<T> = load_store(&dir.join("angles"))?;
    let a = angles.tensors().first().ok_or_else(|| Error::Format("missing circuit angles".into()))?;
    if a.len() != m.circuit.n_params() {
        return Err(Error::Shape(format!("{} stored angles for a circuit with {}", a.len(), m.circuit.n_params())));
    }
    m.angles = QcnParams { angles: a.data().to_vec() };
    Ok(m)
}

pub fn save_flat<T: Real>(dir: &Path, m: &FlatClassifier<T>) -> Result<()> {
    save_store(&dir.join("net"), &m.net.params)?;
    save_store(&dir.join("net_buffers"), &m.net.buffers)?;
    save_store(&dir.join("head"), &m.head)?;
    write_meta(dir, &[("kind", "flat".into()), ("in_ch", m.net.in_ch.to_string()), ("classes", m.classes.to_string())])
}

pub fn load_flat<T: Real>(dir: &Path, base: &BaseConfig) -> Result<FlatClassifier<T>> {
    let meta = read_meta(dir)?;
    expect_kind(&meta, "flat")?;
    let mut m = FlatClassifier::new(base, meta_value(&meta, "in_ch")?, meta_value(&meta, "classes")?, 0)?;
    m.net.params.load_from(load_store(&dir.join("net"))?)?;
    m.net.buffers.load_from(load_store(&dir.join("net_buffers"))?)?;
    m.head.load_from(load_store(&dir.join("head"))?)?;
    Ok(m)
}

pub fn save_mirec<T: Real>(dir: &Path, m: &MirecModel<T>) -> Result<()> {
    save_store(&dir.join("generator"), &m.generator.params)?;
    save_store(&dir.join("generator_buffers"), &m.generator.buffers)?;
    save_store(&dir.join("discriminator"), &m.discriminator.params)?;
    let g = m.geometry();
    write_meta(dir, &[("kind", "mirec".into()), ("h", g.h.to_string()), ("w", g.w.to_string()), ("ch", g.ch.to_string())])
}

pub fn load_mirec<T: Real>(dir: &Path, config: &MirecConfig) -> Result<MirecModel<T>> {
    let meta = read_meta(dir)?;
    expect_kind(&meta, "mirec")?;
    let mut m = MirecModel::new(config, meta_value(&meta, "h")?, meta_value(&meta, "w")?, meta_value(&meta, "ch")?)?;
    m.generator.params.load_from(load_store(&dir.join("generator"))?)?;
    m.generator.buffers.load_from(load_store(&dir.join("generator_buffers"))?)?;
    m.discriminator.params.load_from(load_store(&dir.join("discriminator"))?)?;
    Ok(m)
}

fn classes_text(c: &[usize]) -> String {
    c.iter().map(ToString::to_string).collect::<Vec<_>>().join(" ")
}

fn branch_text(b: Branch) -> String {
    match b {
        Branch::Leaf(c) => format!("leaf:{c}"),
        Branch::Node(i) => format!("node:{i}"),
    }
}

fn parse_classes(s: &str) -> Result<Vec<usize>> {
    s.split_whitespace().map(|v| v.parse().map_err(|_| Error::Format(format!("bad class list {s:?}")))).collect()
}

fn parse_branch(s: &str) -> Result<Branch> {
    let bad = || Error::Format(format!("bad branch {s:?}"));
    let (kind, v) = s.split_once(':').ok_or_else(bad)?;
    let v = v.parse().map_err(|_| bad())?;
    match kind {
        "leaf" => Ok(Branch::Leaf(v)),
        "node" => Ok(Branch::Node(v)),
        _ => Err(bad()),
    }
}

pub fn save_tree(path: &Path, tree: &HierarchyTree) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["id", "depth", "left", "right", "left_branch", "right_branch"]).map_err(csv_err)?;
    for n in &tree.nodes {
        w.write_record([
            n.id.clone(),
            n.depth.to_string(),
            classes_text(&n.left),
            classes_text(&n.right),
            branch_text(n.left_branch),
            branch_text(n.right_branch),
        ])
        .map_err(csv_err)?;
    }
    write_atomic(path, &w.into_inner().map_err(|e| Error::Format(e.to_string()))?)
}

/// Reads a tree written by [`save_tree`] and checks its invariants.
pub fn load_tree(path: &Path) -> Result<HierarchyTree> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let mut nodes = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err)?;
        if rec.len() != 6 {
            return Err(Error::Format(format!("{}: expected 6 columns", path.display())));
        }
        nodes.push(TreeNode {
            id: rec[0].to_string(),
            depth: rec[1].parse().map_err(|_| Error::Format(format!("bad depth {:?}", &rec[1])))?,
            left: parse_classes(&rec[2])?,
            right: parse_classes(&rec[3])?,
            left_branch: parse_branch(&rec[4])?,
            right_branch: parse_branch(&rec[5])?,
        });
    }
    let classes = nodes.first().map_or(0, |n| n.left.len() + n.right.len());
    let tree = HierarchyTree { classes, nodes };
    tree.validate().map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    Ok(tree)
}

/// `tree.csv` plus one node checkpoint per trained node under `nodes/<id>`.
pub fn save_hierarchy<T: Real>(dir: &Path, h: &HierarchyModel<T>) -> Result<()> {
    fs::create_dir_all(dir)?;
    save_tree(&dir.join(TREE_FILE), &h.tree)?;
    for (node, model) in h.tree.nodes.iter().zip(&h.nodes) {
        if let Some(m) = model {
            save_node(&dir.join("nodes").join(&node.id), m)?;
        }
    }
    write_meta(dir, &[("kind", "hierarchy".into())])
}

/// Loads a hierarchy; nodes without a checkpoint stay untrained.
pub fn load_hierarchy<T: Real>(dir: &Path, base: &BaseConfig, qcn: QcnConfig) -> Result<HierarchyModel<T>> {
    let meta = read_meta(dir)?;
    expect_kind(&meta, "hierarchy")?;
    let mut h = HierarchyModel::untrained(load_tree(&dir.join(TREE_FILE))?);
    for (i, node) in h.tree.nodes.clone().iter().enumerate() {
        let ndir = dir.join("nodes").join(&node.id);
        if ndir.join(META_FILE).exists() {
            h.nodes[i] = Some(load_node(&ndir, base, qcn)?);
        }
    }
    Ok(h)
}

/// Stores a template library under `dir/templates`.
pub fn save_templates<T: Real>(dir: &Path, lib: &TemplateLibrary<T>) -> Result<()> {
    let (c, d) = (lib.class_count(), lib.dim());
    let flat: Vec<T> = lib.templates().iter().flatten().copied().collect();
    let mut store = ParamStore::new();
    store.add("templates", Tensor::new(vec![c, d], flat)?);
    store.add("samples_per_class", Tensor::from_vec(vec![T::from_usize(lib.samples_per_class()).unwrap_or_else(T::zero)]));
    save_store(&dir.join("templates"), &store)
}

/// Loads templates saved by [`save_templates`]; `None` when absent.
pub fn load_templates<T: Real>(dir: &Path) -> Result<Option<TemplateLibrary<T>>> {
    let tdir = dir.join("templates");
    if !tdir.join(INDEX_FILE).exists() {
        return Ok(None);
    }
    let store: ParamStore<T> = load_store(&tdir)?;
    let [t, k] = store.tensors() else {
        return Err(Error::Format(format!("{}: expected templates and samples_per_class", tdir.display())));
    };
    if t.shape().len() != 2 {
        return Err(Error::Format(format!("templates must be [classes, dim], found {:?}", t.shape())));
    }
    let templates = (0..t.shape()[0]).map(|r| t.row(r).to_vec()).collect();
    let k = k.item()?.as_f64().round() as usize;
    TemplateLibrary::from_templates(templates, k).map(Some)
}
