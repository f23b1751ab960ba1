use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::Serialize;

use hsemis::checkpoint::{
    checkpoint_kind, load_flat, load_hierarchy, load_mirec, load_templates, load_tree, save_flat, save_hierarchy, save_mirec,
    save_templates, TREE_FILE,
};
use hsemis::config::{Precision, RunConfig};
use hsemis::data::{load_images, split_dataset, synth_dataset, write_atomic, write_hstn, Dataset};
use hsemis::him::{
    aggregate_accuracy, compute_metrics, decompose, flat_history_csv, node_training_set, run_pipeline, train_flat, ConfusionCounts,
    FlatClassifier, FlatConfig, HierarchyModel, Metrics,
};
use hsemis::mirec::{log_csv, train_mirec, MirecConfig, MirecModel};
use hsemis::qtest::{history_csv, train_node, NodeConfig, NodeData};
use hsemis::rng::{derive_seed, label};
use hsemis::scalar::Real;
use hsemis::sirl::{build_template_library, label_reconstructed_set, TemplateLibrary};
use hsemis::tensor::Tensor;

#[derive(Parser, Debug)]
#[command(name = "hsemis", version, about = "Hierarchical semi-supervised severity grading")]
struct Cli {
    /// Run seed; overrides the config file's `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Flat `key=value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output path (file or directory, depending on the command).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Measured circuit wire (`last` or an index); overrides `qcn.wire`.
    #[arg(long, global = true)]
    wire: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic dataset (`<id>.hstn` images and labels.csv).
    Synth,
    /// Stratified split into labeled/, unlabeled/ and test/.
    Split {
        #[arg(long)]
        data: PathBuf,
    },
    /// Train the masked reconstruction network on a directory of images.
    MirecTrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        mask_ratio: Option<f64>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Reconstruct every image of a directory with freshly sampled masks.
    Reconstruct {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Assign proxy labels (`sample_id,label,score`; -1 = discarded).
    SirlLabel {
        /// Checkpoint holding a feature extractor (flat classifier or
        /// reconstruction network) and, unless --labeled is given, templates.
        #[arg(long)]
        templates: PathBuf,
        /// Directory of reconstructed images to label.
        #[arg(long)]
        recon: PathBuf,
        /// Labeled dataset to (re)build the templates from.
        #[arg(long)]
        labeled: Option<PathBuf>,
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long)]
        alpha: Option<f64>,
    },
    /// Train one hierarchy node (`root`, `2L`, ...) into a hierarchy
    /// directory, or the flat classifier (`flat`) with its class templates.
    TrainNode {
        #[arg(long)]
        node: String,
        /// Labeled dataset directory or its labels.csv.
        #[arg(long)]
        labeled: PathBuf,
        /// Unlabeled images for the consistency term.
        #[arg(long)]
        unlabeled: Option<PathBuf>,
        /// Reconstructed images with proxy labels (requires --proxy-labels).
        #[arg(long, requires = "proxy_labels")]
        proxies: Option<PathBuf>,
        #[arg(long)]
        proxy_labels: Option<PathBuf>,
        #[arg(long)]
        mu: Option<f64>,
        /// `ramp` or a constant weight.
        #[arg(long)]
        lambda_schedule: Option<String>,
    },
    /// Run the full pipeline and write the report JSON.
    Run {
        /// Directory for models, histories and proxy labels.
        #[arg(long)]
        artifacts: Option<PathBuf>,
    },
    /// Evaluate a trained hierarchy on a labeled dataset.
    Eval {
        #[arg(long)]
        models: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Optional flat classifier evaluated alongside.
        #[arg(long)]
        baseline: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.chain().find_map(|c| c.downcast_ref::<hsemis::Error>()).map_or(3, hsemis::Error::exit_code);
            ExitCode::from(code as u8)
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    let mut set = |key: &str, value: Option<String>| value.map_or(Ok(()), |v| config.set(key, &v));
    set("qcn.wire", cli.wire.clone())?;
    match &cli.command {
        Command::MirecTrain { mask_ratio, alpha, steps, .. } => {
            set("mirec.mask_ratio", mask_ratio.map(|v| v.to_string()))?;
            set("mirec.alpha", alpha.map(|v| v.to_string()))?;
            set("mirec.steps", steps.map(|v| v.to_string()))?;
        }
        Command::SirlLabel { tau, alpha, .. } => {
            set("sirl.tau", tau.map(|v| v.to_string()))?;
            set("sirl.alpha", alpha.map(|v| v.to_string()))?;
        }
        Command::TrainNode { mu, lambda_schedule, .. } => {
            set("qtest.mu", mu.map(|v| v.to_string()))?;
            set("qtest.lambda", lambda_schedule.clone())?;
        }
        _ => {}
    }
    config.validate()?;
    Ok(config)
}

fn out_path(cli: &Cli, default: &str) -> PathBuf {
    cli.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

/// The seed a pipeline stage derives from the run seed.
fn stage_seed(config: &RunConfig, stage: &str) -> u64 {
    derive_seed(config.seed, label(stage))
}

fn dispatch(cli: &Cli) -> Result<()> {
    let config = load_config(cli)?;
    match config.precision {
        Precision::F32 => execute::<f32>(cli, &config),
        Precision::F64 => execute::<f64>(cli, &config),
    }
}

fn execute<T: Real>(cli: &Cli, config: &RunConfig) -> Result<()> {
    match &cli.command {
        Command::Synth => {
            let spec = hsemis::data::SyntheticSpec { seed: stage_seed(config, "data"), ..config.synth.clone() };
            let ds: Dataset<T> = synth_dataset(&spec)?;
            ds.save(&out_path(cli, "data"))?;
        }
        Command::Split { data } => {
            let ds: Dataset<T> = Dataset::load(data).with_context(|| format!("loading {}", data.display()))?;
            let split = split_dataset(&ds.labels, config.label_fraction, stage_seed(config, "split"))?;
            let out = out_path(cli, "split");
            ds.subset(&split.labeled).save(&out.join("labeled"))?;
            ds.subset(&split.test).save(&out.join("test"))?;
            let unlabeled = ds.subset(&split.unlabeled);
            save_images(&out.join("unlabeled"), &unlabeled.ids, &unlabeled.images)?;
        }
        Command::MirecTrain { data, .. } => {
            let (_, images) = load_images::<T>(data)?;
            let mirec_config = MirecConfig { seed: stage_seed(config, "mirec"), ..config.mirec.clone() };
            let outcome = train_mirec(&images, &mirec_config)?;
            let out = out_path(cli, "mirec");
            save_mirec(&out, &outcome.model)?;
            write_atomic(&out.join("log.csv"), log_csv(&outcome.log).as_bytes())?;
        }
        Command::Reconstruct { ckpt, data } => {
            let mut m = load_mirec::<T>(ckpt, &config.mirec)?;
            let (ids, images) = load_images::<T>(data)?;
            let recon = m.reconstruct(&images, stage_seed(config, "reconstruct"))?;
            save_images(&out_path(cli, "recon"), &ids, &recon)?;
        }
        Command::SirlLabel { templates, recon, labeled, .. } => {
            let (ids, images) = load_images::<T>(recon)?;
            let extractor = match checkpoint_kind(templates)?.as_str() {
                "flat" => Features::Flat(load_flat::<T>(templates, &config.node.base)?),
                "mirec" => Features::Mirec(load_mirec::<T>(templates, &config.mirec)?),
                other => bail!(hsemis::Error::Format(format!("{other} checkpoints cannot extract features"))),
            };
            let extract = |x: &[Tensor<T>]| extractor.extract(x);
            let lib = match labeled {
                Some(dir) => build_templates(&load_labeled::<T>(dir)?, extract, config)?,
                None => load_templates::<T>(templates)?.ok_or_else(|| {
                    hsemis::Error::Config(format!("{} holds no templates; pass --labeled", templates.display()))
                })?,
            };
            let subset = label_reconstructed_set(&images, extract, &lib, T::lit(config.sirl.tau), T::lit(config.sirl.alpha))?;
            let rows: Vec<(usize, i64, f64)> = subset.all.iter().enumerate().map(|(i, p)| (i, p.code(), p.score.as_f64())).collect();
            write_atomic(&out_path(cli, "labels.csv"), proxy_csv(&ids, &rows).as_bytes())?;
        }
        Command::TrainNode { node, labeled, unlabeled, proxies, proxy_labels, .. } => {
            let lab = load_labeled::<T>(labeled)?;
            let originals: Vec<(Tensor<T>, usize)> = lab.images.iter().cloned().zip(lab.labels.iter().copied()).collect();
            let ch = channels(&lab.images)?;
            let out = out_path(cli, "models");
            let n = &config.node;
            if node == "flat" {
                let flat_config = flat_config(config);
                let outcome = train_flat(&originals, lab.class_count(), ch, &flat_config)?;
                save_flat(&out, &outcome.model)?;
                let model = &outcome.model;
                save_templates(&out, &build_templates(&lab, |x: &[Tensor<T>]| model.net.extract(x), config)?)?;
                write_atomic(&out.join("history.csv"), flat_history_csv(&outcome.history).as_bytes())?;
                return Ok(());
            }
            let proxied = match (proxies, proxy_labels) {
                (Some(dir), Some(csv)) => read_proxies::<T>(dir, csv)?,
                _ => Vec::new(),
            };
            let classes = lab.class_count().max(proxied.iter().map(|(_, c)| c + 1).max().unwrap_or(0));
            let counts: Vec<usize> =
                (0..classes).map(|c| originals.iter().chain(&proxied).filter(|(_, y)| *y == c).count()).collect();
            let tree = if out.join(TREE_FILE).exists() {
                load_tree(&out.join(TREE_FILE))?
            } else {
                decompose(classes, config.mode, &counts)?
            };
            let idx = tree
                .nodes
                .iter()
                .position(|t| &t.id == node)
                .with_context(|| format!("no node {node} in the hierarchy (nodes: {:?})", tree.nodes.iter().map(|t| &t.id).collect::<Vec<_>>()))
                .map_err(|e| hsemis::Error::Config(format!("{e:#}")))?;
            let data = node_training_set(&tree, idx, &originals, &proxied);
            let unl = match unlabeled {
                Some(dir) => load_images::<T>(dir)?.1,
                None => Vec::new(),
            };
            let node_config = NodeConfig { seed: stage_seed(config, &format!("node.{node}")), ..n.clone() };
            let outcome = train_node(&NodeData { labeled: &data, unlabeled: &unl }, ch, &node_config)?;
            let mut h = if out.join(TREE_FILE).exists() {
                load_hierarchy::<T>(&out, &n.base, n.qcn)?
            } else {
                HierarchyModel::untrained(tree)
            };
            h.nodes[idx] = Some(outcome.model);
            save_hierarchy(&out, &h)?;
            write_atomic(&out.join("nodes").join(node).join("history.csv"), history_csv(&outcome.history).as_bytes())?;
        }
        Command::Run { artifacts } => {
            let outcome = run_pipeline::<T>(config)?;
            write_atomic(&out_path(cli, "report.json"), to_sorted_json(&outcome.report)?.as_bytes())?;
            if let Some(dir) = artifacts {
                write_atomic(&dir.join("config.txt"), config.to_text().as_bytes())?;
                write_atomic(&dir.join("mirec_log.csv"), log_csv(&outcome.mirec_log).as_bytes())?;
                write_atomic(&dir.join("baseline_history.csv"), flat_history_csv(&outcome.baseline_history).as_bytes())?;
                for (id, hist) in &outcome.node_histories {
                    write_atomic(&dir.join(format!("node_{id}_history.csv")), history_csv(hist).as_bytes())?;
                }
                let ds = &outcome.dataset;
                let split = split_dataset(&ds.labels, config.label_fraction, stage_seed(config, "split"))?;
                let ids: Vec<String> = split.unlabeled.iter().map(|&i| ds.ids[i].clone()).collect();
                write_atomic(&dir.join("proxy_labels.csv"), proxy_csv(&ids, &outcome.proxy_labels).as_bytes())?;
                save_mirec(&dir.join("mirec"), &outcome.mirec)?;
                save_flat(&dir.join("baseline"), &outcome.baseline)?;
                save_hierarchy(&dir.join("hierarchy"), &outcome.hierarchy)?;
            }
        }
        Command::Eval { models, data, baseline } => {
            let ds: Dataset<T> = Dataset::load(data)?;
            let mut h = load_hierarchy::<T>(models, &config.node.base, config.node.qcn)?;
            let report = evaluate_hierarchy(&mut h, &ds, baseline.as_deref(), config)?;
            write_atomic(&out_path(cli, "eval.json"), to_sorted_json(&report)?.as_bytes())?;
        }
    }
    Ok(())
}

enum Features<T> {
    Flat(FlatClassifier<T>),
    Mirec(MirecModel<T>),
}

impl<T: Real> Features<T> {
    fn extract(&self, images: &[Tensor<T>]) -> hsemis::Result<Vec<Vec<T>>> {
        match self {
            Features::Flat(m) => m.net.extract(images),
            Features::Mirec(m) => m.encoder_features(images),
        }
    }
}

fn flat_config(config: &RunConfig) -> FlatConfig {
    let n = &config.node;
    FlatConfig {
        base: n.base.clone(),
        steps: config.baseline_steps,
        batch: config.baseline_batch,
        optimizer: n.optimizer,
        eval_every: n.eval_every,
        patience: n.patience,
        val_fraction: n.val_fraction,
        eval_batch: n.eval_batch,
        seed: stage_seed(config, "baseline"),
    }
}

/// A labeled dataset given as its directory or its labels.csv.
fn load_labeled<T: Real>(path: &Path) -> Result<Dataset<T>> {
    let dir = if path.is_file() { path.parent().unwrap_or(Path::new(".")) } else { path };
    Dataset::load(dir).with_context(|| format!("loading labeled data from {}", path.display()))
}

/// Median templates over the features of a labeled set.
fn build_templates<T: Real>(
    lab: &Dataset<T>,
    extract: impl Fn(&[Tensor<T>]) -> hsemis::Result<Vec<Vec<T>>>,
    config: &RunConfig,
) -> Result<TemplateLibrary<T>> {
    let mut by_class = vec![Vec::new(); lab.class_count()];
    for (f, &y) in extract(&lab.images)?.into_iter().zip(&lab.labels) {
        by_class[y].push(f);
    }
    let mut rng = hsemis::rng::rng(stage_seed(config, "sirl"));
    Ok(build_template_library(&by_class, config.sirl.samples_per_class, &mut rng)?)
}

fn channels<T: Real>(images: &[Tensor<T>]) -> Result<usize> {
    match images.first() {
        Some(x) if x.shape().len() == 3 => Ok(x.shape()[2]),
        Some(x) => Err(hsemis::Error::Shape(format!("images must be [h, w, ch], found {:?}", x.shape())).into()),
        None => Err(hsemis::Error::Argument("no images".into()).into()),
    }
}

fn save_images<T: Real>(dir: &Path, ids: &[String], images: &[Tensor<T>]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (id, x) in ids.iter().zip(images) {
        write_hstn(&dir.join(format!("{id}.hstn")), x)?;
    }
    Ok(())
}

fn proxy_csv(ids: &[String], rows: &[(usize, i64, f64)]) -> String {
    let mut s = String::from("sample_id,label,score\n");
    for &(i, code, score) in rows {
        s.push_str(&format!("{},{code},{score}\n", ids[i]));
    }
    s
}

/// Accepted proxy-labeled images: rows with label -1 are skipped.
fn read_proxies<T: Real>(dir: &Path, csv_path: &Path) -> Result<Vec<(Tensor<T>, usize)>> {
    let text = std::fs::read_to_string(csv_path).with_context(|| format!("reading {}", csv_path.display()))?;
    let mut lines = text.lines();
    if lines.next() != Some("sample_id,label,score") {
        bail!(hsemis::Error::Format(format!("{}: expected header sample_id,label,score", csv_path.display())));
    }
    let mut out = Vec::new();
    for line in lines.filter(|l| !l.is_empty()) {
        let fields: Vec<&str> = line.split(',').collect();
        let code: i64 = match fields.as_slice() {
            [_, code, _] => code.parse().map_err(|_| hsemis::Error::Format(format!("bad proxy label row {line:?}")))?,
            _ => bail!(hsemis::Error::Format(format!("bad proxy label row {line:?}"))),
        };
        if code >= 0 {
            out.push((hsemis::data::read_hstn(&dir.join(format!("{}.hstn", fields[0])))?, code as usize));
        }
    }
    Ok(out)
}

#[derive(Serialize)]
struct EvalReport {
    agg_accuracy: f64,
    baseline_metrics: Option<Metrics>,
    confusion: Vec<Vec<usize>>,
    flat_metrics: Metrics,
    node_accuracies: BTreeMap<String, f64>,
    samples: usize,
}

fn evaluate_hierarchy<T: Real>(
    h: &mut HierarchyModel<T>,
    ds: &Dataset<T>,
    baseline: Option<&Path>,
    config: &RunConfig,
) -> Result<EvalReport> {
    let classes = h.tree.classes;
    if let Some(&y) = ds.labels.iter().find(|&&y| y >= classes) {
        bail!(hsemis::Error::Argument(format!("label {y} outside the hierarchy's {classes} classes")));
    }
    let mut node_accuracies = BTreeMap::new();
    let mut accs = Vec::new();
    for i in 0..h.tree.nodes.len() {
        let a = h.node_accuracy(i, &ds.images, &ds.labels)?;
        node_accuracies.insert(h.tree.nodes[i].id.clone(), a);
        accs.push(a);
    }
    let pred = h.predict(&ds.images)?;
    let flat_metrics = compute_metrics(&ConfusionCounts::from_predictions(&ds.labels, &pred, classes)?)?;
    let mut confusion = vec![vec![0; classes]; classes];
    ds.labels.iter().zip(&pred).for_each(|(&t, &p)| confusion[t][p] += 1);
    let baseline_metrics = match baseline {
        Some(dir) => {
            let mut m = load_flat::<T>(dir, &config.node.base)?;
            let p = m.predict(&ds.images)?;
            Some(compute_metrics(&ConfusionCounts::from_predictions(&ds.labels, &p, classes)?)?)
        }
        None => None,
    };
    Ok(EvalReport {
        agg_accuracy: aggregate_accuracy(&accs, &h.tree.depths())?,
        baseline_metrics,
        confusion,
        flat_metrics,
        node_accuracies,
        samples: ds.len(),
    })
}

/// Pretty JSON with every object's keys sorted, newline-terminated.
fn to_sorted_json(value: &impl Serialize) -> Result<String> {
    let v = serde_json::to_value(value)?;
    Ok(serde_json::to_string_pretty(&v)? + "\n")
}
