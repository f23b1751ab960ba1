//! The end-to-end run: reconstruction pretraining, proxy labeling,
//! per-node semi-supervised training and evaluation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::baseline::{train_flat, FlatClassifier, FlatConfig, FlatHistoryRow};
use super::metrics::{compute_metrics, ConfusionCounts, Metrics};
use super::tree::{aggregate_accuracy, assemble_node_dataset, decompose, HierarchyTree};
use crate::config::{Extractor, RunConfig};
use crate::data::{split_dataset, synth_dataset, Dataset};
use crate::error::{Error, Result, StageExt};
use crate::mirec::{train_mirec, MirecConfig, MirecLogRow, MirecModel};
use crate::qtest::{evaluate, train_node, NodeConfig, NodeData, NodeHistoryRow, NodeModel, Role};
use crate::rng::{self, derive_seed};
use crate::scalar::Real;
use crate::sirl::{build_template_library, label_reconstructed_set};
use crate::tensor::Tensor;

/// A decomposition with one trained model per node.
#[derive(Clone, Debug)]
pub struct HierarchyModel<T> {
    pub tree: HierarchyTree,
    pub nodes: Vec<Option<NodeModel<T>>>,
}

impl<T: Real> HierarchyModel<T> {
    pub fn untrained(tree: HierarchyTree) -> Self {
        let nodes = vec![None; tree.nodes.len()];
        Self { tree, nodes }
    }

    fn node(&mut self, i: usize) -> Result<&mut NodeModel<T>> {
        let id = &self.tree.nodes[i].id;
        self.nodes[i].as_mut().ok_or_else(|| Error::State(format!("node {id} has no trained model")))
    }

    /// Teacher probabilities `[p_left, p_right]` of node `i` for `images`.
    pub fn node_probs(&mut self, i: usize, images: &[Tensor<T>]) -> Result<Vec<[T; 2]>> {
        self.node(i)?.predict_probs(images, Role::Teacher)
    }

    /// Root-to-leaf class prediction for every image.
    pub fn predict(&mut self, images: &[Tensor<T>]) -> Result<Vec<usize>> {
        let probs = (0..self.tree.nodes.len()).map(|i| self.node_probs(i, images)).collect::<Result<Vec<_>>>()?;
        (0..images.len()).map(|s| self.tree.predict(|node| Ok(probs[node][s]))).collect()
    }

    /// Binary accuracy of node `i` on the samples whose class it separates.
    pub fn node_accuracy(&mut self, i: usize, images: &[Tensor<T>], classes: &[usize]) -> Result<f64> {
        let labels: Vec<Option<usize>> = classes.iter().map(|&c| Some(c)).collect();
        let data: Vec<_> =
            assemble_node_dataset(&self.tree.nodes[i], &labels).into_iter().map(|(s, side)| (images[s].clone(), side)).collect();
        if data.is_empty() {
            return Err(Error::Argument(format!("no samples for node {}", self.tree.nodes[i].id)));
        }
        Ok(evaluate(self.node(i)?, &data, Role::Teacher)?.1)
    }
}

/// Binary training data of one node from labeled originals and accepted
/// proxy-labeled reconstructions; samples outside the node's classes are
/// dropped.
pub fn node_training_set<T: Real>(
    tree: &HierarchyTree,
    node: usize,
    originals: &[(Tensor<T>, usize)],
    proxies: &[(Tensor<T>, usize)],
) -> Vec<(Tensor<T>, usize)> {
    let pool: Vec<&(Tensor<T>, usize)> = originals.iter().chain(proxies).collect();
    let labels: Vec<Option<usize>> = pool.iter().map(|(_, c)| Some(*c)).collect();
    assemble_node_dataset(&tree.nodes[node], &labels).into_iter().map(|(i, side)| (pool[i].0.clone(), side)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MirecSummary {
    pub steps: usize,
    pub probe_l1_initial: f64,
    pub probe_l1_final: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleCounts {
    pub labeled: usize,
    pub unlabeled: usize,
    pub test: usize,
}

/// Everything a run reports. No wall-clock values, so equal configs give
/// equal reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    /// Depth-weighted aggregate of the node accuracies.
    pub agg_accuracy: f64,
    /// Test metrics of the flat supervised classifier.
    pub baseline_metrics: Metrics,
    /// Test metrics of the root-to-leaf predictions.
    pub flat_metrics: Metrics,
    /// `confusion[truth][prediction]` of the root-to-leaf predictions.
    pub confusion: Vec<Vec<usize>>,
    pub node_accuracies: BTreeMap<String, f64>,
    pub node_best_steps: BTreeMap<String, usize>,
    pub node_training_sizes: BTreeMap<String, [usize; 2]>,
    pub accepted_proxy_count: usize,
    pub discarded_proxy_count: usize,
    /// Accepted proxy labels per class.
    pub proxy_class_counts: Vec<usize>,
    pub mirec: MirecSummary,
    pub samples: SampleCounts,
    pub seeds: BTreeMap<String, u64>,
}

/// The report plus every model and history a run produces.
#[derive(Clone, Debug)]
pub struct PipelineOutcome<T> {
    pub report: Report,
    pub dataset: Dataset<T>,
    pub mirec: MirecModel<T>,
    pub mirec_log: Vec<MirecLogRow>,
    pub baseline: FlatClassifier<T>,
    pub baseline_history: Vec<FlatHistoryRow>,
    pub hierarchy: HierarchyModel<T>,
    pub node_histories: Vec<(String, Vec<NodeHistoryRow>)>,
    /// `(unlabeled sample index, proxy label code, score)`; code -1 marks a
    /// discarded reconstruction.
    pub proxy_labels: Vec<(usize, i64, f64)>,
}

fn confusion_matrix(truth: &[usize], pred: &[usize], classes: usize) -> Vec<Vec<usize>> {
    let mut m = vec![vec![0; classes]; classes];
    for (&t, &p) in truth.iter().zip(pred) {
        m[t][p] += 1;
    }
    m
}

fn metrics_for(truth: &[usize], pred: &[usize], classes: usize) -> Result<Metrics> {
    compute_metrics(&ConfusionCounts::from_predictions(truth, pred, classes)?)
}

/// Runs every stage; a failure names the stage it came from.
pub fn run_pipeline<T: Real>(config: &RunConfig) -> Result<PipelineOutcome<T>> {
    config.validate()?;
    let seed = config.seed;
    let mut seeds = BTreeMap::new();
    let mut seed_for = |name: &str| {
        let s = derive_seed(seed, rng::label(name));
        seeds.insert(name.to_string(), s);
        s
    };
    seed_for("run");

    let dataset: Dataset<T> = match &config.data_dir {
        Some(dir) => Dataset::load(dir),
        None => {
            let spec = crate::data::SyntheticSpec { seed: seed_for("data"), ..config.synth.clone() };
            synth_dataset(&spec)
        }
    }
    .stage("data")?;
    let classes = dataset.class_count();
    let shape = dataset.images.first().ok_or_else(|| Error::Argument("empty dataset".into())).stage("data")?.shape().to_vec();
    let ch = shape[2];

    let split = split_dataset(&dataset.labels, config.label_fraction, seed_for("split")).stage("split")?;
    let pick = |idx: &[usize]| -> Vec<(Tensor<T>, usize)> {
        idx.iter().map(|&i| (dataset.images[i].clone(), dataset.labels[i])).collect()
    };
    let labeled = pick(&split.labeled);
    let test = pick(&split.test);
    let unlabeled: Vec<Tensor<T>> = split.unlabeled.iter().map(|&i| dataset.images[i].clone()).collect();

    // Reconstruction pretraining on the unlabeled pool.
    let mirec_config = MirecConfig { seed: seed_for("mirec"), ..config.mirec.clone() };
    let mirec_out = train_mirec(&unlabeled, &mirec_config).stage("mirec")?;
    let mut mirec = mirec_out.model;
    let recon_seed = seed_for("reconstruct");
    let reconstructed = if config.use_reconstructions {
        mirec.reconstruct(&unlabeled, recon_seed).stage("reconstruct")?
    } else {
        Vec::new()
    };

    // Flat supervised classifier: the reference model and the default
    // feature space for proxy labels.
    let n = &config.node;
    let flat_config = FlatConfig {
        base: n.base.clone(),
        steps: config.baseline_steps,
        batch: config.baseline_batch,
        optimizer: n.optimizer,
        eval_every: n.eval_every,
        patience: n.patience,
        val_fraction: n.val_fraction,
        eval_batch: n.eval_batch,
        seed: seed_for("baseline"),
    };
    let flat = train_flat(&labeled, classes, ch, &flat_config).stage("baseline")?;
    let mut baseline = flat.model;
    let test_images: Vec<Tensor<T>> = test.iter().map(|(x, _)| x.clone()).collect();
    let test_truth: Vec<usize> = test.iter().map(|(_, y)| *y).collect();
    let baseline_pred = baseline.predict(&test_images).stage("baseline")?;
    let baseline_metrics = metrics_for(&test_truth, &baseline_pred, classes).stage("baseline")?;

    // Proxy labels for the reconstructions.
    let sirl_seed = seed_for("sirl");
    let mut extract = |images: &[Tensor<T>]| -> Result<Vec<Vec<T>>> {
        match config.sirl.extractor {
            Extractor::Baseline => baseline.net.extract(images),
            Extractor::Encoder => mirec.encoder_features(images),
        }
    };
    let (proxies, proxy_labels, discarded) = if reconstructed.is_empty() {
        (Vec::new(), Vec::new(), 0)
    } else {
        let mut by_class: Vec<Vec<Vec<T>>> = vec![Vec::new(); classes];
        let labeled_images: Vec<Tensor<T>> = labeled.iter().map(|(x, _)| x.clone()).collect();
        for (f, (_, y)) in extract(&labeled_images).stage("sirl")?.into_iter().zip(&labeled) {
            by_class[*y].push(f);
        }
        let lib = build_template_library(&by_class, config.sirl.samples_per_class, &mut rng::rng(sirl_seed)).stage("sirl")?;
        let subset =
            label_reconstructed_set(&reconstructed, &mut extract, &lib, T::lit(config.sirl.tau), T::lit(config.sirl.alpha))
                .stage("sirl")?;
        let proxies: Vec<(Tensor<T>, usize)> =
            subset.accepted.iter().map(|(i, p)| (reconstructed[*i].clone(), p.label.unwrap_or_default())).collect();
        let codes = subset.all.iter().enumerate().map(|(i, p)| (i, p.code(), p.score.as_f64())).collect();
        (proxies, codes, subset.discarded)
    };
    let mut proxy_class_counts = vec![0; classes];
    proxies.iter().for_each(|(_, c)| proxy_class_counts[*c] += 1);

    // Decomposition over the labeled training counts, then one node each.
    let counts: Vec<usize> = (0..classes)
        .map(|c| labeled.iter().chain(&proxies).filter(|(_, y)| *y == c).count())
        .collect();
    let tree = decompose(classes, config.mode, &counts).stage("decompose")?;
    let mut hierarchy = HierarchyModel::untrained(tree.clone());
    let mut node_histories = Vec::new();
    let mut node_best_steps = BTreeMap::new();
    let mut node_training_sizes = BTreeMap::new();
    let jobs: Vec<_> = tree
        .nodes
        .iter()
        .enumerate()
        .map(|(i, node)| {
            let data = node_training_set(&tree, i, &labeled, &proxies);
            let config = NodeConfig { seed: seed_for(&format!("node.{}", node.id)), ..n.clone() };
            (data, config)
        })
        .collect();
    // Nodes are independent: each trains on its own thread with its own seed.
    let outcomes: Vec<Result<_>> = std::thread::scope(|scope| {
        let handles: Vec<_> = jobs
            .iter()
            .map(|(data, config)| {
                let unlabeled = &unlabeled;
                scope.spawn(move || train_node(&NodeData { labeled: data, unlabeled }, ch, config))
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap_or_else(|_| Err(Error::State("node training panicked".into())))).collect()
    });
    for (i, (node, ((data, _), out))) in tree.nodes.iter().zip(jobs.iter().zip(outcomes)).enumerate() {
        let out = out.stage("node")?;
        let sides = [data.iter().filter(|(_, s)| *s == 0).count(), data.iter().filter(|(_, s)| *s == 1).count()];
        node_best_steps.insert(node.id.clone(), out.best_step);
        node_training_sizes.insert(node.id.clone(), sides);
        node_histories.push((node.id.clone(), out.history));
        hierarchy.nodes[i] = Some(out.model);
    }

    // Evaluation on the held-out test set.
    let mut node_accuracies = BTreeMap::new();
    let mut accs = Vec::new();
    for (i, node) in tree.nodes.iter().enumerate() {
        let a = hierarchy.node_accuracy(i, &test_images, &test_truth).stage("evaluate")?;
        node_accuracies.insert(node.id.clone(), a);
        accs.push(a);
    }
    let agg_accuracy = aggregate_accuracy(&accs, &tree.depths()).stage("evaluate")?;
    let pred = hierarchy.predict(&test_images).stage("evaluate")?;
    let flat_metrics = metrics_for(&test_truth, &pred, classes).stage("evaluate")?;

    let report = Report {
        agg_accuracy,
        baseline_metrics,
        flat_metrics,
        confusion: confusion_matrix(&test_truth, &pred, classes),
        node_accuracies,
        node_best_steps,
        node_training_sizes,
        accepted_proxy_count: proxies.len(),
        discarded_proxy_count: discarded,
        proxy_class_counts,
        mirec: MirecSummary {
            steps: mirec_out.log.len(),
            probe_l1_initial: mirec_out.probe_l1_initial,
            probe_l1_final: mirec_out.probe_l1_final,
        },
        samples: SampleCounts { labeled: labeled.len(), unlabeled: unlabeled.len(), test: test.len() },
        seeds,
    };
    Ok(PipelineOutcome {
        report,
        dataset,
        mirec,
        mirec_log: mirec_out.log,
        baseline,
        baseline_history: flat.history,
        hierarchy,
        node_histories,
        proxy_labels,
    })
}
