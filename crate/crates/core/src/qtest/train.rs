//! Semi-supervised teacher-student training of one binary node.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::augment::{sample_strong, strong_augment, weak_augment, WeakParams, DEFAULT_OPS_PER_SAMPLE};
use super::network::BaseConfig;
use super::node::{consistency_loss, NodeModel, Role, DEFAULT_MU};
use crate::error::{Error, Result};
use crate::nn::{AdamConfig, AdamState, ParamStore, Tape};
use crate::qcn::{QcnConfig, QcnParams};
use crate::rng;
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Weight of the consistency term over training.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum LambdaSchedule {
    Constant(f64),
    /// `max * exp(-5 (1 - t)^2)` for `t = step / (fraction * steps)`, then `max`.
    Ramp { max: f64, fraction: f64 },
}

impl LambdaSchedule {
    pub fn at(&self, step: usize, steps: usize) -> f64 {
        match *self {
            LambdaSchedule::Constant(v) => v,
            LambdaSchedule::Ramp { max, fraction } => {
                let len = fraction * steps as f64;
                if len <= 0.0 {
                    return max;
                }
                let t = (step as f64 / len).min(1.0);
                max * (-5.0 * (1.0 - t) * (1.0 - t)).exp()
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeConfig {
    pub base: BaseConfig,
    pub qcn: QcnConfig,
    pub mu: f64,
    pub omega: f64,
    pub lambda: LambdaSchedule,
    /// Upper bound on optimization steps.
    pub steps: usize,
    pub labeled_per_step: usize,
    pub unlabeled_per_step: usize,
    pub optimizer: AdamConfig,
    pub qcn_optimizer: AdamConfig,
    /// Steps between held-out evaluations.
    pub eval_every: usize,
    /// Evaluations without improvement before stopping.
    pub patience: usize,
    /// Share of the labeled set held out for early stopping.
    pub val_fraction: f64,
    pub ops_per_sample: usize,
    /// Images per forward pass at evaluation time.
    pub eval_batch: usize,
    pub seed: u64,
}

impl Default for NodeConfig {
    fn default() -> Self {
        Self {
            base: BaseConfig::default(),
            qcn: QcnConfig::default(),
            mu: DEFAULT_MU,
            omega: 1.0,
            lambda: LambdaSchedule::Ramp { max: 1.0, fraction: 0.2 },
            steps: 1000,
            labeled_per_step: 4,
            unlabeled_per_step: 4,
            optimizer: AdamConfig::default(),
            qcn_optimizer: AdamConfig { lr: 1e-3, ..AdamConfig::default() },
            eval_every: 20,
            patience: 10,
            val_fraction: 0.2,
            ops_per_sample: DEFAULT_OPS_PER_SAMPLE,
            eval_batch: 64,
            seed: 42,
        }
    }
}

/// One history row, written at every evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeHistoryRow {
    pub step: usize,
    /// Mean supervised loss since the previous row.
    pub sup_loss: f64,
    /// Mean consistency loss since the previous row.
    pub con_loss: f64,
    /// Teacher accuracy on the held-out labeled share.
    pub val_acc: f64,
}

#[derive(Clone, Debug)]
pub struct NodeOutcome<T> {
    pub model: NodeModel<T>,
    pub history: Vec<NodeHistoryRow>,
    /// Step whose weights were kept (lowest held-out loss).
    pub best_step: usize,
    pub stopped_early: bool,
}

/// Binary-labeled training data for one node.
pub struct NodeData<'a, T> {
    pub labeled: &'a [(Tensor<T>, usize)],
    pub unlabeled: &'a [Tensor<T>],
}

/// Per-class held-out split: `round(fraction * n_class)` per class, at
/// least one sample left for training. Tiny sets validate on the training
/// data.
pub(crate) fn holdout<T>(
    labeled: &[(Tensor<T>, usize)],
    classes: usize,
    fraction: f64,
    rng: &mut impl Rng,
) -> (Vec<usize>, Vec<usize>) {
    let mut train = Vec::new();
    let mut val = Vec::new();
    for side in 0..classes {
        let mut idx: Vec<usize> = (0..labeled.len()).filter(|&i| labeled[i].1 == side).collect();
        idx.shuffle(rng);
        let n_val = ((fraction * idx.len() as f64).round() as usize).min(idx.len().saturating_sub(1));
        val.extend(&idx[..n_val]);
        train.extend(&idx[n_val..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    if val.is_empty() {
        val = train.clone();
    }
    (train, val)
}

struct Snapshot<T> {
    student: ParamStore<T>,
    student_buffers: ParamStore<T>,
    teacher: ParamStore<T>,
    teacher_buffers: ParamStore<T>,
    angles: QcnParams<T>,
}

impl<T: Real> Snapshot<T> {
    fn take(m: &NodeModel<T>) -> Self {
        Self {
            student: m.student.params.clone(),
            student_buffers: m.student.buffers.clone(),
            teacher: m.teacher.params.clone(),
            teacher_buffers: m.teacher.buffers.clone(),
            angles: m.angles.clone(),
        }
    }

    fn restore(self, m: &mut NodeModel<T>) {
        m.student.params = self.student;
        m.student.buffers = self.student_buffers;
        m.teacher.params = self.teacher;
        m.teacher.buffers = self.teacher_buffers;
        m.angles = self.angles;
    }
}

/// Teacher loss and accuracy on a held-out set (evaluation mode).
pub fn evaluate<T: Real>(model: &mut NodeModel<T>, data: &[(Tensor<T>, usize)], role: Role) -> Result<(f64, f64)> {
    let images: Vec<_> = data.iter().map(|(x, _)| x.clone()).collect();
    let probs = model.predict_probs(&images, role)?;
    let (mut loss, mut correct) = (0.0, 0usize);
    for (p, (_, y)) in probs.iter().zip(data) {
        let py = p[*y].as_f64().clamp(crate::nn::PROB_EPS, 1.0 - crate::nn::PROB_EPS);
        loss -= py.ln();
        let pred = usize::from(p[1] > p[0]);
        correct += usize::from(pred == *y);
    }
    Ok((loss / data.len() as f64, correct as f64 / data.len() as f64))
}

/// Trains a node: each step draws `labeled_per_step` labeled and
/// `unlabeled_per_step` unlabeled images (with replacement). The student
/// minimizes the cross-entropy on weak views of the labeled images plus
/// `lambda` times the consistency between teacher (weak views) and student
/// (strong views) over all drawn images; the teacher then tracks the student
/// by EMA. Training stops after `patience` evaluations without improvement
/// in held-out loss and keeps the best weights.
pub fn train_node<T: Real>(data: &NodeData<'_, T>, in_ch: usize, config: &NodeConfig) -> Result<NodeOutcome<T>> {
    if data.labeled.is_empty() {
        return Err(Error::Argument("node training needs labeled samples".into()));
    }
    if let Some((_, y)) = data.labeled.iter().find(|(_, y)| *y > 1) {
        return Err(Error::Argument(format!("node labels must be 0 or 1, found {y}")));
    }
    if config.labeled_per_step == 0 || config.eval_every == 0 || config.steps == 0 {
        return Err(Error::Argument("steps, eval interval and labeled batch must be positive".into()));
    }
    if config.eval_batch == 0 {
        return Err(Error::Argument("evaluation batch must be positive".into()));
    }
    let mut model = NodeModel::new(&config.base, config.qcn, in_ch, config.mu, config.omega, config.seed)?;
    model.eval_batch = config.eval_batch;
    let mut rng = rng::stream(config.seed, "node.train");
    let (train_idx, val_idx) = holdout(data.labeled, 2, config.val_fraction, &mut rng);
    let val: Vec<_> = val_idx.iter().map(|&i| data.labeled[i].clone()).collect();
    let mut adam = AdamState::new(config.optimizer, &model.student.params);
    let mut angle_store = ParamStore::new();
    angle_store.add("qcn.angles", model.angles.as_tensor());
    let mut adam_q = AdamState::new(config.qcn_optimizer, &angle_store);

    let mut history = Vec::new();
    let (mut sup_acc, mut con_acc, mut since) = (0.0, 0.0, 0usize);
    let mut best = (f64::INFINITY, 0usize, Snapshot::take(&model));
    let mut bad_evals = 0usize;
    let mut stopped_early = false;
    for step in 0..config.steps {
        let lab: Vec<usize> = (0..config.labeled_per_step).map(|_| train_idx[rng.random_range(0..train_idx.len())]).collect();
        let unl: Vec<usize> = if data.unlabeled.is_empty() {
            Vec::new()
        } else {
            (0..config.unlabeled_per_step).map(|_| rng.random_range(0..data.unlabeled.len())).collect()
        };
        let raw: Vec<&Tensor<T>> = lab.iter().map(|&i| &data.labeled[i].0).chain(unl.iter().map(|&i| &data.unlabeled[i])).collect();
        let (h, w) = (raw[0].shape()[0], raw[0].shape()[1]);
        let weak = raw.iter().map(|x| weak_augment(x, &WeakParams::sample(h, w, &mut rng))).collect::<Result<Vec<_>>>()?;
        let strong = raw
            .iter()
            .map(|x| strong_augment(x, &sample_strong(config.ops_per_sample, &mut rng)))
            .collect::<Result<Vec<_>>>()?;
        let targets: Vec<usize> = lab.iter().map(|&i| data.labeled[i].1).collect();
        let lambda = config.lambda.at(step, config.steps);
        let n_lab = lab.len();

        // Teacher predictions on weak views: constants for the student.
        let teacher_probs = if lambda > 0.0 {
            let mut tt = Tape::new();
            let x = tt.constant(Tensor::stack(&weak)?)?;
            let fw = model.forward(&mut tt, x, Role::Teacher, true, false)?;
            Some(tt.value(fw.probs).clone())
        } else {
            None
        };

        // Student: weak labeled views for the supervised term, strong views
        // of every drawn image for the consistency term, in one batch.
        let mut batch: Vec<Tensor<T>> = weak[..n_lab].to_vec();
        if teacher_probs.is_some() {
            batch.extend(strong.iter().cloned());
        }
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::stack(&batch)?)?;
        let fw = model.forward(&mut tape, x, Role::Student, true, true)?;
        let sup_rows: Vec<usize> = (0..2 * n_lab).collect();
        let sup_probs = tape.select(fw.probs, &sup_rows)?;
        let sup_probs = tape.reshape(sup_probs, &[n_lab, 2])?;
        let sup = tape.nll_prob(sup_probs, &targets)?;
        let mut loss = sup;
        let mut con_value = 0.0;
        if let Some(tp) = teacher_probs {
            let m = raw.len();
            let rows: Vec<usize> = (2 * n_lab..2 * (n_lab + m)).collect();
            let sp = tape.select(fw.probs, &rows)?;
            let sp = tape.reshape(sp, &[m, 2])?;
            let tp = tape.constant(tp)?;
            let con = consistency_loss(&mut tape, tp, sp)?;
            con_value = tape.value(con).item()?.as_f64();
            let weighted = tape.scale(con, T::lit(lambda))?;
            loss = tape.add(sup, weighted)?;
        }
        sup_acc += tape.value(sup).item()?.as_f64();
        con_acc += con_value;
        since += 1;
        tape.backward(loss)?;
        let grads = model.student.params.grads(&tape, &fw.base_vars);
        adam.step(&mut model.student.params, &grads)?;
        let ga = tape.grad(fw.angles).unwrap_or_else(|| Tensor::zeros(&[model.angles.angles.len()]));
        adam_q.step(&mut angle_store, &[ga])?;
        model.angles.angles = angle_store.tensors()[0].data().to_vec();
        model.ema_step()?;

        if (step + 1) % config.eval_every == 0 || step + 1 == config.steps {
            let (val_loss, val_acc) = evaluate(&mut model, &val, Role::Teacher)?;
            history.push(NodeHistoryRow {
                step: step + 1,
                sup_loss: sup_acc / since as f64,
                con_loss: con_acc / since as f64,
                val_acc,
            });
            (sup_acc, con_acc, since) = (0.0, 0.0, 0);
            if val_loss < best.0 {
                best = (val_loss, step + 1, Snapshot::take(&model));
                bad_evals = 0;
            } else {
                bad_evals += 1;
                if bad_evals >= config.patience {
                    stopped_early = step + 1 < config.steps;
                    break;
                }
            }
        }
    }
    let (_, best_step, snap) = best;
    snap.restore(&mut model);
    Ok(NodeOutcome { model, history, best_step, stopped_early })
}

/// The history as CSV with header `step,sup_loss,con_loss,val_acc`.
pub fn history_csv(history: &[NodeHistoryRow]) -> String {
    let mut s = String::from("step,sup_loss,con_loss,val_acc\n");
    for r in history {
        s.push_str(&format!("{},{},{},{}\n", r.step, r.sup_loss, r.con_loss, r.val_acc));
    }
    s
}
