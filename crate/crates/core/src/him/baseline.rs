//! Flat multi-class reference model: the node feature extractor with a
//! dense softmax head, trained on the labeled set alone.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{AdamConfig, AdamState, Ctx, Dense, ParamStore, Tape, Var};
use crate::qtest::{holdout, weak_augment, BaseConfig, BaseNetwork, WeakParams};
use crate::rng;
use crate::scalar::Real;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlatConfig {
    /// Feature extractor; its projection width is ignored.
    pub base: BaseConfig,
    pub steps: usize,
    /// Labeled images per step.
    pub batch: usize,
    pub optimizer: AdamConfig,
    pub eval_every: usize,
    pub patience: usize,
    pub val_fraction: f64,
    pub eval_batch: usize,
    pub seed: u64,
}

impl Default for FlatConfig {
    fn default() -> Self {
        Self {
            base: BaseConfig::default(),
            steps: 1000,
            batch: 8,
            optimizer: AdamConfig::default(),
            eval_every: 20,
            patience: 10,
            val_fraction: 0.2,
            eval_batch: 64,
            seed: 42,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FlatClassifier<T> {
    pub classes: usize,
    pub net: BaseNetwork<T>,
    pub head: ParamStore<T>,
    head_layer: Dense,
    pub eval_batch: usize,
}

/// One evaluation row of the flat model's training history.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlatHistoryRow {
    pub step: usize,
    pub loss: f64,
    pub val_acc: f64,
}

#[derive(Clone, Debug)]
pub struct FlatOutcome<T> {
    pub model: FlatClassifier<T>,
    pub history: Vec<FlatHistoryRow>,
    pub best_step: usize,
}

impl<T: Real> FlatClassifier<T> {
    pub fn new(base: &BaseConfig, in_ch: usize, classes: usize, seed: u64) -> Result<Self> {
        if classes < 2 {
            return Err(Error::Argument(format!("a classifier needs at least 2 classes, got {classes}")));
        }
        let base = BaseConfig { proj: 0, ..base.clone() };
        let net = BaseNetwork::new(&base, in_ch, &mut rng::stream(seed, "flat.net"))?;
        let mut head = ParamStore::new();
        let head_layer = Dense::new(&mut head, "head", base.fc2, classes, &mut rng::stream(seed, "flat.head"));
        Ok(Self { classes, net, head, head_layer, eval_batch: 64 })
    }

    /// Logits `[N, classes]`; returns the bound leaves of the network and
    /// the head.
    fn logits(&mut self, tape: &mut Tape<T>, x: Tensor<T>, train: bool) -> Result<(Var, Vec<Var>, Vec<Var>)> {
        let net_vars = self.net.params.bind(tape, train)?;
        let head_vars = self.head.bind(tape, train)?;
        let x = tape.constant(x)?;
        let mut buffers = self.net.buffers.clone();
        let f = {
            let mut cx = Ctx { tape: &mut *tape, vars: &net_vars, buffers: &mut buffers, train };
            self.net.features(&mut cx, x)?
        };
        if train {
            self.net.buffers = buffers;
        }
        let mut empty = ParamStore::new();
        let mut cx = Ctx { tape, vars: &head_vars, buffers: &mut empty, train };
        let logits = self.head_layer.forward(&mut cx, f)?;
        Ok((logits, net_vars, head_vars))
    }

    /// Evaluation-mode class probabilities, one row per image.
    pub fn predict_probs(&mut self, images: &[Tensor<T>]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(self.eval_batch.max(1)) {
            let mut tape = Tape::new();
            let (logits, _, _) = self.logits(&mut tape, Tensor::stack(chunk)?, false)?;
            let l = tape.value(logits);
            out.extend((0..chunk.len()).map(|r| softmax(l.row(r))));
        }
        Ok(out)
    }

    /// Argmax predictions (ties to the lowest class).
    pub fn predict(&mut self, images: &[Tensor<T>]) -> Result<Vec<usize>> {
        Ok(self.predict_probs(images)?.iter().map(|p| argmax(p)).collect())
    }

    /// Mean cross-entropy and accuracy on a labeled set.
    pub fn evaluate(&mut self, data: &[(Tensor<T>, usize)]) -> Result<(f64, f64)> {
        let images: Vec<_> = data.iter().map(|(x, _)| x.clone()).collect();
        let probs = self.predict_probs(&images)?;
        let (mut loss, mut correct) = (0.0, 0usize);
        for (p, (_, y)) in probs.iter().zip(data) {
            loss -= p[*y].clamp(crate::nn::PROB_EPS, 1.0).ln();
            correct += usize::from(argmax(p) == *y);
        }
        Ok((loss / data.len() as f64, correct as f64 / data.len() as f64))
    }
}

fn softmax<T: Real>(row: &[T]) -> Vec<f64> {
    let m = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v.as_f64() - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

/// Supervised training on weak views of the labeled images with the
/// node models' early-stopping rule (best held-out loss is kept).
pub fn train_flat<T: Real>(labeled: &[(Tensor<T>, usize)], classes: usize, in_ch: usize, config: &FlatConfig) -> Result<FlatOutcome<T>> {
    if labeled.is_empty() {
        return Err(Error::Argument("flat training needs labeled samples".into()));
    }
    if let Some((_, y)) = labeled.iter().find(|(_, y)| *y >= classes) {
        return Err(Error::Argument(format!("label {y} outside {classes} classes")));
    }
    if config.batch == 0 || config.eval_every == 0 || config.steps == 0 || config.eval_batch == 0 {
        return Err(Error::Argument("steps, batch and evaluation sizes must be positive".into()));
    }
    let mut model = FlatClassifier::new(&config.base, in_ch, classes, config.seed)?;
    model.eval_batch = config.eval_batch;
    let mut rng = rng::stream(config.seed, "flat.train");
    let (train_idx, val_idx) = holdout(labeled, classes, config.val_fraction, &mut rng);
    let val: Vec<_> = val_idx.iter().map(|&i| labeled[i].clone()).collect();
    let mut adam_net = AdamState::new(config.optimizer, &model.net.params);
    let mut adam_head = AdamState::new(config.optimizer, &model.head);

    let mut history = Vec::new();
    let (mut loss_acc, mut since) = (0.0, 0usize);
    let mut best = (f64::INFINITY, 0usize, model.clone());
    let mut bad_evals = 0usize;
    for step in 0..config.steps {
        let idx: Vec<usize> = (0..config.batch).map(|_| train_idx[rng.random_range(0..train_idx.len())]).collect();
        let views = idx
            .iter()
            .map(|&i| {
                let x = &labeled[i].0;
                weak_augment(x, &WeakParams::sample(x.shape()[0], x.shape()[1], &mut rng))
            })
            .collect::<Result<Vec<_>>>()?;
        let targets: Vec<usize> = idx.iter().map(|&i| labeled[i].1).collect();
        let mut tape = Tape::new();
        let (logits, net_vars, head_vars) = model.logits(&mut tape, Tensor::stack(&views)?, true)?;
        let loss = tape.cross_entropy(logits, &targets)?;
        loss_acc += tape.value(loss).item()?.as_f64();
        since += 1;
        tape.backward(loss)?;
        let g_net = model.net.params.grads(&tape, &net_vars);
        let g_head = model.head.grads(&tape, &head_vars);
        adam_net.step(&mut model.net.params, &g_net)?;
        adam_head.step(&mut model.head, &g_head)?;

        if (step + 1) % config.eval_every == 0 || step + 1 == config.steps {
            let (val_loss, val_acc) = model.evaluate(&val)?;
            history.push(FlatHistoryRow { step: step + 1, loss: loss_acc / since as f64, val_acc });
            (loss_acc, since) = (0.0, 0);
            if val_loss < best.0 {
                best = (val_loss, step + 1, model.clone());
                bad_evals = 0;
            } else {
                bad_evals += 1;
                if bad_evals >= config.patience {
                    break;
                }
            }
        }
    }
    let (_, best_step, model) = best;
    Ok(FlatOutcome { model, history, best_step })
}

/// The history as CSV with header `step,loss,val_acc`.
pub fn flat_history_csv(history: &[FlatHistoryRow]) -> String {
    let mut s = String::from("step,loss,val_acc\n");
    for r in history {
        s.push_str(&format!("{},{},{}\n", r.step, r.loss, r.val_acc));
    }
    s
}
