//! Teacher-student machinery: the moving average, the consistency term,
//! augmentation ranges and a small training run.

mod support;

use hsemis::nn::{ParamStore, Tape};
use hsemis::qcn::QcnConfig;
use hsemis::qtest::{
    consistency_loss, ema_update, evaluate, sample_strong, strong_augment, train_node, weak_augment, BaseConfig,
    LambdaSchedule, NodeConfig, NodeData, NodeModel, Role, StrongOp, WeakParams, DEFAULT_MU, MENU_LEN, WEAK_TRANSLATE,
};
use hsemis::tensor::Tensor;
use rand::Rng;
use support::{rng, uniform_vec};

fn store(values: &[f64]) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    s.add("w", Tensor::new(vec![values.len() - 1], values[..values.len() - 1].to_vec()).unwrap());
    s.add("b", Tensor::from_vec(vec![values[values.len() - 1]]));
    s
}

fn flat(s: &ParamStore<f64>) -> Vec<f64> {
    s.tensors().iter().flat_map(|t| t.data().to_vec()).collect()
}

#[test]
fn ema_matches_closed_form() {
    assert_eq!(DEFAULT_MU, 0.99);
    let mut r = rng(3);
    let theta0 = uniform_vec(&mut r, 9, -2.0, 2.0);
    let student_values = uniform_vec(&mut r, 9, -2.0, 2.0);
    let student = store(&student_values);
    for steps in [1, 10, 500] {
        let mut teacher = store(&theta0);
        for _ in 0..steps {
            ema_update(&mut teacher, &student, DEFAULT_MU).unwrap();
        }
        let mu_t = DEFAULT_MU.powi(steps);
        for ((got, t0), st) in flat(&teacher).iter().zip(&theta0).zip(&student_values) {
            let want = mu_t * t0 + (1.0 - mu_t) * st;
            assert!((got - want).abs() < 1e-9, "T = {steps}: {got} vs {want}");
        }
    }
}

#[test]
fn ema_rejects_mismatched_layouts() {
    let mut teacher = store(&[1.0, 2.0, 3.0]);
    assert!(ema_update(&mut teacher, &store(&[1.0, 2.0]), 0.5).is_err());
}

#[test]
fn consistency_is_summed_squared_distance() {
    let mut tape = Tape::<f64>::new();
    let t = tape.constant(Tensor::new(vec![2, 2], vec![0.2, 0.8, 0.6, 0.4]).unwrap()).unwrap();
    let s = tape.constant(Tensor::new(vec![2, 2], vec![0.5, 0.5, 0.6, 0.4]).unwrap()).unwrap();
    let l = consistency_loss(&mut tape, t, s).unwrap();
    assert!((tape.value(l).item().unwrap() - 0.18).abs() < 1e-12);
}

#[test]
fn lambda_ramp() {
    let ramp = LambdaSchedule::Ramp { max: 2.0, fraction: 0.2 };
    assert!((ramp.at(0, 100) - 2.0 * (-5.0f64).exp()).abs() < 1e-15);
    assert_eq!(ramp.at(20, 100), 2.0);
    assert_eq!(ramp.at(99, 100), 2.0);
    let mut last = 0.0;
    for s in 0..=20 {
        let v = ramp.at(s, 100);
        assert!(v >= last);
        last = v;
    }
    assert_eq!(LambdaSchedule::Constant(0.3).at(7, 10), 0.3);
}

#[test]
fn augmentations_stay_in_range() {
    let mut r = rng(9);
    let max_shift = (WEAK_TRANSLATE * 32.0).floor() as i64;
    for _ in 0..2000 {
        let p = WeakParams::sample(32, 32, &mut r);
        assert!(p.dx.abs() <= max_shift && p.dy.abs() <= max_shift);
        let n = r.random_range(0..=MENU_LEN + 2);
        let ops = sample_strong(n, &mut r);
        assert_eq!(ops.len(), n.min(MENU_LEN));
        assert!(ops.iter().all(StrongOp::in_range));
        // distinct menu entries
        let kinds: Vec<_> = ops.iter().map(std::mem::discriminant).collect();
        assert!(kinds.iter().enumerate().all(|(i, k)| !kinds[..i].contains(k)));
    }
}

#[test]
fn augmentations_keep_shape_and_are_finite() {
    let mut r = rng(4);
    let x = Tensor::new(vec![16, 12, 1], uniform_vec(&mut r, 192, 0.0, 1.0)).unwrap();
    for _ in 0..100 {
        let w = weak_augment(&x, &WeakParams::sample(16, 12, &mut r)).unwrap();
        assert_eq!(w.shape(), x.shape());
        let s = strong_augment(&x, &sample_strong(2, &mut r)).unwrap();
        assert_eq!(s.shape(), x.shape());
        assert!(s.is_finite());
    }
    let zero_shift = WeakParams { flip_h: false, flip_v: false, dx: 0, dy: 0 };
    assert_eq!(weak_augment(&x, &zero_shift).unwrap(), x);
}

fn tiny_config() -> NodeConfig {
    NodeConfig {
        base: BaseConfig { filters: [4; 5], fc1: 8, fc2: 8, proj: 4 },
        qcn: QcnConfig { qubits: 2, layers: 1, wire: None },
        steps: 60,
        eval_every: 10,
        patience: 100,
        optimizer: hsemis::nn::AdamConfig::with_lr(3e-3),
        seed: 1,
        ..NodeConfig::default()
    }
}

/// Two classes that differ in mean brightness.
fn toy_data(n: usize, seed: u64) -> Vec<(Tensor<f64>, usize)> {
    let mut r = rng(seed);
    (0..n)
        .map(|i| {
            let label = i % 2;
            let level = if label == 0 { 0.2 } else { 0.8 };
            let img = Tensor::new(vec![8, 8, 1], (0..64).map(|_| level + r.random_range(-0.1..0.1)).collect()).unwrap();
            (img, label)
        })
        .collect()
}

#[test]
fn node_training_is_deterministic_and_records_history() {
    let labeled = toy_data(24, 1);
    let unlabeled: Vec<Tensor<f64>> = toy_data(16, 2).into_iter().map(|(x, _)| x).collect();
    let data = NodeData { labeled: &labeled, unlabeled: &unlabeled };
    let a = train_node(&data, 1, &tiny_config()).unwrap();
    let b = train_node(&data, 1, &tiny_config()).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.best_step, b.best_step);
    assert_eq!(a.history.len(), 6);
    assert!(a.history.iter().all(|h| h.sup_loss.is_finite() && h.con_loss.is_finite()));

    let mut model = a.model;
    let (loss, acc) = evaluate(&mut model, &labeled, Role::Teacher).unwrap();
    assert!(loss.is_finite() && (0.0..=1.0).contains(&acc));
    let probs = model.predict_probs(&unlabeled[..3], Role::Student).unwrap();
    for p in probs {
        assert!((p[0] + p[1] - 1.0).abs() < 1e-9);
    }
}

#[test]
fn projection_must_match_the_circuit() {
    let base = BaseConfig { filters: [2; 5], fc1: 2, fc2: 2, proj: 8 };
    assert!(NodeModel::<f64>::new(&base, QcnConfig { qubits: 2, layers: 1, wire: None }, 1, 0.99, 1.0, 0).is_err());
}
