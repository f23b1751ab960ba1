//! Synthetic data, splitting, the tensor file format, run configuration and
//! checkpoints.

mod support;

use hsemis::checkpoint::{load_node, load_store, load_tree, save_node, save_store, save_tree};
use hsemis::config::RunConfig;
use hsemis::data::{decode_hstn, encode_hstn, split_dataset, synth_dataset, Dataset, SyntheticSpec, MAGIC, TEST_FRACTION};
use hsemis::him::{decompose, DecomposeMode};
use hsemis::nn::ParamStore;
use hsemis::qcn::QcnConfig;
use hsemis::qtest::{BaseConfig, NodeModel, Role};
use hsemis::tensor::Tensor;
use hsemis::Error;
use support::{least_squares_probe, rng, uniform_vec};

fn small_spec() -> SyntheticSpec {
    SyntheticSpec { class_counts: vec![30, 20, 25, 15, 10], ..SyntheticSpec::default() }
}

#[test]
fn synthetic_dataset_shape_and_determinism() {
    let spec = small_spec();
    let a = synth_dataset::<f64>(&spec).unwrap();
    let b = synth_dataset::<f64>(&spec).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 100);
    for (c, &n) in spec.class_counts.iter().enumerate() {
        assert_eq!(a.labels.iter().filter(|&&l| l == c).count(), n);
    }
    assert!(a.images.iter().all(|t| t.shape() == [32, 32, 1] && t.is_finite()));
    let other = synth_dataset::<f64>(&SyntheticSpec { seed: 43, ..spec }).unwrap();
    assert_ne!(a.images, other.images);
}

#[test]
fn extreme_grades_are_linearly_separable() {
    let spec = SyntheticSpec {
        class_counts: vec![100, 0, 0, 0, 100],
        noise: vec![0.05; 5],
        ..SyntheticSpec::default()
    };
    let data = synth_dataset::<f64>(&spec).unwrap();
    let (xs, ys): (Vec<Vec<f64>>, Vec<f64>) = data
        .images
        .iter()
        .zip(&data.labels)
        .map(|(img, &l)| (img.data().to_vec(), if l == 0 { -1.0 } else { 1.0 }))
        .unzip();
    let acc = least_squares_probe(&xs, &ys, 1e-3);
    assert!(acc >= 0.99, "probe accuracy {acc}");
}

#[test]
fn split_is_stratified_disjoint_and_seeded() {
    let labels = synth_dataset::<f32>(&SyntheticSpec::default()).unwrap().labels;
    let s = split_dataset(&labels, 0.2, 42).unwrap();
    let mut all: Vec<usize> = s.labeled.iter().chain(&s.unlabeled).chain(&s.test).copied().collect();
    all.sort_unstable();
    assert_eq!(all, (0..labels.len()).collect::<Vec<_>>());
    for c in 0..5 {
        let n = labels.iter().filter(|&&l| l == c).count();
        let count = |set: &[usize]| set.iter().filter(|&&i| labels[i] == c).count();
        let n_test = (TEST_FRACTION * n as f64).round() as usize;
        assert_eq!(count(&s.test), n_test);
        assert_eq!(count(&s.labeled), (0.2 * (n - n_test) as f64).round() as usize);
    }
    assert_eq!(s, split_dataset(&labels, 0.2, 42).unwrap());
    assert_ne!(s, split_dataset(&labels, 0.2, 7).unwrap());
    assert!(split_dataset(&labels, 0.0, 42).is_err());
    assert!(matches!(split_dataset(&[0, 0, 1], 0.2, 1), Err(Error::Stratification(_))));
}

#[test]
fn hstn_round_trip() {
    let t = Tensor::new(vec![3, 4, 2], uniform_vec(&mut rng(1), 24, -2.0, 2.0)).unwrap();
    let bytes = encode_hstn(&t);
    assert_eq!(&bytes[..4], MAGIC);
    assert_eq!(bytes.len(), 4 + 4 + 3 * 4 + 24 * 4);
    let back: Tensor<f64> = decode_hstn(&bytes).unwrap();
    assert_eq!(back.shape(), t.shape());
    for (a, b) in back.data().iter().zip(t.data()) {
        assert_eq!(*a, f64::from(*b as f32));
    }
    assert!(decode_hstn::<f64>(&bytes[..bytes.len() - 1]).is_err());
    assert!(decode_hstn::<f64>(b"NOPE\0\0\0\0").is_err());
}

#[test]
fn dataset_directory_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth_dataset::<f32>(&small_spec()).unwrap();
    data.save(dir.path()).unwrap();
    let back = Dataset::<f32>::load(dir.path()).unwrap();
    assert_eq!(back, data);
}

#[test]
fn config_parses_sets_and_validates() {
    let c = RunConfig::parse("# comment\nseed = 7\nsirl.tau=0.6\nqcn.qubits=4\nqcn.layers=2\n").unwrap();
    assert_eq!(c.seed, 7);
    assert_eq!(c.sirl.tau, 0.6);
    let again = RunConfig::parse(&c.to_text()).unwrap();
    assert_eq!(again.to_text(), c.to_text());
    assert!(RunConfig::parse("nonsense.key=1").is_err());
    assert!(RunConfig::parse("seed").is_err());
    assert!(RunConfig::parse("sirl.tau=0").is_err());
    let d = RunConfig::default();
    d.validate().unwrap();
    assert_eq!((d.seed, d.label_fraction, d.mirec.mask_ratio), (42, 0.2, 0.75));
}

#[test]
fn checkpoints_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut store = ParamStore::new();
    store.add("a.weight", Tensor::new(vec![2, 3], vec![1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
    store.add("a.bias", Tensor::from_vec(vec![0.5f64, -0.5]));
    save_store(&dir.path().join("store"), &store).unwrap();
    let back: ParamStore<f64> = load_store(&dir.path().join("store")).unwrap();
    assert_eq!(back.tensors(), store.tensors());

    let tree = decompose(5, DecomposeMode::CountBalanced, &[5, 4, 3, 2, 1]).unwrap();
    save_tree(&dir.path().join("tree.json"), &tree).unwrap();
    assert_eq!(load_tree(&dir.path().join("tree.json")).unwrap(), tree);

    let base = BaseConfig { filters: [2; 5], fc1: 4, fc2: 4, proj: 4 };
    let qcn = QcnConfig { qubits: 2, layers: 1, wire: None };
    let mut model = NodeModel::<f32>::new(&base, qcn, 1, 0.99, 1.0, 3).unwrap();
    save_node(&dir.path().join("node"), &model).unwrap();
    let mut loaded: NodeModel<f32> = load_node(&dir.path().join("node"), &base, qcn).unwrap();
    let images: Vec<Tensor<f32>> = synth_dataset::<f32>(&small_spec()).unwrap().images[..4].to_vec();
    assert_eq!(model.predict_probs(&images, Role::Teacher).unwrap(), loaded.predict_probs(&images, Role::Teacher).unwrap());
}
