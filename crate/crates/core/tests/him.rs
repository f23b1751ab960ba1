//! Tree invariants, depth-weighted aggregation, metrics and the explanation
//! score combiner.

mod support;

use hsemis::him::{
    adcc, aggregate_accuracy, assemble_node_dataset, compute_metrics, decompose, AdccComponents, Branch, ConfusionCounts,
    DecomposeMode,
};
use rand::Rng;
use support::{confusion_oracle, rng};

#[test]
fn decompositions_satisfy_invariants() {
    let mut r = rng(1);
    for classes in 2..=8 {
        for trial in 0..20 {
            let counts: Vec<usize> = (0..classes).map(|_| r.random_range(1..500)).collect();
            let t = decompose(classes, DecomposeMode::CountBalanced, &counts).unwrap();
            t.validate().unwrap_or_else(|e| panic!("{classes} classes, trial {trial}: {e}"));
            assert_eq!(t.nodes.len(), classes - 1);
            // every walk ends at a leaf within max_depth decisions
            for c in 0..classes {
                let mut steps = 0;
                let got = t
                    .predict(|i| {
                        steps += 1;
                        let side = t.nodes[i].side_of(c).expect("walk stays on the class's path");
                        Ok(if side == 0 { [1.0, 0.0] } else { [0.0, 1.0] })
                    })
                    .unwrap();
                assert_eq!(got, c);
                assert!(steps <= t.max_depth());
            }
        }
    }
    let fixed = decompose(5, DecomposeMode::KoaFixed, &[]).unwrap();
    fixed.validate().unwrap();
    assert_eq!(fixed.depths(), vec![1, 2, 2, 3]);
    assert_eq!(fixed.nodes[0].left_branch, Branch::Node(1));
    assert!(decompose(4, DecomposeMode::KoaFixed, &[]).is_err());
}

#[test]
fn random_walks_respect_depth_bound() {
    let mut r = rng(2);
    for classes in 2..=8 {
        let counts: Vec<usize> = (0..classes).map(|_| r.random_range(1..100)).collect();
        let t = decompose(classes, DecomposeMode::CountBalanced, &counts).unwrap();
        for _ in 0..200 {
            let mut steps = 0;
            let c = t
                .predict(|_| {
                    steps += 1;
                    let p: f64 = r.random();
                    Ok([p, 1.0 - p])
                })
                .unwrap();
            assert!(c < classes && steps <= t.max_depth());
        }
    }
}

#[test]
fn node_datasets_keep_only_covered_classes() {
    let t = decompose(5, DecomposeMode::KoaFixed, &[]).unwrap();
    let labels = [Some(0), Some(3), None, Some(4), Some(1), Some(2)];
    assert_eq!(assemble_node_dataset(&t.nodes[0], &labels), vec![(0, 0), (1, 1), (3, 1), (4, 0), (5, 1)]);
    assert_eq!(assemble_node_dataset(&t.nodes[3], &labels), vec![(1, 0), (3, 1)]);
}

#[test]
fn aggregation_on_the_fixed_tree() {
    let depths = decompose(5, DecomposeMode::KoaFixed, &[]).unwrap().depths();
    let a = aggregate_accuracy(&[1.0, 0.0, 0.0, 0.0], &depths).unwrap();
    // ln 2 / (ln 2 + 2 ln 3 + ln 4), evaluated by hand
    assert!((a - 0.1621).abs() < 1e-4, "{a}");
}

#[test]
fn aggregation_is_a_convex_combination() {
    let mut r = rng(3);
    for _ in 0..10_000 {
        let n = r.random_range(1..8);
        let accs: Vec<f64> = (0..n).map(|_| r.random()).collect();
        let depths: Vec<usize> = (0..n).map(|_| r.random_range(1..5)).collect();
        let a = aggregate_accuracy(&accs, &depths).unwrap();
        let (lo, hi) = accs.iter().fold((f64::MAX, f64::MIN), |(l, h), &x| (l.min(x), h.max(x)));
        assert!(a >= lo - 1e-12 && a <= hi + 1e-12);
    }
    assert!(aggregate_accuracy(&[1.5], &[1]).is_err());
    assert!(aggregate_accuracy(&[0.5], &[0]).is_err());
}

#[test]
fn metrics_match_counting_oracle() {
    let mut r = rng(4);
    for _ in 0..1000 {
        let classes = r.random_range(2..6);
        let n = r.random_range(1..60);
        let truth: Vec<usize> = (0..n).map(|_| r.random_range(0..classes)).collect();
        let pred: Vec<usize> = (0..n).map(|_| r.random_range(0..classes)).collect();
        let m = compute_metrics(&ConfusionCounts::from_predictions(&truth, &pred, classes).unwrap()).unwrap();
        let o = confusion_oracle(&truth, &pred, classes);
        assert_eq!((m.acc, m.pre, m.rec, m.f1), (o.acc, o.pre, o.rec, o.f1));
    }
    assert!(ConfusionCounts::from_predictions(&[0, 5], &[0, 1], 3).is_err());
}

#[test]
fn adcc_combiner() {
    let best = adcc(AdccComponents { avg_drop: 0.0, coherency: 1.0, complexity: 0.0 }).unwrap();
    assert_eq!(best, 1.0);
    let grid: Vec<f64> = (0..10).map(|i| 0.05 + 0.1 * i as f64).collect();
    for &d in &grid {
        for &c in &grid {
            for &x in &grid {
                let v = adcc(AdccComponents { avg_drop: d, coherency: c, complexity: x }).unwrap();
                assert!(v > 0.0 && v <= 1.0);
                let more_drop = adcc(AdccComponents { avg_drop: d + 0.04, coherency: c, complexity: x }).unwrap();
                let more_coh = adcc(AdccComponents { avg_drop: d, coherency: c + 0.04, complexity: x }).unwrap();
                let more_cx = adcc(AdccComponents { avg_drop: d, coherency: c, complexity: x + 0.04 }).unwrap();
                assert!(more_drop < v && more_coh > v && more_cx < v);
            }
        }
    }
    assert!(adcc(AdccComponents { avg_drop: 1.0, coherency: 0.5, complexity: 0.1 }).is_err());
    assert!(adcc(AdccComponents { avg_drop: 0.1, coherency: 0.0, complexity: 0.1 }).is_err());
}
