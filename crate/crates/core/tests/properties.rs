//! Invariants over generated inputs: similarity scaling and permutation,
//! masking partitions, patch round trips, gate locality, decomposition
//! shape, aggregation bounds, EMA and the tensor file format.

use hsemis::data::{decode_hstn, encode_hstn, split_dataset};
use hsemis::him::{aggregate_accuracy, decompose, DecomposeMode};
use hsemis::mirec::{sample_mask, PatchSet};
use hsemis::nn::ParamStore;
use hsemis::qcn::StateVector;
use hsemis::qtest::ema_update;
use hsemis::sirl::{assign_label, similarity_score, TemplateLibrary};
use hsemis::tensor::Tensor;
use proptest::collection::vec;
use proptest::prelude::*;

fn nonzero(dim: usize) -> impl Strategy<Value = Vec<f64>> {
    vec(-5.0..5.0f64, dim).prop_filter("nonzero norm", |v| v.iter().map(|x| x * x).sum::<f64>() > 1e-6)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn cosine_only_score_is_scale_invariant((f, t) in (2..8usize).prop_flat_map(|d| (nonzero(d), nonzero(d))), s in 0.1..10.0f64) {
        let scaled: Vec<f64> = f.iter().map(|x| x * s).collect();
        let a = similarity_score(&f, &t, 1.0).unwrap();
        let b = similarity_score(&scaled, &t, 1.0).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn distance_term_breaks_scale_invariance(f in nonzero(4), s in 2.0..10.0f64) {
        // Against a template equal to f the cosine term is 1 at every scale,
        // so only the inverse distance, which grows, can differ.
        let scaled: Vec<f64> = f.iter().map(|x| x * s).collect();
        let a = similarity_score(&f, &f, 0.5).unwrap();
        let b = similarity_score(&scaled, &f, 0.5).unwrap();
        prop_assert!(a > b);
    }

    #[test]
    fn permuting_templates_permutes_scores(
        (f, templates) in (2..6usize).prop_flat_map(|d| (nonzero(d), vec(nonzero(d), 2..6))),
        rotate in 0..6usize,
        alpha in 0.0..=1.0f64,
    ) {
        let k = templates.len();
        let r = rotate % k;
        let mut rotated = templates.clone();
        rotated.rotate_left(r);
        let lib = TemplateLibrary::from_templates(templates, 1).unwrap();
        let rot = TemplateLibrary::from_templates(rotated, 1).unwrap();
        let a = assign_label(&f, &lib, 0.0, alpha).unwrap();
        let b = assign_label(&f, &rot, 0.0, alpha).unwrap();
        for i in 0..k {
            prop_assert_eq!(a.per_class_scores[(i + r) % k], b.per_class_scores[i]);
        }
        prop_assert_eq!(a.score, b.score);
        let unique = a.per_class_scores.iter().filter(|&&s| s == a.score).count() == 1;
        if unique {
            prop_assert_eq!(a.label.map(|l| (l + k - r) % k), b.label);
        }
    }

    #[test]
    fn masks_partition_the_patches(n in 2..200usize, ratio in 0.05..0.95f64, seed: u64) {
        let want = (ratio * n as f64).round() as usize;
        if want == 0 || want == n {
            prop_assert!(sample_mask(n, ratio, seed).is_err());
            return Ok(());
        }
        let plan = sample_mask(n, ratio, seed).unwrap();
        let mut all: Vec<usize> = plan.masked.iter().chain(&plan.visible).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        prop_assert_eq!(plan.masked.len(), want);
        prop_assert_eq!(sample_mask(n, ratio, seed).unwrap(), plan);
    }

    #[test]
    fn patchify_round_trips(gh in 1..5usize, gw in 1..5usize, p in 1..5usize, ch in 1..4usize, seed: u64) {
        let (h, w) = (gh * p, gw * p);
        let image = Tensor::from_fn(&[h, w, ch], |i| ((i as u64).wrapping_mul(2654435761).wrapping_add(seed) % 1000) as f64 / 1000.0);
        let set = PatchSet::patchify(&image, p).unwrap();
        prop_assert_eq!(set.n_patches(), gh * gw);
        prop_assert_eq!(set.patch_len(), p * p * ch);
        prop_assert_eq!(set.unpatchify(), image);
    }

    #[test]
    fn gates_elsewhere_leave_a_marginal_unchanged(amps in vec(-1.0..1.0f64, 8), theta in -3.0..3.0f64, phi in -3.0..3.0f64) {
        prop_assume!(amps.iter().map(|x| x * x).sum::<f64>() > 1e-3);
        let mut s = StateVector::amplitude_encode(&amps).unwrap();
        let before = s.measure_probs(0).unwrap();
        s.apply_ry(1, theta).unwrap();
        s.apply_crz(1, 2, phi).unwrap();
        s.apply_crx(2, 1, theta).unwrap();
        let after = s.measure_probs(0).unwrap();
        prop_assert!((before[0] - after[0]).abs() < 1e-12);
        prop_assert!((s.norm_sqr() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn decompositions_split_contiguous_grade_ranges(counts in vec(0..500usize, 2..9)) {
        let classes = counts.len();
        let tree = decompose(classes, DecomposeMode::CountBalanced, &counts).unwrap();
        tree.validate().unwrap();
        prop_assert_eq!(tree.nodes.len(), classes - 1);
        let root = &tree.nodes[0];
        let mut both: Vec<usize> = root.left.iter().chain(&root.right).copied().collect();
        both.sort_unstable();
        prop_assert_eq!(both, (0..classes).collect::<Vec<_>>());
        for node in &tree.nodes {
            prop_assert!(!node.left.is_empty() && !node.right.is_empty());
            prop_assert!(node.left.iter().max() < node.right.iter().min());
        }
    }

    #[test]
    fn aggregate_lies_between_node_accuracies(accs in vec(0.0..=1.0f64, 1..8), depth_seed in vec(0..4usize, 8)) {
        let depths: Vec<usize> = depth_seed[..accs.len()].iter().map(|d| d + 1).collect();
        let a = aggregate_accuracy(&accs, &depths).unwrap();
        let lo = accs.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = accs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(a >= lo - 1e-12 && a <= hi + 1e-12);
    }

    #[test]
    fn ema_matches_closed_form_for_any_momentum(mu in 0.01..0.999f64, steps in 1..60i32, t0 in -5.0..5.0f64, s in -5.0..5.0f64) {
        let store = |v: f64| {
            let mut p = ParamStore::new();
            p.add("w", Tensor::from_vec(vec![v]));
            p
        };
        let (mut teacher, student) = (store(t0), store(s));
        for _ in 0..steps {
            ema_update(&mut teacher, &student, mu).unwrap();
        }
        let want = mu.powi(steps) * t0 + (1.0 - mu.powi(steps)) * s;
        prop_assert!((teacher.tensors()[0].data()[0] - want).abs() < 1e-9);
    }

    #[test]
    fn hstn_round_trips_f32_values(shape in vec(1..5usize, 1..4), seed: u64) {
        let n: usize = shape.iter().product();
        let data: Vec<f32> = (0..n).map(|i| ((seed.wrapping_add(i as u64) % 997) as f32 - 498.0) / 7.0).collect();
        let t = Tensor::new(shape, data).unwrap();
        prop_assert_eq!(decode_hstn::<f32>(&encode_hstn(&t)).unwrap(), t);
    }

    #[test]
    fn splits_are_disjoint_and_complete(per_class in vec(5..40usize, 2..6), seed: u64) {
        let labels: Vec<usize> = per_class.iter().enumerate().flat_map(|(c, &n)| std::iter::repeat_n(c, n)).collect();
        let s = split_dataset(&labels, 0.2, seed).unwrap();
        let mut all: Vec<usize> = s.labeled.iter().chain(&s.unlabeled).chain(&s.test).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..labels.len()).collect::<Vec<_>>());
    }
}
