//! Template construction and proxy labeling against brute-force oracles.

mod support;

use hsemis::sirl::{
    assign_label, build_template_library, coordinate_median, label_reconstructed_set, similarity_score, TemplateLibrary,
    DEFAULT_ALPHA, DEFAULT_TAU,
};
use rand::Rng;
use support::{brute_argmax, rng, uniform_vec};

fn random_library(r: &mut impl Rng, classes: usize, d: usize) -> TemplateLibrary<f64> {
    let templates = (0..classes).map(|_| uniform_vec(r, d, -1.0, 1.0)).collect();
    TemplateLibrary::from_templates(templates, 50).unwrap()
}

#[test]
fn median_matches_sorting_oracle() {
    for seed in 0..200 {
        let mut r = rng(seed);
        let (n, d) = (r.random_range(1..40), r.random_range(1..8));
        let vs: Vec<Vec<f64>> = (0..n).map(|_| uniform_vec(&mut r, d, -5.0, 5.0)).collect();
        let refs: Vec<&[f64]> = vs.iter().map(Vec::as_slice).collect();
        assert_eq!(coordinate_median(&refs), support::sort_median(&vs), "seed {seed}");
    }
}

#[test]
fn library_uses_all_vectors_when_class_is_small() {
    let mut r = rng(1);
    let class: Vec<Vec<f64>> = (0..7).map(|_| uniform_vec(&mut r, 3, 0.0, 1.0)).collect();
    let lib = build_template_library(std::slice::from_ref(&class), 50, &mut rng(2)).unwrap();
    assert_eq!(lib.templates()[0], support::sort_median(&class));
    // A larger class subsamples exactly k vectors, deterministically.
    let big: Vec<Vec<f64>> = (0..200).map(|_| uniform_vec(&mut r, 3, 0.0, 1.0)).collect();
    let a = build_template_library(std::slice::from_ref(&big), 50, &mut rng(3)).unwrap();
    let b = build_template_library(&[big], 50, &mut rng(3)).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.samples_per_class(), 50);
}

#[test]
fn similarity_matches_definition() {
    for seed in 0..200 {
        let mut r = rng(seed);
        let d = r.random_range(1..10);
        let (f, t) = (uniform_vec(&mut r, d, -1.0, 1.0), uniform_vec(&mut r, d, -1.0, 1.0));
        let alpha = r.random_range(0.0..=1.0);
        let got = similarity_score(&f, &t, alpha).unwrap();
        assert!((got - support::similarity(&f, &t, alpha)).abs() < 1e-12);
    }
    // alpha = 1 is pure cosine
    let cos = similarity_score(&[1.0, 1.0], &[1.0, 0.0], 1.0).unwrap();
    assert!((cos - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
    assert!(similarity_score(&[1.0], &[1.0], 1.5).is_err());
    assert!(similarity_score(&[1.0], &[1.0, 2.0], 0.5).is_err());
}

#[test]
fn assignment_matches_brute_force_argmax() {
    let mut r = rng(11);
    let lib = random_library(&mut r, 5, 6);
    for _ in 0..1000 {
        let f = uniform_vec(&mut r, 6, -1.0, 1.0);
        let scores: Vec<f64> = lib.templates().iter().map(|t| support::similarity(&f, t, DEFAULT_ALPHA)).collect();
        let best = brute_argmax(&scores);
        let p = assign_label(&f, &lib, f64::NEG_INFINITY, DEFAULT_ALPHA).unwrap();
        assert_eq!(p.label, Some(best));
        assert!((p.score - scores[best]).abs() < 1e-12);
        let gated = assign_label(&f, &lib, DEFAULT_TAU, DEFAULT_ALPHA).unwrap();
        assert_eq!(gated.label, (scores[best] >= DEFAULT_TAU).then_some(best));
        assert_eq!(gated.code(), gated.label.map_or(-1, |l| l as i64));
    }
}

#[test]
fn ties_go_to_the_lowest_class() {
    let lib = TemplateLibrary::from_templates(vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0]], 1).unwrap();
    let p = assign_label(&[2.0, 0.0], &lib, 0.0, 1.0).unwrap();
    assert_eq!(p.label, Some(0));
    let p = assign_label(&[1.0, 1.0], &lib, 0.0, 1.0).unwrap();
    assert_eq!(p.label, Some(0));
}

#[test]
fn labeled_count_is_monotone_in_tau() {
    let mut r = rng(5);
    let lib = random_library(&mut r, 4, 5);
    let samples: Vec<Vec<f64>> = (0..500).map(|_| uniform_vec(&mut r, 5, -1.0, 1.0)).collect();
    let extract = |s: &[Vec<f64>]| Ok(s.to_vec());
    let scores: Vec<f64> = label_reconstructed_set(&samples, extract, &lib, f64::NEG_INFINITY, DEFAULT_ALPHA)
        .unwrap()
        .all
        .iter()
        .map(|p| p.score)
        .collect();
    let (lo, hi) = scores.iter().fold((f64::MAX, f64::MIN), |(a, b), &s| (a.min(s), b.max(s)));
    let mut last = usize::MAX;
    for k in 0..20 {
        let tau = lo + (hi - lo) * k as f64 / 19.0;
        let out = label_reconstructed_set(&samples, extract, &lib, tau, DEFAULT_ALPHA).unwrap();
        let n = out.accepted.len();
        assert_eq!(n + out.discarded, samples.len());
        assert_eq!(n, scores.iter().filter(|&&s| s >= tau).count());
        assert!(n <= last, "tau {tau}: {n} accepted after {last}");
        last = n;
    }
    assert_eq!(last, 1);
}

#[test]
fn defaults() {
    assert_eq!(DEFAULT_TAU, 0.8);
    assert_eq!(DEFAULT_ALPHA, 0.5);
    assert_eq!(hsemis::config::RunConfig::default().sirl.tau, 0.8);
}
