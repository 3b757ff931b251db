use std::collections::BTreeMap;

use scrlab::classifier::train::{class_posterior, train};
use scrlab::decode::{beam_search, lookahead_decode};
use scrlab::generator::{History, RowKey};
use scrlab::theory::toy::{delta_method_variance, mc_log_ratios, ToyParams};
use scrlab::theory::{inverse_normal_cdf, normal_cdf};
use scrlab::{DecodeConfig, GrammarSpec, TabularGenerator, TrainConfig};
use statrs::distribution::{ContinuousCDF, Normal};

#[test]
fn inverse_cdf_matches_statrs() {
    let n = Normal::new(0.0, 1.0).unwrap();
    let mut p = 1e-12;
    while p < 1.0 {
        for q in [p, 1.0 - p] {
            let ours = inverse_normal_cdf(q).unwrap();
            let reference = n.inverse_cdf(q);
            assert!((ours - reference).abs() < 1e-8 * reference.abs().max(1.0), "p = {q}: {ours} vs {reference}");
        }
        p *= 1.7;
    }
    // Reference value for Φ(-3) to 16 digits.
    assert!((normal_cdf(-3.0) - 1.349_898_031_630_094_6e-3).abs() < 1e-17);
    for x in [-8.0, -3.0, -1.0, -0.1, 0.0, 0.4, 2.5, 6.0] {
        let (a, b) = (normal_cdf(x), n.cdf(x));
        assert!((a - b).abs() < 1e-9 * b, "x = {x}: {a:e} vs {b:e}");
    }
    assert!(inverse_normal_cdf(0.0).is_err());
    assert!(inverse_normal_cdf(1.0).is_err());
}

#[test]
fn delta_method_variance_matches_simulation() {
    // E[n_{a,1}] = nηε = 10 and 40.
    for (eta, eps, n) in [(0.2, 0.1, 500u64), (0.1, 0.05, 8000)] {
        let params = ToyParams::new(eta, eps, 0.1, n).unwrap();
        let ratios = mc_log_ratios(&params, 20_000, 17).unwrap();
        let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
        let var = ratios.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (ratios.len() - 1) as f64;
        let predicted = delta_method_variance(eta, eps, n as f64).unwrap().total();
        let rel = (var - predicted).abs() / predicted;
        assert!(rel < 0.2, "eta {eta} n {n}: simulated {var}, predicted {predicted}");
    }
}

#[test]
fn cross_entropy_classifier_learns_balanced_toy() {
    let spec = GrammarSpec::noisy_channel(0.5, 0.1, 2, 5, 1).unwrap();
    let gen = TabularGenerator::exact_from_grammar(&spec).unwrap();
    let data = spec.sample_dataset(500, 1);
    let cfg = TrainConfig { hidden: 16, depth: 1, seed: 2, ..TrainConfig::default() }.ce_only();
    let clf = train(&spec, &gen, &data, &cfg).unwrap().model;
    let test = spec.sample_dataset(1000, 3);
    let agree = test
        .iter()
        .filter(|s| {
            let p = class_posterior(&clf, s.context, &s.tokens);
            let pred = if p[1] > p[0] { 1 } else { 0 };
            pred == spec.oracle_class(s.context, &s.tokens).unwrap().map_class
        })
        .count();
    assert!(agree as f64 / test.len() as f64 > 0.8, "agreement {agree}/1000");
}

fn hand_generator(rows: &[(&[usize], [f64; 2])], len: usize) -> TabularGenerator {
    let rows: BTreeMap<RowKey, Vec<f64>> =
        rows.iter().map(|(s, p)| (RowKey { context: 0, state: s.to_vec() }, p.to_vec())).collect();
    TabularGenerator::from_rows(2, History::Full, 0.0, None, Some(len), 1, rows).unwrap()
}

#[test]
fn wider_beam_need_not_contain_narrower() {
    let gen = hand_generator(
        &[
            (&[], [0.6, 0.4]),
            (&[0], [0.5, 0.5]),
            (&[1], [0.95, 0.05]),
            (&[0, 0], [0.5, 0.5]),
            (&[0, 1], [0.5, 0.5]),
            (&[1, 0], [0.5, 0.5]),
            (&[1, 1], [0.5, 0.5]),
        ],
        3,
    );
    let greedy = beam_search(&gen, 0, 1, 3, 2);
    assert_eq!(greedy[0].tokens, vec![0, 0, 0]);
    let wide: Vec<Vec<usize>> = beam_search(&gen, 0, 2, 3, 2).into_iter().map(|h| h.tokens).collect();
    assert_eq!(wide, vec![vec![1, 0, 0], vec![1, 0, 1]]);
    assert!(!wide.contains(&greedy[0].tokens));
}

#[test]
fn lookahead_budget_and_choice() {
    let spec = GrammarSpec::noisy_channel(0.1, 0.2, 2, 5, 1).unwrap();
    let gen = TabularGenerator::exact_from_grammar(&spec).unwrap();
    let data = spec.sample_dataset(300, 1);
    let cfg = TrainConfig { margin: 2.0, hidden: 16, depth: 1, epochs: 10, ..TrainConfig::default() };
    let clf = train(&spec, &gen, &data, &cfg).unwrap().model;
    let base = DecodeConfig::new(2, 5, 1);
    let lambdas = [0.0, 0.5, 1.0];
    let r = lookahead_decode(&spec, &gen, &clf, 0, 50, &lambdas, 8, &base, 4).unwrap();
    assert_eq!(r.samples.len(), 50);
    assert_eq!(r.samples.iter().filter(|s| s.exploration).count(), 24);
    let best = r.mean_scores.iter().map(|m| m.1).fold(f64::MIN, f64::max);
    let first_best = r.mean_scores.iter().find(|m| m.1 == best).unwrap().0;
    assert_eq!(r.chosen_lambda, first_best);
    assert!(r.samples.iter().filter(|s| !s.exploration).all(|s| s.lambda == r.chosen_lambda));
    assert_eq!(r.multiplicity().values().sum::<usize>(), 50);
    assert_eq!(r, lookahead_decode(&spec, &gen, &clf, 0, 50, &lambdas, 8, &base, 4).unwrap());
    assert!(lookahead_decode(&spec, &gen, &clf, 0, 23, &lambdas, 8, &base, 4).is_err());
    assert!(lookahead_decode(&spec, &gen, &clf, 0, 23, &[], 8, &base, 4).is_err());
}
