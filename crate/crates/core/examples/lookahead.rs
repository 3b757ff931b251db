//! Lookahead guidance-scale selection with a trained classifier.

use scrlab::classifier::train::train;
use scrlab::decode::lookahead_decode;
use scrlab::{DecodeConfig, GrammarSpec, TabularGenerator, TrainConfig};

fn main() -> scrlab::Result<()> {
    let spec = GrammarSpec::noisy_channel(0.05, 0.2, 2, 5, 1)?;
    let gen = TabularGenerator::exact_from_grammar(&spec)?;
    let data = spec.sample_dataset(400, 1);
    let cfg = TrainConfig { margin: 2.0, hidden: 16, depth: 1, ..TrainConfig::default() };
    let clf = train(&spec, &gen, &data, &cfg)?.model;

    let base = DecodeConfig::new(2, 5, 1);
    let res = lookahead_decode(&spec, &gen, &clf, 0, 96, &[0.0, 0.5, 1.0], 16, &base, 11)?;
    for (lambda, score) in &res.mean_scores {
        println!("explore lambda = {lambda}: satisfaction {score:.3}");
    }
    println!("chosen lambda = {}", res.chosen_lambda);
    println!(
        "pooled satisfaction {:.3} over {} samples, {} distinct",
        res.satisfaction_rate(),
        res.samples.len(),
        res.multiplicity().len()
    );
    Ok(())
}
