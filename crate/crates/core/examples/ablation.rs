//! Guided sampling satisfaction as λ, the guidance onset and the candidate
//! pool vary.

use scrlab::classifier::train::train;
use scrlab::experiment::sampled_satisfaction;
use scrlab::{DecodeConfig, GrammarSpec, TabularGenerator, TrainConfig};

fn main() -> scrlab::Result<()> {
    let spec = GrammarSpec::noisy_channel(0.05, 0.2, 3, 5, 1)?;
    let gen = TabularGenerator::exact_from_grammar(&spec)?;
    let data = spec.sample_dataset(600, 1);
    let cfg = TrainConfig { margin: 2.0, hidden: 16, depth: 1, ..TrainConfig::default() };
    let clf = train(&spec, &gen, &data, &cfg)?.model;
    let base = DecodeConfig::new(3, 5, 1);

    for lambda in [0.0, 0.5, 1.0, 2.0] {
        let s = sampled_satisfaction(&spec, &gen, &clf, &base.with_lambda(lambda), 300, 5)?;
        println!("lambda {lambda:<4} satisfaction {s:.3}");
    }
    for onset in 1..=5 {
        let s = sampled_satisfaction(&spec, &gen, &clf, &DecodeConfig { onset, ..base.clone() }, 300, 5)?;
        println!("onset  {onset:<4} satisfaction {s:.3}");
    }
    for pool in 1..=3 {
        let s = sampled_satisfaction(&spec, &gen, &clf, &DecodeConfig { pool, ..base.clone() }, 300, 5)?;
        println!("pool   {pool:<4} satisfaction {s:.3}");
    }
    Ok(())
}
