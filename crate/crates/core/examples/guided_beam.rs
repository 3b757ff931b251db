//! Guided beam search with a fixed scorer, against plain beam search.

use scrlab::classifier::ConstantScorer;
use scrlab::decode::beam_search;
use scrlab::{guided_beam_search, DecodeConfig, GrammarSpec, TabularGenerator};

fn main() -> scrlab::Result<()> {
    let spec = GrammarSpec::markov_toy(0.1, 0.2, 4, 1)?;
    let gen = TabularGenerator::exact_from_grammar(&spec)?;

    for h in beam_search(&gen, 0, 4, 4, 2) {
        println!("plain   {:?}  F = {:.3}", h.tokens, h.score);
    }
    // A scorer that slightly prefers label 1 everywhere does not change the
    // order; it only shifts every guided score by the same amount.
    let scorer = ConstantScorer { probs: vec![0.4, 0.6] };
    let cfg = DecodeConfig::new(2, 4, 1);
    for h in guided_beam_search(&gen, &scorer, 0, &cfg)? {
        println!("guided  {:?}  F = {:.3}  F_guided = {:.3}", h.tokens, h.score, h.guided_score);
    }
    Ok(())
}
