//! Trains an SCR classifier on the noisy toy and prints the loss trace and
//! held-out margin satisfaction next to a cross-entropy-only model.

use scrlab::classifier::train::{heldout_ce, margin_satisfaction, trace_csv, train};
use scrlab::{GrammarSpec, TabularGenerator, TrainConfig};

fn main() -> scrlab::Result<()> {
    let spec = GrammarSpec::noisy_channel(0.1, 0.2, 2, 5, 1)?;
    let gen = TabularGenerator::exact_from_grammar(&spec)?;
    let data = spec.sample_dataset(400, 1);
    let heldout = spec.sample_dataset(2000, 2);

    let cfg = TrainConfig { margin: 2.0, hidden: 16, depth: 1, seed: 3, ..TrainConfig::default() };
    let scr = train(&spec, &gen, &data, &cfg)?;
    print!("{}", trace_csv(&scr.trace));

    let ce = train(&spec, &gen, &data, &cfg.clone().ce_only())?;
    for (name, model) in [("scr", &scr.model), ("ce", &ce.model)] {
        let (hit, total) = margin_satisfaction(&gen, model, &heldout, cfg.margin, Some(1));
        println!(
            "{name}: held-out CE {:.4}, margin reached at {hit}/{total} divergent positions",
            heldout_ce(model, &heldout)
        );
    }
    Ok(())
}
