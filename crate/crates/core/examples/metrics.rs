//! Steering metrics from decode rows, read back from CSV.

use std::collections::BTreeSet;

use scrlab::classifier::train::train;
use scrlab::decode::{decode_csv, read_decode_csv, DecodeRow};
use scrlab::experiment::minority_targets;
use scrlab::metrics::{group_rows, jaccard_overlap, mean_satisfaction, rank_efficiency, steering_breadth};
use scrlab::{guided_beam_search, DecodeConfig, GrammarSpec, TabularGenerator, TrainConfig};

fn main() -> scrlab::Result<()> {
    let spec = GrammarSpec::noisy_channel(0.1, 0.2, 2, 5, 2)?;
    let gen = TabularGenerator::exact_from_grammar(&spec)?;
    let data = spec.sample_dataset(400, 1);
    let cfg = TrainConfig { margin: 2.0, hidden: 16, depth: 1, ..TrainConfig::default() };
    let clf = train(&spec, &gen, &data, &cfg)?.model;

    let targets = minority_targets(&spec);
    let mut rows = Vec::new();
    for (&ctx, ts) in &targets {
        for &t in ts {
            for lambda in [0.0, 1.0] {
                let d = DecodeConfig { lambda, beam_width: 6, ..DecodeConfig::new(2, 5, t) };
                let hyps = guided_beam_search(&gen, &clf, ctx, &d)?;
                rows.extend(DecodeRow::from_hypotheses(&spec, ctx, t, lambda, &hyps)?);
            }
        }
    }
    let rows = read_decode_csv(&decode_csv(&rows))?;
    let groups = group_rows(&rows);

    for lambda in [0.0f64, 1.0] {
        let res: Vec<_> = groups.iter().filter(|(k, _)| k.2 == lambda.to_bits()).map(|(_, r)| r.clone()).collect();
        let rank = rank_efficiency(&res);
        println!(
            "lambda {lambda}: breadth {:.2} satisfaction {:.2} mean first rank {:?}",
            steering_breadth(&res, &targets)?,
            mean_satisfaction(&res).unwrap_or(0.0),
            rank.mean_rank
        );
    }
    for (&(ctx, t, bits), r) in &groups {
        if f64::from_bits(bits) == 1.0 {
            let base = &groups[&(ctx, t, 0f64.to_bits())];
            let set =
                |s: &scrlab::metrics::SteeringResult| s.samples.iter().map(|x| x.0.clone()).collect::<BTreeSet<_>>();
            println!("context {ctx}: jaccard(guided, plain) = {:.2}", jaccard_overlap(&set(r), &set(base)));
        }
    }
    Ok(())
}
