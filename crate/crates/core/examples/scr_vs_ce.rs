//! SCR against cross-entropy-only training on the Markov toy, over seeds.
//! Optional arguments: seed count, then a TOML file of comparison settings.

use rayon::prelude::*;
use scrlab::experiment::{compare_scr_ce, paired, ComparisonRun, ComparisonSettings};

fn main() -> scrlab::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let seeds: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(20);
    let settings: ComparisonSettings = match args.get(2) {
        Some(path) => {
            toml::from_str(&std::fs::read_to_string(path)?).map_err(|e| scrlab::Error::Parse(e.to_string()))?
        }
        None => ComparisonSettings::default(),
    };
    for eta in [0.05, 0.1] {
        let runs = (0..seeds)
            .into_par_iter()
            .map(|s| compare_scr_ce(eta, s, &settings))
            .collect::<scrlab::Result<Vec<_>>>()?;
        let col = |f: fn(&ComparisonRun) -> f64| runs.iter().map(f).collect::<Vec<_>>();
        let margin = paired(&col(|r| r.scr_margin_rate), &col(|r| r.ce_margin_rate));
        let beam = paired(&col(|r| r.scr_satisfaction), &col(|r| r.ce_satisfaction));
        let beam0 = paired(&col(|r| r.scr_satisfaction), &col(|r| r.unguided_satisfaction));
        let samp = paired(&col(|r| r.sampled_scr), &col(|r| r.sampled_ce));
        let samp0 = paired(&col(|r| r.sampled_scr), &col(|r| r.sampled_unguided));
        println!("eta = {eta}");
        println!("  margin rate  SCR {:.3} CE {:.3}  p = {:.4}", margin.mean_a, margin.mean_b, margin.p_value);
        println!(
            "  beam         SCR {:.3} CE {:.3} unguided {:.3}  p(CE) = {:.4} [{}/{}/{}]  p(unguided) = {:.4}",
            beam.mean_a, beam.mean_b, beam0.mean_b, beam.p_value, beam.wins, beam.losses, beam.ties, beam0.p_value
        );
        if settings.n_samples > 0 {
            println!(
                "  sampled      SCR {:.3} CE {:.3} unguided {:.3}  p(CE) = {:.4} [{}/{}/{}]  p(unguided) = {:.4}",
                samp.mean_a, samp.mean_b, samp0.mean_b, samp.p_value, samp.wins, samp.losses, samp.ties, samp0.p_value
            );
        }
    }
    Ok(())
}
