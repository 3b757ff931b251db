//! Closed forms for the binary toy: posteriors, the variance split between the
//! rare and abundant cells, and the discriminability identity.

use scrlab::theory::toy::{
    conditional_discriminability, delta_method_variance, discriminability_identity, toy_posteriors,
};

fn main() -> scrlab::Result<()> {
    let (eta, eps) = (0.05, 0.05);
    let q = toy_posteriors(eta, eps)?;
    println!("q_a = {:.5}  q_b = {:.5}", q.q_a, q.q_b);

    let v = delta_method_variance(eta, eps, 1000.0)?;
    println!("variance at n = 1000: rare {:.4e} abundant {:.4e} ratio {:.2}", v.rare, v.abundant, v.dominance_ratio());

    let d = discriminability_identity(eta, eps)?;
    println!(
        "delta_ce = {:.4}  requirement = {:.4}  delta_cond = {:.4} (direct {:.4})",
        d.delta_ce,
        d.requirement,
        d.delta_cond,
        conditional_discriminability(eps)
    );
    Ok(())
}
