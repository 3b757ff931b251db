//! Reachability on random enumerable instances: λ*, the check just above it,
//! and the empirical flip point on a 0.01 grid.

use scrlab::theory::reachability::{random_instance, reachability_record};

fn main() -> scrlab::Result<()> {
    let n: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(10);
    println!("id  lambda*  flip   excluded included");
    for i in 0..n {
        let inst = random_instance(i, 3, 3, 2, 0.85, 0.2)?;
        let r = reachability_record(&inst, i, 0.01, 0.01)?;
        println!(
            "{:<3} {:.4}   {:<6} {:<8} {}",
            r.instance_id,
            r.lambda_star,
            r.grid_flip.map_or("-".into(), |f| format!("{f:.2}")),
            r.unguided_excludes,
            r.guided_includes
        );
    }
    Ok(())
}
