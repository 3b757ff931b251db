//! Sample-complexity table: analytic minimum N per prior and the Monte Carlo
//! success rate there. Pass a trial count to change the default 4000.

use scrlab::theory::toy::{nmin_table, nmin_table_csv, practical_threshold_csv, TABLE_ETAS};

fn main() -> scrlab::Result<()> {
    let trials = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(4000);
    let rows = nmin_table(&TABLE_ETAS, 0.05, 0.1, trials, 7, None)?;
    print!("{}", nmin_table_csv(&rows));
    println!();
    print!("{}", practical_threshold_csv(&[3.0, 2.0, 1.0, 0.5], 0.05)?);
    Ok(())
}
