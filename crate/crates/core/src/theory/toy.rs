//! The single-step binary toy: closed-form posteriors, the delta-method
//! variance of the cross-entropy log-ratio, the rare-cell sample bound and a
//! Monte-Carlo check of it.
//!
//! Class 1 (prior η) emits the generator-dispreferred token `b` with
//! probability 1 − ε and `a` with probability ε; class 0 does the opposite.

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::normal::z_quantile;
use crate::error::{arg_err, Result};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyParams {
    pub eta: f64,
    pub eps: f64,
    /// Failure tolerance δ.
    pub delta: f64,
    /// Training samples per prefix.
    pub n: u64,
}

impl ToyParams {
    pub fn new(eta: f64, eps: f64, delta: f64, n: u64) -> Result<Self> {
        let p = Self { eta, eps, delta, n };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        check_eta_eps(self.eta, self.eps)?;
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(arg_err("delta must lie in (0, 1)"));
        }
        if self.n == 0 {
            return Err(arg_err("n must be at least 1"));
        }
        Ok(())
    }

    pub fn posteriors(&self) -> ToyPosteriors {
        toy_posteriors_unchecked(self.eta, self.eps)
    }

    pub fn marginals(&self) -> (f64, f64) {
        marginals(self.eta, self.eps)
    }

    pub fn discriminability(&self) -> Discriminability {
        discriminability_unchecked(self.eta, self.eps)
    }

    /// `E[n_{a,1}] = N η ε`.
    pub fn expected_rare_count(&self) -> f64 {
        self.n as f64 * self.eta * self.eps
    }
}

fn check_eta_eps(eta: f64, eps: f64) -> Result<()> {
    if !(eta > 0.0 && eta < 1.0) {
        return Err(arg_err("eta must lie in (0, 1)"));
    }
    if !(eps > 0.0 && eps < 0.5) {
        return Err(arg_err("eps must lie in (0, 0.5)"));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyPosteriors {
    /// `P(class 1 | a)`.
    pub q_a: f64,
    /// `P(class 1 | b)`.
    pub q_b: f64,
}

fn toy_posteriors_unchecked(eta: f64, eps: f64) -> ToyPosteriors {
    let q_a = eta * eps / (eta * eps + (1.0 - eta) * (1.0 - eps));
    let q_b = eta * (1.0 - eps) / (eta * (1.0 - eps) + (1.0 - eta) * eps);
    ToyPosteriors { q_a, q_b }
}

pub fn toy_posteriors(eta: f64, eps: f64) -> Result<ToyPosteriors> {
    check_eta_eps(eta, eps)?;
    Ok(toy_posteriors_unchecked(eta, eps))
}

/// Token marginals `(p(a), p(b))`.
pub fn marginals(eta: f64, eps: f64) -> (f64, f64) {
    let pa = (1.0 - eta) * (1.0 - eps) + eta * eps;
    (pa, 1.0 - pa)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceBreakdown {
    /// Contribution of the rare cell `(a, class 1)`.
    pub rare: f64,
    /// Contribution of the abundant cell `(b, class 1)`.
    pub abundant: f64,
}

impl VarianceBreakdown {
    pub fn total(&self) -> f64 {
        self.rare + self.abundant
    }

    pub fn dominance_ratio(&self) -> f64 {
        self.rare / self.abundant
    }
}

/// Delta-method variance of `log(q̂_b / q̂_a)` from `n` samples, split by cell.
pub fn delta_method_variance(eta: f64, eps: f64, n: f64) -> Result<VarianceBreakdown> {
    check_eta_eps(eta, eps)?;
    if !(n >= 1.0) {
        return Err(arg_err("n must be at least 1"));
    }
    let q = toy_posteriors_unchecked(eta, eps);
    Ok(VarianceBreakdown { rare: (1.0 - q.q_a) / (n * eta * eps), abundant: (1.0 - q.q_b) / (n * eta * (1.0 - eps)) })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Discriminability {
    /// `log(q_b / q_a)`.
    pub delta_ce: f64,
    /// `log(p(a) / p(b))`.
    pub requirement: f64,
    /// `delta_ce − requirement`.
    pub delta_cond: f64,
}

fn discriminability_unchecked(eta: f64, eps: f64) -> Discriminability {
    let q = toy_posteriors_unchecked(eta, eps);
    let (pa, pb) = marginals(eta, eps);
    let delta_ce = (q.q_b / q.q_a).ln();
    let requirement = (pa / pb).ln();
    Discriminability { delta_ce, requirement, delta_cond: delta_ce - requirement }
}

pub fn discriminability_identity(eta: f64, eps: f64) -> Result<Discriminability> {
    check_eta_eps(eta, eps)?;
    Ok(discriminability_unchecked(eta, eps))
}

/// `log((1 − ε) / ε)`.
pub fn conditional_discriminability(eps: f64) -> f64 {
    ((1.0 - eps) / eps).ln()
}

/// Smallest `N` with `N η ε ≥ z²_{1−δ} / Δ_cond²`.
pub fn n_min(eta: f64, eps: f64, delta: f64, delta_cond: f64) -> Result<u64> {
    check_eta_eps(eta, eps)?;
    if !(delta_cond > 0.0 && delta_cond.is_finite()) {
        return Err(arg_err("delta_cond must be positive"));
    }
    let z = z_quantile(delta)?;
    let n = z * z / (eta * eps * delta_cond * delta_cond);
    // Absorb round-off just above an integer.
    let r = n.round();
    Ok(if (n - r).abs() < 1e-9 * r.max(1.0) { r as u64 } else { n.ceil() as u64 }.max(1))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PracticalThreshold {
    /// `z²_{1−δ} / Δ_cond²`.
    pub asymptotic: f64,
    pub practical: f64,
}

pub fn practical_threshold(delta_cond: f64, delta: f64) -> Result<PracticalThreshold> {
    if !(delta_cond > 0.0 && delta_cond.is_finite()) {
        return Err(arg_err("delta_cond must be positive"));
    }
    let z = z_quantile(delta)?;
    let asymptotic = z * z / (delta_cond * delta_cond);
    Ok(PracticalThreshold { asymptotic, practical: 10.0 * asymptotic })
}

/// 2×2 contingency counts `n_{token, class}` from one simulated training set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ToyCounts {
    pub a0: u64,
    pub a1: u64,
    pub b0: u64,
    pub b1: u64,
}

impl ToyCounts {
    pub fn n_a(&self) -> u64 {
        self.a0 + self.a1
    }

    pub fn n_b(&self) -> u64 {
        self.b0 + self.b1
    }

    /// Estimated `(q̂_a, q̂_b)`; requires both tokens observed.
    pub fn estimates(&self) -> (f64, f64) {
        (self.a1 as f64 / self.n_a() as f64, self.b1 as f64 / self.n_b() as f64)
    }

    /// `Δ̂_CE > G_k`, i.e. `q̂_b p(b) > q̂_a p(a)`. An empty rare cell
    /// (`q̂_a = 0`) succeeds whenever `q̂_b > 0`.
    pub fn succeeds(&self, eta: f64, eps: f64) -> bool {
        let (qa, qb) = self.estimates();
        let (pa, pb) = marginals(eta, eps);
        qb * pb > qa * pa
    }

    /// `log(q̂_b / q̂_a)` when both estimates are positive.
    pub fn log_ratio(&self) -> Option<f64> {
        let (qa, qb) = self.estimates();
        (qa > 0.0 && qb > 0.0).then(|| (qb / qa).ln())
    }
}

fn draw_once(rng: &mut seed::Rng, eta: f64, eps: f64, n: u64) -> ToyCounts {
    let mut c = ToyCounts::default();
    for _ in 0..n {
        let minority = rng.random::<f64>() < eta;
        let emits_a = rng.random::<f64>() < if minority { eps } else { 1.0 - eps };
        match (emits_a, minority) {
            (true, false) => c.a0 += 1,
            (true, true) => c.a1 += 1,
            (false, false) => c.b0 += 1,
            (false, true) => c.b1 += 1,
        }
    }
    c
}

/// Draws `n` joint samples, redrawing until both tokens appear. Returns the
/// counts and the number of redraws.
pub fn draw_counts(rng: &mut seed::Rng, eta: f64, eps: f64, n: u64) -> (ToyCounts, u64) {
    let mut redraws = 0;
    loop {
        let c = draw_once(rng, eta, eps, n);
        if c.n_a() > 0 && c.n_b() > 0 {
            return (c, redraws);
        }
        redraws += 1;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McOutcome {
    pub success_rate: f64,
    pub trials: u64,
    /// Trials redrawn because one token never appeared.
    pub redraws: u64,
    /// Trials with an empty rare cell, all counted as successes.
    pub empty_rare_cells: u64,
}

/// Empirical `Pr[Δ̂_CE > G_k]` over `trials` simulated training sets. Trial
/// `i` uses seed `seed ⊕ i`, so the result does not depend on thread count.
pub fn mc_success_prob(params: &ToyParams, trials: u64, seed: u64) -> Result<McOutcome> {
    params.validate()?;
    if trials == 0 {
        return Err(arg_err("trials must be at least 1"));
    }
    let (hits, redraws, empty) = (0..trials)
        .into_par_iter()
        .map(|i| {
            let mut rng = seed::rng(seed::derive(seed, i));
            let (c, r) = draw_counts(&mut rng, params.eta, params.eps, params.n);
            (u64::from(c.succeeds(params.eta, params.eps)), r, u64::from(c.a1 == 0))
        })
        .reduce(|| (0, 0, 0), |x, y| (x.0 + y.0, x.1 + y.1, x.2 + y.2));
    Ok(McOutcome { success_rate: hits as f64 / trials as f64, trials, redraws, empty_rare_cells: empty })
}

/// Simulated `log(q̂_b / q̂_a)` values, one per trial, skipping infinite ones.
pub fn mc_log_ratios(params: &ToyParams, trials: u64, seed: u64) -> Result<Vec<f64>> {
    params.validate()?;
    Ok((0..trials)
        .into_par_iter()
        .filter_map(|i| {
            let mut rng = seed::rng(seed::derive(seed, i));
            draw_counts(&mut rng, params.eta, params.eps, params.n).0.log_ratio()
        })
        .collect())
}

/// One row of the sample-complexity table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NminRow {
    pub eta: f64,
    /// `E[n_{a,1}]` at the simulated `N`.
    pub expected_rare_count: f64,
    pub n_min: u64,
    /// The `N` actually simulated.
    pub n_simulated: u64,
    pub success: McOutcome,
}

/// The rows used by the standard table: η from 0.5 down to 0.01.
pub const TABLE_ETAS: [f64; 6] = [0.5, 0.2, 0.1, 0.05, 0.02, 0.01];

/// Computes `N_min` per η with `Δ_cond = log((1 − ε)/ε)` and simulates at
/// `N_min`, or at `n_override[i]` when given.
pub fn nmin_table(
    etas: &[f64],
    eps: f64,
    delta: f64,
    trials: u64,
    seed: u64,
    n_override: Option<&[u64]>,
) -> Result<Vec<NminRow>> {
    if let Some(o) = n_override {
        if o.len() != etas.len() {
            return Err(arg_err("n_override must have one entry per eta"));
        }
    }
    let dc = conditional_discriminability(eps);
    etas.iter()
        .enumerate()
        .map(|(i, &eta)| {
            let n_min = n_min(eta, eps, delta, dc)?;
            let n_simulated = n_override.map_or(n_min, |o| o[i]);
            let params = ToyParams::new(eta, eps, delta, n_simulated)?;
            let success = mc_success_prob(&params, trials, seed::derive(seed, seed::stream2(i as u64 + 1, 0)))?;
            Ok(NminRow { eta, expected_rare_count: params.expected_rare_count(), n_min, n_simulated, success })
        })
        .collect()
}

pub fn nmin_table_csv(rows: &[NminRow]) -> String {
    let mut out = String::from(
        "eta,expected_rare_count,analytic_n_min,n_simulated,empirical_success,trials,redraws,empty_rare_cells\n",
    );
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.eta,
            r.expected_rare_count,
            r.n_min,
            r.n_simulated,
            r.success.success_rate,
            r.success.trials,
            r.success.redraws,
            r.success.empty_rare_cells
        ));
    }
    out
}

pub fn practical_threshold_csv(delta_conds: &[f64], delta: f64) -> Result<String> {
    let mut out = String::from("delta_cond,asymptotic,practical\n");
    for &d in delta_conds {
        let t = practical_threshold(d, delta)?;
        out.push_str(&format!("{},{},{}\n", d, t.asymptotic, t.practical));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn symmetric_prior_posteriors() {
        for eps in [0.01, 0.1, 0.3] {
            let q = toy_posteriors(0.5, eps).unwrap();
            assert!((q.q_a - eps).abs() < 1e-15);
            assert!((q.q_b - (1.0 - eps)).abs() < 1e-15);
        }
    }

    #[test]
    fn requirement_vanishes_at_symmetric_prior() {
        let d = discriminability_identity(0.5, 0.05).unwrap();
        assert!(d.requirement.abs() < 1e-15);
        assert!((d.delta_ce - 19f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn variance_scales_inversely_with_n() {
        let v1 = delta_method_variance(0.1, 0.2, 100.0).unwrap();
        let v2 = delta_method_variance(0.1, 0.2, 200.0).unwrap();
        assert!((v1.total() / v2.total() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn nmin_scales_with_inverse_eta() {
        let dc = conditional_discriminability(0.05);
        let a = n_min(0.01, 0.05, 0.1, dc).unwrap() as f64;
        let b = n_min(0.02, 0.05, 0.1, dc).unwrap() as f64;
        assert!((b / a - 0.5).abs() < 0.01);
    }

    #[test]
    fn threshold_quadruples_when_delta_halves() {
        let a = practical_threshold(1.0, 0.05).unwrap();
        let b = practical_threshold(0.5, 0.05).unwrap();
        assert!((b.asymptotic / a.asymptotic - 4.0).abs() < 1e-12);
        assert_eq!(a.practical, 10.0 * a.asymptotic);
    }

    #[test]
    fn mc_is_deterministic_and_thread_independent() {
        let p = ToyParams::new(0.1, 0.05, 0.1, 40).unwrap();
        let a = mc_success_prob(&p, 500, 3).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let b = pool.install(|| mc_success_prob(&p, 500, 3).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn large_n_always_succeeds() {
        let p = ToyParams::new(0.05, 0.05, 0.1, 100_000).unwrap();
        assert_eq!(mc_success_prob(&p, 50, 1).unwrap().success_rate, 1.0);
    }

    #[test]
    fn counts_conventions() {
        let c = ToyCounts { a0: 10, a1: 0, b0: 3, b1: 2 };
        assert!(c.succeeds(0.05, 0.05));
        assert_eq!(c.log_ratio(), None);
        let c = ToyCounts { a0: 10, a1: 0, b0: 3, b1: 0 };
        assert!(!c.succeeds(0.05, 0.05));
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(toy_posteriors(0.0, 0.1).is_err());
        assert!(toy_posteriors(0.3, 0.5).is_err());
        assert!(n_min(0.1, 0.1, 0.1, 0.0).is_err());
        assert!(ToyParams::new(0.1, 0.1, 1.0, 5).is_err());
    }
}
