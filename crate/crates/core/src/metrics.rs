//! Steering metrics over decode results.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::decode::DecodeRow;
use crate::error::{arg_err, Result};
use crate::Token;

/// Ranked samples for one (context, target) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteeringResult {
    pub context: usize,
    pub target_class: usize,
    /// `(tokens, rank, satisfied)`, ranks 1-based and unique.
    pub samples: Vec<(Vec<Token>, usize, bool)>,
}

impl SteeringResult {
    pub fn any_satisfied(&self) -> bool {
        self.samples.iter().any(|s| s.2)
    }

    /// Rank of the best-ranked satisfying sample.
    pub fn first_satisfied_rank(&self) -> Option<usize> {
        self.samples.iter().filter(|s| s.2).map(|s| s.1).min()
    }

    pub fn satisfaction_rate(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.iter().filter(|s| s.2).count() as f64 / self.samples.len() as f64
    }
}

/// Groups decode rows by (context, target, λ).
pub fn group_rows(rows: &[DecodeRow]) -> BTreeMap<(usize, usize, u64), SteeringResult> {
    let mut out: BTreeMap<(usize, usize, u64), SteeringResult> = BTreeMap::new();
    for r in rows {
        out.entry((r.context, r.target, r.lambda.to_bits()))
            .or_insert_with(|| SteeringResult { context: r.context, target_class: r.target, samples: Vec::new() })
            .samples
            .push((r.tokens.clone(), r.rank, r.satisfied));
    }
    out
}

/// Per context, the fraction of `targets[context]` with at least one
/// satisfying sample, averaged over contexts.
pub fn steering_breadth(results: &[SteeringResult], targets: &BTreeMap<usize, Vec<usize>>) -> Result<f64> {
    if targets.is_empty() {
        return Err(arg_err("no contexts to evaluate"));
    }
    let hit: BTreeMap<(usize, usize), bool> =
        results.iter().map(|r| ((r.context, r.target_class), r.any_satisfied())).collect();
    let mut total = 0.0;
    for (&ctx, ts) in targets {
        if ts.is_empty() {
            return Err(arg_err(format!("context {ctx} has no targets")));
        }
        let mut n = 0usize;
        for &t in ts {
            match hit.get(&(ctx, t)) {
                Some(&h) => n += usize::from(h),
                None => return Err(arg_err(format!("missing result for context {ctx}, target {t}"))),
            }
        }
        total += n as f64 / ts.len() as f64;
    }
    Ok(total / targets.len() as f64)
}

/// `|A ∩ B| / |A ∪ B|`, 1 when both are empty.
pub fn jaccard_overlap(a: &BTreeSet<Vec<Token>>, b: &BTreeSet<Vec<Token>>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(b).count() as f64 / union as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankEfficiency {
    /// `None` when no group has a satisfying sample.
    pub mean_rank: Option<f64>,
    pub top5: Option<f64>,
    pub top10: Option<f64>,
    /// Groups with at least one satisfying sample.
    pub n: usize,
}

pub fn rank_efficiency(results: &[SteeringResult]) -> RankEfficiency {
    let ranks: Vec<usize> = results.iter().filter_map(SteeringResult::first_satisfied_rank).collect();
    let n = ranks.len();
    if n == 0 {
        return RankEfficiency { mean_rank: None, top5: None, top10: None, n };
    }
    let frac = |k: usize| ranks.iter().filter(|&&r| r <= k).count() as f64 / n as f64;
    RankEfficiency {
        mean_rank: Some(ranks.iter().sum::<usize>() as f64 / n as f64),
        top5: Some(frac(5)),
        top10: Some(frac(10)),
        n,
    }
}

/// Mean per-group satisfaction rate.
pub fn mean_satisfaction(results: &[SteeringResult]) -> Option<f64> {
    if results.is_empty() {
        return None;
    }
    Some(results.iter().map(SteeringResult::satisfaction_rate).sum::<f64>() / results.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub metric: String,
    pub context_group: String,
    pub value: Option<f64>,
    pub n: usize,
}

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut out = String::from("metric,context_group,value,n\n");
    for r in rows {
        let v = r.value.map_or(String::new(), |v| v.to_string());
        out.push_str(&format!("{},{},{},{}\n", r.metric, r.context_group, v, r.n));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn res(context: usize, target: usize, sat: &[bool]) -> SteeringResult {
        SteeringResult {
            context,
            target_class: target,
            samples: sat.iter().enumerate().map(|(i, &s)| (vec![i], i + 1, s)).collect(),
        }
    }

    #[test]
    fn breadth_cases() {
        let targets = BTreeMap::from([(0, vec![1, 2]), (1, vec![0, 2])]);
        let all = vec![res(0, 1, &[true]), res(0, 2, &[true]), res(1, 0, &[true]), res(1, 2, &[true])];
        assert_eq!(steering_breadth(&all, &targets).unwrap(), 1.0);
        let none: Vec<_> = all.iter().map(|r| res(r.context, r.target_class, &[false])).collect();
        assert_eq!(steering_breadth(&none, &targets).unwrap(), 0.0);
        let mixed = vec![res(0, 1, &[true]), res(0, 2, &[false]), res(1, 0, &[false, true]), res(1, 2, &[true])];
        assert_eq!(steering_breadth(&mixed, &targets).unwrap(), 0.75);
        assert!(steering_breadth(&mixed[..3], &targets).is_err());
    }

    #[test]
    fn jaccard_cases() {
        let a: BTreeSet<Vec<Token>> = BTreeSet::from([vec![1]]);
        let b: BTreeSet<Vec<Token>> = BTreeSet::from([vec![1], vec![2]]);
        let c: BTreeSet<Vec<Token>> = BTreeSet::from([vec![3]]);
        assert_eq!(jaccard_overlap(&b, &b), 1.0);
        assert_eq!(jaccard_overlap(&a, &c), 0.0);
        assert_eq!(jaccard_overlap(&a, &b), 0.5);
        assert_eq!(jaccard_overlap(&BTreeSet::new(), &BTreeSet::new()), 1.0);
    }

    #[test]
    fn rank_efficiency_cases() {
        let first = vec![res(0, 1, &[true, false]), res(1, 1, &[true])];
        let e = rank_efficiency(&first);
        assert_eq!((e.mean_rank, e.top5, e.n), (Some(1.0), Some(1.0), 2));
        let none = rank_efficiency(&[res(0, 1, &[false])]);
        assert_eq!((none.mean_rank, none.n), (None, 0));
        let mut a = vec![false; 10];
        a[2] = true;
        let mut b = vec![false; 10];
        b[6] = true;
        let e = rank_efficiency(&[res(0, 1, &a), res(1, 1, &b)]);
        assert_eq!((e.mean_rank, e.top5, e.top10), (Some(5.0), Some(0.5), Some(1.0)));
    }
}
