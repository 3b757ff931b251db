//! Reachability of property-satisfying sequences under guided beam search,
//! checked by exhaustive enumeration on small generators.
//!
//! Given a target `r*` that plain beam search drops, a classifier that scores
//! at least `c1` on prefixes of `r*` and at most `c2` on prefixes diverging
//! toward non-property sequences, and
//!
//! ```text
//! λ* = max_l max_{r ∉ R, r_≤l ≠ r*_≤l} (F(r_≤l) − F(r*_≤l)) / (|D(r, l)| · log(c1/c2))
//! ```
//!
//! with `D(r, l)` the steps `t ≤ l` where `r_≤t ≠ r*_≤t`, every λ > λ* keeps
//! a property-satisfying sequence in the final beam.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::classifier::PropertyScorer;
use crate::decode::{beam_search, guided_beam_search, DecodeConfig, Hypothesis};
use crate::error::{arg_err, Error, Result};
use crate::generator::{enumerate_prefixes, History, RowKey, TabularGenerator};
use crate::grammar::GrammarSpec;
use crate::seed;
use crate::{LabeledSequence, Token};

pub const MAX_ENUMERATED_SEQUENCES: usize = 1_000_000;

/// Label the idealized classifier steers toward.
pub const PROPERTY_LABEL: usize = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct ReachabilityInstance {
    pub gen: TabularGenerator,
    pub context: usize,
    /// Complete sequences satisfying the property.
    pub property: BTreeSet<Vec<Token>>,
    pub beam_width: usize,
    pub target: Vec<Token>,
    pub c1: f64,
    pub c2: f64,
}

impl ReachabilityInstance {
    pub fn new(
        gen: TabularGenerator,
        context: usize,
        property: BTreeSet<Vec<Token>>,
        beam_width: usize,
        target: Vec<Token>,
        c1: f64,
        c2: f64,
    ) -> Result<Self> {
        let inst = Self { gen, context, property, beam_width, target, c1, c2 };
        inst.validate()?;
        Ok(inst)
    }

    pub fn seq_len(&self) -> usize {
        self.target.len()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.c2 > 0.0 && self.c2 < self.c1 && self.c1 <= 1.0) {
            return Err(arg_err(format!("need 0 < c2 < c1 <= 1, got c1={}, c2={}", self.c1, self.c2)));
        }
        if !self.property.contains(&self.target) {
            return Err(arg_err("target is not in the property set"));
        }
        if self.beam_width == 0 {
            return Err(arg_err("beam width must be at least 1"));
        }
        if self.target.is_empty() || self.property.iter().any(|s| s.len() != self.seq_len()) {
            return Err(arg_err("property sequences must all have the target's length"));
        }
        if self.gen.end_token().is_some() {
            return Err(arg_err("reachability instances use fixed-length generators"));
        }
        if self.gen.max_len().is_some_and(|m| m < self.seq_len()) {
            return Err(arg_err("generator cannot emit sequences of the target's length"));
        }
        Ok(())
    }

    pub fn decode_config(&self, lambda: f64) -> DecodeConfig {
        DecodeConfig {
            lambda,
            beam_width: self.beam_width,
            onset: 1,
            pool: self.gen.vocab_size(),
            max_len: self.seq_len(),
            target_label: PROPERTY_LABEL,
        }
    }

    /// Final beam of plain beam search.
    pub fn unguided_beam(&self) -> Vec<Hypothesis> {
        beam_search(&self.gen, self.context, self.beam_width, self.seq_len(), self.gen.vocab_size())
    }
}

/// Two-valued classifier: `c1` on prefixes of the target and on prefixes all
/// of whose completions satisfy the property, `c2` everywhere else.
#[derive(Debug, Clone)]
pub struct IdealizedClassifier {
    high: HashSet<Vec<Token>>,
    pub c1: f64,
    pub c2: f64,
}

impl IdealizedClassifier {
    pub fn new(inst: &ReachabilityInstance) -> Result<Self> {
        inst.validate()?;
        let v = inst.gen.vocab_size();
        let len = inst.seq_len();
        let mut high: HashSet<Vec<Token>> = (0..=len).map(|k| inst.target[..k].to_vec()).collect();
        // A prefix is pure when every completion is in the property set.
        let mut pure: HashSet<Vec<Token>> = inst.property.clone().into_iter().collect();
        for k in (0..len).rev() {
            let level: BTreeSet<Vec<Token>> =
                pure.iter().filter(|s| s.len() == k + 1).map(|s| s[..k].to_vec()).collect();
            for p in level {
                let all = (0..v).all(|t| {
                    let mut q = p.clone();
                    q.push(t);
                    pure.contains(&q)
                });
                if all {
                    pure.insert(p);
                }
            }
        }
        high.extend(pure);
        Ok(Self { high, c1: inst.c1, c2: inst.c2 })
    }

    pub fn prob(&self, prefix: &[Token]) -> f64 {
        if self.high.contains(prefix) {
            self.c1
        } else {
            self.c2
        }
    }
}

impl PropertyScorer for IdealizedClassifier {
    fn num_labels(&self) -> usize {
        2
    }

    fn posterior(&self, _context: usize, prefix: &[Token]) -> Vec<f64> {
        let p = self.prob(prefix);
        vec![1.0 - p, p]
    }
}

/// Every complete sequence with its exact log-probability, best first (ties
/// by token order). Sequences end at the end token or at length `len`.
pub fn enumerate_sequences(gen: &TabularGenerator, context: usize, len: usize) -> Result<Vec<(Vec<Token>, f64)>> {
    let v = gen.vocab_size() as f64;
    if v.powi(len as i32) > MAX_ENUMERATED_SEQUENCES as f64 {
        return Err(arg_err(format!("V^L exceeds {MAX_ENUMERATED_SEQUENCES}")));
    }
    let len = gen.max_len().map_or(len, |m| m.min(len));
    let end = gen.end_token();
    let mut out = Vec::new();
    let mut stack = vec![(Vec::new(), 0.0)];
    while let Some((prefix, f)) = stack.pop() {
        let lp = gen.next_token_logprobs(context, &prefix);
        for t in 0..gen.vocab_size() {
            let mut q: Vec<Token> = prefix.clone();
            q.push(t);
            let g = f + lp[t];
            if q.len() == len || Some(t) == end {
                out.push((q, g));
            } else {
                stack.push((q, g));
            }
        }
    }
    out.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Ok(out)
}

fn prefix_scores(gen: &TabularGenerator, context: usize, seq: &[Token]) -> Vec<f64> {
    let mut f = vec![0.0; seq.len() + 1];
    for k in 0..seq.len() {
        f[k + 1] = f[k] + gen.next_token_logprobs(context, &seq[..k])[seq[k]];
    }
    f
}

/// The guidance-scale threshold. Errors when `c1 <= c2` or when plain beam
/// search already keeps the target.
pub fn compute_lambda_star(inst: &ReachabilityInstance) -> Result<f64> {
    inst.validate()?;
    if inst.unguided_beam().iter().any(|h| h.tokens == inst.target) {
        return Err(Error::Precondition("target already survives unguided beam search".into()));
    }
    let log_ratio = (inst.c1 / inst.c2).ln();
    let star = prefix_scores(&inst.gen, inst.context, &inst.target);
    let mut lambda: f64 = 0.0;
    for (r, _) in enumerate_sequences(&inst.gen, inst.context, inst.seq_len())? {
        if inst.property.contains(&r) {
            continue;
        }
        let f = prefix_scores(&inst.gen, inst.context, &r);
        // First 1-based step at which r leaves the target.
        let Some(j) = (0..r.len()).find(|&i| r[i] != inst.target[i]).map(|i| i + 1) else {
            continue;
        };
        for l in j..=r.len() {
            let d = (l - j + 1) as f64;
            lambda = lambda.max((f[l] - star[l]) / (d * log_ratio));
        }
    }
    Ok(lambda)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReachabilityReport {
    /// The target is absent from the plain beam.
    pub unguided_excludes: bool,
    /// Some property-satisfying sequence is in the guided beam.
    pub guided_includes: bool,
    /// The target itself is in the guided beam.
    pub target_included: bool,
}

pub fn verify_reachability(inst: &ReachabilityInstance, lambda: f64) -> Result<ReachabilityReport> {
    let clf = IdealizedClassifier::new(inst)?;
    let unguided = inst.unguided_beam();
    let guided = guided_beam_search(&inst.gen, &clf, inst.context, &inst.decode_config(lambda))?;
    Ok(ReachabilityReport {
        unguided_excludes: !unguided.iter().any(|h| h.tokens == inst.target),
        guided_includes: guided.iter().any(|h| inst.property.contains(&h.tokens)),
        target_included: guided.iter().any(|h| h.tokens == inst.target),
    })
}

/// One JSON record of the reachability suite.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReachabilityRecord {
    pub instance_id: u64,
    pub lambda_star: f64,
    pub lambda: f64,
    pub unguided_excludes: bool,
    pub guided_includes: bool,
    pub target_included: bool,
    /// Smallest grid λ from which inclusion holds at every larger grid point.
    pub grid_flip: Option<f64>,
}

/// Inclusion at each λ of `grid`.
pub fn grid_scan(inst: &ReachabilityInstance, grid: &[f64]) -> Result<Vec<(f64, bool)>> {
    let clf = IdealizedClassifier::new(inst)?;
    grid.iter()
        .map(|&lambda| {
            let beam = guided_beam_search(&inst.gen, &clf, inst.context, &inst.decode_config(lambda))?;
            Ok((lambda, beam.iter().any(|h| inst.property.contains(&h.tokens))))
        })
        .collect()
}

/// λ*, verification at `λ* + margin`, and a grid scan from 0 to `λ* + 1`
/// at resolution `grid_step`.
pub fn reachability_record(
    inst: &ReachabilityInstance,
    instance_id: u64,
    margin: f64,
    grid_step: f64,
) -> Result<ReachabilityRecord> {
    let lambda_star = compute_lambda_star(inst)?;
    let lambda = lambda_star + margin;
    let report = verify_reachability(inst, lambda)?;
    let scan = grid_scan(inst, &uniform_grid(grid_step, lambda_star + 1.0))?;
    Ok(ReachabilityRecord {
        instance_id,
        lambda_star,
        lambda,
        unguided_excludes: report.unguided_excludes,
        guided_includes: report.guided_includes,
        target_included: report.target_included,
        grid_flip: inclusion_flip(&scan),
    })
}

/// `0, step, 2·step, …` up to and including `max`.
pub fn uniform_grid(step: f64, max: f64) -> Vec<f64> {
    let n = (max / step).ceil() as usize;
    (0..=n).map(|i| i as f64 * step).collect()
}

/// Smallest grid λ such that inclusion holds at it and every larger grid λ.
pub fn inclusion_flip(scan: &[(f64, bool)]) -> Option<f64> {
    let mut flip = None;
    for &(lambda, inc) in scan.iter().rev() {
        if !inc {
            break;
        }
        flip = Some(lambda);
    }
    flip
}

/// Random enumerable instance: a full-history generator with random rows, a
/// target drawn from the sequences plain beam search drops, and a random
/// property set around it that avoids the plain beam.
pub fn random_instance(
    seed: u64,
    vocab_size: usize,
    seq_len: usize,
    beam_width: usize,
    c1: f64,
    c2: f64,
) -> Result<ReachabilityInstance> {
    let mut rng = seed::rng(seed);
    let prefixes = enumerate_prefixes(vocab_size, None, seq_len)?;
    for _ in 0..1000 {
        let mut rows = BTreeMap::new();
        for p in &prefixes {
            let w: Vec<f64> = (0..vocab_size).map(|_| (4.0 * (rng.random::<f64>() - 0.5)).exp()).collect();
            let s: f64 = w.iter().sum();
            rows.insert(RowKey { context: 0, state: p.clone() }, w.iter().map(|x| x / s).collect());
        }
        let gen = TabularGenerator::from_rows(vocab_size, History::Full, 0.0, None, Some(seq_len), 1, rows)?;
        let beam: BTreeSet<Vec<Token>> =
            beam_search(&gen, 0, beam_width, seq_len, vocab_size).into_iter().map(|h| h.tokens).collect();
        let outside: Vec<Vec<Token>> =
            enumerate_sequences(&gen, 0, seq_len)?.into_iter().map(|(s, _)| s).filter(|s| !beam.contains(s)).collect();
        if outside.is_empty() {
            continue;
        }
        let target = outside[rng.random_range(0..outside.len())].clone();
        let mut property: BTreeSet<Vec<Token>> =
            outside.iter().filter(|_| rng.random::<f64>() < 0.25).cloned().collect();
        property.insert(target.clone());
        return ReachabilityInstance::new(gen, 0, property, beam_width, target, c1, c2);
    }
    Err(Error::Precondition("could not build an instance whose target leaves the plain beam".into()))
}

/// Nearest-rank percentile (`pct` in (0, 100]).
pub fn nearest_rank_percentile(values: &[f64], pct: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(arg_err("percentile of an empty set"));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((pct / 100.0) * v.len() as f64).ceil() as usize;
    Ok(v[rank.clamp(1, v.len()) - 1])
}

/// `(c1, c2)` from classifier scores: the 10th percentile over satisfying
/// prefixes and the 90th over divergent non-satisfying prefixes.
pub fn bounds_from_scores(satisfying: &[f64], divergent: &[f64]) -> Result<(f64, f64)> {
    if satisfying.is_empty() || divergent.is_empty() {
        return Err(arg_err("both prefix strata must be non-empty"));
    }
    Ok((nearest_rank_percentile(satisfying, 10.0)?, nearest_rank_percentile(divergent, 90.0)?))
}

/// Empirical classifier bounds on held-out sequences. Satisfying prefixes are
/// the prefixes of sequences whose oracle class is `target`; divergent ones are
/// prefixes of the other sequences that no satisfying sequence (in the same
/// context) shares.
pub fn estimate_classifier_bounds(
    spec: &GrammarSpec,
    clf: &dyn PropertyScorer,
    heldout: &[LabeledSequence],
    target: usize,
) -> Result<(f64, f64)> {
    let mut sat_prefixes: BTreeSet<(usize, Vec<Token>)> = BTreeSet::new();
    let mut other: Vec<&LabeledSequence> = Vec::new();
    for s in heldout {
        if spec.property_predicate(s.context, target, &s.tokens)? {
            for k in 1..=s.tokens.len() {
                sat_prefixes.insert((s.context, s.tokens[..k].to_vec()));
            }
        } else {
            other.push(s);
        }
    }
    let mut div_prefixes: BTreeSet<(usize, Vec<Token>)> = BTreeSet::new();
    for s in other {
        for k in 1..=s.tokens.len() {
            let key = (s.context, s.tokens[..k].to_vec());
            if !sat_prefixes.contains(&key) {
                div_prefixes.insert(key);
            }
        }
    }
    let score = |(c, p): &(usize, Vec<Token>)| clf.label_logprob(*c, p, target).exp();
    let sat: Vec<f64> = sat_prefixes.iter().map(score).collect();
    let div: Vec<f64> = div_prefixes.iter().map(score).collect();
    bounds_from_scores(&sat, &div)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Greedy search prefers token 0 first; the target is all ones.
    fn tight_instance() -> ReachabilityInstance {
        let mut rows = BTreeMap::new();
        for p in enumerate_prefixes(2, None, 3).unwrap() {
            let probs = match p.first() {
                None => vec![0.7, 0.3],
                Some(1) => vec![0.1, 0.9],
                Some(_) => vec![0.6, 0.4],
            };
            rows.insert(RowKey { context: 0, state: p }, probs);
        }
        let gen = TabularGenerator::from_rows(2, History::Full, 0.0, None, Some(3), 1, rows).unwrap();
        let property = BTreeSet::from([vec![1, 1, 1]]);
        ReachabilityInstance::new(gen, 0, property, 1, vec![1, 1, 1], 0.85, 0.2).unwrap()
    }

    #[test]
    fn enumeration_normalizes_and_sorts() {
        let inst = tight_instance();
        let seqs = enumerate_sequences(&inst.gen, 0, 3).unwrap();
        assert_eq!(seqs.len(), 8);
        let total: f64 = seqs.iter().map(|(_, f)| f.exp()).sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert!(seqs.windows(2).all(|w| w[0].1 >= w[1].1));
    }

    #[test]
    fn lambda_star_on_hand_instance() {
        let inst = tight_instance();
        let ls = compute_lambda_star(&inst).unwrap();
        let expect = (0.7f64 / 0.3).ln() / (0.85f64 / 0.2).ln();
        assert!((ls - expect).abs() < 1e-12);
        assert!(!verify_reachability(&inst, ls - 0.01).unwrap().guided_includes);
        let r = verify_reachability(&inst, ls + 0.01).unwrap();
        assert!(r.unguided_excludes && r.guided_includes && r.target_included);
    }

    #[test]
    fn doubling_log_ratio_halves_lambda_star() {
        let a = tight_instance();
        let lr = (a.c1 / a.c2).ln();
        let c2 = a.c1 / (2.0 * lr).exp();
        let b = ReachabilityInstance { c2, ..a.clone() };
        let (la, lb) = (compute_lambda_star(&a).unwrap(), compute_lambda_star(&b).unwrap());
        assert!((la / lb - 2.0).abs() < 1e-12);
    }

    #[test]
    fn premise_and_bounds_errors() {
        let inst = tight_instance();
        assert!(
            ReachabilityInstance::new(inst.gen.clone(), 0, inst.property.clone(), 1, vec![1, 1, 1], 0.2, 0.2).is_err()
        );
        let greedy = vec![0, 0, 0];
        let kept =
            ReachabilityInstance::new(inst.gen.clone(), 0, BTreeSet::from([greedy.clone()]), 1, greedy, 0.85, 0.2)
                .unwrap();
        assert!(matches!(compute_lambda_star(&kept), Err(Error::Precondition(_))));
    }

    #[test]
    fn lambda_star_zero_when_target_dominates_competitors() {
        // Every non-property sequence shares the target's first token and is
        // never better than it at any step.
        let mut rows = BTreeMap::new();
        for p in enumerate_prefixes(2, None, 2).unwrap() {
            rows.insert(RowKey { context: 0, state: p }, vec![0.5, 0.5]);
        }
        let gen = TabularGenerator::from_rows(2, History::Full, 0.0, None, Some(2), 1, rows).unwrap();
        let property = BTreeSet::from([vec![1, 1], vec![0, 0], vec![0, 1], vec![1, 0]]);
        let inst = ReachabilityInstance::new(gen, 0, property, 1, vec![1, 1], 0.85, 0.2).unwrap();
        assert_eq!(compute_lambda_star(&inst).unwrap(), 0.0);
    }

    #[test]
    fn idealized_classifier_values() {
        let inst = tight_instance();
        let clf = IdealizedClassifier::new(&inst).unwrap();
        assert_eq!(clf.prob(&[1, 1]), 0.85);
        assert_eq!(clf.prob(&[0]), 0.2);
        assert_eq!(clf.prob(&[1, 0]), 0.2);
        let mut all = inst.clone();
        all.property.insert(vec![1, 1, 0]);
        let clf = IdealizedClassifier::new(&all).unwrap();
        assert_eq!(clf.prob(&[1, 1, 0]), 0.85);
    }

    #[test]
    fn bounds_and_percentiles() {
        assert_eq!(nearest_rank_percentile(&[3.0], 10.0).unwrap(), 3.0);
        let v: Vec<f64> = (1..=10).map(f64::from).collect();
        assert_eq!(nearest_rank_percentile(&v, 10.0).unwrap(), 1.0);
        assert_eq!(nearest_rank_percentile(&v, 90.0).unwrap(), 9.0);
        assert_eq!(bounds_from_scores(&[0.85; 4], &[0.2; 7]).unwrap(), (0.85, 0.2));
        assert!(bounds_from_scores(&[], &[0.2]).is_err());
    }

    #[test]
    fn flip_detection() {
        let scan = [(0.0, false), (0.1, true), (0.2, false), (0.3, true), (0.4, true)];
        assert_eq!(inclusion_flip(&scan), Some(0.3));
        assert_eq!(inclusion_flip(&[(0.0, false)]), None);
    }

    #[test]
    fn random_instances_satisfy_the_premise() {
        for s in 0..5 {
            let inst = random_instance(s, 3, 3, 2, 0.85, 0.2).unwrap();
            let r = verify_reachability(&inst, 0.0).unwrap();
            assert!(r.unguided_excludes && !r.guided_includes);
        }
    }
}
