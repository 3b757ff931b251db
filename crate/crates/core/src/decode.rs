//! Guided beam search, the per-step gap condition, and lookahead selection of
//! the guidance scale.
//!
//! At step `k` (1-based) a prefix `r_<k` is extended by each of its top-`pool`
//! generator tokens `r` and scored
//!
//! ```text
//! F_guided(r_≤k) = F(r_≤k) + λ · Σ_{t ≥ onset} log p_clf(target | r_≤t)
//! ```
//!
//! where `F` is the cumulative generator log-probability. Steps before `onset`
//! are unguided. Beams are ranked by `F_guided`, ties by the token sequence in
//! lexicographic order.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::classifier::PropertyScorer;
use crate::error::{config_err, Error, Result};
use crate::generator::{sample_index, TabularGenerator};
use crate::grammar::{argmax, softmax, GrammarSpec};
use crate::seed;
use crate::Token;

/// Classifier probabilities are floored here before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    /// Guidance scale λ.
    pub lambda: f64,
    /// Beam width ω.
    pub beam_width: usize,
    /// First guided step L_min (1-based).
    pub onset: usize,
    /// Candidate tokens N expanded per prefix.
    pub pool: usize,
    pub max_len: usize,
    /// Classifier label to steer toward.
    pub target_label: usize,
}

impl DecodeConfig {
    /// λ = 1, guidance from the first token, full-vocabulary pool.
    pub fn new(vocab_size: usize, max_len: usize, target_label: usize) -> Self {
        Self { lambda: 1.0, beam_width: 4, onset: 1, pool: vocab_size, max_len, target_label }
    }

    /// λ = 1, L_min = 5, N = 72 (clamped to the vocabulary).
    pub fn large_vocab_preset(vocab_size: usize, max_len: usize, target_label: usize) -> Self {
        Self { lambda: 1.0, beam_width: 10, onset: 5.min(max_len), pool: 72.min(vocab_size), max_len, target_label }
    }

    pub fn with_lambda(&self, lambda: f64) -> Self {
        Self { lambda, ..self.clone() }
    }

    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(config_err("lambda must be finite and non-negative"));
        }
        if self.beam_width == 0 {
            return Err(config_err("beam_width must be at least 1"));
        }
        if self.pool == 0 || self.pool > vocab_size {
            return Err(config_err(format!("pool must lie in 1..={vocab_size}")));
        }
        if self.max_len == 0 {
            return Err(config_err("max_len must be at least 1"));
        }
        if self.onset == 0 || self.onset > self.max_len {
            return Err(config_err("onset must lie in 1..=max_len"));
        }
        Ok(())
    }

    fn lambda_at(&self, step: usize) -> f64 {
        if step >= self.onset {
            self.lambda
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub tokens: Vec<Token>,
    /// Cumulative generator log-probability `F`.
    pub score: f64,
    /// Sum of the floored classifier log terms taken at guided steps.
    pub guidance: f64,
    /// `F + λ · guidance`.
    pub guided_score: f64,
    pub finished: bool,
}

impl Hypothesis {
    fn root() -> Self {
        Self { tokens: Vec::new(), score: 0.0, guidance: 0.0, guided_score: 0.0, finished: false }
    }
}

/// Descending guided score, then ascending tokens.
pub fn rank_order(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.guided_score.total_cmp(&a.guided_score).then_with(|| a.tokens.cmp(&b.tokens))
}

fn effective_max_len(gen: &TabularGenerator, max_len: usize) -> usize {
    gen.max_len().map_or(max_len, |m| m.min(max_len))
}

/// Guided beam search. Returns every retired hypothesis, best first.
pub fn guided_beam_search(
    gen: &TabularGenerator,
    clf: &dyn PropertyScorer,
    context: usize,
    cfg: &DecodeConfig,
) -> Result<Vec<Hypothesis>> {
    cfg.validate(gen.vocab_size())?;
    if cfg.target_label >= clf.num_labels() {
        return Err(Error::InvalidArgument(format!(
            "target label {} but the classifier has {} labels",
            cfg.target_label,
            clf.num_labels()
        )));
    }
    let max_len = effective_max_len(gen, cfg.max_len);
    let floor = PROB_FLOOR.ln();
    let end = gen.end_token();
    let mut live = vec![Hypothesis::root()];
    let mut finished = Vec::new();
    for step in 1..=max_len {
        let lambda = cfg.lambda_at(step);
        let mut candidates = Vec::with_capacity(live.len() * cfg.pool);
        for h in &live {
            let lp = gen.next_token_logprobs(context, &h.tokens);
            for r in gen.ranked_tokens(context, &h.tokens).into_iter().take(cfg.pool) {
                let mut tokens = h.tokens.clone();
                tokens.push(r);
                let score = h.score + lp[r];
                let guidance = if lambda != 0.0 {
                    h.guidance + clf.label_logprob(context, &tokens, cfg.target_label).max(floor)
                } else {
                    h.guidance
                };
                let guided_score = score + cfg.lambda * guidance;
                candidates.push(Hypothesis { tokens, score, guidance, guided_score, finished: false });
            }
        }
        candidates.sort_by(rank_order);
        candidates.truncate(cfg.beam_width);
        live.clear();
        for mut c in candidates {
            if step == max_len || Some(*c.tokens.last().expect("non-empty")) == end {
                c.finished = true;
                finished.push(c);
            } else {
                live.push(c);
            }
        }
        if live.is_empty() {
            break;
        }
    }
    finished.sort_by(rank_order);
    Ok(finished)
}

/// Plain beam search on the generator alone.
pub fn beam_search(
    gen: &TabularGenerator,
    context: usize,
    beam_width: usize,
    max_len: usize,
    pool: usize,
) -> Vec<Hypothesis> {
    let max_len = effective_max_len(gen, max_len);
    let end = gen.end_token();
    let mut beams: Vec<(Vec<Token>, f64)> = vec![(Vec::new(), 0.0)];
    let mut done: Vec<(Vec<Token>, f64)> = Vec::new();
    for step in 1..=max_len {
        let mut next: Vec<(Vec<Token>, f64)> = Vec::new();
        for (prefix, f) in &beams {
            let lp = gen.next_token_logprobs(context, prefix);
            let mut order: Vec<Token> = (0..gen.vocab_size()).collect();
            order.sort_by(|&a, &b| lp[b].total_cmp(&lp[a]).then(a.cmp(&b)));
            for &r in order.iter().take(pool) {
                let mut p = prefix.clone();
                p.push(r);
                next.push((p, f + lp[r]));
            }
        }
        next.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        next.truncate(beam_width);
        let (ended, open): (Vec<_>, Vec<_>) =
            next.into_iter().partition(|(p, _)| step == max_len || p.last().copied() == end);
        done.extend(ended);
        beams = open;
        if beams.is_empty() {
            break;
        }
    }
    done.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    done.into_iter()
        .map(|(tokens, score)| Hypothesis { tokens, score, guidance: 0.0, guided_score: score, finished: true })
        .collect()
}

/// One step of the gap-condition check along a target sequence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapRecord {
    /// 1-based step.
    pub step: usize,
    pub target_token: Token,
    /// Generator argmax at this step.
    pub preferred_token: Token,
    /// Classifier discriminability `Δ_k`.
    pub discriminability: f64,
    /// Guidance requirement `G_k`.
    pub requirement: f64,
    pub satisfied: bool,
}

/// Checks `Δ_k > G_k / λ` at every step where the target token differs from
/// the generator's argmax. Agreeing steps report zeros and `satisfied = true`.
pub fn gap_condition_check(
    gen: &TabularGenerator,
    clf: &dyn PropertyScorer,
    context: usize,
    target_seq: &[Token],
    target_label: usize,
    lambda: f64,
) -> Result<Vec<GapRecord>> {
    if !(lambda > 0.0) {
        return Err(Error::InvalidArgument("the gap condition needs lambda > 0".into()));
    }
    if target_label >= clf.num_labels() {
        return Err(Error::InvalidArgument("target label out of range".into()));
    }
    let floor = PROB_FLOOR.ln();
    let mut out = Vec::with_capacity(target_seq.len());
    for k in 1..=target_seq.len() {
        let prefix = &target_seq[..k - 1];
        let star = target_seq[k - 1];
        let lp = gen.next_token_logprobs(context, prefix);
        let hat = argmax(lp);
        if hat == star {
            out.push(GapRecord {
                step: k,
                target_token: star,
                preferred_token: hat,
                discriminability: 0.0,
                requirement: 0.0,
                satisfied: true,
            });
            continue;
        }
        let mut alt = prefix.to_vec();
        alt.push(hat);
        let delta = clf.label_logprob(context, &target_seq[..k], target_label).max(floor)
            - clf.label_logprob(context, &alt, target_label).max(floor);
        let g = lp[hat] - lp[star];
        out.push(GapRecord {
            step: k,
            target_token: star,
            preferred_token: hat,
            discriminability: delta,
            requirement: g,
            satisfied: delta > g / lambda,
        });
    }
    Ok(out)
}

/// Samples one sequence from the token-level guided distribution
/// `p_gen(r | ·) · p_clf(target | ·, r)^λ`, restricted to the top-`pool` tokens.
pub fn guided_sample(
    gen: &TabularGenerator,
    clf: &dyn PropertyScorer,
    context: usize,
    cfg: &DecodeConfig,
    rng: &mut seed::Rng,
) -> Vec<Token> {
    let max_len = effective_max_len(gen, cfg.max_len);
    let floor = PROB_FLOOR.ln();
    let mut tokens: Vec<Token> = Vec::with_capacity(max_len);
    while tokens.len() < max_len {
        let step = tokens.len() + 1;
        let lambda = cfg.lambda_at(step);
        let lp = gen.next_token_logprobs(context, &tokens);
        let pool: Vec<Token> = gen.ranked_tokens(context, &tokens).into_iter().take(cfg.pool).collect();
        let logits: Vec<f64> = pool
            .iter()
            .map(|&r| {
                if lambda == 0.0 {
                    return lp[r];
                }
                let mut ext = tokens.clone();
                ext.push(r);
                lp[r] + lambda * clf.label_logprob(context, &ext, cfg.target_label).max(floor)
            })
            .collect();
        let probs = softmax(&logits);
        let t = pool[sample_index(rng, &probs)];
        tokens.push(t);
        if Some(t) == gen.end_token() {
            break;
        }
    }
    tokens
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LookaheadSample {
    pub lambda: f64,
    pub tokens: Vec<Token>,
    pub satisfied: bool,
    pub exploration: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LookaheadResult {
    pub samples: Vec<LookaheadSample>,
    pub chosen_lambda: f64,
    /// Mean property satisfaction of each candidate during exploration.
    pub mean_scores: Vec<(f64, f64)>,
}

impl LookaheadResult {
    /// Pooled samples are kept with duplicates; this counts them.
    pub fn multiplicity(&self) -> BTreeMap<Vec<Token>, usize> {
        let mut m = BTreeMap::new();
        for s in &self.samples {
            *m.entry(s.tokens.clone()).or_insert(0) += 1;
        }
        m
    }

    pub fn satisfaction_rate(&self) -> f64 {
        self.samples.iter().filter(|s| s.satisfied).count() as f64 / self.samples.len().max(1) as f64
    }
}

/// Lookahead guidance-scale selection: explore each λ with `n_explore`
/// guided samples, pick the λ with the highest mean property satisfaction
/// (ties to the smaller λ), then spend the remaining budget at that λ.
#[allow(clippy::too_many_arguments)]
pub fn lookahead_decode(
    spec: &GrammarSpec,
    gen: &TabularGenerator,
    clf: &dyn PropertyScorer,
    context: usize,
    budget: usize,
    lambdas: &[f64],
    n_explore: usize,
    cfg_base: &DecodeConfig,
    seed: u64,
) -> Result<LookaheadResult> {
    if lambdas.is_empty() {
        return Err(Error::InvalidArgument("no candidate lambdas".into()));
    }
    let explore_total = lambdas.len() * n_explore;
    if budget < explore_total {
        return Err(Error::InvalidArgument(format!("budget {budget} is below |Λ|·n_explore = {explore_total}")));
    }
    cfg_base.validate(gen.vocab_size())?;
    if cfg_base.target_label >= clf.num_labels() {
        return Err(Error::InvalidArgument("target label out of range".into()));
    }
    let target = cfg_base.target_label;
    let mut samples = Vec::with_capacity(budget);
    let mut mean_scores = Vec::with_capacity(lambdas.len());
    for (i, &lambda) in lambdas.iter().enumerate() {
        let cfg = cfg_base.with_lambda(lambda);
        cfg.validate(gen.vocab_size())?;
        let mut rng = seed::rng(seed::derive(seed, seed::stream2(i as u64 + 1, 0)));
        let mut hits = 0usize;
        for _ in 0..n_explore {
            let tokens = guided_sample(gen, clf, context, &cfg, &mut rng);
            let satisfied = spec.property_predicate(context, target, &tokens)?;
            hits += usize::from(satisfied);
            samples.push(LookaheadSample { lambda, tokens, satisfied, exploration: true });
        }
        mean_scores.push((lambda, hits as f64 / n_explore.max(1) as f64));
    }
    let mut best = 0;
    for (i, &(lambda, score)) in mean_scores.iter().enumerate() {
        let (best_lambda, best_score) = mean_scores[best];
        if score > best_score || (score == best_score && lambda < best_lambda) {
            best = i;
        }
    }
    let chosen_lambda = mean_scores[best].0;
    let cfg = cfg_base.with_lambda(chosen_lambda);
    let mut rng = seed::rng(seed::derive(seed, seed::stream2(0, 1)));
    for _ in explore_total..budget {
        let tokens = guided_sample(gen, clf, context, &cfg, &mut rng);
        let satisfied = spec.property_predicate(context, target, &tokens)?;
        samples.push(LookaheadSample { lambda: chosen_lambda, tokens, satisfied, exploration: false });
    }
    Ok(LookaheadResult { samples, chosen_lambda, mean_scores })
}

/// One line of a decode result file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeRow {
    pub context: usize,
    pub target: usize,
    pub lambda: f64,
    /// 1-based rank within its own run.
    pub rank: usize,
    pub score: f64,
    pub guided_score: f64,
    pub satisfied: bool,
    pub tokens: Vec<Token>,
}

pub const DECODE_CSV_HEADER: &str = "context,target,lambda,rank,F,F_guided,satisfied,tokens";

impl DecodeRow {
    pub fn from_hypotheses(
        spec: &GrammarSpec,
        context: usize,
        target: usize,
        lambda: f64,
        hyps: &[Hypothesis],
    ) -> Result<Vec<Self>> {
        hyps.iter()
            .enumerate()
            .map(|(i, h)| {
                Ok(DecodeRow {
                    context,
                    target,
                    lambda,
                    rank: i + 1,
                    score: h.score,
                    guided_score: h.guided_score,
                    satisfied: spec.property_predicate(context, target, &h.tokens)?,
                    tokens: h.tokens.clone(),
                })
            })
            .collect()
    }

    pub fn to_csv_line(&self) -> String {
        let tokens: Vec<String> = self.tokens.iter().map(|t| t.to_string()).collect();
        format!(
            "{},{},{},{},{},{},{},{}",
            self.context,
            self.target,
            self.lambda,
            self.rank,
            self.score,
            self.guided_score,
            u8::from(self.satisfied),
            tokens.join(" ")
        )
    }

    pub fn parse_csv_line(line: &str) -> Result<Self> {
        let bad = || Error::Parse(format!("malformed decode row: {line:?}"));
        let f: Vec<&str> = line.trim_end().split(',').collect();
        if f.len() != 8 {
            return Err(bad());
        }
        Ok(DecodeRow {
            context: f[0].parse().map_err(|_| bad())?,
            target: f[1].parse().map_err(|_| bad())?,
            lambda: f[2].parse().map_err(|_| bad())?,
            rank: f[3].parse().map_err(|_| bad())?,
            score: f[4].parse().map_err(|_| bad())?,
            guided_score: f[5].parse().map_err(|_| bad())?,
            satisfied: match f[6] {
                "1" => true,
                "0" => false,
                _ => return Err(bad()),
            },
            tokens: f[7].split_whitespace().map(|t| t.parse().map_err(|_| bad())).collect::<Result<_>>()?,
        })
    }
}

pub fn decode_csv(rows: &[DecodeRow]) -> String {
    let mut out = String::from(DECODE_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.to_csv_line());
        out.push('\n');
    }
    out
}

pub fn read_decode_csv(text: &str) -> Result<Vec<DecodeRow>> {
    text.lines().filter(|l| !l.trim().is_empty() && !l.starts_with("context")).map(DecodeRow::parse_csv_line).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::ConstantScorer;
    use crate::generator::{History, RowKey};

    fn toy_gen(eta: f64, eps: f64, len: usize) -> TabularGenerator {
        TabularGenerator::exact_from_grammar(&GrammarSpec::markov_toy(eta, eps, len, 1).unwrap()).unwrap()
    }

    fn flat() -> ConstantScorer {
        ConstantScorer { probs: vec![0.5, 0.5] }
    }

    #[test]
    fn zero_lambda_matches_plain_beam_search() {
        let gen = toy_gen(0.3, 0.2, 4);
        let cfg = DecodeConfig { lambda: 0.0, beam_width: 3, ..DecodeConfig::new(2, 4, 1) };
        let guided = guided_beam_search(&gen, &flat(), 0, &cfg).unwrap();
        let plain = beam_search(&gen, 0, 3, 4, 2);
        assert_eq!(guided, plain);
        assert!(guided.iter().all(|h| h.guided_score == h.score));
    }

    #[test]
    fn guided_score_bookkeeping() {
        struct Ramp;
        impl PropertyScorer for Ramp {
            fn num_labels(&self) -> usize {
                2
            }
            fn posterior(&self, _: usize, prefix: &[Token]) -> Vec<f64> {
                let p = 0.1 + 0.8 * prefix.iter().filter(|&&t| t == 1).count() as f64 / prefix.len() as f64;
                vec![1.0 - p, p]
            }
        }
        let gen = toy_gen(0.3, 0.2, 4);
        let cfg = DecodeConfig { lambda: 0.7, beam_width: 4, onset: 2, ..DecodeConfig::new(2, 4, 1) };
        let hyps = guided_beam_search(&gen, &Ramp, 0, &cfg).unwrap();
        for h in &hyps {
            assert_eq!(h.guided_score, h.score + 0.7 * h.guidance);
            let expect: f64 = (2..=4).map(|k| Ramp.posterior(0, &h.tokens[..k])[1].ln()).sum();
            assert!((h.guidance - expect).abs() < 1e-12);
            assert!((h.score - gen.sequence_logprob(0, &h.tokens)).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_label_out_of_range() {
        let gen = toy_gen(0.3, 0.2, 2);
        let cfg = DecodeConfig::new(2, 2, 2);
        assert!(guided_beam_search(&gen, &flat(), 0, &cfg).is_err());
    }

    #[test]
    fn ties_break_lexicographically() {
        let gen = toy_gen(0.5, 0.5, 2);
        let cfg = DecodeConfig { lambda: 0.0, beam_width: 4, ..DecodeConfig::new(2, 2, 0) };
        let hyps = guided_beam_search(&gen, &flat(), 0, &cfg).unwrap();
        let seqs: Vec<_> = hyps.iter().map(|h| h.tokens.clone()).collect();
        assert_eq!(seqs, vec![vec![0, 0], vec![0, 1], vec![1, 0], vec![1, 1]]);
    }

    #[test]
    fn end_token_retires_hypotheses() {
        let mut rows = BTreeMap::new();
        rows.insert(RowKey { context: 0, state: vec![] }, vec![0.5, 0.1, 0.4]);
        rows.insert(RowKey { context: 0, state: vec![0] }, vec![0.3, 0.3, 0.4]);
        rows.insert(RowKey { context: 0, state: vec![1] }, vec![0.2, 0.2, 0.6]);
        let gen = TabularGenerator::from_rows(3, History::LastToken, 0.0, Some(2), None, 1, rows).unwrap();
        let cfg = DecodeConfig { lambda: 0.0, beam_width: 2, ..DecodeConfig::new(3, 3, 0) };
        let hyps = guided_beam_search(&gen, &flat(), 0, &cfg).unwrap();
        assert!(hyps.iter().any(|h| h.tokens == vec![2]));
        assert!(hyps.iter().all(|h| h.finished));
        assert_eq!(hyps, beam_search(&gen, 0, 2, 3, 3));
    }

    #[test]
    fn gap_condition_on_toy() {
        let gen = toy_gen(0.05, 0.05, 1);
        struct Ideal;
        impl PropertyScorer for Ideal {
            fn num_labels(&self) -> usize {
                2
            }
            fn posterior(&self, _: usize, prefix: &[Token]) -> Vec<f64> {
                if prefix == [1] {
                    vec![0.15, 0.85]
                } else {
                    vec![0.8, 0.2]
                }
            }
        }
        let recs = gap_condition_check(&gen, &Ideal, 0, &[1], 1, 1.0).unwrap();
        assert_eq!(recs.len(), 1);
        assert!((recs[0].requirement - (0.905f64 / 0.095).ln()).abs() < 1e-12);
        assert!((recs[0].requirement - 2.254).abs() < 1e-3);
        assert!((recs[0].discriminability - (0.85f64 / 0.2).ln()).abs() < 1e-12);
        assert!(!recs[0].satisfied);
        let agree = gap_condition_check(&gen, &Ideal, 0, &[0], 1, 1.0).unwrap();
        assert!(agree[0].satisfied && agree[0].discriminability == 0.0 && agree[0].requirement == 0.0);
        assert!(gap_condition_check(&gen, &Ideal, 0, &[1], 1, 0.0).is_err());
    }

    #[test]
    fn lookahead_bookkeeping() {
        let spec = GrammarSpec::markov_toy(0.2, 0.2, 3, 1).unwrap();
        let gen = TabularGenerator::exact_from_grammar(&spec).unwrap();
        let base = DecodeConfig::new(2, 3, 1);
        let single = lookahead_decode(&spec, &gen, &flat(), 0, 25, &[0.5], 10, &base, 1).unwrap();
        assert_eq!(single.samples.len(), 25);
        assert_eq!(single.chosen_lambda, 0.5);
        let multi = lookahead_decode(&spec, &gen, &flat(), 0, 40, &[0.0, 0.5, 1.0], 10, &base, 2).unwrap();
        assert_eq!(multi.samples.len(), 40);
        assert_eq!(multi.multiplicity().values().sum::<usize>(), 40);
        assert!(lookahead_decode(&spec, &gen, &flat(), 0, 29, &[0.0, 0.5, 1.0], 10, &base, 2).is_err());
    }

    #[test]
    fn decode_rows_round_trip() {
        let row = DecodeRow {
            context: 2,
            target: 1,
            lambda: 0.5,
            rank: 3,
            score: -1.25,
            guided_score: -3.0000000000000004,
            satisfied: true,
            tokens: vec![1, 0, 1],
        };
        let text = decode_csv(std::slice::from_ref(&row));
        assert_eq!(read_decode_csv(&text).unwrap(), vec![row]);
    }
}
