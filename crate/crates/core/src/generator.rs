//! Tabular autoregressive generator `p(token | prefix, context)`.
//!
//! Two keyings are supported. [`History::LastToken`] conditions on the last
//! emitted token only (a smoothed bigram fitted from data). [`History::Full`]
//! conditions on the whole prefix; it is used for the exact grammar marginal
//! and for hand-built enumerable instances, and its tables are complete up to
//! `max_len`.
//!
//! Rows are stored as probabilities; log-probabilities are derived on load so
//! text round trips are exact.

use std::collections::BTreeMap;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::grammar::{GrammarSpec, LabeledSequence};
use crate::seed;
use crate::Token;

const ROW_SUM_TOL: f64 = 1e-9;
const MAX_ENUMERATED_ROWS: usize = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum History {
    LastToken,
    Full,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RowKey {
    pub context: usize,
    /// Full prefix, or at most the last token; empty is the start marker.
    pub state: Vec<Token>,
}

#[derive(Debug, Clone, PartialEq)]
struct Row {
    probs: Vec<f64>,
    logprobs: Vec<f64>,
}

impl Row {
    fn new(probs: Vec<f64>) -> Self {
        let logprobs = probs.iter().map(|p| p.ln()).collect();
        Self { probs, logprobs }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GeneratorFile", into = "GeneratorFile")]
pub struct TabularGenerator {
    vocab_size: usize,
    history: History,
    smoothing: f64,
    end_token: Option<Token>,
    max_len: Option<usize>,
    num_contexts: usize,
    rows: BTreeMap<RowKey, Row>,
}

/// On-disk layout: one `[[rows]]` table per (context, state).
#[derive(Debug, Clone, Serialize, Deserialize)]
struct GeneratorFile {
    vocab_size: usize,
    history: History,
    smoothing: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    end_token: Option<Token>,
    #[serde(skip_serializing_if = "Option::is_none")]
    max_len: Option<usize>,
    num_contexts: usize,
    rows: Vec<FileRow>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct FileRow {
    context: usize,
    state: Vec<Token>,
    probs: Vec<f64>,
}

impl TryFrom<GeneratorFile> for TabularGenerator {
    type Error = Error;

    fn try_from(file: GeneratorFile) -> Result<Self> {
        let rows = file.rows.into_iter().map(|r| (RowKey { context: r.context, state: r.state }, r.probs)).collect();
        TabularGenerator::from_rows(
            file.vocab_size,
            file.history,
            file.smoothing,
            file.end_token,
            file.max_len,
            file.num_contexts,
            rows,
        )
    }
}

impl From<TabularGenerator> for GeneratorFile {
    fn from(g: TabularGenerator) -> Self {
        GeneratorFile {
            vocab_size: g.vocab_size,
            history: g.history,
            smoothing: g.smoothing,
            end_token: g.end_token,
            max_len: g.max_len,
            num_contexts: g.num_contexts,
            rows: g
                .rows
                .into_iter()
                .map(|(k, r)| FileRow { context: k.context, state: k.state, probs: r.probs })
                .collect(),
        }
    }
}

/// Every prefix of length `< max_len` over the non-end tokens, shortest first.
pub(crate) fn enumerate_prefixes(
    vocab_size: usize,
    end_token: Option<Token>,
    max_len: usize,
) -> Result<Vec<Vec<Token>>> {
    let alphabet: Vec<Token> = (0..vocab_size).filter(|t| Some(*t) != end_token).collect();
    let mut out = vec![Vec::new()];
    let mut frontier = vec![Vec::new()];
    for _ in 1..max_len {
        let mut next = Vec::with_capacity(frontier.len() * alphabet.len());
        for p in &frontier {
            for &t in &alphabet {
                let mut q = p.clone();
                q.push(t);
                next.push(q);
            }
        }
        out.extend(next.iter().cloned());
        if out.len() > MAX_ENUMERATED_ROWS {
            return Err(config_err(format!("more than {MAX_ENUMERATED_ROWS} prefixes to enumerate")));
        }
        frontier = next;
    }
    Ok(out)
}

impl TabularGenerator {
    /// Builds a generator from explicit probability rows and validates it.
    pub fn from_rows(
        vocab_size: usize,
        history: History,
        smoothing: f64,
        end_token: Option<Token>,
        max_len: Option<usize>,
        num_contexts: usize,
        rows: BTreeMap<RowKey, Vec<f64>>,
    ) -> Result<Self> {
        if vocab_size < 2 {
            return Err(config_err("vocab_size must be at least 2"));
        }
        if !(smoothing >= 0.0 && smoothing.is_finite()) {
            return Err(config_err("smoothing must be finite and non-negative"));
        }
        if end_token.is_some_and(|e| e >= vocab_size) {
            return Err(config_err("end token out of vocabulary"));
        }
        for (key, probs) in &rows {
            if key.context >= num_contexts {
                return Err(config_err(format!("row context {} out of range", key.context)));
            }
            if probs.len() != vocab_size {
                return Err(config_err(format!("row {key:?} has {} entries", probs.len())));
            }
            if probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
                return Err(config_err(format!("row {key:?} has an invalid probability")));
            }
            let sum: f64 = probs.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(config_err(format!("row {key:?} sums to {sum}")));
            }
            if history == History::LastToken && key.state.len() > 1 {
                return Err(config_err("last-token rows carry at most one state token"));
            }
        }
        let rows: BTreeMap<RowKey, Row> = rows.into_iter().map(|(k, p)| (k, Row::new(p))).collect();
        let gen = Self { vocab_size, history, smoothing, end_token, max_len, num_contexts, rows };
        gen.check_complete()?;
        Ok(gen)
    }

    fn check_complete(&self) -> Result<()> {
        let states: Vec<Vec<Token>> = match self.history {
            History::Full => {
                let max_len = self.max_len.ok_or_else(|| config_err("full-history generators need max_len"))?;
                enumerate_prefixes(self.vocab_size, self.end_token, max_len)?
            }
            // Single-token generators never condition on a previous token.
            History::LastToken if self.max_len == Some(1) => vec![Vec::new()],
            History::LastToken => std::iter::once(Vec::new())
                .chain((0..self.vocab_size).filter(|t| Some(*t) != self.end_token).map(|t| vec![t]))
                .collect(),
        };
        for context in 0..self.num_contexts {
            for state in &states {
                let key = RowKey { context, state: state.clone() };
                if !self.rows.contains_key(&key) {
                    return Err(config_err(format!("missing generator row {key:?}")));
                }
            }
        }
        Ok(())
    }

    /// Maximum-likelihood last-token table with additive smoothing `α`:
    /// `p(t | s) = (count(s, t) + α) / (count(s, ·) + α V)`.
    ///
    /// With `α = 0` every (context, state) row must have been observed.
    pub fn fit_tabular(dataset: &[LabeledSequence], smoothing: f64, vocab_size: usize) -> Result<Self> {
        Self::fit_tabular_with(dataset, smoothing, vocab_size, None)
    }

    /// [`fit_tabular`](Self::fit_tabular) with a declared end token, which is
    /// then never used as a conditioning state.
    pub fn fit_tabular_with(
        dataset: &[LabeledSequence],
        smoothing: f64,
        vocab_size: usize,
        end_token: Option<Token>,
    ) -> Result<Self> {
        if dataset.is_empty() {
            return Err(Error::InvalidArgument("cannot fit a generator on an empty dataset".into()));
        }
        if !(smoothing >= 0.0 && smoothing.is_finite()) {
            return Err(Error::InvalidArgument("smoothing must be finite and non-negative".into()));
        }
        let num_contexts = dataset.iter().map(|r| r.context).max().unwrap_or(0) + 1;
        let single_token = dataset.iter().all(|r| r.tokens.len() <= 1);
        let mut counts: BTreeMap<RowKey, Vec<f64>> = BTreeMap::new();
        for context in 0..num_contexts {
            counts.insert(RowKey { context, state: Vec::new() }, vec![0.0; vocab_size]);
            if single_token {
                continue;
            }
            for t in (0..vocab_size).filter(|t| Some(*t) != end_token) {
                counts.insert(RowKey { context, state: vec![t] }, vec![0.0; vocab_size]);
            }
        }
        for rec in dataset {
            let mut state: Vec<Token> = Vec::new();
            for &t in &rec.tokens {
                if t >= vocab_size {
                    return Err(Error::InvalidArgument(format!("token {t} out of vocabulary")));
                }
                let key = RowKey { context: rec.context, state: state.clone() };
                counts.get_mut(&key).expect("all states pre-inserted")[t] += 1.0;
                if Some(t) == end_token {
                    break;
                }
                state = vec![t];
            }
        }
        let mut rows = BTreeMap::new();
        for (key, c) in counts {
            let total: f64 = c.iter().sum();
            let denom = total + smoothing * vocab_size as f64;
            if denom == 0.0 {
                return Err(Error::InvalidArgument(format!("state {key:?} never observed and smoothing is zero")));
            }
            let probs: Vec<f64> = c.iter().map(|n| (n + smoothing) / denom).collect();
            rows.insert(key, probs);
        }
        let max_len = single_token.then_some(1);
        Self::from_rows(vocab_size, History::LastToken, smoothing, end_token, max_len, num_contexts, rows)
    }

    /// The exact grammar marginal as a full-history table.
    pub fn exact_from_grammar(spec: &GrammarSpec) -> Result<Self> {
        let prefixes = enumerate_prefixes(spec.vocab_size(), spec.end_token(), spec.seq_len())?;
        let mut rows = BTreeMap::new();
        for context in 0..spec.num_contexts() {
            for prefix in &prefixes {
                let probs = spec.true_conditional_row(context, prefix)?;
                rows.insert(RowKey { context, state: prefix.clone() }, probs);
            }
        }
        Self::from_rows(
            spec.vocab_size(),
            History::Full,
            0.0,
            spec.end_token(),
            Some(spec.seq_len()),
            spec.num_contexts(),
            rows,
        )
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn history(&self) -> History {
        self.history
    }

    pub fn smoothing(&self) -> f64 {
        self.smoothing
    }

    pub fn end_token(&self) -> Option<Token> {
        self.end_token
    }

    pub fn max_len(&self) -> Option<usize> {
        self.max_len
    }

    pub fn num_contexts(&self) -> usize {
        self.num_contexts
    }

    fn key(&self, context: usize, prefix: &[Token]) -> RowKey {
        let state = match self.history {
            History::Full => prefix.to_vec(),
            History::LastToken => prefix.last().map(|&t| vec![t]).unwrap_or_default(),
        };
        RowKey { context, state }
    }

    fn row(&self, context: usize, prefix: &[Token]) -> &Row {
        let key = self.key(context, prefix);
        self.rows.get(&key).unwrap_or_else(|| panic!("no generator row for context {context}, prefix {prefix:?}"))
    }

    /// Log-probability row for the next token. Panics on a prefix the table
    /// cannot represent (too long, or containing the end token).
    pub fn next_token_logprobs(&self, context: usize, prefix: &[Token]) -> &[f64] {
        &self.row(context, prefix).logprobs
    }

    pub fn next_token_probs(&self, context: usize, prefix: &[Token]) -> &[f64] {
        &self.row(context, prefix).probs
    }

    /// Log-probabilities with zero cells floored at `ln(1e-12)`; diagnostics only.
    pub fn floored_logprobs(&self, context: usize, prefix: &[Token]) -> Vec<f64> {
        let floor = 1e-12f64.ln();
        self.next_token_logprobs(context, prefix).iter().map(|&l| l.max(floor)).collect()
    }

    /// Tokens ranked by generator probability, ties to the lower id.
    pub fn ranked_tokens(&self, context: usize, prefix: &[Token]) -> Vec<Token> {
        let lp = self.next_token_logprobs(context, prefix);
        let mut idx: Vec<Token> = (0..self.vocab_size).collect();
        idx.sort_by(|&a, &b| lp[b].total_cmp(&lp[a]).then(a.cmp(&b)));
        idx
    }

    /// Sum of log-probabilities of `tokens` from the start state.
    pub fn sequence_logprob(&self, context: usize, tokens: &[Token]) -> f64 {
        (0..tokens.len()).map(|k| self.next_token_logprobs(context, &tokens[..k])[tokens[k]]).sum()
    }

    /// Ancestral sample; stops at the end token or `max_len`.
    pub fn sample(&self, context: usize, seed: u64, max_len: usize) -> Vec<Token> {
        let mut rng = seed::rng(seed);
        self.sample_with(&mut rng, context, max_len)
    }

    pub fn sample_with(&self, rng: &mut seed::Rng, context: usize, max_len: usize) -> Vec<Token> {
        let max_len = self.max_len.map_or(max_len, |m| m.min(max_len));
        let mut tokens = Vec::with_capacity(max_len);
        while tokens.len() < max_len {
            let probs = self.next_token_probs(context, &tokens);
            let t = sample_index(rng, probs);
            tokens.push(t);
            if Some(t) == self.end_token {
                break;
            }
        }
        tokens
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(&GeneratorFile::from(self.clone())).expect("generator always serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }
}

pub(crate) fn sample_index(rng: &mut seed::Rng, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_toy_guidance_requirement() {
        let spec = GrammarSpec::toy(0.05, 0.05).unwrap();
        let gen = TabularGenerator::exact_from_grammar(&spec).unwrap();
        let lp = gen.next_token_logprobs(0, &[]);
        let g = lp[0] - lp[1];
        assert!((g - (0.905f64 / 0.095).ln()).abs() < 1e-12);
        assert!((g - 2.254).abs() < 1e-3);
        let sym = TabularGenerator::exact_from_grammar(&GrammarSpec::toy(0.5, 0.05).unwrap()).unwrap();
        let lp = sym.next_token_logprobs(0, &[]);
        assert!((lp[0] - lp[1]).abs() < 1e-15);
    }

    #[test]
    fn exact_rows_match_grammar() {
        let spec = GrammarSpec::markov_toy(0.2, 0.1, 3, 2).unwrap();
        let gen = TabularGenerator::exact_from_grammar(&spec).unwrap();
        for prefix in [vec![], vec![1], vec![0, 1]] {
            let row = gen.next_token_probs(1, &prefix);
            let expect = spec.true_conditional_row(1, &prefix).unwrap();
            assert_eq!(row, expect.as_slice());
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn minority_context_prefers_a() {
        for eta in [0.01, 0.2, 0.49] {
            let gen = TabularGenerator::exact_from_grammar(&GrammarSpec::toy(eta, 0.1).unwrap()).unwrap();
            assert_eq!(gen.ranked_tokens(0, &[])[0], 0);
        }
    }

    #[test]
    fn smoothing_floor_keeps_rows_finite() {
        let data = vec![LabeledSequence { context: 0, tokens: vec![1], class_label: 0 }];
        let gen = TabularGenerator::fit_tabular(&data, 1.0, 3).unwrap();
        let lp = gen.next_token_logprobs(0, &[]);
        assert!(lp.iter().all(|l| l.is_finite()));
        assert!((lp[1] - 0.5f64.ln()).abs() < 1e-15);
        assert!((lp[0] - 0.25f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn unsmoothed_fit_needs_coverage() {
        let data = vec![LabeledSequence { context: 0, tokens: vec![1, 1], class_label: 0 }];
        assert!(TabularGenerator::fit_tabular(&data, 0.0, 2).is_err());
    }

    #[test]
    fn unsmoothed_fit_is_empirical_frequency() {
        let data: Vec<_> = [vec![0, 1], vec![0, 0], vec![1, 1], vec![0, 1]]
            .into_iter()
            .map(|tokens| LabeledSequence { context: 0, tokens, class_label: 0 })
            .collect();
        let gen = TabularGenerator::fit_tabular(&data, 0.0, 2).unwrap();
        assert_eq!(gen.next_token_probs(0, &[]), &[0.75, 0.25]);
        assert_eq!(gen.next_token_probs(0, &[0]), &[1.0 / 3.0, 2.0 / 3.0]);
        assert_eq!(gen.next_token_probs(0, &[1]), &[0.0, 1.0]);
        assert_eq!(gen.next_token_logprobs(0, &[1])[0], f64::NEG_INFINITY);
        assert!(gen.floored_logprobs(0, &[1])[0].is_finite());
    }

    #[test]
    fn fit_converges_to_toy_marginal() {
        let spec = GrammarSpec::toy(0.3, 0.1).unwrap();
        let data = spec.sample_dataset(200_000, 5);
        let fit = TabularGenerator::fit_tabular(&data, 0.0, 2).unwrap();
        let exact = TabularGenerator::exact_from_grammar(&spec).unwrap();
        for t in 0..2 {
            let d = (fit.next_token_probs(0, &[])[t] - exact.next_token_probs(0, &[])[t]).abs();
            assert!(d < 0.02, "deviation {d}");
        }
    }

    #[test]
    fn toml_round_trip_is_exact() {
        let spec = GrammarSpec::markov_toy(0.17, 0.07, 3, 2).unwrap();
        let gen = TabularGenerator::exact_from_grammar(&spec).unwrap();
        let back = TabularGenerator::from_toml(&gen.to_toml()).unwrap();
        assert_eq!(back, gen);
        let data = spec.sample_dataset(50, 1);
        let fit = TabularGenerator::fit_tabular(&data, 0.0, 2);
        if let Ok(fit) = fit {
            assert_eq!(TabularGenerator::from_toml(&fit.to_toml()).unwrap(), fit);
        }
    }

    #[test]
    fn sample_respects_max_len_and_seed() {
        let spec = GrammarSpec::markov_toy(0.3, 0.2, 5, 1).unwrap();
        let gen = TabularGenerator::exact_from_grammar(&spec).unwrap();
        assert_eq!(gen.sample(0, 3, 5), gen.sample(0, 3, 5));
        assert_eq!(gen.sample(0, 3, 2).len(), 2);
        assert_eq!(gen.sample(0, 3, 50).len(), 5);
    }
}
