//! Synthetic class-conditioned sequence grammar.
//!
//! A context draws a class from its prior; the class then emits tokens as a
//! first-order Markov chain. At every step the class's preferred token (which
//! depends on the last emitted token) has probability `1 - noise` and the
//! remaining mass is spread uniformly over the other `V - 1` tokens. The
//! two-token, one-step, one-context instance is exactly the binary toy model
//! used for the sample-complexity analysis in [`crate::theory`].
//!
//! The grammar also acts as the oracle labeler: [`GrammarSpec::oracle_class`]
//! is the exact Bayes posterior over classes for a token sequence.

use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::seed;
use crate::Token;

const PRIOR_SUM_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GrammarFields", into = "GrammarFields")]
pub struct GrammarSpec {
    fields: GrammarFields,
}

/// Raw, unvalidated grammar fields. This is also the on-disk layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrammarFields {
    pub num_classes: usize,
    pub vocab_size: usize,
    pub seq_len: usize,
    pub num_contexts: usize,
    /// `num_contexts × num_classes`.
    pub class_prior: Vec<Vec<f64>>,
    /// `num_classes × vocab_size`, indexed by `[class][state]` where the state
    /// is the last emitted token (0 before the first token).
    pub preferred_token: Vec<Vec<Token>>,
    pub noise: f64,
    /// When set, token `vocab_size - 1` terminates a sequence early.
    #[serde(default)]
    pub end_token: bool,
}

impl TryFrom<GrammarFields> for GrammarSpec {
    type Error = Error;

    fn try_from(fields: GrammarFields) -> Result<Self> {
        GrammarSpec::new(fields)
    }
}

impl From<GrammarSpec> for GrammarFields {
    fn from(spec: GrammarSpec) -> Self {
        spec.fields
    }
}

/// A sampled sequence with the class that generated it.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LabeledSequence {
    pub context: usize,
    pub tokens: Vec<Token>,
    pub class_label: usize,
}

/// Exact class posterior for a sequence plus its MAP class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassPosterior {
    pub probs: Vec<f64>,
    pub map_class: usize,
}

impl GrammarSpec {
    pub fn new(fields: GrammarFields) -> Result<Self> {
        let f = &fields;
        if f.num_classes < 2 {
            return Err(config_err("num_classes must be at least 2"));
        }
        if f.vocab_size < 2 {
            return Err(config_err("vocab_size must be at least 2"));
        }
        if f.end_token && f.vocab_size < 3 {
            return Err(config_err("an end token needs vocab_size >= 3"));
        }
        if f.seq_len < 1 {
            return Err(config_err("seq_len must be at least 1"));
        }
        if f.num_contexts < 1 {
            return Err(config_err("num_contexts must be at least 1"));
        }
        if f.class_prior.len() != f.num_contexts {
            return Err(config_err(format!(
                "class_prior has {} rows, expected {}",
                f.class_prior.len(),
                f.num_contexts
            )));
        }
        for (ctx, row) in f.class_prior.iter().enumerate() {
            if row.len() != f.num_classes {
                return Err(config_err(format!("class_prior row {ctx} has wrong length")));
            }
            if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
                return Err(config_err(format!("class_prior row {ctx} has a negative or non-finite entry")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > PRIOR_SUM_TOL {
                return Err(config_err(format!("class_prior row {ctx} sums to {sum}")));
            }
        }
        if f.preferred_token.len() != f.num_classes {
            return Err(config_err("preferred_token must have one row per class"));
        }
        let end = f.end_token.then_some(f.vocab_size - 1);
        for (class, row) in f.preferred_token.iter().enumerate() {
            if row.len() != f.vocab_size {
                return Err(config_err(format!("preferred_token row {class} must have one entry per state")));
            }
            for &t in row {
                if t >= f.vocab_size {
                    return Err(config_err(format!("preferred token {t} out of vocabulary")));
                }
                if Some(t) == end {
                    return Err(config_err("the end token cannot be a preferred token"));
                }
            }
        }
        let max_noise = (f.vocab_size - 1) as f64 / f.vocab_size as f64;
        if !(f.noise > 0.0 && f.noise <= max_noise) {
            return Err(config_err(format!("noise must lie in (0, {max_noise}]")));
        }
        Ok(Self { fields })
    }

    /// The binary toy: one context, tokens `a = 0` and `b = 1`, one step,
    /// class prior `(1 - eta, eta)`; class 0 prefers `a`, class 1 prefers `b`.
    pub fn toy(eta: f64, eps: f64) -> Result<Self> {
        Self::markov_toy(eta, eps, 1, 1)
    }

    /// The toy extended to `seq_len` steps and several identical contexts.
    /// Class 0 always prefers `a`, class 1 always prefers `b`.
    pub fn markov_toy(eta: f64, eps: f64, seq_len: usize, num_contexts: usize) -> Result<Self> {
        Self::noisy_channel(eta, eps, 2, seq_len, num_contexts)
    }

    /// Two classes over `vocab_size` tokens: class `c` emits token `c` with
    /// probability `1 - eps` at every step and spreads `eps` over the rest.
    pub fn noisy_channel(eta: f64, eps: f64, vocab_size: usize, seq_len: usize, num_contexts: usize) -> Result<Self> {
        if !(eta > 0.0 && eta < 1.0) {
            return Err(config_err("eta must lie in (0, 1)"));
        }
        Self::new(GrammarFields {
            num_classes: 2,
            vocab_size,
            seq_len,
            num_contexts,
            class_prior: vec![vec![1.0 - eta, eta]; num_contexts],
            preferred_token: vec![vec![0; vocab_size], vec![1; vocab_size]],
            noise: eps,
            end_token: false,
        })
    }

    pub fn fields(&self) -> &GrammarFields {
        &self.fields
    }

    pub fn num_classes(&self) -> usize {
        self.fields.num_classes
    }

    pub fn vocab_size(&self) -> usize {
        self.fields.vocab_size
    }

    pub fn seq_len(&self) -> usize {
        self.fields.seq_len
    }

    pub fn num_contexts(&self) -> usize {
        self.fields.num_contexts
    }

    pub fn noise(&self) -> f64 {
        self.fields.noise
    }

    pub fn class_prior(&self, context: usize) -> &[f64] {
        &self.fields.class_prior[context]
    }

    pub fn end_token(&self) -> Option<Token> {
        self.fields.end_token.then_some(self.fields.vocab_size - 1)
    }

    /// Class with the largest prior at `context`; ties go to the lower id.
    pub fn majority_class(&self, context: usize) -> usize {
        argmax(self.class_prior(context))
    }

    pub fn preferred(&self, class: usize, state: Token) -> Token {
        self.fields.preferred_token[class][state]
    }

    /// Markov state after `prefix`.
    pub fn state(prefix: &[Token]) -> Token {
        prefix.last().copied().unwrap_or(0)
    }

    /// `P(token | class, state)`.
    pub fn emission(&self, class: usize, state: Token, token: Token) -> f64 {
        if token == self.preferred(class, state) {
            1.0 - self.fields.noise
        } else {
            self.fields.noise / (self.fields.vocab_size - 1) as f64
        }
    }

    fn class_log_likelihood(&self, class: usize, tokens: &[Token]) -> f64 {
        let mut state = 0;
        let mut ll = 0.0;
        for &t in tokens {
            ll += self.emission(class, state, t).ln();
            state = t;
        }
        ll
    }

    fn check_tokens(&self, context: usize, tokens: &[Token], allow_final_end: bool) -> Result<()> {
        if context >= self.num_contexts() {
            return Err(Error::InvalidArgument(format!("context {context} out of range")));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.vocab_size()) {
            return Err(Error::InvalidArgument(format!("token {t} out of vocabulary")));
        }
        if let Some(end) = self.end_token() {
            let body = if allow_final_end && !tokens.is_empty() { &tokens[..tokens.len() - 1] } else { tokens };
            if body.contains(&end) {
                return Err(Error::InvalidArgument("end token inside a sequence".into()));
            }
        }
        Ok(())
    }

    /// Exact Bayes posterior `P(class | tokens, context)`. Works for complete
    /// sequences and for prefixes alike.
    pub fn class_posterior(&self, context: usize, tokens: &[Token]) -> Result<ClassPosterior> {
        self.check_tokens(context, tokens, true)?;
        let log_joint: Vec<f64> = self
            .class_prior(context)
            .iter()
            .enumerate()
            .map(|(c, &p)| p.ln() + self.class_log_likelihood(c, tokens))
            .collect();
        let probs = softmax(&log_joint);
        let map_class = argmax(&probs);
        Ok(ClassPosterior { probs, map_class })
    }

    /// Oracle labeler: exact posterior and MAP class of a sequence.
    pub fn oracle_class(&self, context: usize, tokens: &[Token]) -> Result<ClassPosterior> {
        self.class_posterior(context, tokens)
    }

    /// `P(token | prefix, context) = Σ_c P(c | prefix, context) · P(token | c, state)`.
    pub fn true_conditional(&self, context: usize, prefix: &[Token], token: Token) -> Result<f64> {
        Ok(self.true_conditional_row(context, prefix)?[token])
    }

    /// Full next-token distribution after `prefix`.
    pub fn true_conditional_row(&self, context: usize, prefix: &[Token]) -> Result<Vec<f64>> {
        if prefix.len() >= self.seq_len() {
            return Err(Error::InvalidArgument(format!(
                "prefix length {} must be below seq_len {}",
                prefix.len(),
                self.seq_len()
            )));
        }
        self.check_tokens(context, prefix, false)?;
        let post = self.class_posterior(context, prefix)?;
        let state = Self::state(prefix);
        Ok((0..self.vocab_size())
            .map(|t| post.probs.iter().enumerate().map(|(c, &pc)| pc * self.emission(c, state, t)).sum())
            .collect())
    }

    /// `φ(seq) = [MAP class == target]`.
    pub fn property_predicate(&self, context: usize, target_class: usize, tokens: &[Token]) -> Result<bool> {
        Ok(self.oracle_class(context, tokens)?.map_class == target_class)
    }

    /// A sequence is complete once it has `seq_len` tokens or ends in the end token.
    pub fn is_complete(&self, tokens: &[Token]) -> bool {
        tokens.len() >= self.seq_len() || (self.end_token().is_some() && tokens.last() == self.end_token().as_ref())
    }

    fn sample_token(&self, rng: &mut seed::Rng, class: usize, state: Token) -> Token {
        let preferred = self.preferred(class, state);
        if rng.random::<f64>() < 1.0 - self.fields.noise {
            preferred
        } else {
            let j = rng.random_range(0..self.vocab_size() - 1);
            if j >= preferred {
                j + 1
            } else {
                j
            }
        }
    }

    fn sample_one(&self, rng: &mut seed::Rng, context: usize) -> LabeledSequence {
        let class_label = sample_categorical(rng, self.class_prior(context));
        let tokens = self.emit(rng, class_label);
        LabeledSequence { context, tokens, class_label }
    }

    /// Draws `n` independent (context, class, tokens) triples. Contexts are
    /// uniform; the class comes from the context's prior.
    pub fn sample_dataset(&self, n: usize, seed: u64) -> Vec<LabeledSequence> {
        let mut rng = seed::rng(seed);
        (0..n)
            .map(|_| {
                let context = rng.random_range(0..self.num_contexts());
                self.sample_one(&mut rng, context)
            })
            .collect()
    }

    /// Like [`sample_dataset`](Self::sample_dataset) but at a fixed context.
    pub fn sample_at_context(&self, context: usize, n: usize, seed: u64) -> Vec<LabeledSequence> {
        let mut rng = seed::rng(seed);
        (0..n).map(|_| self.sample_one(&mut rng, context)).collect()
    }

    fn emit(&self, rng: &mut seed::Rng, class: usize) -> Vec<Token> {
        let end = self.end_token();
        let mut tokens = Vec::with_capacity(self.seq_len());
        let mut state = 0;
        for _ in 0..self.seq_len() {
            let t = self.sample_token(rng, class, state);
            tokens.push(t);
            if Some(t) == end {
                break;
            }
            state = t;
        }
        tokens
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(&self.fields).expect("grammar fields always serialize")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Index of the largest value; ties go to the lowest index.
pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn sample_categorical(rng: &mut seed::Rng, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Rounding left u above the cumulative sum; fall back to the last
    // positive-probability entry.
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

impl fmt::Display for LabeledSequence {
    /// `context,class,token0 token1 ...`
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},", self.context, self.class_label)?;
        for (i, t) in self.tokens.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            write!(f, "{t}")?;
        }
        Ok(())
    }
}

impl FromStr for LabeledSequence {
    type Err = Error;

    fn from_str(line: &str) -> Result<Self> {
        let mut parts = line.trim_end().splitn(3, ',');
        let bad = || Error::Parse(format!("malformed record line: {line:?}"));
        let context = parts.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
        let class_label = parts.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
        let tokens = parts
            .next()
            .ok_or_else(bad)?
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| bad()))
            .collect::<Result<Vec<Token>>>()?;
        if tokens.is_empty() {
            return Err(bad());
        }
        Ok(LabeledSequence { context, tokens, class_label })
    }
}

/// Writes records as `context,class,tokens` lines under a header.
pub fn write_dataset(records: &[LabeledSequence]) -> String {
    let mut out = String::from("context,class,tokens\n");
    for r in records {
        out.push_str(&r.to_string());
        out.push('\n');
    }
    out
}

pub fn read_dataset(text: &str) -> Result<Vec<LabeledSequence>> {
    text.lines().filter(|l| !l.trim().is_empty()).skip_while(|l| l.starts_with("context")).map(str::parse).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_posterior_symmetric() {
        let spec = GrammarSpec::toy(0.5, 0.05).unwrap();
        let post = spec.oracle_class(0, &[1]).unwrap();
        assert!((post.probs[1] - 0.95).abs() < 1e-12);
        assert_eq!(post.map_class, 1);
    }

    #[test]
    fn toy_posterior_rare_cell() {
        let spec = GrammarSpec::toy(0.05, 0.05).unwrap();
        let post = spec.oracle_class(0, &[0]).unwrap();
        let q_a = 0.05 * 0.05 / (0.05 * 0.05 + 0.95 * 0.95);
        assert!((post.probs[1] - q_a).abs() < 1e-12);
        assert!((post.probs[1] - 0.00276).abs() < 1e-5);
    }

    #[test]
    fn maximum_noise_gives_prior_posterior() {
        let spec = GrammarSpec::new(GrammarFields {
            num_classes: 3,
            vocab_size: 3,
            seq_len: 3,
            num_contexts: 1,
            class_prior: vec![vec![0.25, 0.25, 0.5]],
            preferred_token: vec![vec![0, 1, 2], vec![1, 2, 0], vec![2, 0, 1]],
            noise: 2.0 / 3.0,
            end_token: false,
        })
        .unwrap();
        let post = spec.oracle_class(0, &[2, 0, 1]).unwrap();
        for (p, q) in post.probs.iter().zip(spec.class_prior(0)) {
            assert!((p - q).abs() < 1e-12);
        }
        let uniform = GrammarSpec::toy(0.5, 0.5).unwrap();
        let post = uniform.oracle_class(0, &[1]).unwrap();
        assert!((post.probs[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn true_conditional_toy_marginals() {
        let spec = GrammarSpec::toy(0.05, 0.05).unwrap();
        assert!((spec.true_conditional(0, &[], 0).unwrap() - 0.905).abs() < 1e-12);
        assert!((spec.true_conditional(0, &[], 1).unwrap() - 0.095).abs() < 1e-12);
        let sym = GrammarSpec::toy(0.5, 0.2).unwrap();
        assert!((sym.true_conditional(0, &[], 0).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn true_conditional_rejects_full_prefix() {
        let spec = GrammarSpec::markov_toy(0.3, 0.1, 2, 1).unwrap();
        assert!(spec.true_conditional(0, &[0, 1], 0).is_err());
    }

    #[test]
    fn property_predicate_matches_map() {
        let spec = GrammarSpec::toy(0.5, 0.05).unwrap();
        assert!(spec.property_predicate(0, 1, &[1]).unwrap());
        assert!(!spec.property_predicate(0, 1, &[0]).unwrap());
    }

    #[test]
    fn map_ties_go_to_lower_class() {
        // eta = 0.5 and a sequence with one a and one b: exact tie.
        let spec = GrammarSpec::markov_toy(0.5, 0.1, 2, 1).unwrap();
        let post = spec.oracle_class(0, &[0, 1]).unwrap();
        assert!((post.probs[0] - post.probs[1]).abs() < 1e-15);
        assert_eq!(post.map_class, 0);
    }

    #[test]
    fn rejects_bad_specs() {
        let mut f = GrammarSpec::toy(0.3, 0.1).unwrap().fields().clone();
        f.class_prior[0][0] += 1e-9;
        assert!(GrammarSpec::new(f.clone()).is_err());
        f.class_prior[0][0] -= 1e-9;
        f.noise = 0.0;
        assert!(GrammarSpec::new(f.clone()).is_err());
        f.noise = 0.1;
        f.preferred_token[0][0] = 2;
        assert!(GrammarSpec::new(f).is_err());
    }

    #[test]
    fn end_token_never_preferred() {
        let f = GrammarFields {
            num_classes: 2,
            vocab_size: 3,
            seq_len: 3,
            num_contexts: 1,
            class_prior: vec![vec![0.5, 0.5]],
            preferred_token: vec![vec![0, 0, 0], vec![1, 1, 2]],
            noise: 0.1,
            end_token: true,
        };
        assert!(GrammarSpec::new(f).is_err());
    }

    #[test]
    fn sampling_is_deterministic() {
        let spec = GrammarSpec::markov_toy(0.2, 0.1, 4, 3).unwrap();
        assert_eq!(spec.sample_dataset(200, 9), spec.sample_dataset(200, 9));
        assert_ne!(spec.sample_dataset(200, 9), spec.sample_dataset(200, 10));
    }

    #[test]
    fn end_token_truncates_samples() {
        let spec = GrammarSpec::new(GrammarFields {
            num_classes: 2,
            vocab_size: 4,
            seq_len: 6,
            num_contexts: 1,
            class_prior: vec![vec![0.5, 0.5]],
            preferred_token: vec![vec![0, 1, 2, 0], vec![2, 2, 1, 1]],
            noise: 0.4,
            end_token: true,
        })
        .unwrap();
        let data = spec.sample_dataset(500, 3);
        assert!(data.iter().any(|s| s.tokens.len() < 6));
        for s in &data {
            assert!(!s.tokens.is_empty() && s.tokens.len() <= 6);
            assert!(spec.is_complete(&s.tokens));
            assert!(!s.tokens[..s.tokens.len() - 1].contains(&3));
        }
    }

    #[test]
    fn record_lines_round_trip() {
        let spec = GrammarSpec::markov_toy(0.2, 0.1, 3, 2).unwrap();
        let data = spec.sample_dataset(20, 1);
        let text = write_dataset(&data);
        assert_eq!(read_dataset(&text).unwrap(), data);
        assert!("0,1,".parse::<LabeledSequence>().is_err());
    }

    #[test]
    fn toml_round_trip_validates() {
        let spec = GrammarSpec::markov_toy(0.2, 0.1, 3, 2).unwrap();
        let text = spec.to_toml();
        assert_eq!(GrammarSpec::from_toml(&text).unwrap(), spec);
        let broken = text.replace("noise = 0.1", "noise = 0.9");
        assert!(GrammarSpec::from_toml(&broken).is_err());
    }
}
