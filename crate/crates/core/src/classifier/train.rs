//! Classifier training: cross-entropy over ground-truth, wrong-token and
//! on-policy partial sequences, plus a hinge on the guided log-score gap
//! between the ground-truth token and the generator's preferred alternative.
//!
//! Per ground-truth record with prefix `r_<k`, token `r*` and label `y`:
//!
//! ```text
//! s(r)  = log p_gen(r | r_<k) + log p_clf(y | r_<k, r)      normalized over {r*} ∪ top-k(p_gen)
//! r̂     = argmax_{r ≠ r*} p_gen(r | r_<k)
//! rank  = max(0, margin + s(r̂) − s(r*))
//! total = mean CE + rank_weight · mean rank
//! ```
//!
//! The generator is frozen; rank gradients flow through the classifier only.

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::mlp::{log_softmax, Gradients};
use super::{FeatureEncoder, MlpClassifier, PropertyScorer};
use crate::error::{config_err, Error, Result};
use crate::generator::TabularGenerator;
use crate::grammar::{softmax, GrammarSpec, LabeledSequence};
use crate::seed;
use crate::Token;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Ranking margin γ.
    pub margin: f64,
    /// Ranking weight μ; 0 disables the rank term.
    pub rank_weight: f64,
    /// Probability ρ of adding an on-policy generator sample per record.
    pub on_policy_ratio: f64,
    /// Size of the generator top-k used to normalize guided log-scores.
    pub top_k: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub hidden: usize,
    pub depth: usize,
    /// Wrong-token copies per ground-truth partial sequence.
    pub wrong_tokens: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            margin: 1.0,
            rank_weight: 1.0,
            on_policy_ratio: 0.5,
            top_k: 5,
            learning_rate: 0.05,
            epochs: 20,
            batch_size: 32,
            seed: 0,
            hidden: 64,
            depth: 2,
            wrong_tokens: 1,
        }
    }
}

impl TrainConfig {
    /// The cross-entropy ablation: no rank term, no wrong-token augmentation.
    pub fn ce_only(mut self) -> Self {
        self.rank_weight = 0.0;
        self.wrong_tokens = 0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0) {
            return Err(config_err("margin must be positive"));
        }
        if !(self.rank_weight >= 0.0 && self.rank_weight.is_finite()) {
            return Err(config_err("rank_weight must be finite and non-negative"));
        }
        if !(0.0..=1.0).contains(&self.on_policy_ratio) {
            return Err(config_err("on_policy_ratio must lie in [0, 1]"));
        }
        if self.top_k < 2 {
            return Err(config_err("top_k must be at least 2 so the preferred alternative is a candidate"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(config_err("learning_rate must be positive"));
        }
        if self.batch_size == 0 || self.hidden == 0 {
            return Err(config_err("batch_size and hidden must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RecordKind {
    GroundTruth,
    WrongToken,
    OnPolicy,
}

/// One classifier training example: `tokens` is the partial sequence `r_≤k`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingRecord {
    pub context: usize,
    pub tokens: Vec<Token>,
    pub label: usize,
    pub kind: RecordKind,
}

impl TrainingRecord {
    pub fn is_ground_truth(&self) -> bool {
        self.kind == RecordKind::GroundTruth
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub rank: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub ce: f64,
    pub rank: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: MlpClassifier,
    pub trace: Vec<EpochLoss>,
}

/// Expands a minibatch of labeled sequences into classifier records: one
/// ground-truth partial per input, `wrong_tokens` copies with the last token
/// replaced uniformly at random (catch-all label), and with probability ρ an
/// on-policy generator sample truncated at the same position and labeled by
/// the grammar oracle.
pub fn build_training_batch(
    spec: &GrammarSpec,
    gen: &TabularGenerator,
    minibatch: &[LabeledSequence],
    cfg: &TrainConfig,
    seed: u64,
) -> Vec<TrainingRecord> {
    let mut rng = seed::rng(seed);
    let vocab = spec.vocab_size();
    let catch_all = spec.num_classes();
    let mut batch = Vec::with_capacity(minibatch.len() * (2 + cfg.wrong_tokens));
    for rec in minibatch {
        let k = rng.random_range(1..=rec.tokens.len());
        let partial = rec.tokens[..k].to_vec();
        for _ in 0..cfg.wrong_tokens {
            let mut wrong = partial.clone();
            wrong[k - 1] = rng.random_range(0..vocab);
            batch.push(TrainingRecord {
                context: rec.context,
                tokens: wrong,
                label: catch_all,
                kind: RecordKind::WrongToken,
            });
        }
        batch.push(TrainingRecord {
            context: rec.context,
            tokens: partial,
            label: rec.class_label,
            kind: RecordKind::GroundTruth,
        });
        if rng.random::<f64>() < cfg.on_policy_ratio {
            let sample = gen.sample_with(&mut rng, rec.context, spec.seq_len());
            let label = spec
                .oracle_class(rec.context, &sample)
                .expect("generator samples are valid grammar sequences")
                .map_class;
            let cut = k.min(sample.len());
            batch.push(TrainingRecord {
                context: rec.context,
                tokens: sample[..cut].to_vec(),
                label,
                kind: RecordKind::OnPolicy,
            });
        }
    }
    batch
}

/// Generator's top alternative to `anchor`: `argmax_{r ≠ anchor} p(r | prefix)`.
pub fn preferred_alternative(gen: &TabularGenerator, context: usize, prefix: &[Token], anchor: Token) -> Token {
    gen.ranked_tokens(context, prefix).into_iter().find(|&t| t != anchor).expect("vocabulary has at least two tokens")
}

/// `{anchor} ∪ top-k(p_gen(· | prefix))`, in ascending token order.
pub fn candidate_set(
    gen: &TabularGenerator,
    context: usize,
    prefix: &[Token],
    anchor: Token,
    top_k: usize,
) -> Vec<Token> {
    let mut set: Vec<Token> = gen.ranked_tokens(context, prefix).into_iter().take(top_k).collect();
    if !set.contains(&anchor) {
        set.push(anchor);
    }
    set.sort_unstable();
    set
}

/// Guided log-scores over the candidate set anchored at `anchor`.
pub fn guided_logscores(
    gen: &TabularGenerator,
    clf: &dyn PropertyScorer,
    context: usize,
    prefix: &[Token],
    anchor: Token,
    label: usize,
    top_k: usize,
) -> Vec<(Token, f64)> {
    let lp = gen.next_token_logprobs(context, prefix);
    let set = candidate_set(gen, context, prefix, anchor, top_k);
    let mut extended = prefix.to_vec();
    extended.push(0);
    let raw: Vec<f64> = set
        .iter()
        .map(|&r| {
            *extended.last_mut().expect("non-empty") = r;
            lp[r] + clf.label_logprob(context, &extended, label)
        })
        .collect();
    let normalized = log_softmax(&raw);
    set.into_iter().zip(normalized).collect()
}

/// Guided log-score of `candidate`, normalized over `{candidate} ∪ top-k`.
pub fn guided_logscore(
    gen: &TabularGenerator,
    clf: &dyn PropertyScorer,
    context: usize,
    prefix: &[Token],
    candidate: Token,
    label: usize,
    top_k: usize,
) -> f64 {
    guided_logscores(gen, clf, context, prefix, candidate, label, top_k)
        .into_iter()
        .find(|(t, _)| *t == candidate)
        .map(|(_, s)| s)
        .expect("candidate is always in its own set")
}

fn score_of(scores: &[(Token, f64)], token: Token) -> f64 {
    scores.iter().find(|(t, _)| *t == token).map(|(_, s)| *s).expect("token in candidate set")
}

/// Loss value computed from normalized guided log-scores.
pub fn scr_loss(
    gen: &TabularGenerator,
    clf: &MlpClassifier,
    batch: &[TrainingRecord],
    cfg: &TrainConfig,
) -> LossBreakdown {
    let n = batch.len() as f64;
    let ce: f64 = batch.iter().map(|r| -clf.label_logprob(r.context, &r.tokens, r.label)).sum::<f64>() / n;
    let gt: Vec<&TrainingRecord> = batch.iter().filter(|r| r.is_ground_truth()).collect();
    let rank = if gt.is_empty() {
        0.0
    } else {
        gt.iter()
            .map(|r| {
                let (prefix, star) = r.tokens.split_at(r.tokens.len() - 1);
                let star = star[0];
                let alt = preferred_alternative(gen, r.context, prefix, star);
                let scores = guided_logscores(gen, clf, r.context, prefix, star, r.label, cfg.top_k);
                (cfg.margin + score_of(&scores, alt) - score_of(&scores, star)).max(0.0)
            })
            .sum::<f64>()
            / gt.len() as f64
    };
    LossBreakdown { ce, rank, total: ce + cfg.rank_weight * rank }
}

/// Loss and its gradient with respect to the classifier parameters.
///
/// The candidate-set normalizer is shared by `r*` and `r̂`, so it drops out of
/// the hinge argument and only the two raw classifier terms carry gradient.
pub fn loss_and_grad(
    gen: &TabularGenerator,
    clf: &MlpClassifier,
    batch: &[TrainingRecord],
    cfg: &TrainConfig,
) -> (LossBreakdown, Gradients) {
    let mut grads = Gradients::zeros(&clf.net);
    let n = batch.len() as f64;
    let n_gt = batch.iter().filter(|r| r.is_ground_truth()).count();
    let rank_scale = if n_gt > 0 { cfg.rank_weight / n_gt as f64 } else { 0.0 };
    let labels = clf.num_labels;
    let mut ce = 0.0;
    let mut rank = 0.0;
    let mut dlogits = vec![0.0; labels];
    for r in batch {
        let x = clf.encoder.encode(r.context, &r.tokens);
        let trace = clf.net.forward_trace(&x);
        let logp = log_softmax(trace.logits());
        ce -= logp[r.label];
        for (j, d) in dlogits.iter_mut().enumerate() {
            let p = logp[j].exp();
            *d = (p - if j == r.label { 1.0 } else { 0.0 }) / n;
        }
        if r.is_ground_truth() {
            let (prefix, star) = r.tokens.split_at(r.tokens.len() - 1);
            let star = star[0];
            let alt = preferred_alternative(gen, r.context, prefix, star);
            let lp = gen.next_token_logprobs(r.context, prefix);
            let mut alt_tokens = prefix.to_vec();
            alt_tokens.push(alt);
            let x_alt = clf.encoder.encode(r.context, &alt_tokens);
            let trace_alt = clf.net.forward_trace(&x_alt);
            let logp_alt = log_softmax(trace_alt.logits());
            let hinge = cfg.margin + (lp[alt] + logp_alt[r.label]) - (lp[star] + logp[r.label]);
            if hinge > 0.0 {
                rank += hinge;
                if rank_scale > 0.0 {
                    // −∂ log p(y | r*) / ∂z = p − e_y
                    for (j, d) in dlogits.iter_mut().enumerate() {
                        *d += rank_scale * (logp[j].exp() - if j == r.label { 1.0 } else { 0.0 });
                    }
                    let dalt: Vec<f64> = (0..labels)
                        .map(|j| rank_scale * (if j == r.label { 1.0 } else { 0.0 } - logp_alt[j].exp()))
                        .collect();
                    clf.net.backward(&trace_alt, &dalt, &mut grads);
                }
            }
        }
        clf.net.backward(&trace, &dlogits, &mut grads);
    }
    let ce = ce / n;
    let rank = if n_gt > 0 { rank / n_gt as f64 } else { 0.0 };
    (LossBreakdown { ce, rank, total: ce + cfg.rank_weight * rank }, grads)
}

/// Mini-batch gradient descent on the combined loss. Deterministic per seed.
pub fn train(
    spec: &GrammarSpec,
    gen: &TabularGenerator,
    dataset: &[LabeledSequence],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    let encoder =
        FeatureEncoder { num_contexts: spec.num_contexts(), vocab_size: spec.vocab_size(), max_len: spec.seq_len() };
    let mut model =
        MlpClassifier::new(encoder, spec.num_classes(), cfg.hidden, cfg.depth, seed::derive(cfg.seed, 0x5eed));
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut rng = seed::rng(seed::derive(cfg.seed, seed::stream2(epoch as u64 + 1, 0)));
        order.shuffle(&mut rng);
        let (mut ce, mut rank, mut total, mut batches) = (0.0, 0.0, 0.0, 0usize);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let minibatch: Vec<LabeledSequence> = chunk.iter().map(|&i| dataset[i].clone()).collect();
            let batch_seed = seed::derive(cfg.seed, seed::stream2(epoch as u64 + 1, b as u64 + 1));
            let batch = build_training_batch(spec, gen, &minibatch, cfg, batch_seed);
            let (loss, grads) = loss_and_grad(gen, &model, &batch, cfg);
            if !loss.total.is_finite() {
                return Err(Error::Numeric(format!("loss became {} at epoch {epoch}, batch {b}", loss.total)));
            }
            model.net.step(&grads, cfg.learning_rate);
            ce += loss.ce;
            rank += loss.rank;
            total += loss.total;
            batches += 1;
        }
        if !model.net.all_finite() {
            return Err(Error::Numeric(format!("non-finite weights after epoch {epoch}")));
        }
        let m = batches as f64;
        trace.push(EpochLoss { epoch, ce: ce / m, rank: rank / m, total: total / m });
    }
    Ok(TrainOutcome { model, trace })
}

/// `epoch,ce,rank,total` with a header row.
pub fn trace_csv(trace: &[EpochLoss]) -> String {
    let mut out = String::from("epoch,ce,rank,total\n");
    for e in trace {
        out.push_str(&format!("{},{},{},{}\n", e.epoch, e.ce, e.rank, e.total));
    }
    out
}

/// Mean cross-entropy of the grammar class labels over every prefix of
/// `heldout`. Used to monitor generalization.
pub fn heldout_ce(clf: &MlpClassifier, heldout: &[LabeledSequence]) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for s in heldout {
        for k in 1..=s.tokens.len() {
            sum -= clf.label_logprob(s.context, &s.tokens[..k], s.class_label);
            n += 1;
        }
    }
    sum / n as f64
}

/// Guided-score gap `s(r*) − s(r̂)` at one position of a labeled sequence.
pub fn margin_gap(
    gen: &TabularGenerator,
    clf: &dyn PropertyScorer,
    context: usize,
    tokens: &[Token],
    k: usize,
    label: usize,
) -> f64 {
    let prefix = &tokens[..k - 1];
    let star = tokens[k - 1];
    let alt = preferred_alternative(gen, context, prefix, star);
    let lp = gen.next_token_logprobs(context, prefix);
    let mut alt_tokens = prefix.to_vec();
    alt_tokens.push(alt);
    (lp[star] + clf.label_logprob(context, &tokens[..k], label))
        - (lp[alt] + clf.label_logprob(context, &alt_tokens, label))
}

/// Fraction of held-out divergent positions (ground-truth token differs from
/// the generator's argmax) whose guided-score gap reaches `margin`. Only
/// sequences labeled `target` count when a target is given.
pub fn margin_satisfaction(
    gen: &TabularGenerator,
    clf: &dyn PropertyScorer,
    heldout: &[LabeledSequence],
    margin: f64,
    target: Option<usize>,
) -> (usize, usize) {
    let mut hit = 0;
    let mut total = 0;
    for s in heldout.iter().filter(|s| target.is_none_or(|t| s.class_label == t)) {
        for k in 1..=s.tokens.len() {
            let prefix = &s.tokens[..k - 1];
            if gen.ranked_tokens(s.context, prefix)[0] == s.tokens[k - 1] {
                continue;
            }
            total += 1;
            if margin_gap(gen, clf, s.context, &s.tokens, k, s.class_label) >= margin {
                hit += 1;
            }
        }
    }
    (hit, total)
}

/// Posterior restricted to the grammar classes (catch-all removed, renormalized).
pub fn class_posterior(clf: &MlpClassifier, context: usize, prefix: &[Token]) -> Vec<f64> {
    let logits = clf.logits(context, prefix);
    softmax(&logits[..clf.num_labels - 1])
}
