//! Token-level property classifier.
//!
//! The classifier reads a (context, partial sequence) pair and predicts a
//! distribution over `C + 1` labels: the `C` grammar classes plus a catch-all
//! label `C` for wrong-token contrastive examples. Training lives in
//! [`train`].

pub mod mlp;
pub mod train;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::grammar::softmax;
use crate::Token;

pub use mlp::{log_softmax, Gradients, Mlp};
pub use train::{
    build_training_batch, guided_logscore, loss_and_grad, scr_loss, train, EpochLoss, LossBreakdown, RecordKind,
    TrainConfig, TrainOutcome, TrainingRecord,
};

/// Anything that scores partial sequences with a label distribution.
pub trait PropertyScorer: Sync {
    fn num_labels(&self) -> usize;

    /// Label distribution for `prefix` (which already includes the candidate token).
    fn posterior(&self, context: usize, prefix: &[Token]) -> Vec<f64>;

    fn label_logprob(&self, context: usize, prefix: &[Token], label: usize) -> f64 {
        self.posterior(context, prefix)[label].ln()
    }
}

/// `[one-hot context | token counts | one-hot last token | len / max_len]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureEncoder {
    pub num_contexts: usize,
    pub vocab_size: usize,
    pub max_len: usize,
}

impl FeatureEncoder {
    pub fn dim(&self) -> usize {
        self.num_contexts + 2 * self.vocab_size + 1
    }

    pub fn encode(&self, context: usize, prefix: &[Token]) -> Vec<f64> {
        let mut x = vec![0.0; self.dim()];
        x[context] = 1.0;
        let counts = self.num_contexts;
        for &t in prefix {
            x[counts + t] += 1.0;
        }
        if let Some(&last) = prefix.last() {
            x[counts + self.vocab_size + last] = 1.0;
        }
        x[self.dim() - 1] = prefix.len() as f64 / self.max_len as f64;
        x
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpClassifier {
    pub encoder: FeatureEncoder,
    pub num_labels: usize,
    pub net: Mlp,
}

impl MlpClassifier {
    pub fn new(encoder: FeatureEncoder, num_classes: usize, hidden: usize, depth: usize, seed: u64) -> Self {
        let num_labels = num_classes + 1;
        let net = Mlp::new(encoder.dim(), hidden, depth, num_labels, seed);
        Self { encoder, num_labels, net }
    }

    /// Label index reserved for wrong-token examples.
    pub fn catch_all_label(&self) -> usize {
        self.num_labels - 1
    }

    pub fn logits(&self, context: usize, prefix: &[Token]) -> Vec<f64> {
        self.net.forward(&self.encoder.encode(context, prefix))
    }

    /// Probability vector over the `C + 1` labels.
    pub fn predict_posterior(&self, context: usize, prefix: &[Token]) -> Vec<f64> {
        softmax(&self.logits(context, prefix))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("classifier always serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let clf: Self = serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        clf.validate()?;
        Ok(clf)
    }

    fn validate(&self) -> Result<()> {
        if self.net.input_dim() != self.encoder.dim() {
            return Err(config_err("network input width does not match the feature encoder"));
        }
        if self.net.output_dim() != self.num_labels {
            return Err(config_err("network output width does not match num_labels"));
        }
        for (i, l) in self.net.layers.iter().enumerate() {
            if l.weights.len() != l.inputs * l.outputs || l.bias.len() != l.outputs {
                return Err(config_err(format!("layer {i} has inconsistent shapes")));
            }
            if i > 0 && self.net.layers[i - 1].outputs != l.inputs {
                return Err(config_err(format!("layer {i} input width mismatch")));
            }
        }
        if !self.net.all_finite() {
            return Err(config_err("non-finite weight"));
        }
        Ok(())
    }
}

impl PropertyScorer for MlpClassifier {
    fn num_labels(&self) -> usize {
        self.num_labels
    }

    fn posterior(&self, context: usize, prefix: &[Token]) -> Vec<f64> {
        self.predict_posterior(context, prefix)
    }

    fn label_logprob(&self, context: usize, prefix: &[Token], label: usize) -> f64 {
        log_softmax(&self.logits(context, prefix))[label]
    }
}

/// Returns the same distribution for every input. Useful as a null guide.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstantScorer {
    pub probs: Vec<f64>,
}

impl PropertyScorer for ConstantScorer {
    fn num_labels(&self) -> usize {
        self.probs.len()
    }

    fn posterior(&self, _context: usize, _prefix: &[Token]) -> Vec<f64> {
        self.probs.clone()
    }
}
