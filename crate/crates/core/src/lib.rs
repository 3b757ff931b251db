//! Margin-calibrated classifier guidance for autoregressive beam search.
//!
//! The crate pairs a synthetic class-conditioned sequence grammar with a
//! tabular autoregressive generator and a small dense token-level classifier,
//! and implements:
//!
//! - classifier training with cross-entropy, wrong-token contrastive
//!   augmentation and a margin ranking loss on the guided log-score
//!   ([`classifier`]);
//! - guided beam search, the per-step gap condition and lookahead guidance-scale
//!   selection ([`decode`]);
//! - the binary-toy sample-complexity analysis and the reachability threshold
//!   for guided beam search, both checked against simulation and exhaustive
//!   enumeration ([`theory`]);
//! - steering metrics ([`metrics`]) and a batch runner ([`runner`]).
//!
//! See `examples/` for one runnable program per capability.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop, clippy::excessive_precision)]

pub mod classifier;
pub mod decode;
pub mod error;
pub mod experiment;
pub mod generator;
pub mod grammar;
pub mod metrics;
pub mod runner;
pub mod seed;
pub mod theory;

/// Token id in `0..vocab_size`.
pub type Token = usize;

pub use classifier::{MlpClassifier, PropertyScorer, TrainConfig};
pub use decode::{guided_beam_search, DecodeConfig, Hypothesis};
pub use error::{Error, Result};
pub use generator::TabularGenerator;
pub use grammar::{GrammarSpec, LabeledSequence};
