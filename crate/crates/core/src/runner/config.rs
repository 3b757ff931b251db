//! Experiment configuration (TOML).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::classifier::TrainConfig;
use crate::decode::DecodeConfig;
use crate::error::{config_err, Error, Result};
use crate::grammar::{GrammarFields, GrammarSpec};
use crate::theory::toy::TABLE_ETAS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorMode {
    /// The grammar's exact marginal.
    Exact,
    /// A smoothed last-token table fitted to sampled data.
    Fit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorSettings {
    pub mode: GeneratorMode,
    pub smoothing: f64,
}

impl Default for GeneratorSettings {
    fn default() -> Self {
        Self { mode: GeneratorMode::Exact, smoothing: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSettings {
    pub train_size: usize,
    pub heldout_size: usize,
}

impl Default for DataSettings {
    fn default() -> Self {
        Self { train_size: 1000, heldout_size: 1000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeSettings {
    pub lambdas: Vec<f64>,
    pub beam_width: usize,
    pub onset: usize,
    /// Defaults to the vocabulary size.
    pub pool: Option<usize>,
    /// Defaults to the grammar's sequence length.
    pub max_len: Option<usize>,
    /// Defaults to every context.
    pub contexts: Option<Vec<usize>>,
    /// Defaults to the non-majority classes of each context.
    pub targets: Option<Vec<usize>>,
}

impl Default for DecodeSettings {
    fn default() -> Self {
        Self {
            lambdas: vec![0.0, 0.5, 1.0, 2.0],
            beam_width: 4,
            onset: 1,
            pool: None,
            max_len: None,
            contexts: None,
            targets: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LookaheadSettings {
    pub budget: usize,
    pub n_explore: usize,
    pub lambdas: Vec<f64>,
}

impl Default for LookaheadSettings {
    fn default() -> Self {
        Self { budget: 96, n_explore: 16, lambdas: vec![0.0, 0.5, 1.0] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToySettings {
    pub eps: f64,
    pub delta: f64,
    pub trials: u64,
    pub etas: Vec<f64>,
    /// Simulate at these sample sizes instead of the computed minimum.
    pub n_override: Option<Vec<u64>>,
    pub threshold_delta: f64,
    pub delta_conds: Vec<f64>,
}

impl Default for ToySettings {
    fn default() -> Self {
        Self {
            eps: 0.05,
            delta: 0.1,
            trials: 4000,
            etas: TABLE_ETAS.to_vec(),
            n_override: None,
            threshold_delta: 0.05,
            delta_conds: vec![3.0, 2.0, 1.0, 0.5],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReachabilitySettings {
    pub instances: u64,
    pub vocab_size: usize,
    pub seq_len: usize,
    pub beam_width: usize,
    pub c1: f64,
    pub c2: f64,
    /// Offset above λ* at which inclusion is checked.
    pub margin: f64,
    pub grid_step: f64,
}

impl Default for ReachabilitySettings {
    fn default() -> Self {
        Self {
            instances: 50,
            vocab_size: 3,
            seq_len: 3,
            beam_width: 2,
            c1: 0.85,
            c2: 0.2,
            margin: 0.01,
            grid_step: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateSettings {
    pub lambdas: Vec<f64>,
    pub onsets: Vec<usize>,
    /// Pool sizes; values above the vocabulary are clamped.
    pub pools: Vec<usize>,
    /// Guided ancestral samples per (context, target) at each setting.
    pub n_samples: usize,
}

impl Default for AblateSettings {
    fn default() -> Self {
        Self { lambdas: vec![0.0, 0.5, 1.0, 2.0], onsets: vec![1, 2, 3], pools: vec![1, 2], n_samples: 200 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportSettings {
    pub metrics: Vec<String>,
}

impl Default for ReportSettings {
    fn default() -> Self {
        Self { metrics: ["breadth", "rank", "satisfaction", "jaccard"].map(String::from).to_vec() }
    }
}

pub const METRIC_NAMES: [&str; 4] = ["breadth", "rank", "satisfaction", "jaccard"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Inline grammar; exclusive with `grammar_file`.
    pub grammar: Option<GrammarFields>,
    pub grammar_file: Option<PathBuf>,
    pub generator: GeneratorSettings,
    pub data: DataSettings,
    pub classifier: TrainConfig,
    pub decode: DecodeSettings,
    pub lookahead: LookaheadSettings,
    pub toy: ToySettings,
    pub reachability: ReachabilitySettings,
    pub ablate: AblateSettings,
    pub report: ReportSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            grammar: None,
            grammar_file: None,
            generator: GeneratorSettings::default(),
            data: DataSettings::default(),
            classifier: TrainConfig { margin: 2.0, epochs: 20, hidden: 16, depth: 1, ..TrainConfig::default() },
            decode: DecodeSettings::default(),
            lookahead: LookaheadSettings::default(),
            toy: ToySettings::default(),
            reachability: ReachabilitySettings::default(),
            ablate: AblateSettings::default(),
            report: ReportSettings::default(),
        }
    }
}

/// Grammar used when the config names none: the two-class binary toy with a
/// 5% minority class, noise 0.2, five steps and two contexts.
pub fn default_grammar() -> GrammarSpec {
    GrammarSpec::noisy_channel(0.05, 0.2, 2, 5, 2).expect("valid default grammar")
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| config_err(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config always serializes")
    }

    /// Resolves the grammar. A relative `grammar_file` is taken relative to
    /// `base` (the config file's directory).
    pub fn grammar_spec(&self, base: Option<&Path>) -> Result<GrammarSpec> {
        match (&self.grammar, &self.grammar_file) {
            (Some(_), Some(_)) => Err(config_err("give either grammar or grammar_file, not both")),
            (Some(fields), None) => GrammarSpec::new(fields.clone()),
            (None, Some(path)) => {
                let path = match base {
                    Some(b) if path.is_relative() => b.join(path),
                    _ => path.clone(),
                };
                GrammarSpec::from_toml(&std::fs::read_to_string(&path)?)
            }
            (None, None) => Ok(default_grammar()),
        }
    }

    pub fn validate(&self, spec: &GrammarSpec) -> Result<()> {
        self.classifier.validate()?;
        if !(self.generator.smoothing >= 0.0 && self.generator.smoothing.is_finite()) {
            return Err(config_err("generator.smoothing must be finite and non-negative"));
        }
        if self.data.train_size == 0 || self.data.heldout_size == 0 {
            return Err(config_err("data sizes must be positive"));
        }
        if self.decode.lambdas.is_empty() {
            return Err(config_err("decode.lambdas is empty"));
        }
        for &l in &self.decode.lambdas {
            self.decode_config(spec, l, 0).validate(spec.vocab_size())?;
        }
        if let Some(cs) = &self.decode.contexts {
            if cs.iter().any(|&c| c >= spec.num_contexts()) {
                return Err(config_err("decode.contexts names an unknown context"));
            }
        }
        if let Some(ts) = &self.decode.targets {
            if ts.iter().any(|&t| t >= spec.num_classes()) {
                return Err(config_err("decode.targets names an unknown class"));
            }
        }
        if self.lookahead.lambdas.is_empty()
            || self.lookahead.budget < self.lookahead.lambdas.len() * self.lookahead.n_explore
        {
            return Err(config_err("lookahead.budget must cover |lambdas| * n_explore"));
        }
        if let Some(m) = self.report.metrics.iter().find(|m| !METRIC_NAMES.contains(&m.as_str())) {
            return Err(config_err(format!("unknown metric {m:?}")));
        }
        let r = &self.reachability;
        if !(r.c2 > 0.0 && r.c2 < r.c1 && r.c1 <= 1.0) {
            return Err(config_err("reachability needs 0 < c2 < c1 <= 1"));
        }
        if !(r.grid_step > 0.0 && r.margin > 0.0) || r.vocab_size < 2 || r.seq_len == 0 || r.beam_width == 0 {
            return Err(config_err("invalid reachability settings"));
        }
        if self.ablate.onsets.contains(&0) || self.ablate.pools.contains(&0) {
            return Err(config_err("ablation onsets and pools must be positive"));
        }
        Ok(())
    }

    pub fn decode_config(&self, spec: &GrammarSpec, lambda: f64, target: usize) -> DecodeConfig {
        let max_len = self.decode.max_len.unwrap_or(spec.seq_len());
        DecodeConfig {
            lambda,
            beam_width: self.decode.beam_width,
            onset: self.decode.onset,
            pool: self.decode.pool.unwrap_or(spec.vocab_size()),
            max_len,
            target_label: target,
        }
    }

    pub fn contexts(&self, spec: &GrammarSpec) -> Vec<usize> {
        self.decode.contexts.clone().unwrap_or_else(|| (0..spec.num_contexts()).collect())
    }

    pub fn targets(&self, spec: &GrammarSpec, context: usize) -> Vec<usize> {
        match &self.decode.targets {
            Some(t) => t.clone(),
            None => crate::experiment::minority_targets(spec).remove(&context).unwrap_or_default(),
        }
    }
}

impl From<toml::de::Error> for Error {
    fn from(e: toml::de::Error) -> Self {
        Error::Config(e.to_string())
    }
}
