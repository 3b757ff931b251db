//! Batch runner behind the `scrlab` binary.
//!
//! Every subcommand reads an [`ExperimentConfig`], writes its artifacts into
//! `--out`, and finishes with `manifest.json`: the subcommand, seed, crate
//! version, the effective config, and SHA-256 hashes of every input read and
//! output written. Artifacts a subcommand needs but is not given (dataset,
//! generator, classifier) are rebuilt from the config and seed, so a run is
//! reproducible from its manifest.
//!
//! Exit codes: 0 success, 2 invalid config or input, 3 numeric failure,
//! 64 usage error, 66 missing input file, 74 other I/O failure.

mod config;

use std::collections::{BTreeMap, BTreeSet};
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

pub use config::{
    default_grammar, AblateSettings, DataSettings, DecodeSettings, ExperimentConfig, GeneratorMode, GeneratorSettings,
    LookaheadSettings, ReachabilitySettings, ReportSettings, ToySettings, METRIC_NAMES,
};

use crate::classifier::train::{heldout_ce, margin_satisfaction, trace_csv, train};
use crate::decode::{beam_search, decode_csv, guided_beam_search, lookahead_decode, read_decode_csv, DecodeRow};
use crate::error::{config_err, Error, Result};
use crate::grammar::{read_dataset, write_dataset, GrammarSpec, LabeledSequence};
use crate::metrics::{
    group_rows, jaccard_overlap, mean_satisfaction, metrics_csv, rank_efficiency, steering_breadth, MetricRow,
    SteeringResult,
};
use crate::seed;
use crate::theory::reachability::{random_instance, reachability_record};
use crate::theory::toy::{nmin_table, nmin_table_csv, practical_threshold_csv};
use crate::{MlpClassifier, TabularGenerator};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_USAGE: i32 = 64;
pub const EXIT_NO_INPUT: i32 = 66;
pub const EXIT_IO: i32 = 74;

#[derive(Debug, Parser)]
#[command(name = "scrlab", version, about = "Classifier-guided beam search experiments on a synthetic grammar")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// TOML experiment config; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed (overrides the config).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "scrlab-out")]
    pub out: PathBuf,
    /// Worker threads; 0 uses every core. Outputs do not depend on it.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Sample train and held-out datasets from the grammar.
    GenData,
    /// Fit a smoothed last-token generator to a dataset.
    FitGenerator {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        smoothing: Option<f64>,
    },
    /// Train a classifier; writes the model and its loss trace.
    TrainClassifier {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        generator: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        margin: Option<f64>,
    },
    /// Guided beam search over contexts × targets × λ.
    Decode {
        /// Guidance scales (comma separated); replaces the config grid.
        #[arg(long, value_delimiter = ',')]
        lambda: Option<Vec<f64>>,
        /// Plain beam search on the generator alone.
        #[arg(long, conflicts_with = "lambda")]
        unguided: bool,
        #[arg(long)]
        generator: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Lookahead guidance-scale selection per (context, target).
    Lookahead {
        #[arg(long)]
        budget: Option<usize>,
        #[arg(long)]
        generator: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Binary-toy sample-complexity and threshold tables.
    ToyVerify {
        #[arg(long)]
        eps: Option<f64>,
        #[arg(long)]
        delta: Option<f64>,
        #[arg(long)]
        trials: Option<u64>,
    },
    /// Reachability suite on random enumerable instances.
    Reachability {
        #[arg(long)]
        instances: Option<u64>,
    },
    /// λ, onset and pool sweeps.
    Ablate {
        #[arg(long)]
        generator: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Steering metrics over decode output.
    Report {
        /// Decode CSV; decoded in-process from the config when omitted.
        #[arg(long)]
        decode: Option<PathBuf>,
        #[arg(long)]
        generator: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::FitGenerator { .. } => "fit-generator",
            Command::TrainClassifier { .. } => "train-classifier",
            Command::Decode { .. } => "decode",
            Command::Lookahead { .. } => "lookahead",
            Command::ToyVerify { .. } => "toy-verify",
            Command::Reachability { .. } => "reachability",
            Command::Ablate { .. } => "ablate",
            Command::Report { .. } => "report",
        }
    }
}

/// Parses `args` (program name first), runs, and returns the exit code.
/// Errors are reported on stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
        }
    };
    match execute(&cli) {
        Ok(outputs) => {
            for o in outputs {
                println!("{}", o.display());
            }
            EXIT_OK
        }
        Err(e) => {
            eprintln!("scrlab {}: {e}", cli.command.name());
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) | Error::Precondition(_) | Error::Parse(_) => EXIT_CONFIG,
        Error::Numeric(_) => EXIT_NUMERIC,
        Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => EXIT_NO_INPUT,
        Error::Io(_) => EXIT_IO,
    }
}

/// Runs a parsed command and returns the paths written.
pub fn execute(cli: &Cli) -> Result<Vec<PathBuf>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.global.jobs)
        .build()
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    pool.install(|| {
        let mut session = Session::open(cli)?;
        match &cli.command {
            Command::GenData => gen_data(&mut session),
            Command::FitGenerator { data, .. } => fit_generator(&mut session, data.as_deref()),
            Command::TrainClassifier { data, generator, .. } => {
                train_classifier(&mut session, data.as_deref(), generator.as_deref())
            }
            Command::Decode { unguided, generator, model, .. } => {
                let rows = decode_rows(&mut session, *unguided, generator.as_deref(), model.as_deref())?;
                session.write("decode.csv", &decode_csv(&rows))
            }
            Command::Lookahead { generator, model, .. } => {
                lookahead(&mut session, generator.as_deref(), model.as_deref())
            }
            Command::ToyVerify { .. } => toy_verify(&mut session),
            Command::Reachability { .. } => reachability(&mut session),
            Command::Ablate { generator, model } => ablate(&mut session, generator.as_deref(), model.as_deref()),
            Command::Report { decode, generator, model } => {
                report(&mut session, decode.as_deref(), generator.as_deref(), model.as_deref())
            }
        }?;
        session.finish(cli.command.name())
    })
}

/// Applies subcommand flags that mirror config keys.
fn apply_overrides(cfg: &mut ExperimentConfig, global: &GlobalArgs, cmd: &Command) {
    if let Some(s) = global.seed {
        cfg.seed = s;
    }
    match cmd {
        Command::FitGenerator { smoothing: Some(a), .. } => cfg.generator.smoothing = *a,
        Command::TrainClassifier { epochs, margin, .. } => {
            if let Some(e) = epochs {
                cfg.classifier.epochs = *e;
            }
            if let Some(m) = margin {
                cfg.classifier.margin = *m;
            }
        }
        Command::Decode { lambda: Some(l), .. } => cfg.decode.lambdas = l.clone(),
        Command::Decode { unguided: true, .. } => cfg.decode.lambdas = vec![0.0],
        Command::Lookahead { budget: Some(b), .. } => cfg.lookahead.budget = *b,
        Command::ToyVerify { eps, delta, trials } => {
            if let Some(e) = eps {
                cfg.toy.eps = *e;
            }
            if let Some(d) = delta {
                cfg.toy.delta = *d;
            }
            if let Some(t) = trials {
                cfg.toy.trials = *t;
            }
        }
        Command::Reachability { instances: Some(n) } => cfg.reachability.instances = *n,
        _ => {}
    }
}

#[derive(Debug, Serialize)]
struct FileHash {
    path: String,
    sha256: String,
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    subcommand: &'a str,
    seed: u64,
    version: &'a str,
    config: &'a ExperimentConfig,
    /// The grammar actually used, whether inline, from a file or the default.
    grammar: &'a crate::grammar::GrammarFields,
    inputs: &'a [FileHash],
    outputs: &'a [FileHash],
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Effective config, grammar and the files touched so far.
struct Session {
    cfg: ExperimentConfig,
    spec: GrammarSpec,
    out: PathBuf,
    inputs: Vec<FileHash>,
    outputs: Vec<FileHash>,
    written: Vec<PathBuf>,
}

impl Session {
    fn open(cli: &Cli) -> Result<Self> {
        let mut inputs = Vec::new();
        let (mut cfg, base) = match &cli.global.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)?;
                inputs.push(FileHash { path: path.display().to_string(), sha256: sha256_hex(text.as_bytes()) });
                (ExperimentConfig::from_toml(&text)?, path.parent().map(Path::to_path_buf))
            }
            None => (ExperimentConfig::default(), None),
        };
        apply_overrides(&mut cfg, &cli.global, &cli.command);
        if let Some(gf) = &cfg.grammar_file {
            let path = match &base {
                Some(b) if gf.is_relative() => b.join(gf),
                _ => gf.clone(),
            };
            let bytes = std::fs::read(&path)?;
            inputs.push(FileHash { path: path.display().to_string(), sha256: sha256_hex(&bytes) });
        }
        let spec = cfg.grammar_spec(base.as_deref())?;
        cfg.validate(&spec)?;
        std::fs::create_dir_all(&cli.global.out)?;
        Ok(Self { cfg, spec, out: cli.global.out.clone(), inputs, outputs: Vec::new(), written: Vec::new() })
    }

    fn read_input(&mut self, path: &Path) -> Result<String> {
        let text = std::fs::read_to_string(path)?;
        self.inputs.push(FileHash { path: path.display().to_string(), sha256: sha256_hex(text.as_bytes()) });
        Ok(text)
    }

    fn write(&mut self, name: &str, contents: &str) -> Result<()> {
        let path = self.out.join(name);
        std::fs::write(&path, contents)?;
        self.outputs.push(FileHash { path: name.to_string(), sha256: sha256_hex(contents.as_bytes()) });
        self.written.push(path);
        Ok(())
    }

    fn finish(mut self, subcommand: &str) -> Result<Vec<PathBuf>> {
        let manifest = Manifest {
            subcommand,
            seed: self.cfg.seed,
            version: env!("CARGO_PKG_VERSION"),
            config: &self.cfg,
            grammar: self.spec.fields(),
            inputs: &self.inputs,
            outputs: &self.outputs,
        };
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Parse(e.to_string()))? + "\n";
        let path = self.out.join("manifest.json");
        std::fs::write(&path, text)?;
        self.written.push(path);
        Ok(self.written)
    }

    fn train_set(&mut self, path: Option<&Path>) -> Result<Vec<LabeledSequence>> {
        let data = match path {
            Some(p) => {
                let text = self.read_input(p)?;
                read_dataset(&text)?
            }
            None => self.spec.sample_dataset(self.cfg.data.train_size, seed::derive(self.cfg.seed, 1)),
        };
        for r in &data {
            if r.context >= self.spec.num_contexts()
                || r.class_label >= self.spec.num_classes()
                || r.tokens.iter().any(|&t| t >= self.spec.vocab_size())
            {
                return Err(config_err(format!("record {r} does not fit the grammar")));
            }
        }
        Ok(data)
    }

    fn heldout(&self) -> Vec<LabeledSequence> {
        self.spec.sample_dataset(self.cfg.data.heldout_size, seed::derive(self.cfg.seed, 2))
    }

    fn generator(&mut self, path: Option<&Path>, data: Option<&[LabeledSequence]>) -> Result<TabularGenerator> {
        let gen = match (path, self.cfg.generator.mode) {
            (Some(p), _) => {
                let text = self.read_input(p)?;
                TabularGenerator::from_toml(&text)?
            }
            (None, GeneratorMode::Exact) => TabularGenerator::exact_from_grammar(&self.spec)?,
            (None, GeneratorMode::Fit) => {
                let owned;
                let data = match data {
                    Some(d) => d,
                    None => {
                        owned = self.train_set(None)?;
                        &owned
                    }
                };
                self.fit(data)?
            }
        };
        if gen.vocab_size() != self.spec.vocab_size() || gen.num_contexts() < self.spec.num_contexts() {
            return Err(config_err("generator does not match the grammar's vocabulary or contexts"));
        }
        Ok(gen)
    }

    fn fit(&self, data: &[LabeledSequence]) -> Result<TabularGenerator> {
        TabularGenerator::fit_tabular_with(
            data,
            self.cfg.generator.smoothing,
            self.spec.vocab_size(),
            self.spec.end_token(),
        )
    }

    fn classifier(&mut self, path: Option<&Path>, gen: &TabularGenerator) -> Result<MlpClassifier> {
        let clf = match path {
            Some(p) => {
                let text = self.read_input(p)?;
                MlpClassifier::from_json(&text)?
            }
            None => {
                let data = self.train_set(None)?;
                train(&self.spec, gen, &data, &self.train_config())?.model
            }
        };
        let enc = clf.encoder;
        if clf.catch_all_label() != self.spec.num_classes()
            || enc.vocab_size != self.spec.vocab_size()
            || enc.num_contexts != self.spec.num_contexts()
        {
            return Err(config_err("classifier does not match the grammar"));
        }
        Ok(clf)
    }

    fn train_config(&self) -> crate::TrainConfig {
        crate::TrainConfig { seed: seed::derive(self.cfg.seed, 3), ..self.cfg.classifier.clone() }
    }

    /// `(context, target)` pairs in sorted order.
    fn pairs(&self) -> Vec<(usize, usize)> {
        self.cfg
            .contexts(&self.spec)
            .into_iter()
            .flat_map(|c| self.cfg.targets(&self.spec, c).into_iter().map(move |t| (c, t)))
            .collect()
    }

    fn target_map(&self) -> BTreeMap<usize, Vec<usize>> {
        self.cfg.contexts(&self.spec).into_iter().map(|c| (c, self.cfg.targets(&self.spec, c))).collect()
    }
}

fn gen_data(s: &mut Session) -> Result<()> {
    let train = s.train_set(None)?;
    let heldout = s.heldout();
    let grammar = s.spec.to_toml();
    s.write("grammar.toml", &grammar)?;
    s.write("train.csv", &write_dataset(&train))?;
    s.write("heldout.csv", &write_dataset(&heldout))
}

fn fit_generator(s: &mut Session, data: Option<&Path>) -> Result<()> {
    let data = s.train_set(data)?;
    let gen = s.fit(&data)?;
    s.write("generator.toml", &gen.to_toml())
}

#[derive(Debug, Serialize)]
struct TrainSummary {
    seed: u64,
    heldout_ce: f64,
    margin_hits: usize,
    margin_positions: usize,
}

fn train_classifier(s: &mut Session, data: Option<&Path>, generator: Option<&Path>) -> Result<()> {
    let data = s.train_set(data)?;
    let gen = s.generator(generator, Some(&data))?;
    let outcome = train(&s.spec, &gen, &data, &s.train_config())?;
    let heldout = s.heldout();
    let (hits, total) = margin_satisfaction(&gen, &outcome.model, &heldout, s.cfg.classifier.margin, None);
    let summary = TrainSummary {
        seed: s.cfg.seed,
        heldout_ce: heldout_ce(&outcome.model, &heldout),
        margin_hits: hits,
        margin_positions: total,
    };
    if !summary.heldout_ce.is_finite() {
        return Err(Error::Numeric("held-out cross-entropy is not finite".into()));
    }
    s.write("model.json", &(outcome.model.to_json() + "\n"))?;
    s.write("trace.csv", &trace_csv(&outcome.trace))?;
    s.write("train_summary.json", &to_json(&summary)?)
}

fn to_json<T: Serialize>(v: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(v).map_err(|e| Error::Parse(e.to_string()))? + "\n")
}

fn decode_rows(
    s: &mut Session,
    unguided: bool,
    generator: Option<&Path>,
    model: Option<&Path>,
) -> Result<Vec<DecodeRow>> {
    let gen = s.generator(generator, None)?;
    let pairs = s.pairs();
    let spec = &s.spec;
    if unguided {
        let d = s.cfg.decode_config(spec, 0.0, 0);
        return Ok(pairs
            .par_iter()
            .map(|&(ctx, t)| {
                let hyps = beam_search(&gen, ctx, d.beam_width, d.max_len, d.pool);
                DecodeRow::from_hypotheses(spec, ctx, t, 0.0, &hyps)
            })
            .collect::<Result<Vec<_>>>()?
            .concat());
    }
    let clf = s.classifier(model, &gen)?;
    let spec = &s.spec;
    let jobs: Vec<(usize, usize, f64)> =
        pairs.iter().flat_map(|&(c, t)| s.cfg.decode.lambdas.iter().map(move |&l| (c, t, l))).collect();
    Ok(jobs
        .par_iter()
        .map(|&(ctx, t, l)| {
            let hyps = guided_beam_search(&gen, &clf, ctx, &s.cfg.decode_config(spec, l, t))?;
            DecodeRow::from_hypotheses(spec, ctx, t, l, &hyps)
        })
        .collect::<Result<Vec<_>>>()?
        .concat())
}

#[derive(Debug, Serialize)]
struct LookaheadSummary {
    context: usize,
    target: usize,
    seed: u64,
    chosen_lambda: f64,
    mean_scores: Vec<(f64, f64)>,
    satisfaction_rate: f64,
    distinct_sequences: usize,
}

fn lookahead(s: &mut Session, generator: Option<&Path>, model: Option<&Path>) -> Result<()> {
    let gen = s.generator(generator, None)?;
    let clf = s.classifier(model, &gen)?;
    let la = &s.cfg.lookahead;
    let results = s
        .pairs()
        .par_iter()
        .map(|&(ctx, t)| {
            let base = s.cfg.decode_config(&s.spec, 1.0, t);
            let run_seed = seed::derive(s.cfg.seed, seed::stream2(ctx as u64 + 1, t as u64 + 1));
            let r = lookahead_decode(&s.spec, &gen, &clf, ctx, la.budget, &la.lambdas, la.n_explore, &base, run_seed)?;
            Ok((ctx, t, r))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut csv = String::from("context,target,lambda,exploration,satisfied,tokens\n");
    let mut summaries = Vec::new();
    for (ctx, t, r) in &results {
        for smp in &r.samples {
            let toks: Vec<String> = smp.tokens.iter().map(|x| x.to_string()).collect();
            csv.push_str(&format!(
                "{ctx},{t},{},{},{},{}\n",
                smp.lambda,
                u8::from(smp.exploration),
                u8::from(smp.satisfied),
                toks.join(" ")
            ));
        }
        summaries.push(LookaheadSummary {
            context: *ctx,
            target: *t,
            seed: s.cfg.seed,
            chosen_lambda: r.chosen_lambda,
            mean_scores: r.mean_scores.clone(),
            satisfaction_rate: r.satisfaction_rate(),
            distinct_sequences: r.multiplicity().len(),
        });
    }
    s.write("lookahead.csv", &csv)?;
    s.write("lookahead.json", &to_json(&summaries)?)
}

fn toy_verify(s: &mut Session) -> Result<()> {
    let t = s.cfg.toy.clone();
    let rows = nmin_table(&t.etas, t.eps, t.delta, t.trials, s.cfg.seed, t.n_override.as_deref())?;
    s.write("nmin.csv", &nmin_table_csv(&rows))?;
    s.write("thresholds.csv", &practical_threshold_csv(&t.delta_conds, t.threshold_delta)?)
}

fn reachability(s: &mut Session) -> Result<()> {
    let r = s.cfg.reachability.clone();
    let master = s.cfg.seed;
    let records = (0..r.instances)
        .into_par_iter()
        .map(|i| {
            let inst = random_instance(
                seed::derive(master, seed::stream2(i + 1, 0)),
                r.vocab_size,
                r.seq_len,
                r.beam_width,
                r.c1,
                r.c2,
            )?;
            reachability_record(&inst, i, r.margin, r.grid_step)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = String::new();
    for rec in &records {
        out.push_str(&serde_json::to_string(rec).map_err(|e| Error::Parse(e.to_string()))?);
        out.push('\n');
    }
    s.write("reachability.jsonl", &out)
}

fn ablate(s: &mut Session, generator: Option<&Path>, model: Option<&Path>) -> Result<()> {
    let gen = s.generator(generator, None)?;
    let clf = s.classifier(model, &gen)?;
    let a = s.cfg.ablate.clone();
    let v = s.spec.vocab_size();
    let base = s.cfg.decode_config(&s.spec, 1.0, 0);
    let mut settings: Vec<(&str, f64, usize, usize)> = Vec::new();
    settings.extend(a.lambdas.iter().map(|&l| ("lambda", l, base.onset, base.pool)));
    settings.extend(a.onsets.iter().map(|&o| ("onset", base.lambda, o.min(base.max_len), base.pool)));
    settings.extend(a.pools.iter().map(|&p| ("pool", base.lambda, base.onset, p.min(v))));
    let pairs = s.pairs();
    let targets = s.target_map();
    let spec = &s.spec;
    let master = s.cfg.seed;
    let rows = settings
        .par_iter()
        .enumerate()
        .map(|(i, &(sweep, lambda, onset, pool))| {
            let mut results = Vec::new();
            let mut hits = 0usize;
            let mut total = 0usize;
            for &(ctx, t) in &pairs {
                let cfg = crate::DecodeConfig { lambda, onset, pool, target_label: t, ..base.clone() };
                let hyps = guided_beam_search(&gen, &clf, ctx, &cfg)?;
                let rows = DecodeRow::from_hypotheses(spec, ctx, t, lambda, &hyps)?;
                results.push(SteeringResult {
                    context: ctx,
                    target_class: t,
                    samples: rows.into_iter().map(|r| (r.tokens, r.rank, r.satisfied)).collect(),
                });
                if a.n_samples > 0 {
                    let mut rng = seed::rng(seed::derive(master, seed::stream2(i as u64 + 1, (ctx * 1000 + t) as u64)));
                    for _ in 0..a.n_samples {
                        let tokens = crate::decode::guided_sample(&gen, &clf, ctx, &cfg, &mut rng);
                        hits += usize::from(spec.property_predicate(ctx, t, &tokens)?);
                        total += 1;
                    }
                }
            }
            let beam = mean_satisfaction(&results);
            let breadth = steering_breadth(&results, &targets)?;
            let sampled = (total > 0).then(|| hits as f64 / total as f64);
            Ok(format!("{sweep},{lambda},{onset},{pool},{},{breadth},{}\n", opt(beam), opt(sampled)))
        })
        .collect::<Result<Vec<String>>>()?;
    let mut csv = String::from("sweep,lambda,onset,pool,beam_satisfaction,breadth,sampled_satisfaction\n");
    csv.extend(rows);
    s.write("ablate.csv", &csv)
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}

fn report(s: &mut Session, decode: Option<&Path>, generator: Option<&Path>, model: Option<&Path>) -> Result<()> {
    let rows = match decode {
        Some(p) => {
            let text = s.read_input(p)?;
            read_decode_csv(&text)?
        }
        None => decode_rows(s, false, generator, model)?,
    };
    let groups = group_rows(&rows);
    let mut lambdas: Vec<f64> = groups.keys().map(|k| f64::from_bits(k.2)).collect();
    lambdas.sort_by(f64::total_cmp);
    lambdas.dedup();
    let targets = s.target_map();
    let wanted: BTreeSet<&str> = s.cfg.report.metrics.iter().map(String::as_str).collect();
    let mut out = Vec::new();
    for &l in &lambdas {
        let group = format!("lambda={l}");
        let results: Vec<SteeringResult> =
            groups.iter().filter(|(k, _)| k.2 == l.to_bits()).map(|(_, r)| r.clone()).collect();
        let row = |metric: &str, value: Option<f64>, n: usize| MetricRow {
            metric: metric.to_string(),
            context_group: group.clone(),
            value,
            n,
        };
        if wanted.contains("breadth") {
            out.push(row("breadth", Some(steering_breadth(&results, &targets)?), results.len()));
        }
        if wanted.contains("rank") {
            let e = rank_efficiency(&results);
            out.push(row("rank_mean", e.mean_rank, e.n));
            out.push(row("rank_top5", e.top5, e.n));
            out.push(row("rank_top10", e.top10, e.n));
        }
        if wanted.contains("satisfaction") {
            out.push(row("satisfaction", mean_satisfaction(&results), results.len()));
        }
        if wanted.contains("jaccard") && l != 0.0 {
            let mut sum = 0.0;
            let mut n = 0usize;
            for r in &results {
                if let Some(base) = groups.get(&(r.context, r.target_class, 0f64.to_bits())) {
                    let set = |x: &SteeringResult| x.samples.iter().map(|s| s.0.clone()).collect::<BTreeSet<_>>();
                    sum += jaccard_overlap(&set(r), &set(base));
                    n += 1;
                }
            }
            out.push(row("jaccard_vs_unguided", (n > 0).then(|| sum / n as f64), n));
        }
    }
    s.write("metrics.csv", &metrics_csv(&out))
}
