//! `confkit` command-line interface.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or validation error,
//! 3 numeric failure.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use confkit::calibrate::{fit_pwlm, PwlMapping, DEFAULT_BINS, DEFAULT_SEGMENTS};
use confkit::data_model::{load_corpus, Utterance};
use confkit::features::FeatureStats;
use confkit::json;
use confkit::lm::{read_text, train_ngram, NGramModel, DEFAULT_DISCOUNT, DEFAULT_ORDER};
use confkit::metrics::{report, ScoredSet, DEFAULT_ECE_BINS};
use confkit::net::{word_confidence, ConfidenceModel, ModelKind, TrainData};
use confkit::pipeline::{
    fit_model, label_utterance, run_experiment, ExperimentPlan, Featurizer, LabeledSet, NetConfig, ReferenceSource,
};
use confkit::select::{select_extremes, Candidate, DEFAULT_K};
use confkit::simulate::Scenario;
use confkit::Error;

#[derive(Debug, Parser)]
#[command(name = "confkit", version, about = "Confidence estimation for sequence recognisers")]
struct Cli {
    /// Emit JSON log lines on stderr.
    #[arg(long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate corpora from a simulation scenario.
    Simulate(SimulateArgs),
    /// Align n-best lists with references and write correctness labels.
    Label(LabelArgs),
    /// Train an n-gram language model and write it as ARPA.
    TrainLm(TrainLmArgs),
    /// Train a token-level confidence model.
    TrainCem(TrainArgs),
    /// Train an utterance-level confidence model.
    TrainRebm(TrainArgs),
    /// Score a corpus with a trained model or the softmax baseline.
    Score(ScoreArgs),
    /// Compute AUC, EER, NCE and ECE of a score file.
    Metrics(MetricsArgs),
    /// Fit or apply a piecewise-linear calibration mapping.
    #[command(subcommand)]
    Calibrate(CalibrateCommand),
    /// Pick the most and least confident utterances.
    Select(SelectArgs),
    /// Run an experiment plan.
    #[command(subcommand)]
    Experiment(ExperimentCommand),
}

#[derive(Debug, Args)]
struct SeedArg {
    /// Random seed; falls back to CONFKIT_SEED.
    #[arg(long, env = "CONFKIT_SEED")]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// Scenario JSON file.
    #[arg(long)]
    scenario: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    seed: SeedArg,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum RefArg {
    Gold,
    Pseudo,
}

impl From<RefArg> for ReferenceSource {
    fn from(r: RefArg) -> Self {
        match r {
            RefArg::Gold => ReferenceSource::Gold,
            RefArg::Pseudo => ReferenceSource::Pseudo,
        }
    }
}

#[derive(Debug, Args)]
struct LabelArgs {
    /// Corpus JSONL.
    #[arg(long)]
    corpus: PathBuf,
    /// Reference to align against.
    #[arg(long, value_enum, default_value = "gold")]
    reference: RefArg,
    /// Output JSONL, one line per utterance.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TrainLmArgs {
    /// Text file, one sentence of token ids per line.
    #[arg(long)]
    text: PathBuf,
    #[arg(long, default_value_t = DEFAULT_ORDER)]
    order: usize,
    #[arg(long, default_value_t = DEFAULT_DISCOUNT)]
    discount: f64,
    /// Output ARPA file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Gold-labelled in-domain training corpus.
    #[arg(long)]
    train: PathBuf,
    /// OOD corpus mixed into every minibatch.
    #[arg(long)]
    ood: Option<PathBuf>,
    /// Reference used to label the OOD corpus.
    #[arg(long, value_enum, default_value = "pseudo")]
    ood_reference: RefArg,
    /// In-domain LM (ARPA); adds the lm_in column.
    #[arg(long)]
    lm_in: Option<PathBuf>,
    /// OOD LM (ARPA); adds the lm_ood column.
    #[arg(long)]
    lm_ood: Option<PathBuf>,
    /// JSON file with network and optimizer settings; flags win.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    ood_mix_ratio: Option<f64>,
    #[command(flatten)]
    seed: SeedArg,
    /// Output model JSON.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ScoreArgs {
    /// Corpus JSONL to score.
    #[arg(long)]
    corpus: PathBuf,
    /// Trained model; without it the softmax baseline is used.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    lm_in: Option<PathBuf>,
    #[arg(long)]
    lm_ood: Option<PathBuf>,
    /// Output score JSON.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Level {
    Token,
    Word,
    Utterance,
}

#[derive(Debug, Args)]
struct LabelSource {
    /// Score file from `score`.
    #[arg(long)]
    scores: PathBuf,
    /// Label source and corpus, e.g. `--labels from-corpus test.jsonl`.
    #[arg(long, num_args = 2, value_names = ["SOURCE", "CORPUS"], required = true)]
    labels: Vec<String>,
    #[arg(long, value_enum, default_value = "word")]
    level: Level,
}

#[derive(Debug, Args)]
struct MetricsArgs {
    #[command(flatten)]
    source: LabelSource,
    #[arg(long, default_value_t = DEFAULT_ECE_BINS)]
    bins: usize,
    /// Also write the report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum CalibrateCommand {
    /// Fit a mapping on dev scores.
    Fit(CalibrateFitArgs),
    /// Map every score in a score file.
    Apply(CalibrateApplyArgs),
}

#[derive(Debug, Args)]
struct CalibrateFitArgs {
    #[command(flatten)]
    source: LabelSource,
    #[arg(long, default_value_t = DEFAULT_SEGMENTS)]
    segments: usize,
    #[arg(long, default_value_t = DEFAULT_BINS)]
    bins: usize,
    /// Output mapping JSON.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct CalibrateApplyArgs {
    #[arg(long)]
    mapping: PathBuf,
    #[arg(long)]
    scores: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SelectArgs {
    /// Score file with utterance scores.
    #[arg(long)]
    scores: PathBuf,
    /// Corpus providing hypotheses and references.
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, value_enum, default_value = "gold")]
    reference: RefArg,
    #[arg(long, default_value_t = DEFAULT_K)]
    k: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Subcommand)]
enum ExperimentCommand {
    /// Train and evaluate the toggle grid of a plan.
    Run(ExperimentRunArgs),
}

#[derive(Debug, Args)]
struct ExperimentRunArgs {
    /// Plan JSON; relative corpus paths resolve against its directory.
    plan: PathBuf,
    /// Results directory.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    seed: SeedArg,
}

/// Scores of one n-best entry. Only the fields the scorer produces are set.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
struct HypScores {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    token: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    word: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    utterance: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct UttScores {
    utt_id: String,
    hypotheses: Vec<HypScores>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ScoreFile {
    source: String,
    utterances: Vec<UttScores>,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Core(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

struct JsonLogger;

impl log::Log for JsonLogger {
    fn enabled(&self, _: &log::Metadata) -> bool {
        true
    }

    fn log(&self, record: &log::Record) {
        let msg = record.args().to_string();
        let mut obj = match serde_json::from_str::<serde_json::Value>(&msg) {
            Ok(serde_json::Value::Object(m)) => m,
            _ => {
                let mut m = serde_json::Map::new();
                m.insert("message".into(), msg.into());
                m
            }
        };
        obj.insert("level".into(), record.level().as_str().into());
        obj.insert("target".into(), record.target().into());
        eprintln!("{}", serde_json::Value::Object(obj));
    }

    fn flush(&self) {}
}

fn seed_or_default(s: &SeedArg) -> u64 {
    s.seed.unwrap_or(0)
}

fn load_lm(path: Option<&Path>) -> CliResult<Option<NGramModel>> {
    Ok(path.map(NGramModel::load).transpose()?)
}

fn cmd_simulate(a: &SimulateArgs) -> CliResult<()> {
    let mut sc = Scenario::load(&a.scenario)?;
    if let Some(seed) = a.seed.seed {
        sc.seed = seed;
    }
    for p in sc.write(&a.out)? {
        log::info!("{}", serde_json::json!({"event": "wrote", "path": p}));
    }
    Ok(())
}

#[derive(Serialize)]
struct LabelLine<'a> {
    utt_id: &'a str,
    hypotheses: Vec<LabelEntry>,
}

#[derive(Serialize)]
struct LabelEntry {
    token_labels: Vec<bool>,
    word_labels: Vec<bool>,
    utterance_label: bool,
}

fn cmd_label(a: &LabelArgs) -> CliResult<()> {
    let (_, utts) = load_corpus(&a.corpus)?;
    let mut out = String::new();
    for u in &utts {
        let hypotheses = label_utterance(u, a.reference.into())?
            .into_iter()
            .map(|l| LabelEntry {
                token_labels: l.token_labels,
                word_labels: l.word_labels,
                utterance_label: l.utterance_label,
            })
            .collect();
        out.push_str(&json::to_line(&LabelLine {
            utt_id: &u.utt_id,
            hypotheses,
        }));
        out.push('\n');
    }
    json::write_atomic(&a.out, out.as_bytes())?;
    Ok(())
}

fn cmd_train_lm(a: &TrainLmArgs) -> CliResult<()> {
    let text = read_text(&a.text)?;
    train_ngram(&text, a.order, a.discount)?.save(&a.out)?;
    Ok(())
}

/// Network settings: defaults, then the config file, then flags.
fn net_config(a: &TrainArgs) -> CliResult<(NetConfig, u64)> {
    #[derive(Deserialize)]
    struct FileConfig {
        #[serde(flatten)]
        net: NetConfig,
        seed: Option<u64>,
    }
    let (mut cfg, mut seed) = match &a.config {
        Some(p) => {
            let f: FileConfig = json::read_json(p)?;
            (f.net, f.seed)
        }
        None => (NetConfig::default(), None),
    };
    if let Some(v) = a.layers {
        cfg.layers = v;
    }
    if let Some(v) = a.hidden {
        cfg.hidden = v;
    }
    if let Some(v) = a.learning_rate {
        cfg.learning_rate = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.ood_mix_ratio {
        cfg.ood_mix_ratio = v;
    }
    if a.seed.seed.is_some() {
        seed = a.seed.seed;
    }
    Ok((cfg, seed.unwrap_or(0)))
}

fn cmd_train(a: &TrainArgs, kind: ModelKind) -> CliResult<()> {
    let (cfg, seed) = net_config(a)?;
    let (header, train_utts) = load_corpus(&a.train)?;
    let lm_in = load_lm(a.lm_in.as_deref())?;
    let lm_ood = load_lm(a.lm_ood.as_deref())?;
    let fz = Featurizer::new(&header, lm_in.as_ref(), lm_ood.as_ref());
    let train_set = LabeledSet::build(&train_utts, ReferenceSource::Gold, &fz)?;
    let ood_set = match &a.ood {
        Some(p) => {
            let (h, utts) = load_corpus(p)?;
            if h.topk != header.topk || h.extra_dims != header.extra_dims {
                return Err(Error::Schema("OOD corpus feature layout differs from the training corpus".into()).into());
            }
            Some(LabeledSet::build(&utts, a.ood_reference.into(), &fz)?)
        }
        None => None,
    };
    let stats = FeatureStats::compute(fz.schema.width(), &train_set.matrices)?;
    let pools = TrainData {
        in_domain: train_set.examples(kind),
        ood: ood_set.map(|s| s.examples(kind)).unwrap_or_default(),
    };
    let (model, rep) = fit_model(kind, &cfg, fz.schema, stats, &pools, seed)?;
    log::info!(
        "{}",
        serde_json::json!({"event": "trained", "initial_loss": rep.initial_loss, "loss_trace": rep.loss_trace, "ood_seen": rep.ood_seen})
    );
    model.save(&a.out)?;
    Ok(())
}

fn score_utterance(u: &Utterance, model: Option<&ConfidenceModel>, fz: &Featurizer<'_>) -> CliResult<UttScores> {
    let mut hypotheses = Vec::with_capacity(u.nbest.len());
    for h in &u.nbest {
        let flags = h.word_starts();
        let entry = match model {
            None => {
                let token: Vec<f64> = h.features.iter().map(|f| f.log_posterior.exp()).collect();
                let utterance = if h.is_empty() {
                    0.0
                } else {
                    (h.features.iter().map(|f| f.log_posterior).sum::<f64>() / h.len() as f64).exp()
                };
                HypScores {
                    word: Some(word_confidence(&token, &flags)?),
                    token: Some(token),
                    utterance: Some(utterance),
                }
            }
            Some(m) => {
                let x = fz.features(h)?;
                match m.kind {
                    ModelKind::Cem => {
                        let token = m.forward_cem(&x)?;
                        HypScores {
                            word: Some(word_confidence(&token, &flags)?),
                            token: Some(token),
                            utterance: None,
                        }
                    }
                    ModelKind::Rebm => HypScores {
                        utterance: Some(m.forward_rebm(&x)?),
                        ..HypScores::default()
                    },
                }
            }
        };
        hypotheses.push(entry);
    }
    Ok(UttScores {
        utt_id: u.utt_id.clone(),
        hypotheses,
    })
}

fn cmd_score(a: &ScoreArgs) -> CliResult<()> {
    let (header, utts) = load_corpus(&a.corpus)?;
    let model = a.model.as_deref().map(ConfidenceModel::load).transpose()?;
    let lm_in = load_lm(a.lm_in.as_deref())?;
    let lm_ood = load_lm(a.lm_ood.as_deref())?;
    let fz = match &model {
        Some(m) => {
            if m.schema.topk != header.topk || m.schema.extra_dims != header.extra_dims {
                return Err(Error::Schema("corpus feature layout differs from the model schema".into()).into());
            }
            Featurizer::with_schema(m.schema, lm_in.as_ref(), lm_ood.as_ref())
        }
        None => Featurizer::new(&header, None, None),
    };
    let source = match &model {
        Some(m) if m.kind == ModelKind::Cem => "cem",
        Some(_) => "rebm",
        None => "softmax",
    };
    let utterances = utts
        .iter()
        .map(|u| score_utterance(u, model.as_ref(), &fz))
        .collect::<CliResult<Vec<_>>>()?;
    json::write_json(
        &a.out,
        &ScoreFile {
            source: source.into(),
            utterances,
        },
    )?;
    Ok(())
}

/// Pairs scores with labels from the corpus at the requested level.
fn scored_set(src: &LabelSource) -> CliResult<ScoredSet> {
    let reference = match src.labels[0].as_str() {
        "from-corpus" => ReferenceSource::Gold,
        "from-pseudo" => ReferenceSource::Pseudo,
        other => {
            return Err(CliError::Usage(format!(
                "unknown label source `{other}` (expected from-corpus or from-pseudo)"
            )))
        }
    };
    let scores: ScoreFile = json::read_json(&src.scores)?;
    let (_, utts) = load_corpus(&src.labels[1])?;
    let by_id: BTreeMap<&str, &Utterance> = utts.iter().map(|u| (u.utt_id.as_str(), u)).collect();
    let mut set = ScoredSet::default();
    for us in &scores.utterances {
        let u = by_id
            .get(us.utt_id.as_str())
            .ok_or_else(|| Error::invalid(format!("utterance `{}` not in the label corpus", us.utt_id)))?;
        let labels = label_utterance(u, reference)?;
        if labels.len() != us.hypotheses.len() {
            return Err(Error::invalid(format!("`{}`: hypothesis count differs from the corpus", us.utt_id)).into());
        }
        for (h, l) in us.hypotheses.iter().zip(labels) {
            let missing = |what: &str| Error::invalid(format!("`{}`: score file has no {what} scores", us.utt_id));
            let (s, y): (Vec<f64>, Vec<bool>) = match src.level {
                Level::Token => (h.token.clone().ok_or_else(|| missing("token"))?, l.token_labels),
                Level::Word => (h.word.clone().ok_or_else(|| missing("word"))?, l.word_labels),
                Level::Utterance => (vec![h.utterance.ok_or_else(|| missing("utterance"))?], vec![l.utterance_label]),
            };
            if s.len() != y.len() {
                return Err(Error::invalid(format!("`{}`: score and label counts differ", us.utt_id)).into());
            }
            for (s, y) in s.into_iter().zip(y) {
                set.push(s, y);
            }
        }
    }
    Ok(set)
}

fn cmd_metrics(a: &MetricsArgs) -> CliResult<()> {
    let set = scored_set(&a.source)?;
    let mut r = report(&set);
    r.ece = confkit::metrics::ece(&set, a.bins).ok();
    let text = json::to_pretty(&r);
    println!("{text}");
    if let Some(p) = &a.out {
        json::write_atomic(p, format!("{text}\n").as_bytes())?;
    }
    Ok(())
}

fn cmd_calibrate(c: &CalibrateCommand) -> CliResult<()> {
    match c {
        CalibrateCommand::Fit(a) => {
            let set = scored_set(&a.source)?;
            json::write_json(&a.out, &fit_pwlm(&set, a.segments, a.bins)?)?;
        }
        CalibrateCommand::Apply(a) => {
            let map: PwlMapping = json::read_json(&a.mapping)?;
            map.validate()?;
            let mut scores: ScoreFile = json::read_json(&a.scores)?;
            for h in scores.utterances.iter_mut().flat_map(|u| u.hypotheses.iter_mut()) {
                for v in h.token.iter_mut().chain(h.word.iter_mut()).flatten() {
                    *v = map.apply(*v);
                }
                if let Some(v) = h.utterance.as_mut() {
                    *v = map.apply(*v);
                }
            }
            scores.source.push_str("+pwlm");
            json::write_json(&a.out, &scores)?;
        }
    }
    Ok(())
}

fn cmd_select(a: &SelectArgs) -> CliResult<()> {
    let scores: ScoreFile = json::read_json(&a.scores)?;
    let (_, utts) = load_corpus(&a.corpus)?;
    let by_id: BTreeMap<&str, &Utterance> = utts.iter().map(|u| (u.utt_id.as_str(), u)).collect();
    let source: ReferenceSource = a.reference.into();
    let mut cands = Vec::with_capacity(scores.utterances.len());
    for us in &scores.utterances {
        let u = by_id
            .get(us.utt_id.as_str())
            .ok_or_else(|| Error::invalid(format!("utterance `{}` not in the corpus", us.utt_id)))?;
        let confidence = us
            .hypotheses
            .first()
            .and_then(|h| h.utterance)
            .ok_or_else(|| Error::invalid(format!("`{}`: no utterance score", us.utt_id)))?;
        let reference = match source {
            ReferenceSource::Gold => u.reference.clone(),
            ReferenceSource::Pseudo => u.pseudo_reference.clone(),
        }
        .ok_or_else(|| Error::invalid(format!("`{}`: requested reference is missing", u.utt_id)))?;
        cands.push(Candidate {
            utt_id: u.utt_id.clone(),
            confidence,
            hypothesis: u.nbest[0].tokens.clone(),
            reference,
        });
    }
    let rep = select_extremes(&cands, a.k, source == ReferenceSource::Pseudo)?;
    json::write_json(&a.out, &rep)?;
    Ok(())
}

fn cmd_experiment(c: &ExperimentCommand) -> CliResult<()> {
    let ExperimentCommand::Run(a) = c;
    let mut plan = ExperimentPlan::load(&a.plan)?;
    if a.seed.seed.is_some() {
        plan.seed = seed_or_default(&a.seed);
    }
    let grid = run_experiment(&plan, &a.out)?;
    log::info!("{}", serde_json::json!({"event": "experiment_done", "cells": grid.cells.len()}));
    Ok(())
}

fn run(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Label(a) => cmd_label(a),
        Command::TrainLm(a) => cmd_train_lm(a),
        Command::TrainCem(a) => cmd_train(a, ModelKind::Cem),
        Command::TrainRebm(a) => cmd_train(a, ModelKind::Rebm),
        Command::Score(a) => cmd_score(a),
        Command::Metrics(a) => cmd_metrics(a),
        Command::Calibrate(c) => cmd_calibrate(c),
        Command::Select(a) => cmd_select(a),
        Command::Experiment(c) => cmd_experiment(c),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if cli.verbose {
        static LOGGER: JsonLogger = JsonLogger;
        if log::set_logger(&LOGGER).is_ok() {
            log::set_max_level(log::LevelFilter::Info);
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Core(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numeric() { 3 } else { 2 })
        }
    }
}
