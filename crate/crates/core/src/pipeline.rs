//! End-to-end experiments: train language models, label n-best lists, train
//! CEM and R-EBM models over the toggle grid, then evaluate, calibrate and
//! select on the held-out sets.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::align::label_hypothesis;
use crate::calibrate::{fit_pwlm, PwlMapping, DEFAULT_BINS, DEFAULT_SEGMENTS};
use crate::data_model::{load_corpus, CorpusHeader, Hypothesis, LabeledHypothesis, Token, Utterance};
use crate::error::{Error, Result};
use crate::features::{assemble, FeatureMatrix, FeatureSchema, FeatureStats};
use crate::json;
use crate::lm::{read_text, train_ngram, NGramModel, DEFAULT_DISCOUNT, DEFAULT_ORDER};
use crate::metrics::{reliability_bins, report, Bin, MetricsReport, ScoredSet};
use crate::net::{
    train, word_confidence, ConfidenceModel, Dims, Example, ModelKind, TrainConfig, TrainData, TrainReport,
};
use crate::rng::derive_seed;
use crate::select::{select_extremes, Candidate, SelectionReport, DEFAULT_K};

/// Corpus locations; relative paths resolve against the plan file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusPaths {
    pub in_train: PathBuf,
    #[serde(default)]
    pub in_dev: Option<PathBuf>,
    pub in_test: PathBuf,
    /// In-domain LM text; the training references when unset.
    #[serde(default)]
    pub in_text: Option<PathBuf>,
    #[serde(default)]
    pub ood_unlabeled: Option<PathBuf>,
    #[serde(default)]
    pub ood_dev: Option<PathBuf>,
    #[serde(default)]
    pub ood_test: Option<PathBuf>,
    #[serde(default)]
    pub ood_text: Option<PathBuf>,
}

impl CorpusPaths {
    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.in_train);
        fix(&mut self.in_test);
        for p in [
            &mut self.in_dev,
            &mut self.in_text,
            &mut self.ood_unlabeled,
            &mut self.ood_dev,
            &mut self.ood_test,
            &mut self.ood_text,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LmConfig {
    pub order: usize,
    pub discount: f64,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            order: DEFAULT_ORDER,
            discount: DEFAULT_DISCOUNT,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetConfig {
    pub layers: usize,
    pub hidden: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub ood_mix_ratio: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            layers: 2,
            hidden: 32,
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
            epochs: t.epochs,
            ood_mix_ratio: t.ood_mix_ratio,
        }
    }
}

impl NetConfig {
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            epochs: self.epochs,
            seed,
            ood_mix_ratio: self.ood_mix_ratio,
            ..TrainConfig::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationConfig {
    pub segments: usize,
    pub bins: usize,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            segments: DEFAULT_SEGMENTS,
            bins: DEFAULT_BINS,
        }
    }
}

fn default_k() -> usize {
    DEFAULT_K
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub corpora: CorpusPaths,
    /// Mix pseudo-labelled OOD n-best lists into training.
    pub use_pseudo: bool,
    /// Add the OOD language-model column.
    pub use_ood_lm: bool,
    #[serde(default)]
    pub lm: LmConfig,
    #[serde(default)]
    pub cem: NetConfig,
    #[serde(default)]
    pub rebm: NetConfig,
    #[serde(default)]
    pub calibration: CalibrationConfig,
    #[serde(default = "default_k")]
    pub select_k: usize,
    pub seed: u64,
}

impl ExperimentPlan {
    pub fn load(path: &Path) -> Result<Self> {
        let mut plan: Self = json::read_json(path)?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        plan.corpora.resolve(base);
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        if self.use_ood_lm && self.corpora.ood_text.is_none() {
            return Err(Error::invalid("use_ood_lm requires corpora.ood_text"));
        }
        if self.use_pseudo && self.corpora.ood_unlabeled.is_none() {
            return Err(Error::invalid("use_pseudo requires corpora.ood_unlabeled"));
        }
        if self.select_k == 0 {
            return Err(Error::invalid("select_k must be positive"));
        }
        for net in [&self.cem, &self.rebm] {
            Dims::new(net.layers, net.hidden, 1)?;
            net.train_config(0).validate()?;
        }
        Ok(())
    }

    /// Toggle settings covered by the grid: every combination up to the
    /// enabled toggles.
    pub fn cells(&self) -> Vec<Toggles> {
        let mut out = Vec::new();
        for use_pseudo in [false, true] {
            for use_ood_lm in [false, true] {
                if (use_pseudo && !self.use_pseudo) || (use_ood_lm && !self.use_ood_lm) {
                    continue;
                }
                out.push(Toggles { use_pseudo, use_ood_lm });
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Toggles {
    pub use_pseudo: bool,
    pub use_ood_lm: bool,
}

impl Toggles {
    pub fn name(&self) -> String {
        format!("pseudo{}-lm{}", u8::from(self.use_pseudo), u8::from(self.use_ood_lm))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub header: CorpusHeader,
    pub utterances: Vec<Utterance>,
}

impl Corpus {
    pub fn load(path: &Path) -> Result<Self> {
        let (header, utterances) = load_corpus(path)?;
        Ok(Self { header, utterances })
    }
}

/// A named evaluation set: gold-referenced test data plus optional dev data
/// for calibration.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSet {
    pub name: String,
    pub test: Corpus,
    pub dev: Option<Corpus>,
}

#[derive(Debug, Clone)]
pub struct ExperimentData {
    pub header: CorpusHeader,
    pub in_train: Corpus,
    pub ood_unlabeled: Option<Corpus>,
    pub evals: Vec<EvalSet>,
    pub lm_in: NGramModel,
    pub lm_ood: Option<NGramModel>,
}

pub const IN_DOMAIN: &str = "in_domain";
pub const OOD: &str = "ood";

fn references(c: &Corpus) -> Vec<Vec<u32>> {
    c.utterances
        .iter()
        .filter_map(|u| u.reference.as_ref().map(|r| r.iter().map(|t| t.id).collect()))
        .collect()
}

impl ExperimentData {
    pub fn load(plan: &ExperimentPlan) -> Result<Self> {
        plan.validate()?;
        let c = &plan.corpora;
        let opt = |p: &Option<PathBuf>| p.as_deref().map(Corpus::load).transpose();
        let in_train = Corpus::load(&c.in_train)?;
        let in_text = match &c.in_text {
            Some(p) => read_text(p)?,
            None => references(&in_train),
        };
        let ood_text = c.ood_text.as_deref().map(read_text).transpose()?;
        let mut evals = vec![EvalSet {
            name: IN_DOMAIN.into(),
            test: Corpus::load(&c.in_test)?,
            dev: opt(&c.in_dev)?,
        }];
        if let Some(test) = opt(&c.ood_test)? {
            evals.push(EvalSet {
                name: OOD.into(),
                test,
                dev: opt(&c.ood_dev)?,
            });
        }
        Self::new(plan, in_train, opt(&c.ood_unlabeled)?, evals, &in_text, ood_text.as_deref())
    }

    pub fn new(
        plan: &ExperimentPlan,
        in_train: Corpus,
        ood_unlabeled: Option<Corpus>,
        evals: Vec<EvalSet>,
        in_text: &[Vec<u32>],
        ood_text: Option<&[Vec<u32>]>,
    ) -> Result<Self> {
        let header = in_train.header.clone();
        let corpora = ood_unlabeled
            .iter()
            .chain(evals.iter().flat_map(|e| std::iter::once(&e.test).chain(e.dev.as_ref())));
        for c in corpora {
            if c.header.topk != header.topk || c.header.extra_dims != header.extra_dims {
                return Err(Error::Schema(
                    "all corpora must share the feature layout of the training corpus".into(),
                ));
            }
        }
        let lm_in = train_ngram(in_text, plan.lm.order, plan.lm.discount)?;
        let lm_ood = if plan.use_ood_lm {
            let text = ood_text.ok_or_else(|| Error::invalid("use_ood_lm requires OOD text"))?;
            Some(train_ngram(text, plan.lm.order, plan.lm.discount)?)
        } else {
            None
        };
        if plan.use_pseudo && ood_unlabeled.is_none() {
            return Err(Error::invalid("use_pseudo requires an OOD unlabeled corpus"));
        }
        Ok(Self {
            header,
            in_train,
            ood_unlabeled,
            evals,
            lm_in,
            lm_ood,
        })
    }

    pub fn featurizer(&self, toggles: Toggles) -> Featurizer<'_> {
        let lm_ood = if toggles.use_ood_lm { self.lm_ood.as_ref() } else { None };
        Featurizer::new(&self.header, Some(&self.lm_in), lm_ood)
    }
}

/// Feature assembly with a fixed schema and fixed language models.
#[derive(Debug, Clone, Copy)]
pub struct Featurizer<'a> {
    pub schema: FeatureSchema,
    pub lm_in: Option<&'a NGramModel>,
    pub lm_ood: Option<&'a NGramModel>,
}

impl<'a> Featurizer<'a> {
    /// LM columns are present exactly for the supplied models.
    pub fn new(header: &CorpusHeader, lm_in: Option<&'a NGramModel>, lm_ood: Option<&'a NGramModel>) -> Self {
        Self {
            schema: FeatureSchema::from_header(header, lm_in.is_some(), lm_ood.is_some()),
            lm_in,
            lm_ood,
        }
    }

    /// Uses `schema` as given; LM columns without a model fall back to the
    /// values stored in the corpus.
    pub fn with_schema(schema: FeatureSchema, lm_in: Option<&'a NGramModel>, lm_ood: Option<&'a NGramModel>) -> Self {
        Self { schema, lm_in, lm_ood }
    }

    pub fn features(&self, hyp: &Hypothesis) -> Result<FeatureMatrix> {
        assemble(hyp, self.lm_in, self.lm_ood, &self.schema)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceSource {
    Gold,
    Pseudo,
}

/// Labels every n-best entry against the chosen reference.
pub fn label_utterance(u: &Utterance, source: ReferenceSource) -> Result<Vec<LabeledHypothesis>> {
    let reference = match source {
        ReferenceSource::Gold => u.reference.as_ref(),
        ReferenceSource::Pseudo => u.pseudo_reference.as_ref(),
    }
    .ok_or_else(|| Error::Invariant {
        utt_id: u.utt_id.clone(),
        field: match source {
            ReferenceSource::Gold => "reference".into(),
            ReferenceSource::Pseudo => "pseudo_reference".into(),
        },
        message: "missing, cannot label".into(),
    })?;
    Ok(u.nbest.iter().map(|h| label_hypothesis(h, reference)).collect())
}

/// Feature matrices and labels for every n-best entry of a corpus.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LabeledSet {
    pub matrices: Vec<FeatureMatrix>,
    pub token_labels: Vec<Vec<bool>>,
    pub utterance_labels: Vec<bool>,
}

impl LabeledSet {
    pub fn build(utts: &[Utterance], source: ReferenceSource, fz: &Featurizer<'_>) -> Result<Self> {
        let mut out = Self::default();
        for u in utts {
            for l in label_utterance(u, source)? {
                out.matrices.push(fz.features(&l.hypothesis)?);
                out.token_labels.push(l.token_labels);
                out.utterance_labels.push(l.utterance_label);
            }
        }
        Ok(out)
    }

    pub fn examples(&self, kind: ModelKind) -> Vec<Example> {
        self.matrices
            .iter()
            .enumerate()
            .map(|(i, m)| Example {
                features: m.clone(),
                labels: match kind {
                    ModelKind::Cem => self.token_labels[i].clone(),
                    ModelKind::Rebm => vec![self.utterance_labels[i]],
                },
            })
            .collect()
    }
}

fn kind_tag(kind: ModelKind) -> &'static str {
    match kind {
        ModelKind::Cem => "cem",
        ModelKind::Rebm => "rebm",
    }
}

/// Initializes and trains one model. Initialization and batch order derive
/// from `seed` and the model kind only.
pub fn fit_model(
    kind: ModelKind,
    cfg: &NetConfig,
    schema: FeatureSchema,
    stats: FeatureStats,
    pools: &TrainData,
    seed: u64,
) -> Result<(ConfidenceModel, TrainReport)> {
    let tag = kind_tag(kind);
    let dims = Dims::new(cfg.layers, cfg.hidden, schema.width())?;
    let model = ConfidenceModel::init(kind, dims, schema, stats, derive_seed(seed, &format!("{tag}-init")))?;
    train(model, pools, &cfg.train_config(derive_seed(seed, &format!("{tag}-train"))))
}

/// Raw and dev-calibrated metrics at one level of one evaluation set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelResult {
    pub raw: MetricsReport,
    pub calibrated: Option<MetricsReport>,
    pub mapping: Option<PwlMapping>,
    pub bins_raw: Vec<Bin>,
    pub bins_calibrated: Option<Vec<Bin>>,
}

fn evaluate_level(test: &ScoredSet, dev: Option<&ScoredSet>, cal: &CalibrationConfig) -> Result<LevelResult> {
    let mut out = LevelResult {
        raw: report(test),
        calibrated: None,
        mapping: None,
        bins_raw: reliability_bins(test, cal.bins)?,
        bins_calibrated: None,
    };
    if let Some(dev) = dev.filter(|d| !d.is_empty()) {
        let map = fit_pwlm(dev, cal.segments, cal.bins)?;
        let scores = test.scores.iter().map(|&s| map.apply(s)).collect();
        let calibrated = ScoredSet::new(scores, test.labels.clone())?;
        out.calibrated = Some(report(&calibrated));
        out.bins_calibrated = Some(reliability_bins(&calibrated, cal.bins)?);
        out.mapping = Some(map);
    }
    Ok(out)
}

/// Word-level and utterance-level scored sets of a corpus' 1-best entries.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Scored {
    pub word: ScoredSet,
    pub utterance: ScoredSet,
}

/// Token confidence `exp(log_posterior)`, word confidence by the min rule,
/// utterance confidence `exp(mean log_posterior)` (0 for an empty
/// hypothesis).
pub fn softmax_scores(corpus: &Corpus) -> Result<Scored> {
    let mut out = Scored::default();
    for u in &corpus.utterances {
        let l = &label_utterance(u, ReferenceSource::Gold)?[0];
        let h = &l.hypothesis;
        let tokens: Vec<f64> = h.features.iter().map(|f| f.log_posterior.exp()).collect();
        for (s, y) in word_confidence(&tokens, &h.word_starts())?.into_iter().zip(&l.word_labels) {
            out.word.push(s, *y);
        }
        let utt = if h.is_empty() {
            0.0
        } else {
            (h.features.iter().map(|f| f.log_posterior).sum::<f64>() / h.len() as f64).exp()
        };
        out.utterance.push(utt, l.utterance_label);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineReport {
    pub word: MetricsReport,
    pub utterance: MetricsReport,
}

/// Softmax-posterior confidence metrics of a gold-labelled corpus.
pub fn run_baseline_softmax(corpus: &Corpus) -> Result<BaselineReport> {
    let s = softmax_scores(corpus)?;
    Ok(BaselineReport {
        word: report(&s.word),
        utterance: report(&s.utterance),
    })
}

/// Word-level (CEM) and utterance-level (R-EBM) scores of the 1-best
/// entries.
pub fn model_scores(
    data: &ExperimentData,
    toggles: Toggles,
    cem: &ConfidenceModel,
    rebm: &ConfidenceModel,
    corpus: &Corpus,
) -> Result<Scored> {
    let fz = data.featurizer(toggles);
    let mut out = Scored::default();
    for u in &corpus.utterances {
        let l = &label_utterance(u, ReferenceSource::Gold)?[0];
        let m = fz.features(&l.hypothesis)?;
        let tokens = cem.forward_cem(&m)?;
        for (s, y) in word_confidence(&tokens, &l.hypothesis.word_starts())?
            .into_iter()
            .zip(&l.word_labels)
        {
            out.word.push(s, *y);
        }
        out.utterance.push(rebm.forward_rebm(&m)?, l.utterance_label);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetResult {
    pub word: LevelResult,
    pub utterance: LevelResult,
}

fn evaluate_sets(
    evals: &[EvalSet],
    cal: &CalibrationConfig,
    mut scorer: impl FnMut(&Corpus) -> Result<Scored>,
) -> Result<BTreeMap<String, SetResult>> {
    let mut out = BTreeMap::new();
    for e in evals {
        let test = scorer(&e.test)?;
        let dev = e.dev.as_ref().map(&mut scorer).transpose()?;
        out.insert(
            e.name.clone(),
            SetResult {
                word: evaluate_level(&test.word, dev.as_ref().map(|d| &d.word), cal)?,
                utterance: evaluate_level(&test.utterance, dev.as_ref().map(|d| &d.utterance), cal)?,
            },
        );
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub initial_loss: f64,
    pub loss_trace: Vec<f64>,
    pub in_domain_seen: usize,
    pub ood_seen: usize,
}

impl From<TrainReport> for TrainSummary {
    fn from(r: TrainReport) -> Self {
        Self {
            initial_loss: r.initial_loss,
            loss_trace: r.loss_trace,
            in_domain_seen: r.in_domain_seen,
            ood_seen: r.ood_seen,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub toggles: Toggles,
    pub cem_training: TrainSummary,
    pub rebm_training: TrainSummary,
    pub evals: BTreeMap<String, SetResult>,
    pub selection: SelectionReport,
}

#[derive(Debug, Clone)]
pub struct TrainedCell {
    pub toggles: Toggles,
    pub cem: ConfidenceModel,
    pub rebm: ConfidenceModel,
    pub cem_training: TrainSummary,
    pub rebm_training: TrainSummary,
}

/// Trains the CEM and R-EBM of one grid cell. Initialization and batch
/// order depend only on the plan seed, so a cell with both toggles off is
/// plain in-domain training.
pub fn train_cell(plan: &ExperimentPlan, data: &ExperimentData, toggles: Toggles) -> Result<TrainedCell> {
    let fz = data.featurizer(toggles);
    let train_set = LabeledSet::build(&data.in_train.utterances, ReferenceSource::Gold, &fz)?;
    let ood_set = match (&data.ood_unlabeled, toggles.use_pseudo) {
        (Some(c), true) => Some(LabeledSet::build(&c.utterances, ReferenceSource::Pseudo, &fz)?),
        (None, true) => return Err(Error::invalid("pseudo toggle set without OOD unlabeled data")),
        _ => None,
    };
    let stats = FeatureStats::compute(fz.schema.width(), &train_set.matrices)?;

    let fit = |kind: ModelKind, cfg: &NetConfig| -> Result<(ConfidenceModel, TrainSummary)> {
        let pools = TrainData {
            in_domain: train_set.examples(kind),
            ood: ood_set.as_ref().map(|s| s.examples(kind)).unwrap_or_default(),
        };
        let (model, rep) = fit_model(kind, cfg, fz.schema, stats.clone(), &pools, plan.seed)?;
        log::info!(
            target: "confkit::pipeline",
            "{{\"event\":\"trained\",\"cell\":\"{}\",\"model\":\"{}\",\"final_loss\":{}}}",
            toggles.name(),
            kind_tag(kind),
            rep.loss_trace.last().copied().unwrap_or(f64::NAN)
        );
        Ok((model, TrainSummary::from(rep)))
    };
    let (cem, cem_training) = fit(ModelKind::Cem, &plan.cem)?;
    let (rebm, rebm_training) = fit(ModelKind::Rebm, &plan.rebm)?;
    Ok(TrainedCell {
        toggles,
        cem,
        rebm,
        cem_training,
        rebm_training,
    })
}

/// The set used for data selection: OOD test when present.
fn selection_set(data: &ExperimentData) -> &EvalSet {
    data.evals
        .iter()
        .find(|e| e.name == OOD)
        .unwrap_or(&data.evals[0])
}

fn candidates(corpus: &Corpus, confidences: &[f64]) -> Result<Vec<Candidate>> {
    corpus
        .utterances
        .iter()
        .zip(confidences)
        .map(|(u, &confidence)| {
            let reference: Vec<Token> = u.reference.clone().ok_or_else(|| Error::Invariant {
                utt_id: u.utt_id.clone(),
                field: "reference".into(),
                message: "missing, cannot select".into(),
            })?;
            Ok(Candidate {
                utt_id: u.utt_id.clone(),
                confidence,
                hypothesis: u.nbest[0].tokens.clone(),
                reference,
            })
        })
        .collect()
}

pub fn evaluate_cell(plan: &ExperimentPlan, data: &ExperimentData, cell: &TrainedCell) -> Result<CellResult> {
    let evals = evaluate_sets(&data.evals, &plan.calibration, |c| {
        model_scores(data, cell.toggles, &cell.cem, &cell.rebm, c)
    })?;
    let sel = selection_set(data);
    let scores = model_scores(data, cell.toggles, &cell.cem, &cell.rebm, &sel.test)?;
    let selection = select_extremes(&candidates(&sel.test, &scores.utterance.scores)?, plan.select_k, false)?;
    Ok(CellResult {
        toggles: cell.toggles,
        cem_training: cell.cem_training.clone(),
        rebm_training: cell.rebm_training.clone(),
        evals,
        selection,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub seed: u64,
    pub selection_set: String,
    pub baseline: BTreeMap<String, SetResult>,
    /// Selection with the true utterance labels as confidences.
    pub oracle_selection: SelectionReport,
    pub cells: Vec<CellResult>,
}

impl Grid {
    pub fn cell(&self, use_pseudo: bool, use_ood_lm: bool) -> Option<&CellResult> {
        self.cells
            .iter()
            .find(|c| c.toggles == Toggles { use_pseudo, use_ood_lm })
    }
}

#[derive(Debug, Clone)]
pub struct AblationRun {
    pub grid: Grid,
    pub models: Vec<TrainedCell>,
}

/// Trains and evaluates every cell of the plan's toggle grid.
pub fn run_ablation(plan: &ExperimentPlan, data: &ExperimentData) -> Result<AblationRun> {
    plan.validate()?;
    let baseline = evaluate_sets(&data.evals, &plan.calibration, softmax_scores)?;
    let sel = selection_set(data);
    let oracle = softmax_scores(&sel.test)?
        .utterance
        .labels
        .iter()
        .map(|&y| f64::from(u8::from(y)))
        .collect::<Vec<_>>();
    let oracle_selection = select_extremes(&candidates(&sel.test, &oracle)?, plan.select_k, false)?;
    let mut cells = Vec::new();
    let mut models = Vec::new();
    for toggles in plan.cells() {
        let trained = train_cell(plan, data, toggles)?;
        cells.push(evaluate_cell(plan, data, &trained)?);
        models.push(trained);
    }
    Ok(AblationRun {
        grid: Grid {
            seed: plan.seed,
            selection_set: sel.name.clone(),
            baseline,
            oracle_selection,
            cells,
        },
        models,
    })
}

/// Loads the plan's data, runs the grid and writes everything under `out`.
pub fn run_experiment(plan: &ExperimentPlan, out: &Path) -> Result<Grid> {
    let data = ExperimentData::load(plan)?;
    let run = run_ablation(plan, &data)?;
    write_results(&run, out)?;
    Ok(run.grid)
}

/// Writes `grid.json`, one JSON per cell under `cells/`, trained models
/// under `models/`, reliability diagrams under `reliability/` and
/// `summary.md`.
pub fn write_results(run: &AblationRun, out: &Path) -> Result<()> {
    let mkdir = |p: &Path| std::fs::create_dir_all(p).map_err(|e| Error::io(p, e));
    for sub in ["cells", "models", "reliability"] {
        mkdir(&out.join(sub))?;
    }
    json::write_json(&out.join("grid.json"), &run.grid)?;
    for cell in &run.grid.cells {
        json::write_json(&out.join("cells").join(format!("{}.json", cell.toggles.name())), cell)?;
    }
    for m in &run.models {
        let name = m.toggles.name();
        m.cem.save(&out.join("models").join(format!("{name}-cem.json")))?;
        m.rebm.save(&out.join("models").join(format!("{name}-rebm.json")))?;
    }
    let mut diagrams: Vec<(String, &LevelResult)> = Vec::new();
    for (set, r) in &run.grid.baseline {
        diagrams.push((format!("softmax-{set}-word"), &r.word));
        diagrams.push((format!("softmax-{set}-utterance"), &r.utterance));
    }
    for cell in &run.grid.cells {
        for (set, r) in &cell.evals {
            let name = cell.toggles.name();
            diagrams.push((format!("{name}-{set}-word"), &r.word));
            diagrams.push((format!("{name}-{set}-utterance"), &r.utterance));
        }
    }
    for (name, level) in diagrams {
        let svg = reliability_svg(&name, &level.bins_raw, level.bins_calibrated.as_deref());
        json::write_atomic(&out.join("reliability").join(format!("{name}.svg")), svg.as_bytes())?;
    }
    json::write_atomic(&out.join("summary.md"), render_summary(&run.grid).as_bytes())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{:.2}", 100.0 * x))
}

/// Markdown rendering of the grid: AUC/EER per set and level, then
/// calibration and selection tables.
pub fn render_summary(grid: &Grid) -> String {
    let sets: Vec<&String> = grid.baseline.keys().collect();
    let mut s = String::from("# Confidence estimation results\n\n");
    let _ = writeln!(s, "Seed {}. AUC and EER in percent; AUC is precision-recall with correct as positive.\n", grid.seed);
    let mut head = String::from("| model | pseudo | OOD LM |");
    let mut rule = String::from("|---|:-:|:-:|");
    for set in &sets {
        for level in ["word", "utt"] {
            let _ = write!(head, " {set} {level} AUC | {set} {level} EER |");
            rule.push_str("---:|---:|");
        }
    }
    let _ = writeln!(s, "{head}\n{rule}");
    let row = |label: &str, p: &str, l: &str, evals: &BTreeMap<String, SetResult>| {
        let mut r = format!("| {label} | {p} | {l} |");
        for set in &sets {
            let e = &evals[*set];
            for lv in [&e.word, &e.utterance] {
                let _ = write!(r, " {} | {} |", fmt_opt(lv.raw.auc), fmt_opt(lv.raw.eer));
            }
        }
        r
    };
    let _ = writeln!(s, "{}", row("softmax", "", "", &grid.baseline));
    let mark = |b: bool| if b { "x" } else { "" };
    for c in &grid.cells {
        let _ = writeln!(
            s,
            "{}",
            row("CEM / R-EBM", mark(c.toggles.use_pseudo), mark(c.toggles.use_ood_lm), &c.evals)
        );
    }

    s.push_str("\n## Calibration\n\nNCE and ECE before and after the dev-fitted piecewise-linear mapping.\n\n");
    s.push_str("| model | set | level | NCE raw | NCE cal | ECE raw | ECE cal |\n|---|---|---|---:|---:|---:|---:|\n");
    let f4 = |v: Option<f64>| v.map_or_else(|| "-".into(), |x| format!("{x:.4}"));
    let mut cal_rows = |label: String, evals: &BTreeMap<String, SetResult>| {
        for (set, e) in evals {
            for (level, lv) in [("word", &e.word), ("utterance", &e.utterance)] {
                let c = lv.calibrated.as_ref();
                let _ = writeln!(
                    s,
                    "| {label} | {set} | {level} | {} | {} | {} | {} |",
                    f4(lv.raw.nce),
                    f4(c.and_then(|c| c.nce)),
                    f4(lv.raw.ece),
                    f4(c.and_then(|c| c.ece))
                );
            }
        }
    };
    cal_rows("softmax".into(), &grid.baseline);
    for c in &grid.cells {
        cal_rows(c.toggles.name(), &c.evals);
    }

    let _ = writeln!(
        s,
        "\n## Data selection\n\nSER of the {} most and least confident `{}` utterances.\n",
        grid.oracle_selection.k, grid.selection_set
    );
    s.push_str("| ranking | top SER | bottom SER |\n|---|---:|---:|\n");
    let _ = writeln!(
        s,
        "| oracle | {:.4} | {:.4} |",
        grid.oracle_selection.top_ser, grid.oracle_selection.bottom_ser
    );
    for c in &grid.cells {
        let _ = writeln!(
            s,
            "| R-EBM {} | {:.4} | {:.4} |",
            c.toggles.name(),
            c.selection.top_ser,
            c.selection.bottom_ser
        );
    }
    s
}

/// Reliability diagram: per-bin accuracy against mean confidence, raw and
/// (when present) calibrated, over the diagonal.
pub fn reliability_svg(title: &str, raw: &[Bin], calibrated: Option<&[Bin]>) -> String {
    const SIZE: f64 = 320.0;
    const PAD: f64 = 40.0;
    let x = |v: f64| PAD + v * SIZE;
    let y = |v: f64| PAD + (1.0 - v) * SIZE;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{w}" viewBox="0 0 {w} {w}">"#,
        w = SIZE + 2.0 * PAD
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="20" font-family="sans-serif" font-size="13" text-anchor="middle">{}</text>"#,
        PAD + SIZE / 2.0,
        title
    );
    let _ = writeln!(
        s,
        r##"<rect x="{PAD}" y="{PAD}" width="{SIZE}" height="{SIZE}" fill="none" stroke="#444"/>"##
    );
    let _ = writeln!(
        s,
        r##"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="#999" stroke-dasharray="4 3"/>"##,
        x(0.0),
        y(0.0),
        x(1.0),
        y(1.0)
    );
    let series = |bins: &[Bin], colour: &str, out: &mut String| {
        let pts: Vec<String> = bins
            .iter()
            .filter(|b| b.count > 0)
            .map(|b| format!("{:.2},{:.2}", x(b.confidence), y(b.accuracy)))
            .collect();
        let _ = writeln!(
            out,
            r#"<polyline points="{}" fill="none" stroke="{colour}" stroke-width="1.5"/>"#,
            pts.join(" ")
        );
        for p in &pts {
            let (cx, cy) = p.split_once(',').expect("formatted pair");
            let _ = writeln!(out, r#"<circle cx="{cx}" cy="{cy}" r="2.5" fill="{colour}"/>"#);
        }
    };
    series(raw, "#d62728", &mut s);
    let _ = writeln!(
        s,
        r##"<text x="{}" y="{}" font-family="sans-serif" font-size="11" fill="#d62728">raw</text>"##,
        PAD + 6.0,
        PAD + 14.0
    );
    if let Some(c) = calibrated {
        series(c, "#1f77b4", &mut s);
        let _ = writeln!(
            s,
            r##"<text x="{}" y="{}" font-family="sans-serif" font-size="11" fill="#1f77b4">calibrated</text>"##,
            PAD + 6.0,
            PAD + 28.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11" text-anchor="middle">confidence</text>"#,
        PAD + SIZE / 2.0,
        SIZE + PAD + 28.0
    );
    let _ = writeln!(
        s,
        r#"<text x="12" y="{}" font-family="sans-serif" font-size="11" transform="rotate(-90 12 {})" text-anchor="middle">accuracy</text>"#,
        PAD + SIZE / 2.0,
        PAD + SIZE / 2.0
    );
    s.push_str("</svg>\n");
    s
}
