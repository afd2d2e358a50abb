//! Synthetic recogniser.
//!
//! References are drawn from a domain's unigram distribution. A hypothesis
//! is a noisy copy of its reference produced by a per-token edit process;
//! every emitted token then receives decoder-like features whose
//! distribution depends on whether the token is correct, so feature quality
//! is a tunable dial.
//!
//! All sampling uses ChaCha8 streams derived from the scenario seed and the
//! utterance id: stream 0 draws the reference, stream 1 the pseudo
//! reference, stream `2 + i` the `i`-th n-best hypothesis.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::align::label_hypothesis;
use crate::data_model::{corpus_to_string, CorpusHeader, Hypothesis, Token, TokenFeatures, Utterance};
use crate::error::{Error, Result};
use crate::json;
use crate::lm::text_to_string;
use crate::rng::stream_rng;

pub const DEFAULT_NBEST: usize = 8;
pub const DEFAULT_TOPK: usize = 4;
const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaParams {
    pub a: f64,
    pub b: f64,
}

impl BetaParams {
    fn sampler(&self) -> Result<rand_distr::Beta<f64>> {
        rand_distr::Beta::new(self.a, self.b)
            .map_err(|e| Error::invalid(format!("Beta({}, {}): {e}", self.a, self.b)))
    }
}

/// Distributions of the emitted-token posterior and of the runner-up's
/// share of the remaining mass, for correct and erroneous tokens.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureParams {
    pub correct: BetaParams,
    pub error: BetaParams,
    pub runner_up_correct: BetaParams,
    pub runner_up_error: BetaParams,
}

impl Default for FeatureParams {
    fn default() -> Self {
        Self {
            correct: BetaParams { a: 8.0, b: 1.0 },
            error: BetaParams { a: 2.0, b: 2.0 },
            runner_up_correct: BetaParams { a: 2.0, b: 2.0 },
            runner_up_error: BetaParams { a: 2.0, b: 2.0 },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorModel {
    pub p_sub: f64,
    pub p_ins: f64,
    pub p_del: f64,
    pub confusion_temperature: f64,
    #[serde(default)]
    pub feature_params: FeatureParams,
    /// Strength used for n-best generation; rates scale by `1 + strength`.
    #[serde(default)]
    pub augmentation_strength: f64,
}

/// Per-token edit probabilities after scaling.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EditRates {
    pub sub: f64,
    pub ins: f64,
    pub del: f64,
}

impl ErrorModel {
    pub fn perfect() -> Self {
        Self {
            p_sub: 0.0,
            p_ins: 0.0,
            p_del: 0.0,
            confusion_temperature: 1.0,
            feature_params: FeatureParams::default(),
            augmentation_strength: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("p_sub", self.p_sub), ("p_ins", self.p_ins), ("p_del", self.p_del)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::invalid(format!("{name} = {p} outside [0, 1]")));
            }
        }
        if self.p_sub + self.p_ins + self.p_del > 1.0 + 1e-12 {
            return Err(Error::invalid("p_sub + p_ins + p_del exceeds 1"));
        }
        if !(self.confusion_temperature > 0.0) {
            return Err(Error::invalid("confusion_temperature must be positive"));
        }
        if !(self.augmentation_strength >= 0.0) {
            return Err(Error::invalid("augmentation_strength must be non-negative"));
        }
        let fp = &self.feature_params;
        for b in [fp.correct, fp.error, fp.runner_up_correct, fp.runner_up_error] {
            b.sampler()?;
        }
        Ok(())
    }

    /// Rates at `strength`, rescaled onto the simplex when they overflow it.
    pub fn rates(&self, strength: f64) -> EditRates {
        let k = 1.0 + strength.max(0.0);
        let (mut sub, mut ins, mut del) = (self.p_sub * k, self.p_ins * k, self.p_del * k);
        let total = sub + ins + del;
        if total > 1.0 {
            sub /= total;
            ins /= total;
            del /= total;
        }
        EditRates { sub, ins, del }
    }
}

/// Token inventory. With a positive `continuation_period` p, every id with
/// `id % p == p - 1` is a word-internal piece; all other ids start a word.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub size: u32,
    #[serde(default)]
    pub continuation_period: u32,
}

impl Vocabulary {
    pub fn is_word_start(&self, id: u32) -> bool {
        let p = self.continuation_period;
        p == 0 || id % p != p - 1
    }

    pub fn token(&self, id: u32) -> Token {
        if self.is_word_start(id) {
            Token::new(id, format!("\u{2581}w{id}"), true)
        } else {
            Token::new(id, format!("p{id}"), false)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Unigram {
    /// Explicit weights, one per id, summing to 1.
    Weights(Vec<f64>),
    /// Zipf law over ranks; id `shift` is the most frequent.
    Zipf { exponent: f64, shift: u32 },
}

impl Unigram {
    pub fn weights(&self, vocab: &Vocabulary) -> Result<Vec<f64>> {
        let v = vocab.size as usize;
        match self {
            Unigram::Weights(w) => {
                if w.len() != v {
                    return Err(Error::invalid(format!("{} unigram weights for vocabulary {v}", w.len())));
                }
                if w.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
                    return Err(Error::invalid("unigram weights must be finite and non-negative"));
                }
                let sum: f64 = w.iter().sum();
                if (sum - 1.0).abs() > 1e-6 {
                    return Err(Error::invalid(format!("unigram weights sum to {sum}, not 1")));
                }
                Ok(w.iter().map(|x| x / sum).collect())
            }
            Unigram::Zipf { exponent, shift } => {
                if !exponent.is_finite() || *exponent < 0.0 {
                    return Err(Error::invalid("zipf exponent must be finite and non-negative"));
                }
                let raw: Vec<f64> = (0..vocab.size)
                    .map(|id| {
                        let rank = (id + vocab.size - shift % vocab.size) % vocab.size;
                        (f64::from(rank) + 1.0).powf(-exponent)
                    })
                    .collect();
                let sum: f64 = raw.iter().sum();
                Ok(raw.into_iter().map(|x| x / sum).collect())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub name: String,
    pub unigram: Unigram,
    /// Sentence lengths in tokens are uniform on `[min_len, max_len]`.
    pub min_len: usize,
    pub max_len: usize,
    pub error_model: ErrorModel,
}

/// Weighted draws restricted to one word-start class.
#[derive(Debug, Clone)]
struct ClassSampler {
    ids: Vec<u32>,
    dist: Option<WeightedIndex<f64>>,
}

impl ClassSampler {
    fn new(vocab: &Vocabulary, weights: &[f64], word_start: bool) -> Self {
        let ids: Vec<u32> = (0..vocab.size).filter(|&id| vocab.is_word_start(id) == word_start).collect();
        let w: Vec<f64> = ids.iter().map(|&id| weights[id as usize]).collect();
        Self {
            dist: WeightedIndex::new(&w).ok(),
            ids,
        }
    }

    fn draw(&self, rng: &mut impl Rng) -> Option<u32> {
        self.dist.as_ref().map(|d| self.ids[d.sample(rng)])
    }
}

/// Sentence source of one domain.
#[derive(Debug, Clone)]
pub struct Domain {
    pub spec: DomainSpec,
    vocab: Vocabulary,
    first: ClassSampler,
    any: WeightedIndex<f64>,
}

impl Domain {
    pub fn new(spec: DomainSpec, vocab: Vocabulary) -> Result<Self> {
        spec.error_model.validate()?;
        if spec.min_len == 0 || spec.min_len > spec.max_len {
            return Err(Error::invalid(format!("domain `{}`: need 1 <= min_len <= max_len", spec.name)));
        }
        let weights = spec.unigram.weights(&vocab)?;
        let first = ClassSampler::new(&vocab, &weights, true);
        if first.dist.is_none() {
            return Err(Error::invalid(format!("domain `{}` gives no mass to word-start tokens", spec.name)));
        }
        let any = WeightedIndex::new(&weights).map_err(|e| Error::invalid(e.to_string()))?;
        Ok(Self {
            spec,
            vocab,
            first,
            any,
        })
    }

    pub fn sentence(&self, rng: &mut impl Rng) -> Vec<Token> {
        let len = rng.random_range(self.spec.min_len..=self.spec.max_len);
        let mut out = Vec::with_capacity(len);
        out.push(self.vocab.token(self.first.draw(rng).expect("checked in new")));
        for _ in 1..len {
            out.push(self.vocab.token(self.any.sample(rng) as u32));
        }
        out
    }
}

/// Substitution and insertion source: the recogniser's unigram, sharpened
/// by `1 / temperature`, kept per word-start class.
#[derive(Debug, Clone)]
pub struct Confusions {
    vocab: Vocabulary,
    temperature: f64,
    starts: ClassSampler,
    pieces: ClassSampler,
}

impl Confusions {
    pub fn new(vocab: Vocabulary, unigram: &[f64], temperature: f64) -> Result<Self> {
        if !(temperature > 0.0) {
            return Err(Error::invalid("confusion temperature must be positive"));
        }
        let sharp: Vec<f64> = unigram.iter().map(|p| p.powf(1.0 / temperature)).collect();
        let starts = ClassSampler::new(&vocab, &sharp, true);
        if starts.dist.is_none() {
            return Err(Error::invalid("confusion distribution gives no mass to word-start tokens"));
        }
        Ok(Self {
            vocab,
            temperature,
            starts,
            pieces: ClassSampler::new(&vocab, &sharp, false),
        })
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    /// A token of the same class different from `t`, or `None` when the
    /// class offers no alternative.
    fn substitute(&self, t: &Token, rng: &mut impl Rng) -> Option<Token> {
        let class = if t.word_start { &self.starts } else { &self.pieces };
        if class.ids.len() < 2 {
            return None;
        }
        for _ in 0..1000 {
            let id = class.draw(rng)?;
            if id != t.id {
                return Some(self.vocab.token(id));
            }
        }
        None
    }

    fn insertion(&self, rng: &mut impl Rng) -> Token {
        self.vocab.token(self.starts.draw(rng).expect("checked in new"))
    }
}

/// Applies the edit process to `reference` and returns the emitted tokens.
///
/// Each reference token is deleted with probability `del`, replaced with
/// `sub`, preceded by an inserted word with `ins`, and copied otherwise.
/// Word pieces left at the front by a deletion are dropped.
pub fn corrupt_tokens(
    reference: &[Token],
    em: &ErrorModel,
    confusions: &Confusions,
    strength: f64,
    rng: &mut impl Rng,
) -> Vec<Token> {
    let r = em.rates(strength);
    let mut out = Vec::with_capacity(reference.len() + 2);
    for t in reference {
        let u: f64 = rng.random();
        if u < r.del {
            continue;
        }
        if u < r.del + r.sub {
            out.push(confusions.substitute(t, rng).unwrap_or_else(|| t.clone()));
            continue;
        }
        if u < r.del + r.sub + r.ins {
            out.push(confusions.insertion(rng));
        }
        out.push(t.clone());
    }
    let lead = out.iter().take_while(|t| !t.word_start).count();
    out.drain(..lead);
    out
}

/// Features of one token given its correctness.
pub fn sample_features(correct: bool, fp: &FeatureParams, topk: usize, rng: &mut impl Rng) -> Result<TokenFeatures> {
    let (post, share) = if correct {
        (fp.correct, fp.runner_up_correct)
    } else {
        (fp.error, fp.runner_up_error)
    };
    let p1 = post.sampler()?.sample(rng).clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
    let r = share.sampler()?.sample(rng).clamp(0.0, 1.0);
    let p2 = r * (1.0 - p1);
    let mut rest = 1.0 - p1 - p2;
    let mut cands = vec![p1, p2];
    // Remaining candidates halve the leftover mass in turn; what is left
    // after the top-k forms one pooled tail point.
    while cands.len() < topk {
        let p = rest / 2.0;
        cands.push(p);
        rest -= p;
    }
    let mut points: Vec<f64> = cands.clone();
    if cands.len() > topk {
        rest += cands[topk..].iter().sum::<f64>();
        cands.truncate(topk);
        points.truncate(topk);
    }
    points.push(rest.max(0.0));
    let entropy = points
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum::<f64>()
        .max(0.0);
    cands.sort_by(|a, b| b.total_cmp(a));
    let log_posterior = p1.ln();
    let mut topk_logprobs: Vec<f64> = cands.iter().map(|p| p.max(PROB_FLOOR).ln()).collect();
    if let Some(top) = topk_logprobs.first_mut() {
        *top = top.max(log_posterior);
    }
    Ok(TokenFeatures {
        log_posterior,
        entropy,
        topk_logprobs,
        extra: Vec::new(),
        lm_in_logprob: None,
        lm_ood_logprob: None,
    })
}

/// The recogniser: vocabulary, confusion source and feature width.
#[derive(Debug, Clone)]
pub struct Recogniser {
    pub vocab: Vocabulary,
    pub confusions: Confusions,
    pub topk: usize,
}

impl Recogniser {
    pub fn header(&self) -> CorpusHeader {
        CorpusHeader::new(self.vocab.size, self.topk, 0)
    }

    /// One decode of `reference` with features drawn according to each
    /// token's correctness against it.
    pub fn corrupt(&self, reference: &[Token], em: &ErrorModel, strength: f64, rng: &mut impl Rng) -> Result<Hypothesis> {
        let tokens = corrupt_tokens(reference, em, &self.confusions, strength, rng);
        let mut hyp = Hypothesis {
            tokens,
            features: Vec::new(),
            decode_score: 0.0,
        };
        let labels = label_hypothesis(&hyp, reference).token_labels;
        for correct in labels {
            hyp.features.push(sample_features(correct, &em.feature_params, self.topk, rng)?);
        }
        hyp.decode_score = hyp.features.iter().map(|f| f.log_posterior).sum();
        Ok(hyp)
    }

    /// `n` independent decodes sorted by decode score, best first.
    pub fn generate_nbest(
        &self,
        reference: &[Token],
        n: usize,
        em: &ErrorModel,
        strength: f64,
        seed: u64,
        utt_id: &str,
    ) -> Result<Vec<Hypothesis>> {
        if n == 0 {
            return Err(Error::invalid("n-best size must be at least 1"));
        }
        let mut nbest = (0..n)
            .map(|i| self.corrupt(reference, em, strength, &mut stream_rng(seed, utt_id, 2 + i as u64)))
            .collect::<Result<Vec<_>>>()?;
        nbest.sort_by(|a, b| b.decode_score.total_cmp(&a.decode_score));
        Ok(nbest)
    }

    /// The un-augmented single best decode of the hidden reference.
    pub fn pseudo_reference(&self, truth: &[Token], em: &ErrorModel, seed: u64, utt_id: &str) -> Result<Vec<Token>> {
        let hyp = self.corrupt(truth, em, 0.0, &mut stream_rng(seed, utt_id, 1))?;
        Ok(hyp.tokens)
    }
}

/// Hidden references, keyed by utterance id.
pub type Truth = BTreeMap<String, Vec<Token>>;

/// Fills `pseudo_reference` of every utterance from its hidden reference.
pub fn make_pseudo_references(
    utts: &mut [Utterance],
    truth: &Truth,
    recogniser: &Recogniser,
    em: &ErrorModel,
    seed: u64,
) -> Result<()> {
    for u in utts {
        let t = truth
            .get(&u.utt_id)
            .ok_or_else(|| Error::invalid(format!("no hidden reference for `{}`", u.utt_id)))?;
        u.pseudo_reference = Some(recogniser.pseudo_reference(t, em, seed, &u.utt_id)?);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitKind {
    /// n-best lists with gold references.
    Labeled,
    /// n-best lists whose references go to the sidecar only.
    Unlabeled,
    /// Plain reference text for language-model training.
    Text,
}

fn default_n() -> usize {
    DEFAULT_NBEST
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub name: String,
    pub domain: String,
    pub kind: SplitKind,
    pub sentences: usize,
    #[serde(default = "default_n")]
    pub n: usize,
    /// Overrides the domain's augmentation strength.
    #[serde(default)]
    pub strength: Option<f64>,
    /// Unlabeled splits only.
    #[serde(default = "default_true")]
    pub pseudo_reference: bool,
}

fn default_topk() -> usize {
    DEFAULT_TOPK
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub seed: u64,
    pub vocab: Vocabulary,
    #[serde(default = "default_topk")]
    pub topk: usize,
    /// Domain whose unigram feeds substitutions; the first domain if unset.
    #[serde(default)]
    pub recogniser_domain: Option<String>,
    pub domains: Vec<DomainSpec>,
    pub splits: Vec<SplitSpec>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedSplit {
    pub spec: SplitSpec,
    pub header: CorpusHeader,
    pub utterances: Vec<Utterance>,
    pub truth: Truth,
    pub text: Vec<Vec<u32>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TruthHeader {
    split: String,
    domain: String,
    error_model: ErrorModel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TruthLine {
    utt_id: String,
    reference: Vec<Token>,
}

impl Scenario {
    pub fn load(path: &Path) -> Result<Self> {
        json::read_json(path)
    }

    pub fn recogniser(&self) -> Result<Recogniser> {
        let dom = match &self.recogniser_domain {
            Some(name) => self.domain_spec(name)?,
            None => self
                .domains
                .first()
                .ok_or_else(|| Error::invalid("scenario has no domains"))?,
        };
        let weights = dom.unigram.weights(&self.vocab)?;
        Ok(Recogniser {
            vocab: self.vocab,
            confusions: Confusions::new(self.vocab, &weights, dom.error_model.confusion_temperature)?,
            topk: self.topk,
        })
    }

    fn domain_spec(&self, name: &str) -> Result<&DomainSpec> {
        self.domains
            .iter()
            .find(|d| d.name == name)
            .ok_or_else(|| Error::invalid(format!("unknown domain `{name}`")))
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab.size == 0 {
            return Err(Error::invalid("vocabulary is empty"));
        }
        if self.topk < 1 {
            return Err(Error::invalid("topk must be at least 1"));
        }
        let mut names = std::collections::BTreeSet::new();
        for d in &self.domains {
            Domain::new(d.clone(), self.vocab)?;
            if !names.insert(d.name.as_str()) {
                return Err(Error::invalid(format!("duplicate domain `{}`", d.name)));
            }
        }
        let mut splits = std::collections::BTreeSet::new();
        for s in &self.splits {
            self.domain_spec(&s.domain)?;
            if !splits.insert(s.name.as_str()) {
                return Err(Error::invalid(format!("duplicate split `{}`", s.name)));
            }
            if s.kind != SplitKind::Text && s.n == 0 {
                return Err(Error::invalid(format!("split `{}`: n must be at least 1", s.name)));
            }
        }
        self.recogniser()?;
        Ok(())
    }

    pub fn generate_split(&self, split: &SplitSpec) -> Result<GeneratedSplit> {
        let spec = self.domain_spec(&split.domain)?.clone();
        let em = spec.error_model;
        let domain = Domain::new(spec, self.vocab)?;
        let rec = self.recogniser()?;
        let strength = split.strength.unwrap_or(em.augmentation_strength);
        let mut out = GeneratedSplit {
            spec: split.clone(),
            header: rec.header(),
            utterances: Vec::new(),
            truth: Truth::new(),
            text: Vec::new(),
        };
        for i in 0..split.sentences {
            let utt_id = format!("{}-{i:06}", split.name);
            let reference = domain.sentence(&mut stream_rng(self.seed, &utt_id, 0));
            if split.kind == SplitKind::Text {
                out.text.push(reference.iter().map(|t| t.id).collect());
                continue;
            }
            let nbest = rec.generate_nbest(&reference, split.n, &em, strength, self.seed, &utt_id)?;
            let mut utt = Utterance {
                utt_id: utt_id.clone(),
                reference: None,
                pseudo_reference: None,
                nbest,
                domain_tag: split.domain.clone(),
            };
            match split.kind {
                SplitKind::Labeled => utt.reference = Some(reference.clone()),
                SplitKind::Unlabeled if split.pseudo_reference => {
                    utt.pseudo_reference = Some(rec.pseudo_reference(&reference, &em, self.seed, &utt_id)?);
                }
                _ => {}
            }
            out.truth.insert(utt_id, reference);
            out.utterances.push(utt);
        }
        Ok(out)
    }

    pub fn generate(&self) -> Result<Vec<GeneratedSplit>> {
        self.validate()?;
        self.splits.iter().map(|s| self.generate_split(s)).collect()
    }

    /// Writes every split to `out`: `<name>.jsonl` plus the
    /// `<name>.truth.jsonl` sidecar for n-best splits, `<name>.txt` for text
    /// splits. Returns the written paths.
    pub fn write(&self, out: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        let mut written = Vec::new();
        for split in self.generate()? {
            let name = &split.spec.name;
            if split.spec.kind == SplitKind::Text {
                let p = out.join(format!("{name}.txt"));
                json::write_atomic(&p, text_to_string(&split.text).as_bytes())?;
                written.push(p);
                continue;
            }
            let p = out.join(format!("{name}.jsonl"));
            json::write_atomic(&p, corpus_to_string(&split.header, &split.utterances).as_bytes())?;
            written.push(p);
            let p = out.join(format!("{name}.truth.jsonl"));
            let header = TruthHeader {
                split: name.clone(),
                domain: split.spec.domain.clone(),
                error_model: self.domain_spec(&split.spec.domain)?.error_model,
            };
            json::write_atomic(&p, truth_to_string(&header, &split.truth).as_bytes())?;
            written.push(p);
        }
        Ok(written)
    }
}

fn truth_to_string(header: &TruthHeader, truth: &Truth) -> String {
    let mut s = json::to_line(header);
    s.push('\n');
    for (utt_id, reference) in truth {
        s.push_str(&json::to_line(&TruthLine {
            utt_id: utt_id.clone(),
            reference: reference.clone(),
        }));
        s.push('\n');
    }
    s
}

/// Reads a hidden-reference sidecar.
pub fn read_truth(path: &Path) -> Result<Truth> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut truth = Truth::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let t: TruthLine = serde_json::from_str(&line).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            line: i + 1,
            source,
        })?;
        truth.insert(t.utt_id, t.reference);
    }
    Ok(truth)
}
