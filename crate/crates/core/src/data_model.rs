//! Shared domain types and the JSONL corpus format.
//!
//! A corpus file starts with one [`CorpusHeader`] line followed by one
//! [`Utterance`] object per line. Every invariant is checked on read, so
//! downstream code can rely on it without re-validating.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, Lines};
use std::ops::Range;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::json;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusHeader {
    pub version: u32,
    pub vocab_size: u32,
    pub topk: usize,
    pub extra_dims: usize,
}

impl CorpusHeader {
    pub fn new(vocab_size: u32, topk: usize, extra_dims: usize) -> Self {
        Self {
            version: FORMAT_VERSION,
            vocab_size,
            topk,
            extra_dims,
        }
    }
}

/// One word-piece of a hypothesis or reference.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Token {
    pub id: u32,
    pub surface: String,
    pub word_start: bool,
}

impl Token {
    pub fn new(id: u32, surface: impl Into<String>, word_start: bool) -> Self {
        Self {
            id,
            surface: surface.into(),
            word_start,
        }
    }
}

/// Decoder-side features for one emitted token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenFeatures {
    pub log_posterior: f64,
    pub entropy: f64,
    pub topk_logprobs: Vec<f64>,
    /// Producer-specific columns (e.g. a projected decoder state).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub extra: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lm_in_logprob: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lm_ood_logprob: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub tokens: Vec<Token>,
    pub features: Vec<TokenFeatures>,
    pub decode_score: f64,
}

impl Hypothesis {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn ids(&self) -> Vec<u32> {
        self.tokens.iter().map(|t| t.id).collect()
    }

    pub fn word_starts(&self) -> Vec<bool> {
        self.tokens.iter().map(|t| t.word_start).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    pub utt_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<Vec<Token>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pseudo_reference: Option<Vec<Token>>,
    pub nbest: Vec<Hypothesis>,
    pub domain_tag: String,
}

/// A hypothesis together with its alignment-derived binary targets.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledHypothesis {
    pub hypothesis: Hypothesis,
    pub token_labels: Vec<bool>,
    pub word_labels: Vec<bool>,
    pub utterance_label: bool,
}

/// Token index ranges of the words in `tokens`.
///
/// A word starts at every `word_start` token; a leading run without a start
/// flag (only possible in unvalidated input) forms its own word.
pub fn word_spans(tokens: &[Token]) -> Vec<Range<usize>> {
    word_spans_from_flags(tokens.iter().map(|t| t.word_start))
}

pub fn word_spans_from_flags(flags: impl IntoIterator<Item = bool>) -> Vec<Range<usize>> {
    let mut spans = Vec::new();
    let mut start = 0;
    let mut n = 0;
    for (i, flag) in flags.into_iter().enumerate() {
        if flag && i > 0 {
            spans.push(start..i);
            start = i;
        }
        n = i + 1;
    }
    if n > 0 {
        spans.push(start..n);
    }
    spans
}

/// Word strings, each the concatenated surfaces of its pieces.
pub fn words(tokens: &[Token]) -> Vec<String> {
    word_spans(tokens)
        .into_iter()
        .map(|r| tokens[r].iter().map(|t| t.surface.as_str()).collect())
        .collect()
}

fn violation(utt: &Utterance, field: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Invariant {
        utt_id: utt.utt_id.clone(),
        field: field.into(),
        message: message.into(),
    }
}

fn check_tokens(utt: &Utterance, header: &CorpusHeader, field: &str, tokens: &[Token]) -> Result<()> {
    if let Some(first) = tokens.first() {
        if !first.word_start {
            return Err(violation(utt, field, "first token must start a word"));
        }
    }
    for (i, t) in tokens.iter().enumerate() {
        if t.id >= header.vocab_size {
            return Err(violation(
                utt,
                format!("{field}[{i}].id"),
                format!("id {} >= vocab_size {}", t.id, header.vocab_size),
            ));
        }
    }
    Ok(())
}

fn check_features(utt: &Utterance, header: &CorpusHeader, field: &str, f: &TokenFeatures) -> Result<()> {
    let bad = |what: &str, msg: String| Err(violation(utt, format!("{field}.{what}"), msg));
    if !f.log_posterior.is_finite() || f.log_posterior > 0.0 {
        return bad("log_posterior", format!("{} is not a finite log-probability", f.log_posterior));
    }
    if !f.entropy.is_finite() || f.entropy < 0.0 {
        return bad("entropy", format!("{} is not a finite non-negative entropy", f.entropy));
    }
    if f.topk_logprobs.len() != header.topk {
        return bad(
            "topk_logprobs",
            format!("length {} != header topk {}", f.topk_logprobs.len(), header.topk),
        );
    }
    if f.topk_logprobs.iter().any(|v| !v.is_finite() || *v > 0.0) {
        return bad("topk_logprobs", "values must be finite log-probabilities".into());
    }
    if f.topk_logprobs.windows(2).any(|w| w[0] < w[1]) {
        return bad("topk_logprobs", "not sorted in non-increasing order".into());
    }
    if let Some(&top) = f.topk_logprobs.first() {
        if top < f.log_posterior {
            return bad("topk_logprobs", format!("top-1 {top} < log_posterior {}", f.log_posterior));
        }
    }
    if f.extra.len() != header.extra_dims {
        return bad(
            "extra",
            format!("length {} != header extra_dims {}", f.extra.len(), header.extra_dims),
        );
    }
    if f.extra.iter().any(|v| !v.is_finite()) {
        return bad("extra", "non-finite value".into());
    }
    for (name, lp) in [("lm_in_logprob", f.lm_in_logprob), ("lm_ood_logprob", f.lm_ood_logprob)] {
        if let Some(v) = lp {
            if !v.is_finite() || v > 0.0 {
                return bad(name, format!("{v} is not a finite log-probability"));
            }
        }
    }
    Ok(())
}

impl Utterance {
    /// Checks every per-type invariant against the corpus header.
    pub fn validate(&self, header: &CorpusHeader) -> Result<()> {
        if self.nbest.is_empty() {
            return Err(violation(self, "nbest", "must contain at least one hypothesis"));
        }
        if let Some(r) = &self.reference {
            check_tokens(self, header, "reference", r)?;
        }
        if let Some(r) = &self.pseudo_reference {
            check_tokens(self, header, "pseudo_reference", r)?;
        }
        for (h, hyp) in self.nbest.iter().enumerate() {
            let field = format!("nbest[{h}]");
            if hyp.tokens.len() != hyp.features.len() {
                return Err(violation(
                    self,
                    format!("{field}.features"),
                    format!("{} tokens but {} feature rows", hyp.tokens.len(), hyp.features.len()),
                ));
            }
            if !hyp.decode_score.is_finite() {
                return Err(violation(self, format!("{field}.decode_score"), "not finite"));
            }
            check_tokens(self, header, &format!("{field}.tokens"), &hyp.tokens)?;
            for (i, f) in hyp.features.iter().enumerate() {
                check_features(self, header, &format!("{field}.features[{i}]"), f)?;
            }
        }
        if self
            .nbest
            .windows(2)
            .any(|w| w[0].decode_score < w[1].decode_score)
        {
            return Err(violation(self, "nbest", "not sorted by decode_score descending"));
        }
        Ok(())
    }
}

/// Streaming reader over a corpus file.
pub struct CorpusReader {
    path: PathBuf,
    header: CorpusHeader,
    lines: Lines<BufReader<File>>,
    line_no: usize,
    seen: HashSet<String>,
}

impl CorpusReader {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
        let mut lines = BufReader::new(file).lines();
        let first = match lines.next() {
            Some(l) => l.map_err(|e| Error::io(&path, e))?,
            None => return Err(Error::Format(format!("{}: missing header line", path.display()))),
        };
        let header: CorpusHeader = serde_json::from_str(&first).map_err(|source| Error::Json {
            path: path.clone(),
            line: 1,
            source,
        })?;
        if header.version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "{}: unsupported corpus version {}",
                path.display(),
                header.version
            )));
        }
        Ok(Self {
            path,
            header,
            lines,
            line_no: 1,
            seen: HashSet::new(),
        })
    }

    pub fn header(&self) -> &CorpusHeader {
        &self.header
    }
}

impl Iterator for CorpusReader {
    type Item = Result<Utterance>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let line = match self.lines.next()? {
                Ok(l) => l,
                Err(e) => return Some(Err(Error::io(&self.path, e))),
            };
            self.line_no += 1;
            if line.trim().is_empty() {
                continue;
            }
            let utt: Utterance = match serde_json::from_str(&line) {
                Ok(u) => u,
                Err(source) => {
                    return Some(Err(Error::Json {
                        path: self.path.clone(),
                        line: self.line_no,
                        source,
                    }))
                }
            };
            if let Err(e) = utt.validate(&self.header) {
                return Some(Err(e));
            }
            if !self.seen.insert(utt.utt_id.clone()) {
                return Some(Err(violation(&utt, "utt_id", "duplicate id")));
            }
            return Some(Ok(utt));
        }
    }
}

pub fn read_corpus(path: impl AsRef<Path>) -> Result<CorpusReader> {
    CorpusReader::open(path)
}

/// Reads and validates a whole corpus into memory.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<(CorpusHeader, Vec<Utterance>)> {
    let reader = CorpusReader::open(path)?;
    let header = reader.header().clone();
    let utts = reader.collect::<Result<Vec<_>>>()?;
    Ok((header, utts))
}

pub fn corpus_to_string<'a>(header: &CorpusHeader, utts: impl IntoIterator<Item = &'a Utterance>) -> String {
    let mut out = json::to_line(header);
    out.push('\n');
    for u in utts {
        out.push_str(&json::to_line(u));
        out.push('\n');
    }
    out
}

pub fn write_corpus<'a>(
    header: &CorpusHeader,
    utts: impl IntoIterator<Item = &'a Utterance>,
    path: impl AsRef<Path>,
) -> Result<()> {
    json::write_atomic(path.as_ref(), corpus_to_string(header, utts).as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn feat(lp: f64) -> TokenFeatures {
        TokenFeatures {
            log_posterior: lp,
            entropy: 0.3,
            topk_logprobs: vec![lp, -3.0],
            extra: vec![],
            lm_in_logprob: None,
            lm_ood_logprob: None,
        }
    }

    fn utt(id: &str) -> Utterance {
        Utterance {
            utt_id: id.into(),
            reference: Some(vec![Token::new(1, "_a", true)]),
            pseudo_reference: None,
            nbest: vec![Hypothesis {
                tokens: vec![Token::new(1, "_a", true), Token::new(2, "b", false)],
                features: vec![feat(-0.1), feat(-0.5)],
                decode_score: -0.6,
            }],
            domain_tag: "in".into(),
        }
    }

    fn header() -> CorpusHeader {
        CorpusHeader::new(10, 2, 0)
    }

    #[test]
    fn header_only_corpus_is_empty() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.jsonl");
        write_corpus(&header(), &[], &p).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap().lines().count(), 1);
        let (h, utts) = load_corpus(&p).unwrap();
        assert_eq!(h, header());
        assert!(utts.is_empty());
    }

    #[test]
    fn round_trip_keeps_optional_fields_absent() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.jsonl");
        let u = utt("u1");
        write_corpus(&header(), [&u], &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(!text.contains("pseudo_reference"));
        assert!(!text.contains("null"));
        let (_, utts) = load_corpus(&p).unwrap();
        assert_eq!(utts, vec![u]);
    }

    #[test]
    fn length_mismatch_names_utterance() {
        let mut u = utt("bad-one");
        u.nbest[0].features.pop();
        let err = u.validate(&header()).unwrap_err();
        assert!(err.to_string().contains("bad-one"), "{err}");
        assert!(err.to_string().contains("features"), "{err}");
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.jsonl");
        let mut text = corpus_to_string(&header(), [&utt("u1")]);
        text.push_str("{not json\n");
        std::fs::write(&p, text).unwrap();
        let err = load_corpus(&p).unwrap_err();
        assert!(matches!(err, Error::Json { line: 3, .. }), "{err}");
    }

    #[test]
    fn invariant_checks() {
        let h = header();
        let mut u = utt("x");
        u.nbest[0].tokens[0].word_start = false;
        assert!(u.validate(&h).is_err());

        let mut u = utt("x");
        u.nbest[0].tokens[1].id = 10;
        assert!(u.validate(&h).is_err());

        let mut u = utt("x");
        u.nbest[0].features[0].topk_logprobs = vec![-3.0, -0.1];
        assert!(u.validate(&h).is_err());

        let mut u = utt("x");
        u.nbest[0].features[0].topk_logprobs = vec![-0.2, -3.0];
        assert!(u.validate(&h).is_err(), "top-1 below log_posterior");

        let mut u = utt("x");
        u.nbest[0].features[0].entropy = -1.0;
        assert!(u.validate(&h).is_err());

        let mut u = utt("x");
        let mut second = u.nbest[0].clone();
        second.decode_score = 0.0;
        u.nbest.push(second);
        assert!(u.validate(&h).is_err(), "unsorted n-best");

        let mut u = utt("x");
        u.nbest.clear();
        assert!(u.validate(&h).is_err());
    }

    #[test]
    fn duplicate_ids_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.jsonl");
        let u = utt("dup");
        write_corpus(&header(), [&u, &u], &p).unwrap();
        let err = load_corpus(&p).unwrap_err();
        assert!(err.to_string().contains("dup"));
    }

    #[test]
    fn word_grouping() {
        let toks = vec![
            Token::new(1, "_a", true),
            Token::new(2, "#b", false),
            Token::new(3, "_c", true),
        ];
        assert_eq!(word_spans(&toks), vec![0..2, 2..3]);
        assert_eq!(words(&toks), vec!["_a#b".to_string(), "_c".to_string()]);
        assert!(word_spans(&[]).is_empty());
    }
}
