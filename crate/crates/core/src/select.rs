//! Confidence-based utterance selection: the least confident utterances
//! (candidates for manual transcription) and the most confident ones
//! (candidates for self-training), each with its sentence error rate.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::align::ser;
use crate::data_model::Token;
use crate::error::{Error, Result};

pub const DEFAULT_K: usize = 200;

#[derive(Debug, Clone)]
pub struct Candidate {
    pub utt_id: String,
    pub confidence: f64,
    pub hypothesis: Vec<Token>,
    pub reference: Vec<Token>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub k: usize,
    pub bottom_ids: Vec<String>,
    pub top_ids: Vec<String>,
    pub bottom_ser: f64,
    pub top_ser: f64,
    pub threshold_bottom: f64,
    pub threshold_top: f64,
    /// Set when SERs were measured against pseudo references.
    pub pseudo_referenced: bool,
}

pub fn select_extremes(cands: &[Candidate], k: usize, pseudo_referenced: bool) -> Result<SelectionReport> {
    if cands.is_empty() {
        return Err(Error::invalid("nothing to select from"));
    }
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    if let Some(c) = cands.iter().find(|c| !c.confidence.is_finite()) {
        return Err(Error::invalid(format!("non-finite confidence for `{}`", c.utt_id)));
    }
    let k = k.min(cands.len());

    let mut ascending: Vec<&Candidate> = cands.iter().collect();
    ascending.sort_by(|a, b| a.confidence.total_cmp(&b.confidence).then_with(|| a.utt_id.cmp(&b.utt_id)));
    let mut descending: Vec<&Candidate> = cands.iter().collect();
    descending.sort_by(|a, b| match b.confidence.total_cmp(&a.confidence) {
        Ordering::Equal => a.utt_id.cmp(&b.utt_id),
        o => o,
    });
    let bottom = &ascending[..k];
    let top = &descending[..k];

    fn pairs<'a>(set: &[&'a Candidate]) -> Vec<(&'a [Token], &'a [Token])> {
        set.iter().map(|c| (c.hypothesis.as_slice(), c.reference.as_slice())).collect()
    }
    Ok(SelectionReport {
        k,
        bottom_ids: bottom.iter().map(|c| c.utt_id.clone()).collect(),
        top_ids: top.iter().map(|c| c.utt_id.clone()).collect(),
        bottom_ser: ser(&pairs(bottom))?,
        top_ser: ser(&pairs(top))?,
        threshold_bottom: bottom[k - 1].confidence,
        threshold_top: top[k - 1].confidence,
        pseudo_referenced,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cand(id: &str, confidence: f64, correct: bool) -> Candidate {
        let reference = vec![Token::new(1, "_a", true)];
        let hypothesis = if correct { reference.clone() } else { vec![Token::new(2, "_b", true)] };
        Candidate {
            utt_id: id.into(),
            confidence,
            hypothesis,
            reference,
        }
    }

    #[test]
    fn picks_extremes() {
        let c = vec![cand("a", 0.1, false), cand("b", 0.2, true), cand("c", 0.9, true)];
        let r = select_extremes(&c, 1, false).unwrap();
        assert_eq!(r.bottom_ids, vec!["a"]);
        assert_eq!(r.top_ids, vec!["c"]);
        assert_eq!(r.bottom_ser, 1.0);
        assert_eq!(r.top_ser, 0.0);
        assert_eq!(r.threshold_bottom, 0.1);
        assert_eq!(r.threshold_top, 0.9);
    }

    #[test]
    fn k_larger_than_corpus() {
        let c = vec![cand("a", 0.1, false), cand("b", 0.2, true)];
        let r = select_extremes(&c, 5, false).unwrap();
        assert_eq!(r.k, 2);
        assert_eq!(r.bottom_ser, r.top_ser);
    }

    #[test]
    fn ties_break_by_id() {
        let c = vec![cand("z", 0.5, true), cand("m", 0.5, true), cand("a", 0.5, false)];
        let r = select_extremes(&c, 1, false).unwrap();
        assert_eq!(r.bottom_ids, vec!["a"]);
        assert_eq!(r.top_ids, vec!["a"]);
    }

    #[test]
    fn errors() {
        assert!(select_extremes(&[], 1, false).is_err());
        assert!(select_extremes(&[cand("a", 0.1, true)], 0, false).is_err());
    }
}
