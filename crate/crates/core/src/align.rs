//! Levenshtein alignment and the binary confidence targets derived from it.

use crate::data_model::{word_spans, words, Hypothesis, LabeledHypothesis, Token};
use crate::error::{Error, Result};

/// One step of an edit script turning the reference into the hypothesis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EditOp {
    Match { hyp: usize, reference: usize },
    Substitute { hyp: usize, reference: usize },
    /// Hypothesis-only token.
    Insert { hyp: usize },
    /// Reference-only token.
    Delete { reference: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Alignment {
    pub ops: Vec<EditOp>,
    pub distance: usize,
}

impl Alignment {
    /// Rebuilds the hypothesis by applying the script to `reference`.
    pub fn replay<T: Clone>(&self, hyp: &[T], reference: &[T]) -> Vec<T> {
        self.ops
            .iter()
            .filter_map(|op| match *op {
                EditOp::Match { reference: r, .. } => Some(reference[r].clone()),
                EditOp::Substitute { hyp: h, .. } | EditOp::Insert { hyp: h } => Some(hyp[h].clone()),
                EditOp::Delete { .. } => None,
            })
            .collect()
    }
}

/// Unit-cost edit distance with a deterministic backtrace.
///
/// On ties the backtrace prefers the diagonal (match or substitution), then
/// deletion, then insertion.
pub fn levenshtein<T: PartialEq>(hyp: &[T], reference: &[T]) -> Alignment {
    let n = reference.len();
    let m = hyp.len();
    let w = m + 1;
    let mut d = vec![0usize; (n + 1) * w];
    for j in 0..=m {
        d[j] = j;
    }
    for i in 1..=n {
        d[i * w] = i;
        for j in 1..=m {
            let cost = usize::from(reference[i - 1] != hyp[j - 1]);
            let diag = d[(i - 1) * w + j - 1] + cost;
            let del = d[(i - 1) * w + j] + 1;
            let ins = d[i * w + j - 1] + 1;
            d[i * w + j] = diag.min(del).min(ins);
        }
    }

    let mut ops = Vec::with_capacity(n.max(m));
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = d[i * w + j];
        if i > 0 && j > 0 {
            let same = reference[i - 1] == hyp[j - 1];
            if here == d[(i - 1) * w + j - 1] + usize::from(!same) {
                i -= 1;
                j -= 1;
                ops.push(if same {
                    EditOp::Match { hyp: j, reference: i }
                } else {
                    EditOp::Substitute { hyp: j, reference: i }
                });
                continue;
            }
        }
        if i > 0 && here == d[(i - 1) * w + j] + 1 {
            i -= 1;
            ops.push(EditOp::Delete { reference: i });
        } else {
            j -= 1;
            ops.push(EditOp::Insert { hyp: j });
        }
    }
    ops.reverse();
    Alignment {
        ops,
        distance: d[n * w + m],
    }
}

fn token_key(t: &Token) -> (u32, bool) {
    (t.id, t.word_start)
}

/// Aligns `hyp` against `reference` and derives token, word and utterance
/// targets.
///
/// Tokens are compared by `(id, word_start)`. A token is correct iff it is
/// matched. A word is correct iff all its pieces are matched to one
/// complete reference word whose surface is identical. The utterance is
/// correct iff the edit distance is zero.
pub fn label_hypothesis(hyp: &Hypothesis, reference: &[Token]) -> LabeledHypothesis {
    let hyp_keys: Vec<_> = hyp.tokens.iter().map(token_key).collect();
    let ref_keys: Vec<_> = reference.iter().map(token_key).collect();
    let alignment = levenshtein(&hyp_keys, &ref_keys);

    let mut matched_ref: Vec<Option<usize>> = vec![None; hyp.tokens.len()];
    for op in &alignment.ops {
        if let EditOp::Match { hyp: h, reference: r } = *op {
            matched_ref[h] = Some(r);
        }
    }
    let token_labels: Vec<bool> = matched_ref.iter().map(Option::is_some).collect();

    let word_labels = word_spans(&hyp.tokens)
        .into_iter()
        .map(|span| {
            let refs: Option<Vec<usize>> = matched_ref[span.clone()].iter().copied().collect();
            let Some(refs) = refs else { return false };
            let (first, last) = (refs[0], refs[refs.len() - 1]);
            let contiguous = refs.windows(2).all(|p| p[1] == p[0] + 1);
            let starts_word = reference[first].word_start;
            let ends_word = last + 1 == reference.len() || reference[last + 1].word_start;
            let same_surface = hyp.tokens[span]
                .iter()
                .map(|t| t.surface.as_str())
                .eq(reference[first..=last].iter().map(|t| t.surface.as_str()));
            contiguous && starts_word && ends_word && same_surface
        })
        .collect();

    LabeledHypothesis {
        hypothesis: hyp.clone(),
        token_labels,
        word_labels,
        utterance_label: alignment.distance == 0,
    }
}

/// Word-level edit distance and reference word count of one pair.
pub fn word_errors(hyp: &[Token], reference: &[Token]) -> (usize, usize) {
    let h = words(hyp);
    let r = words(reference);
    (levenshtein(&h, &r).distance, r.len())
}

/// Corpus word error rate: total word edits over total reference words.
pub fn wer(pairs: &[(&[Token], &[Token])]) -> Result<f64> {
    let (edits, total) = pairs.iter().fold((0, 0), |(e, t), (h, r)| {
        let (de, dt) = word_errors(h, r);
        (e + de, t + dt)
    });
    if total == 0 {
        return Err(Error::invalid("WER needs at least one reference word"));
    }
    Ok(edits as f64 / total as f64)
}

/// Fraction of pairs containing at least one word error.
pub fn ser(pairs: &[(&[Token], &[Token])]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::invalid("SER of an empty list"));
    }
    let wrong = pairs.iter().filter(|(h, r)| word_errors(h, r).0 > 0).count();
    Ok(wrong as f64 / pairs.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_model::TokenFeatures;

    fn tok(id: u32, start: bool) -> Token {
        let surface = if start { format!("_{id}") } else { format!("#{id}") };
        Token::new(id, surface, start)
    }

    fn hyp(tokens: Vec<Token>) -> Hypothesis {
        let features = tokens
            .iter()
            .map(|_| TokenFeatures {
                log_posterior: -0.1,
                entropy: 0.1,
                topk_logprobs: vec![],
                extra: vec![],
                lm_in_logprob: None,
                lm_ood_logprob: None,
            })
            .collect();
        Hypothesis {
            tokens,
            features,
            decode_score: 0.0,
        }
    }

    #[test]
    fn identity_alignment() {
        let a = levenshtein(&['a', 'b'], &['a', 'b']);
        assert_eq!(a.distance, 0);
        assert_eq!(
            a.ops,
            vec![
                EditOp::Match { hyp: 0, reference: 0 },
                EditOp::Match { hyp: 1, reference: 1 }
            ]
        );
    }

    #[test]
    fn empty_hypothesis_is_all_deletions() {
        let a = levenshtein::<char>(&[], &['a']);
        assert_eq!(a.distance, 1);
        assert_eq!(a.ops, vec![EditOp::Delete { reference: 0 }]);
    }

    #[test]
    fn single_insertion() {
        let a = levenshtein(&['a', 'x', 'b'], &['a', 'b']);
        assert_eq!(a.distance, 1);
        assert_eq!(
            a.ops,
            vec![
                EditOp::Match { hyp: 0, reference: 0 },
                EditOp::Insert { hyp: 1 },
                EditOp::Match { hyp: 2, reference: 1 }
            ]
        );
    }

    #[test]
    fn tie_break_prefers_substitution() {
        let a = levenshtein(&['x'], &['a']);
        assert_eq!(a.ops, vec![EditOp::Substitute { hyp: 0, reference: 0 }]);
    }

    #[test]
    fn labels_for_inserted_word() {
        let reference = vec![tok(1, true), tok(2, true)];
        let h = hyp(vec![tok(1, true), tok(9, true), tok(2, true)]);
        let l = label_hypothesis(&h, &reference);
        assert_eq!(l.token_labels, vec![true, false, true]);
        assert_eq!(l.word_labels, vec![true, false, true]);
        assert!(!l.utterance_label);
    }

    #[test]
    fn perfect_hypothesis_labels() {
        let reference = vec![tok(1, true), tok(2, false), tok(3, true)];
        let l = label_hypothesis(&hyp(reference.clone()), &reference);
        assert!(l.token_labels.iter().all(|&b| b));
        assert_eq!(l.word_labels, vec![true, true]);
        assert!(l.utterance_label);
    }

    #[test]
    fn empty_hypothesis_labels() {
        let l = label_hypothesis(&hyp(vec![]), &[tok(1, true)]);
        assert!(l.token_labels.is_empty());
        assert!(l.word_labels.is_empty());
        assert!(!l.utterance_label);
    }

    #[test]
    fn partially_matched_word_is_wrong() {
        // Hypothesis word `_1#2` against reference word `_1#2#3`.
        let reference = vec![tok(1, true), tok(2, false), tok(3, false)];
        let l = label_hypothesis(&hyp(vec![tok(1, true), tok(2, false)]), &reference);
        assert_eq!(l.token_labels, vec![true, true]);
        assert_eq!(l.word_labels, vec![false]);
    }

    #[test]
    fn word_error_rates() {
        let a = vec![tok(1, true), tok(2, true)];
        let c = vec![tok(1, true), tok(3, true)];
        assert_eq!(wer(&[(&a, &a)]).unwrap(), 0.0);
        assert_eq!(wer(&[(&a, &c)]).unwrap(), 0.5);
        assert!(wer(&[(&a, &[])]).is_err());

        assert_eq!(ser(&[(&a, &a), (&c, &c)]).unwrap(), 0.0);
        assert_eq!(ser(&[(&a, &c), (&c, &a)]).unwrap(), 1.0);
        assert_eq!(ser(&[(&a, &a), (&a, &c), (&c, &a), (&[], &a)]).unwrap(), 0.75);
        assert!(ser(&[]).is_err());
    }
}
