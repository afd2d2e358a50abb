//! Back-off n-gram language model over corpus token ids.
//!
//! Estimation is interpolated absolute discounting with a single discount.
//! Every sentence is padded with one begin-of-sentence context symbol and
//! closed with an explicit end-of-sentence event. Ids never seen in
//! training map to a reserved `<unk>` whose unigram count is the number of
//! singleton token types.
//!
//! For an interpolated model the back-off weight of a context equals its
//! interpolation weight, so the stored `(probability, back-off)` tables give
//! the exact same conditionals through the usual ARPA back-off walk.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::json::write_atomic;

pub const DEFAULT_ORDER: usize = 3;
pub const DEFAULT_DISCOUNT: f64 = 0.75;

/// log10 value ARPA files use for impossible events.
const ARPA_ZERO: f64 = -99.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Sym {
    Bos,
    Eos,
    Unk,
    Word(u32),
}

impl fmt::Display for Sym {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Sym::Bos => f.write_str("<s>"),
            Sym::Eos => f.write_str("</s>"),
            Sym::Unk => f.write_str("<unk>"),
            Sym::Word(id) => write!(f, "{id}"),
        }
    }
}

impl FromStr for Sym {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "<s>" => Ok(Sym::Bos),
            "</s>" => Ok(Sym::Eos),
            "<unk>" => Ok(Sym::Unk),
            _ => s
                .parse()
                .map(Sym::Word)
                .map_err(|_| Error::Format(format!("bad ARPA symbol `{s}`"))),
        }
    }
}

/// Raw n-gram counts, one table per order.
#[derive(Debug, Clone)]
pub struct NGramCounts {
    order: usize,
    tables: Vec<HashMap<Vec<Sym>, u64>>,
    vocab: BTreeSet<u32>,
}

impl NGramCounts {
    pub fn from_corpus(corpus: &[Vec<u32>], order: usize) -> Result<Self> {
        if order < 1 {
            return Err(Error::invalid("n-gram order must be at least 1"));
        }
        if corpus.is_empty() {
            return Err(Error::invalid("cannot train a language model on an empty corpus"));
        }
        let mut counts = Self {
            order,
            tables: vec![HashMap::new(); order],
            vocab: BTreeSet::new(),
        };
        for sentence in corpus {
            counts.vocab.extend(sentence.iter().copied());
            let mut stream = Vec::with_capacity(sentence.len() + 2);
            stream.push(Sym::Bos);
            stream.extend(sentence.iter().map(|&id| Sym::Word(id)));
            stream.push(Sym::Eos);
            for end in 1..stream.len() {
                for k in 1..=order.min(end + 1) {
                    *counts.tables[k - 1]
                        .entry(stream[end + 1 - k..=end].to_vec())
                        .or_insert(0) += 1;
                }
            }
        }
        Ok(counts)
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn count(&self, ngram: &[Sym]) -> u64 {
        if ngram.is_empty() || ngram.len() > self.order {
            return 0;
        }
        self.tables[ngram.len() - 1].get(ngram).copied().unwrap_or(0)
    }

    /// Adds `k` occurrences of `ngram` at its own order only.
    pub fn add(&mut self, ngram: &[Sym], k: u64) {
        assert!(!ngram.is_empty() && ngram.len() <= self.order, "n-gram length out of range");
        for s in ngram {
            if let Sym::Word(id) = s {
                self.vocab.insert(*id);
            }
        }
        *self.tables[ngram.len() - 1].entry(ngram.to_vec()).or_insert(0) += k;
    }

    /// Estimates the interpolated absolute-discounting model.
    pub fn estimate(&self, discount: f64) -> Result<NGramModel> {
        if !(discount > 0.0 && discount < 1.0) {
            return Err(Error::invalid(format!("discount {discount} outside (0, 1)")));
        }
        let mut model = NGramModel {
            order: self.order,
            probs: vec![BTreeMap::new(); self.order],
            backoffs: vec![BTreeMap::new(); self.order],
            vocab: self.vocab.clone(),
        };

        // Unigrams: every word, <unk> and </s>, interpolated with a uniform floor.
        let mut uni: BTreeMap<Sym, u64> = self.vocab.iter().map(|&id| (Sym::Word(id), 0)).collect();
        uni.insert(Sym::Unk, 0);
        uni.insert(Sym::Eos, 0);
        for (g, &c) in &self.tables[0] {
            if g[0] != Sym::Bos {
                *uni.entry(g[0]).or_insert(0) += c;
            }
        }
        let singletons = uni
            .iter()
            .filter(|(s, &c)| matches!(s, Sym::Word(_)) && c == 1)
            .count() as u64;
        *uni.get_mut(&Sym::Unk).expect("inserted above") += singletons;
        let total: u64 = uni.values().sum();
        let types = uni.values().filter(|&&c| c > 0).count() as f64;
        let floor = discount * types / total as f64 / uni.len() as f64;
        for (s, &c) in &uni {
            let p = (c as f64 - discount).max(0.0) / total as f64 + floor;
            model.probs[0].insert(vec![*s], p.ln());
        }

        // Higher orders, lowest first so lower-order lookups are final.
        for k in 2..=self.order {
            let mut by_context: BTreeMap<&[Sym], Vec<(Sym, u64)>> = BTreeMap::new();
            for (g, &c) in &self.tables[k - 1] {
                if c > 0 {
                    by_context.entry(&g[..k - 1]).or_default().push((g[k - 1], c));
                }
            }
            for (context, conts) in by_context {
                let total: u64 = conts.iter().map(|&(_, c)| c).sum();
                let gamma = discount * conts.len() as f64 / total as f64;
                let mut entries = Vec::with_capacity(conts.len());
                for &(w, c) in &conts {
                    let lower = model.logprob_in_context(&context[1..], w).exp();
                    let p = (c as f64 - discount) / total as f64 + gamma * lower;
                    let mut g = context.to_vec();
                    g.push(w);
                    entries.push((g, p.ln()));
                }
                model.probs[k - 1].extend(entries);
                model.backoffs[k - 2].insert(context.to_vec(), gamma.ln());
            }
        }
        Ok(model)
    }
}

/// A trained back-off model. Probabilities and back-off weights are natural
/// logs; `backoffs[k-1]` is keyed by length-`k` contexts.
#[derive(Debug, Clone, PartialEq)]
pub struct NGramModel {
    pub order: usize,
    pub probs: Vec<BTreeMap<Vec<Sym>, f64>>,
    pub backoffs: Vec<BTreeMap<Vec<Sym>, f64>>,
    pub vocab: BTreeSet<u32>,
}

pub fn train_ngram(corpus: &[Vec<u32>], order: usize, discount: f64) -> Result<NGramModel> {
    NGramCounts::from_corpus(corpus, order)?.estimate(discount)
}

impl NGramModel {
    pub fn map_id(&self, id: u32) -> Sym {
        if self.vocab.contains(&id) {
            Sym::Word(id)
        } else {
            Sym::Unk
        }
    }

    /// Symbols that carry probability mass after any context.
    pub fn events(&self) -> Vec<Sym> {
        self.probs[0].keys().map(|g| g[0]).collect()
    }

    /// Natural-log `P(w | context)` via the back-off walk, using at most the
    /// last `order - 1` symbols of `context`.
    pub fn logprob_in_context(&self, context: &[Sym], w: Sym) -> f64 {
        let keep = context.len().min(self.order - 1);
        let mut ctx = &context[context.len() - keep..];
        let mut acc = 0.0;
        let mut gram = Vec::with_capacity(self.order);
        loop {
            gram.clear();
            gram.extend_from_slice(ctx);
            gram.push(w);
            if let Some(&p) = self.probs[ctx.len()].get(&gram) {
                return acc + p;
            }
            if ctx.is_empty() {
                // Only <s> is absent from the unigram table.
                return f64::NEG_INFINITY;
            }
            acc += self.backoffs[ctx.len() - 1].get(ctx).copied().unwrap_or(0.0);
            ctx = &ctx[1..];
        }
    }

    /// Per-token natural-log probabilities with sentence-begin padding.
    pub fn score_sequence(&self, tokens: &[u32]) -> Vec<f64> {
        let mut history = Vec::with_capacity(tokens.len() + 1);
        history.push(Sym::Bos);
        tokens
            .iter()
            .map(|&id| {
                let w = self.map_id(id);
                let lp = self.logprob_in_context(&history, w);
                history.push(w);
                lp
            })
            .collect()
    }

    /// Sorted ARPA text with log10 values.
    pub fn to_arpa(&self) -> String {
        // Per n-gram: (log prob, backoff weight).
        type Section = BTreeMap<Vec<Sym>, (Option<f64>, Option<f64>)>;
        let mut sections: Vec<Section> = vec![BTreeMap::new(); self.order];
        for (k, table) in self.probs.iter().enumerate() {
            for (g, &p) in table {
                sections[k].entry(g.clone()).or_default().0 = Some(p);
            }
        }
        for (k, table) in self.backoffs.iter().enumerate() {
            for (g, &b) in table {
                sections[k].entry(g.clone()).or_default().1 = Some(b);
            }
        }
        let mut out = String::from("\\data\\\n");
        for (k, s) in sections.iter().enumerate() {
            writeln!(out, "ngram {}={}", k + 1, s.len()).unwrap();
        }
        for (k, s) in sections.iter().enumerate() {
            writeln!(out, "\n\\{}-grams:", k + 1).unwrap();
            for (g, (p, b)) in s {
                let p10 = p.map_or(ARPA_ZERO, |v| v / std::f64::consts::LN_10);
                write!(out, "{p10}\t").unwrap();
                let words: Vec<String> = g.iter().map(Sym::to_string).collect();
                out.push_str(&words.join(" "));
                if let Some(b) = b {
                    write!(out, "\t{}", b / std::f64::consts::LN_10).unwrap();
                }
                out.push('\n');
            }
        }
        out.push_str("\n\\end\\\n");
        out
    }

    pub fn from_arpa(text: &str) -> Result<Self> {
        let bad = |line: usize, msg: &str| Error::Format(format!("ARPA line {line}: {msg}"));
        let mut declared: Vec<usize> = Vec::new();
        let mut section = 0usize;
        let mut model = NGramModel {
            order: 0,
            probs: Vec::new(),
            backoffs: Vec::new(),
            vocab: BTreeSet::new(),
        };
        let mut in_data = false;
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            if line == "\\data\\" {
                in_data = true;
                continue;
            }
            if line == "\\end\\" {
                break;
            }
            if let Some(rest) = line.strip_prefix("ngram ") {
                let (k, n) = rest.split_once('=').ok_or_else(|| bad(line_no, "bad count line"))?;
                let k: usize = k.trim().parse().map_err(|_| bad(line_no, "bad order"))?;
                let n: usize = n.trim().parse().map_err(|_| bad(line_no, "bad count"))?;
                if k != declared.len() + 1 {
                    return Err(bad(line_no, "orders must be listed in sequence"));
                }
                declared.push(n);
                continue;
            }
            if line.starts_with('\\') && line.ends_with("-grams:") {
                section = line[1..line.len() - 7]
                    .parse()
                    .map_err(|_| bad(line_no, "bad section header"))?;
                if section == 0 || section > declared.len() {
                    return Err(bad(line_no, "section order not declared"));
                }
                if model.order == 0 {
                    model.order = declared.len();
                    model.probs = vec![BTreeMap::new(); model.order];
                    model.backoffs = vec![BTreeMap::new(); model.order];
                }
                continue;
            }
            if !in_data || section == 0 {
                continue;
            }
            let mut fields = line.split_whitespace();
            let p10: f64 = fields
                .next()
                .and_then(|f| f.parse().ok())
                .ok_or_else(|| bad(line_no, "bad probability"))?;
            let gram: Vec<Sym> = fields
                .by_ref()
                .take(section)
                .map(str::parse)
                .collect::<Result<_>>()?;
            if gram.len() != section {
                return Err(bad(line_no, "n-gram shorter than its section"));
            }
            let bo: Option<f64> = match fields.next() {
                Some(f) => Some(f.parse().map_err(|_| bad(line_no, "bad back-off"))?),
                None => None,
            };
            for s in &gram {
                if let Sym::Word(id) = s {
                    model.vocab.insert(*id);
                }
            }
            if p10 > ARPA_ZERO {
                model.probs[section - 1].insert(gram.clone(), p10 * std::f64::consts::LN_10);
            }
            if let Some(b) = bo {
                model.backoffs[section - 1].insert(gram, b * std::f64::consts::LN_10);
            }
        }
        if model.order == 0 {
            return Err(Error::Format("ARPA file has no n-gram sections".into()));
        }
        for (k, &n) in declared.iter().enumerate() {
            let have = model.probs[k]
                .keys()
                .chain(model.backoffs[k].keys())
                .collect::<BTreeSet<_>>()
                .len();
            if have != n {
                return Err(Error::Format(format!(
                    "ARPA header declares {n} {}-grams but {have} were read",
                    k + 1
                )));
            }
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_arpa().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_arpa(&text)
    }
}

/// Parses whitespace-separated token ids, one sentence per line.
pub fn parse_text(text: &str) -> Result<Vec<Vec<u32>>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.split_whitespace()
                .map(|w| {
                    w.parse()
                        .map_err(|_| Error::Format(format!("text line {}: bad token id `{w}`", i + 1)))
                })
                .collect()
        })
        .collect()
}

pub fn read_text(path: &Path) -> Result<Vec<Vec<u32>>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_text(&text)
}

pub fn text_to_string(corpus: &[Vec<u32>]) -> String {
    let mut out = String::new();
    for s in corpus {
        let line: Vec<String> = s.iter().map(u32::to_string).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn total_mass(m: &NGramModel, context: &[Sym]) -> f64 {
        m.events()
            .into_iter()
            .map(|w| m.logprob_in_context(context, w).exp())
            .sum()
    }

    #[test]
    fn single_sentence_unigram_normalizes() {
        let m = train_ngram(&[vec![5]], 1, 0.75).unwrap();
        let p = |s| m.logprob_in_context(&[], s).exp();
        assert!((p(Sym::Word(5)) + p(Sym::Unk) + p(Sym::Eos) - 1.0).abs() < 1e-12);
        assert_eq!(m.events().len(), 3);
    }

    #[test]
    fn bigram_hand_computed() {
        // a=0, b=1; counts a:2 b:2 </s>:1 <unk>:0, |W|=4, N=5, three seen types.
        let m = train_ngram(&[vec![0, 1, 0, 1]], 2, 0.75).unwrap();
        let p_b = 1.25 / 5.0 + 0.75 * 3.0 / 5.0 / 4.0;
        let p_b_given_a = (2.0 - 0.75) / 2.0 + 0.75 * 1.0 / 2.0 * p_b;
        let got = m.logprob_in_context(&[Sym::Word(0)], Sym::Word(1)).exp();
        assert!((got - p_b_given_a).abs() < 1e-12, "{got} vs {p_b_given_a}");
        assert!((got - 0.7609375).abs() < 1e-12);
    }

    #[test]
    fn symmetric_unigrams_are_equal() {
        let m = train_ngram(&[vec![1, 2], vec![2, 1]], 1, 0.5).unwrap();
        let a = m.logprob_in_context(&[], Sym::Word(1));
        let b = m.logprob_in_context(&[], Sym::Word(2));
        assert_eq!(a, b);
    }

    #[test]
    fn errors() {
        assert!(train_ngram(&[], 2, 0.75).is_err());
        assert!(train_ngram(&[vec![1]], 0, 0.75).is_err());
        assert!(train_ngram(&[vec![1]], 2, 1.0).is_err());
    }

    #[test]
    fn unknown_ids_score_as_unk() {
        let m = train_ngram(&[vec![1, 2, 3], vec![1, 1]], 2, 0.75).unwrap();
        assert!(m.score_sequence(&[]).is_empty());
        let got = m.score_sequence(&[100, 200]);
        assert_eq!(got[0], m.logprob_in_context(&[Sym::Bos], Sym::Unk));
        assert_eq!(got[1], m.logprob_in_context(&[Sym::Bos, Sym::Unk], Sym::Unk));
    }

    #[test]
    fn contexts_normalize() {
        let corpus = vec![vec![1, 2, 3, 1, 2], vec![3, 3, 1], vec![2, 1, 2, 2]];
        let m = train_ngram(&corpus, 3, 0.75).unwrap();
        let mut contexts: Vec<Vec<Sym>> = vec![vec![], vec![Sym::Bos], vec![Sym::Unk]];
        for table in &m.backoffs {
            contexts.extend(table.keys().cloned());
        }
        for c in contexts {
            let mass = total_mass(&m, &c);
            assert!((mass - 1.0).abs() < 1e-9, "context {c:?}: {mass}");
        }
    }

    #[test]
    fn arpa_round_trip() {
        let corpus = vec![vec![1, 2, 3, 1, 2], vec![3, 3, 1]];
        let m = train_ngram(&corpus, 3, 0.75).unwrap();
        let text = m.to_arpa();
        assert!(text.starts_with("\\data\\\nngram 1="));
        let back = NGramModel::from_arpa(&text).unwrap();
        assert_eq!(back.order, 3);
        assert_eq!(back.vocab, m.vocab);
        let seq = [1, 2, 9, 3, 3, 1];
        for (a, b) in m.score_sequence(&seq).iter().zip(back.score_sequence(&seq)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn text_format() {
        let c = vec![vec![1, 2], vec![3]];
        assert_eq!(parse_text(&text_to_string(&c)).unwrap(), c);
        assert!(parse_text("1 x\n").is_err());
    }
}
