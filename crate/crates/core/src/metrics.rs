//! Ranking and calibration metrics for binary confidence scores.
//!
//! The positive class is "correct" (label `true`).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_ECE_BINS: usize = 50;
pub const PROB_CLIP: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScoredSet {
    pub scores: Vec<f64>,
    pub labels: Vec<bool>,
}

impl ScoredSet {
    pub fn new(scores: Vec<f64>, labels: Vec<bool>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::invalid(format!(
                "{} scores but {} labels",
                scores.len(),
                labels.len()
            )));
        }
        if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
            return Err(Error::invalid(format!("non-finite score {s}")));
        }
        Ok(Self { scores, labels })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&l| l).count()
    }

    pub fn push(&mut self, score: f64, label: bool) {
        self.scores.push(score);
        self.labels.push(label);
    }

    pub fn extend(&mut self, other: &ScoredSet) {
        self.scores.extend_from_slice(&other.scores);
        self.labels.extend_from_slice(&other.labels);
    }

    fn require_both_classes(&self, what: &str) -> Result<(usize, usize)> {
        let pos = self.positives();
        let neg = self.len() - pos;
        if pos == 0 || neg == 0 {
            return Err(Error::invalid(format!(
                "{what} needs both classes ({pos} positive, {neg} negative)"
            )));
        }
        Ok((pos, neg))
    }

    /// `(positives, negatives)` per distinct score, highest score first.
    fn groups_descending(&self) -> Vec<(usize, usize)> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by(|&a, &b| self.scores[b].total_cmp(&self.scores[a]));
        let mut groups: Vec<(usize, usize)> = Vec::new();
        let mut last = None;
        for i in order {
            let s = self.scores[i];
            if last != Some(s) {
                groups.push((0, 0));
                last = Some(s);
            }
            let g = groups.last_mut().expect("pushed above");
            if self.labels[i] {
                g.0 += 1;
            } else {
                g.1 += 1;
            }
        }
        groups
    }
}

/// Area under the precision-recall curve in average-precision form. Equal
/// scores form one threshold group.
pub fn auc_pr(s: &ScoredSet) -> Result<f64> {
    let (pos, _) = s.require_both_classes("AUC")?;
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut ap = 0.0;
    for (gp, gn) in s.groups_descending() {
        tp += gp;
        fp += gn;
        if gp > 0 {
            ap += gp as f64 / pos as f64 * (tp as f64 / (tp + fp) as f64);
        }
    }
    Ok(ap)
}

/// Equal error rate, linearly interpolated between the two operating points
/// that bracket the crossing of the false-negative and false-positive rates.
pub fn eer(s: &ScoredSet) -> Result<f64> {
    let (pos, neg) = s.require_both_classes("EER")?;
    // Operating points from "accept nothing" down to "accept everything",
    // i.e. FNR falling and FPR rising.
    let mut points = vec![(1.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    for (gp, gn) in s.groups_descending() {
        tp += gp;
        fp += gn;
        points.push(((pos - tp) as f64 / pos as f64, fp as f64 / neg as f64));
    }
    let j = points
        .iter()
        .position(|&(fnr, fpr)| fnr - fpr <= 0.0)
        .expect("last point has FNR 0 and FPR 1");
    let (fnr1, fpr1) = points[j];
    let d1 = fnr1 - fpr1;
    if d1 == 0.0 {
        return Ok(fnr1);
    }
    let (fnr0, fpr0) = points[j - 1];
    let d0 = fnr0 - fpr0;
    let t = d0 / (d0 - d1);
    Ok(fnr0 + t * (fnr1 - fnr0))
}

fn binary_entropy(p: f64) -> f64 {
    if p <= 0.0 || p >= 1.0 {
        0.0
    } else {
        -(p * p.ln() + (1.0 - p) * (1.0 - p).ln())
    }
}

/// Mean binary cross-entropy with scores clipped to `[1e-8, 1 - 1e-8]`.
pub fn cross_entropy(s: &ScoredSet) -> f64 {
    let total: f64 = s
        .scores
        .iter()
        .zip(&s.labels)
        .map(|(&p, &c)| {
            let p = p.clamp(PROB_CLIP, 1.0 - PROB_CLIP);
            if c {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    total / s.len() as f64
}

/// Normalized cross-entropy: `(H(c) - H(c, p)) / H(c)`.
pub fn nce(s: &ScoredSet) -> Result<f64> {
    if s.is_empty() {
        return Err(Error::invalid("NCE of an empty set"));
    }
    let prior = s.positives() as f64 / s.len() as f64;
    let h = binary_entropy(prior);
    if h == 0.0 {
        return Err(Error::invalid("NCE is undefined when all labels are identical"));
    }
    Ok((h - cross_entropy(s)) / h)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    /// Mean score of the items in the bin (0 when empty).
    pub confidence: f64,
    /// Fraction of correct items in the bin (0 when empty).
    pub accuracy: f64,
}

/// Index of the equal-width bin of `[0, 1]` containing `score`.
pub fn bin_index(score: f64, bins: usize) -> usize {
    ((score.clamp(0.0, 1.0) * bins as f64) as usize).min(bins - 1)
}

/// Equal-width reliability bins over `[0, 1]`.
pub fn reliability_bins(s: &ScoredSet, bins: usize) -> Result<Vec<Bin>> {
    if bins == 0 {
        return Err(Error::invalid("need at least one bin"));
    }
    let mut count = vec![0usize; bins];
    let mut conf = vec![0.0; bins];
    let mut correct = vec![0usize; bins];
    for (&p, &c) in s.scores.iter().zip(&s.labels) {
        let b = bin_index(p, bins);
        count[b] += 1;
        conf[b] += p;
        correct[b] += usize::from(c);
    }
    Ok((0..bins)
        .map(|b| {
            let n = count[b];
            Bin {
                lower: b as f64 / bins as f64,
                upper: (b + 1) as f64 / bins as f64,
                count: n,
                confidence: if n > 0 { conf[b] / n as f64 } else { 0.0 },
                accuracy: if n > 0 { correct[b] as f64 / n as f64 } else { 0.0 },
            }
        })
        .collect())
}

/// Expected calibration error over `bins` equal-width bins.
pub fn ece(s: &ScoredSet, bins: usize) -> Result<f64> {
    if s.is_empty() {
        return Err(Error::invalid("ECE of an empty set"));
    }
    let n = s.len() as f64;
    Ok(reliability_bins(s, bins)?
        .iter()
        .filter(|b| b.count > 0)
        .map(|b| b.count as f64 / n * (b.accuracy - b.confidence).abs())
        .sum())
}

/// Flat metrics record; undefined metrics are `null`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub auc: Option<f64>,
    pub eer: Option<f64>,
    pub nce: Option<f64>,
    pub ece: Option<f64>,
    pub n: usize,
    pub n_pos: usize,
}

impl MetricsReport {
    pub fn single_class(&self) -> bool {
        self.n_pos == 0 || self.n_pos == self.n
    }
}

pub fn report(s: &ScoredSet) -> MetricsReport {
    MetricsReport {
        auc: auc_pr(s).ok(),
        eer: eer(s).ok(),
        nce: nce(s).ok(),
        ece: ece(s, DEFAULT_ECE_BINS).ok(),
        n: s.len(),
        n_pos: s.positives(),
    }
}

pub fn render_table(rows: &[(String, MetricsReport)]) -> String {
    let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
    let mut out = String::from("| set | n | n_pos | AUC | EER | NCE | ECE |\n|---|---:|---:|---:|---:|---:|---:|\n");
    for (name, r) in rows {
        out.push_str(&format!(
            "| {name} | {} | {} | {} | {} | {} | {} |\n",
            r.n,
            r.n_pos,
            fmt(r.auc),
            fmt(r.eer),
            fmt(r.nce),
            fmt(r.ece)
        ));
    }
    out
}
