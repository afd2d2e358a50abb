//! Per-token feature matrices for the confidence networks.

use serde::{Deserialize, Serialize};

use crate::data_model::{CorpusHeader, Hypothesis, TokenFeatures};
use crate::error::{Error, Result};
use crate::lm::NGramModel;

/// Column layout: `log_posterior, entropy, topk[0..K], extra[0..E], lm_in?, lm_ood?`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub topk: usize,
    pub extra_dims: usize,
    pub lm_in: bool,
    pub lm_ood: bool,
}

impl FeatureSchema {
    pub fn from_header(header: &CorpusHeader, lm_in: bool, lm_ood: bool) -> Self {
        Self {
            topk: header.topk,
            extra_dims: header.extra_dims,
            lm_in,
            lm_ood,
        }
    }

    pub fn width(&self) -> usize {
        2 + self.topk + self.extra_dims + usize::from(self.lm_in) + usize::from(self.lm_ood)
    }

    pub fn column_names(&self) -> Vec<String> {
        let mut names = vec!["log_posterior".to_string(), "entropy".to_string()];
        names.extend((0..self.topk).map(|i| format!("topk[{i}]")));
        names.extend((0..self.extra_dims).map(|i| format!("extra[{i}]")));
        if self.lm_in {
            names.push("lm_in".into());
        }
        if self.lm_ood {
            names.push("lm_ood".into());
        }
        names
    }
}

/// Row-major `rows x width` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    width: usize,
    data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(width: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || !data.len().is_multiple_of(width) {
            return Err(Error::Schema(format!(
                "{} values do not form rows of width {width}",
                data.len()
            )));
        }
        Ok(Self { width, data })
    }

    pub fn empty(width: usize) -> Self {
        Self { width, data: Vec::new() }
    }

    pub fn from_rows(width: usize, rows: &[Vec<f64>]) -> Result<Self> {
        if rows.iter().any(|r| r.len() != width) {
            return Err(Error::Schema(format!("rows must all have width {width}")));
        }
        Self::new(width, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.data.len() / self.width
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.width..(i + 1) * self.width]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.width)
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.iter_rows().map(|r| r[j]).collect()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Same rows in reverse order.
    pub fn reversed(&self) -> Self {
        let data = self.data.chunks_exact(self.width).rev().flatten().copied().collect();
        Self { width: self.width, data }
    }
}

fn lm_column(
    name: &str,
    model: Option<&NGramModel>,
    hyp: &Hypothesis,
    stored: impl Fn(&TokenFeatures) -> Option<f64>,
) -> Result<Vec<f64>> {
    if let Some(m) = model {
        return Ok(m.score_sequence(&hyp.ids()));
    }
    hyp.features
        .iter()
        .map(|f| {
            stored(f).ok_or_else(|| {
                Error::Schema(format!("schema needs `{name}` but no model was supplied and the corpus has no stored value"))
            })
        })
        .collect()
}

/// Builds the feature matrix of one hypothesis.
///
/// LM columns come from the supplied model when there is one, otherwise from
/// the log-probabilities stored in the corpus. Supplying a model for a
/// column the schema does not have is an error.
pub fn assemble(
    hyp: &Hypothesis,
    lm_in: Option<&NGramModel>,
    lm_ood: Option<&NGramModel>,
    schema: &FeatureSchema,
) -> Result<FeatureMatrix> {
    if lm_in.is_some() && !schema.lm_in {
        return Err(Error::Schema("in-domain LM supplied but schema has no lm_in column".into()));
    }
    if lm_ood.is_some() && !schema.lm_ood {
        return Err(Error::Schema("OOD LM supplied but schema has no lm_ood column".into()));
    }
    let width = schema.width();
    if hyp.is_empty() {
        return Ok(FeatureMatrix::empty(width));
    }
    let lm_in_col = if schema.lm_in {
        Some(lm_column("lm_in", lm_in, hyp, |f| f.lm_in_logprob)?)
    } else {
        None
    };
    let lm_ood_col = if schema.lm_ood {
        Some(lm_column("lm_ood", lm_ood, hyp, |f| f.lm_ood_logprob)?)
    } else {
        None
    };

    let mut data = Vec::with_capacity(width * hyp.len());
    for (i, f) in hyp.features.iter().enumerate() {
        if f.topk_logprobs.len() != schema.topk || f.extra.len() != schema.extra_dims {
            return Err(Error::Schema(format!(
                "token {i} has {} top-k and {} extra values, schema expects {} and {}",
                f.topk_logprobs.len(),
                f.extra.len(),
                schema.topk,
                schema.extra_dims
            )));
        }
        data.push(f.log_posterior);
        data.push(f.entropy);
        data.extend_from_slice(&f.topk_logprobs);
        data.extend_from_slice(&f.extra);
        if let Some(c) = &lm_in_col {
            data.push(c[i]);
        }
        if let Some(c) = &lm_ood_col {
            data.push(c[i]);
        }
    }
    FeatureMatrix::new(width, data)
}

/// Per-column mean and population standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureStats {
    /// Stats that leave every column unchanged.
    pub fn identity(width: usize) -> Self {
        Self {
            mean: vec![0.0; width],
            std: vec![0.0; width],
        }
    }

    /// Computes stats over all rows of `matrices`. Constant columns get a
    /// standard deviation of exactly zero.
    pub fn compute<'a>(width: usize, matrices: impl IntoIterator<Item = &'a FeatureMatrix> + Clone) -> Result<Self> {
        let mut n = 0usize;
        let mut sum = vec![0.0; width];
        let mut lo = vec![f64::INFINITY; width];
        let mut hi = vec![f64::NEG_INFINITY; width];
        for m in matrices.clone() {
            if m.width() != width {
                return Err(Error::Schema(format!("matrix width {} != {width}", m.width())));
            }
            for row in m.iter_rows() {
                n += 1;
                for j in 0..width {
                    sum[j] += row[j];
                    lo[j] = lo[j].min(row[j]);
                    hi[j] = hi[j].max(row[j]);
                }
            }
        }
        if n == 0 {
            return Ok(Self::identity(width));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let mut sq = vec![0.0; width];
        for m in matrices {
            for row in m.iter_rows() {
                for j in 0..width {
                    let d = row[j] - mean[j];
                    sq[j] += d * d;
                }
            }
        }
        let std = (0..width)
            .map(|j| if lo[j] == hi[j] { 0.0 } else { (sq[j] / n as f64).sqrt() })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn width(&self) -> usize {
        self.mean.len()
    }
}

/// Shifts and scales every column; zero-deviation columns pass through.
pub fn standardize(stats: &FeatureStats, m: &FeatureMatrix) -> Result<FeatureMatrix> {
    if stats.width() != m.width() || stats.std.len() != m.width() {
        return Err(Error::Schema(format!(
            "stats width {} != matrix width {}",
            stats.width(),
            m.width()
        )));
    }
    let data = m
        .iter_rows()
        .flat_map(|row| {
            row.iter().enumerate().map(|(j, &x)| {
                if stats.std[j] > 0.0 {
                    (x - stats.mean[j]) / stats.std[j]
                } else {
                    x
                }
            })
        })
        .collect();
    FeatureMatrix::new(m.width(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_model::Token;
    use crate::lm::train_ngram;

    fn hyp(n: usize, k: usize) -> Hypothesis {
        Hypothesis {
            tokens: (0..n).map(|i| Token::new(i as u32, format!("_{i}"), true)).collect(),
            features: (0..n)
                .map(|i| TokenFeatures {
                    log_posterior: -(i as f64) * 0.1,
                    entropy: 0.5,
                    topk_logprobs: vec![0.0; k],
                    extra: vec![],
                    lm_in_logprob: None,
                    lm_ood_logprob: None,
                })
                .collect(),
            decode_score: 0.0,
        }
    }

    fn schema(k: usize, lm_in: bool, lm_ood: bool) -> FeatureSchema {
        FeatureSchema {
            topk: k,
            extra_dims: 0,
            lm_in,
            lm_ood,
        }
    }

    #[test]
    fn width_without_lms() {
        let m = assemble(&hyp(3, 4), None, None, &schema(4, false, false)).unwrap();
        assert_eq!(m.width(), 6);
        assert_eq!(m.rows(), 3);
    }

    #[test]
    fn lm_columns_match_direct_scoring() {
        let lm_a = train_ngram(&[vec![0, 1, 2], vec![1, 2]], 3, 0.75).unwrap();
        let lm_b = train_ngram(&[vec![2, 2, 0]], 2, 0.5).unwrap();
        let h = hyp(3, 2);
        let m = assemble(&h, Some(&lm_a), Some(&lm_b), &schema(2, true, true)).unwrap();
        assert_eq!(m.width(), 2 + 2 + 2);
        assert_eq!(m.column(4), lm_a.score_sequence(&h.ids()));
        assert_eq!(m.column(5), lm_b.score_sequence(&h.ids()));

        // Dropping the OOD column leaves a prefix-identical matrix.
        let short = assemble(&h, Some(&lm_a), None, &schema(2, true, false)).unwrap();
        for i in 0..3 {
            assert_eq!(short.row(i), &m.row(i)[..5]);
        }
    }

    #[test]
    fn empty_hypothesis() {
        let m = assemble(&hyp(0, 2), None, None, &schema(2, false, false)).unwrap();
        assert_eq!(m.rows(), 0);
        assert_eq!(m.width(), 4);
    }

    #[test]
    fn schema_mismatches() {
        let lm = train_ngram(&[vec![0]], 1, 0.5).unwrap();
        assert!(assemble(&hyp(2, 2), Some(&lm), None, &schema(2, false, false)).is_err());
        assert!(assemble(&hyp(2, 2), None, None, &schema(2, true, false)).is_err());
        assert!(assemble(&hyp(2, 3), None, None, &schema(2, false, false)).is_err());
    }

    #[test]
    fn stored_lm_values_are_used_without_a_model() {
        let mut h = hyp(2, 0);
        for f in &mut h.features {
            f.lm_ood_logprob = Some(-2.0);
        }
        let m = assemble(&h, None, None, &schema(0, false, true)).unwrap();
        assert_eq!(m.column(2), vec![-2.0, -2.0]);
    }

    #[test]
    fn standardize_known_matrix() {
        let m = FeatureMatrix::from_rows(2, &[vec![1.0, 3.0], vec![5.0, -1.0]]).unwrap();
        let stats = FeatureStats {
            mean: vec![1.0, 1.0],
            std: vec![2.0, 2.0],
        };
        let s = standardize(&stats, &m).unwrap();
        assert_eq!(s.as_slice(), &[0.0, 1.0, 2.0, -1.0]);
        let bad = FeatureStats::identity(3);
        assert!(standardize(&bad, &m).is_err());
    }

    #[test]
    fn self_standardization() {
        let m = FeatureMatrix::from_rows(
            3,
            &[vec![1.0, 7.0, 0.3], vec![2.0, 7.0, 0.1], vec![6.0, 7.0, 0.2], vec![-1.0, 7.0, 0.9]],
        )
        .unwrap();
        let stats = FeatureStats::compute(3, [&m]).unwrap();
        assert_eq!(stats.std[1], 0.0);
        let s = standardize(&stats, &m).unwrap();
        assert_eq!(s.column(1), m.column(1), "constant column unchanged");
        for j in [0, 2] {
            let c = s.column(j);
            let mean = c.iter().sum::<f64>() / 4.0;
            let var = c.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-12);
        }
    }
}
