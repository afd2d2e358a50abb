//! Piece-wise linear score calibration fitted on a development set.
//!
//! Fitting bins the dev scores, picks the interior breakpoints among bin
//! boundaries by dynamic programming over per-segment weighted line fits,
//! refits a continuous piece-wise linear curve through the chosen
//! breakpoints, and finally projects the breakpoint values onto the closest
//! non-decreasing sequence (pool adjacent violators).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{reliability_bins, ScoredSet};

pub const DEFAULT_SEGMENTS: usize = 5;
pub const DEFAULT_BINS: usize = 50;

/// Weight of the smoothness penalty relative to the total dev count. It only
/// resolves breakpoints without data support.
const SMOOTHING: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PwlMapping {
    pub breakpoints: Vec<f64>,
    pub values: Vec<f64>,
}

impl PwlMapping {
    pub fn identity() -> Self {
        Self {
            breakpoints: vec![0.0, 1.0],
            values: vec![0.0, 1.0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bp = &self.breakpoints;
        if bp.len() < 2 || bp.len() != self.values.len() {
            return Err(Error::invalid("mapping needs at least two breakpoints and one value per breakpoint"));
        }
        if bp[0] != 0.0 || bp[bp.len() - 1] != 1.0 {
            return Err(Error::invalid("breakpoints must start at 0 and end at 1"));
        }
        if bp.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::invalid("breakpoints must be strictly increasing"));
        }
        if self.values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("values must lie in [0, 1]"));
        }
        if self.values.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::invalid("values must be non-decreasing"));
        }
        Ok(())
    }

    /// Maps a score, clamping it into `[0, 1]` first.
    pub fn apply(&self, score: f64) -> f64 {
        let x = if score.is_nan() { 0.0 } else { score.clamp(0.0, 1.0) };
        let bp = &self.breakpoints;
        let v = &self.values;
        let last = bp.len() - 1;
        if x >= bp[last] {
            return v[last];
        }
        // First breakpoint strictly above x; x lies in [bp[k], bp[k + 1]).
        let k = bp.partition_point(|&b| b <= x) - 1;
        let t = (x - bp[k]) / (bp[k + 1] - bp[k]);
        (v[k] + t * (v[k + 1] - v[k])).clamp(v[k], v[k + 1])
    }
}

pub fn apply_pwlm(map: &PwlMapping, score: f64) -> f64 {
    map.apply(score)
}

/// Weighted sums of a run of bins, for O(1) segment line fits.
#[derive(Debug, Clone, Copy, Default)]
struct Moments {
    w: f64,
    x: f64,
    y: f64,
    xx: f64,
    xy: f64,
    yy: f64,
}

impl Moments {
    fn add(&mut self, w: f64, x: f64, y: f64) {
        self.w += w;
        self.x += w * x;
        self.y += w * y;
        self.xx += w * x * x;
        self.xy += w * x * y;
        self.yy += w * y * y;
    }

    fn minus(&self, o: &Moments) -> Moments {
        Moments {
            w: self.w - o.w,
            x: self.x - o.x,
            y: self.y - o.y,
            xx: self.xx - o.xx,
            xy: self.xy - o.xy,
            yy: self.yy - o.yy,
        }
    }

    /// Residual sum of squares of the weighted least-squares line.
    fn line_sse(&self) -> f64 {
        if self.w <= 0.0 {
            return 0.0;
        }
        let mx = self.x / self.w;
        let my = self.y / self.w;
        let sxx = self.xx - self.w * mx * mx;
        let sxy = self.xy - self.w * mx * my;
        let syy = self.yy - self.w * my * my;
        let sse = if sxx > 1e-12 * self.w { syy - sxy * sxy / sxx } else { syy };
        sse.max(0.0)
    }
}

/// Pool-adjacent-violators: closest non-decreasing sequence in weighted L2.
pub fn isotonic(values: &[f64], weights: &[f64]) -> Vec<f64> {
    let mut blocks: Vec<(f64, f64, usize)> = Vec::with_capacity(values.len());
    for (&v, &w) in values.iter().zip(weights) {
        blocks.push((v, w, 1));
        while blocks.len() > 1 {
            let (v2, w2, n2) = blocks[blocks.len() - 1];
            let (v1, w1, n1) = blocks[blocks.len() - 2];
            if v1 <= v2 {
                break;
            }
            let w = w1 + w2;
            let v = if w > 0.0 { (v1 * w1 + v2 * w2) / w } else { 0.5 * (v1 + v2) };
            blocks.truncate(blocks.len() - 2);
            blocks.push((v, w, n1 + n2));
        }
    }
    blocks.into_iter().flat_map(|(v, _, n)| std::iter::repeat_n(v, n)).collect()
}

/// Solves the symmetric positive definite system `a x = b` in place.
fn cholesky_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Result<Vec<f64>> {
    let n = b.len();
    for j in 0..n {
        let mut d = a[j][j];
        for k in 0..j {
            d -= a[j][k] * a[j][k];
        }
        if !(d > 0.0) {
            return Err(Error::Numeric("calibration system is not positive definite".into()));
        }
        let d = d.sqrt();
        a[j][j] = d;
        for i in j + 1..n {
            let mut s = a[i][j];
            for k in 0..j {
                s -= a[i][k] * a[j][k];
            }
            a[i][j] = s / d;
        }
    }
    for i in 0..n {
        for k in 0..i {
            b[i] -= a[i][k] * b[k];
        }
        b[i] /= a[i][i];
    }
    for i in (0..n).rev() {
        for k in i + 1..n {
            b[i] -= a[k][i] * b[k];
        }
        b[i] /= a[i][i];
    }
    Ok(b)
}

pub fn fit_pwlm(dev: &ScoredSet, segments: usize, bins: usize) -> Result<PwlMapping> {
    if dev.is_empty() {
        return Err(Error::invalid("cannot fit a calibration map on an empty dev set"));
    }
    if segments == 0 || segments > bins {
        return Err(Error::invalid(format!("need 1 <= segments ({segments}) <= bins ({bins})")));
    }
    let hist = reliability_bins(dev, bins)?;

    // Prefix moments over bins; empty bins add nothing.
    let mut prefix = vec![Moments::default(); bins + 1];
    for (b, bin) in hist.iter().enumerate() {
        let mut m = prefix[b];
        if bin.count > 0 {
            m.add(bin.count as f64, bin.confidence, bin.accuracy);
        }
        prefix[b + 1] = m;
    }
    let seg_cost = |i: usize, j: usize| prefix[j].minus(&prefix[i]).line_sse();

    // cost[s][j]: best fit of bins [0, j) with s segments.
    let inf = f64::INFINITY;
    let mut cost = vec![vec![inf; bins + 1]; segments + 1];
    let mut arg = vec![vec![0usize; bins + 1]; segments + 1];
    cost[0][0] = 0.0;
    for s in 1..=segments {
        for j in s..=bins {
            for i in (s - 1)..j {
                if cost[s - 1][i] == inf {
                    continue;
                }
                let c = cost[s - 1][i] + seg_cost(i, j);
                if c < cost[s][j] {
                    cost[s][j] = c;
                    arg[s][j] = i;
                }
            }
        }
    }
    let mut cuts = vec![bins];
    let mut j = bins;
    for s in (1..=segments).rev() {
        j = arg[s][j];
        cuts.push(j);
    }
    cuts.reverse();
    let breakpoints: Vec<f64> = cuts.iter().map(|&c| c as f64 / bins as f64).collect();

    // Continuous refit: f(x) = sum_k v_k * hat_k(x), plus a small penalty on
    // adjacent differences.
    let n = breakpoints.len();
    let mut ata = vec![vec![0.0; n]; n];
    let mut atb = vec![0.0; n];
    let mut support = vec![0.0; n];
    for bin in hist.iter().filter(|b| b.count > 0) {
        let x = bin.confidence.clamp(0.0, 1.0);
        let k = (breakpoints.partition_point(|&b| b <= x).max(1) - 1).min(n - 2);
        let t = ((x - breakpoints[k]) / (breakpoints[k + 1] - breakpoints[k])).clamp(0.0, 1.0);
        let w = bin.count as f64;
        let phi = [(k, 1.0 - t), (k + 1, t)];
        for &(a, pa) in &phi {
            atb[a] += w * pa * bin.accuracy;
            support[a] += w * pa;
            for &(b, pb) in &phi {
                ata[a][b] += w * pa * pb;
            }
        }
    }
    let lambda = SMOOTHING * dev.len() as f64;
    for k in 0..n - 1 {
        ata[k][k] += lambda;
        ata[k + 1][k + 1] += lambda;
        ata[k][k + 1] -= lambda;
        ata[k + 1][k] -= lambda;
    }
    let raw = cholesky_solve(ata, atb)?;
    let weights: Vec<f64> = support.iter().map(|&s| s.max(1e-9)).collect();
    let values = isotonic(&raw, &weights)
        .into_iter()
        .map(|v| v.clamp(0.0, 1.0))
        .collect();

    let map = PwlMapping { breakpoints, values };
    map.validate()?;
    Ok(map)
}
