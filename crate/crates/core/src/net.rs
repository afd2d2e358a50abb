//! Bidirectional gated recurrent confidence networks.
//!
//! Both models share one backbone: a stack of bidirectional GRU layers over
//! the standardized per-token features. The CEM head projects every top-layer
//! state to a logit and applies a sigmoid, giving one confidence per token.
//! The R-EBM head mean-pools the top-layer states over time and projects the
//! pooled vector to a single utterance confidence.
//!
//! All parameters live in one flat `Vec<f64>`; gradients and optimizer state
//! use the same layout. Gradients are computed by hand-written
//! back-propagation through time.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{standardize, FeatureMatrix, FeatureSchema, FeatureStats};
use crate::json;
use crate::metrics::PROB_CLIP;

pub const MODEL_FORMAT_VERSION: u32 = 1;

/// Output scores are kept strictly inside (0, 1).
const OUTPUT_EPS: f64 = 1e-15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "CEM")]
    Cem,
    #[serde(rename = "R-EBM")]
    Rebm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub layers: usize,
    pub hidden: usize,
    pub input_width: usize,
}

#[derive(Debug, Clone, Copy)]
struct DirOffsets {
    w: usize,
    u: usize,
    b: usize,
    input: usize,
}

impl Dims {
    pub fn new(layers: usize, hidden: usize, input_width: usize) -> Result<Self> {
        if layers == 0 || hidden == 0 || input_width == 0 {
            return Err(Error::invalid("layers, hidden and input_width must all be positive"));
        }
        Ok(Self {
            layers,
            hidden,
            input_width,
        })
    }

    fn layer_input(&self, layer: usize) -> usize {
        if layer == 0 {
            self.input_width
        } else {
            2 * self.hidden
        }
    }

    fn dir_size(&self, layer: usize) -> usize {
        let h = self.hidden;
        3 * h * (self.layer_input(layer) + h + 1)
    }

    fn dir_offsets(&self, layer: usize, dir: usize) -> DirOffsets {
        let mut base = 0;
        for l in 0..layer {
            base += 2 * self.dir_size(l);
        }
        base += dir * self.dir_size(layer);
        let h = self.hidden;
        let input = self.layer_input(layer);
        DirOffsets {
            w: base,
            u: base + 3 * h * input,
            b: base + 3 * h * input + 3 * h * h,
            input,
        }
    }

    fn head_offset(&self) -> usize {
        (0..self.layers).map(|l| 2 * self.dir_size(l)).sum()
    }

    pub fn param_count(&self) -> usize {
        self.head_offset() + 2 * self.hidden + 1
    }

    /// `(name, shape, offset)` of every parameter tensor in flat order.
    fn tensors(&self) -> Vec<(String, Vec<usize>, usize)> {
        let h = self.hidden;
        let mut out = Vec::new();
        for l in 0..self.layers {
            for (d, dname) in ["fwd", "bwd"].iter().enumerate() {
                let o = self.dir_offsets(l, d);
                out.push((format!("layer{l}.{dname}.w"), vec![3 * h, o.input], o.w));
                out.push((format!("layer{l}.{dname}.u"), vec![3 * h, h], o.u));
                out.push((format!("layer{l}.{dname}.b"), vec![3 * h], o.b));
            }
        }
        let head = self.head_offset();
        out.push(("head.w".into(), vec![2 * h], head));
        out.push(("head.b".into(), vec![1], head + 2 * h));
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceModel {
    pub kind: ModelKind,
    pub dims: Dims,
    pub params: Vec<f64>,
    pub schema: FeatureSchema,
    pub stats: FeatureStats,
}

/// Features plus targets: one label per row for a CEM, exactly one label for
/// an R-EBM.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub features: FeatureMatrix,
    pub labels: Vec<bool>,
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `out += m x` for row-major `m` of shape `rows x x.len()`.
#[inline]
fn gemv_acc(out: &mut [f64], m: &[f64], x: &[f64]) {
    let cols = x.len();
    for (o, row) in out.iter_mut().zip(m.chunks_exact(cols)) {
        *o += row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

/// `out += m^T v` for row-major `m` of shape `v.len() x out.len()`.
#[inline]
fn gemv_t_acc(out: &mut [f64], m: &[f64], v: &[f64]) {
    let cols = out.len();
    for (&vi, row) in v.iter().zip(m.chunks_exact(cols)) {
        if vi != 0.0 {
            for (o, a) in out.iter_mut().zip(row) {
                *o += vi * a;
            }
        }
    }
}

/// `g += u x^T`.
#[inline]
fn ger_acc(g: &mut [f64], u: &[f64], x: &[f64]) {
    let cols = x.len();
    for (&ui, row) in u.iter().zip(g.chunks_exact_mut(cols)) {
        if ui != 0.0 {
            for (gi, xi) in row.iter_mut().zip(x) {
                *gi += ui * xi;
            }
        }
    }
}

/// Activations of one direction of one layer, in processing order.
struct DirCache {
    /// `(steps + 1) x hidden`; row 0 is the zero initial state.
    h: Vec<f64>,
    z: Vec<f64>,
    r: Vec<f64>,
    n: Vec<f64>,
}

struct Trace {
    steps: usize,
    /// `io[0]` is the network input, `io[l + 1]` the output of layer `l`.
    io: Vec<Vec<f64>>,
    dirs: Vec<[DirCache; 2]>,
}

impl Trace {
    fn top(&self) -> &[f64] {
        self.io.last().expect("at least the input")
    }
}

impl ConfidenceModel {
    /// A model with all parameters zero.
    pub fn zeros(kind: ModelKind, dims: Dims, schema: FeatureSchema, stats: FeatureStats) -> Result<Self> {
        if schema.width() != dims.input_width || stats.width() != dims.input_width {
            return Err(Error::Schema(format!(
                "schema width {} / stats width {} != input width {}",
                schema.width(),
                stats.width(),
                dims.input_width
            )));
        }
        Ok(Self {
            kind,
            dims,
            params: vec![0.0; dims.param_count()],
            schema,
            stats,
        })
    }

    /// Uniform `±1/sqrt(fan)` initialization with zero biases.
    pub fn init(kind: ModelKind, dims: Dims, schema: FeatureSchema, stats: FeatureStats, seed: u64) -> Result<Self> {
        let mut model = Self::zeros(kind, dims, schema, stats)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = dims.hidden;
        let scale = 1.0 / (h as f64).sqrt();
        for l in 0..dims.layers {
            for d in 0..2 {
                let o = dims.dir_offsets(l, d);
                for p in &mut model.params[o.w..o.b] {
                    *p = rng.random_range(-scale..scale);
                }
            }
        }
        let head = dims.head_offset();
        let hs = 1.0 / ((2 * h) as f64).sqrt();
        for p in &mut model.params[head..head + 2 * h] {
            *p = rng.random_range(-hs..hs);
        }
        Ok(model)
    }

    fn check_width(&self, m: &FeatureMatrix) -> Result<()> {
        if m.width() != self.dims.input_width {
            return Err(Error::Schema(format!(
                "feature width {} != model input width {}",
                m.width(),
                self.dims.input_width
            )));
        }
        Ok(())
    }

    fn run_direction(&self, layer: usize, dir: usize, input: &[f64], steps: usize, out: &mut [f64]) -> DirCache {
        let hd = self.dims.hidden;
        let o = self.dims.dir_offsets(layer, dir);
        let p = &self.params;
        let w = &p[o.w..o.u];
        let u = &p[o.u..o.b];
        let b = &p[o.b..o.b + 3 * hd];
        let (u_zr, u_n) = u.split_at(2 * hd * hd);

        let mut cache = DirCache {
            h: vec![0.0; (steps + 1) * hd],
            z: vec![0.0; steps * hd],
            r: vec![0.0; steps * hd],
            n: vec![0.0; steps * hd],
        };
        let mut a = vec![0.0; 3 * hd];
        let mut rh = vec![0.0; hd];
        for s in 0..steps {
            let pos = if dir == 1 { steps - 1 - s } else { s };
            let x = &input[pos * o.input..(pos + 1) * o.input];
            a.copy_from_slice(b);
            gemv_acc(&mut a, w, x);
            let (hist, rest) = cache.h.split_at_mut((s + 1) * hd);
            let hp = &hist[s * hd..];
            gemv_acc(&mut a[..2 * hd], u_zr, hp);
            let z = &mut cache.z[s * hd..(s + 1) * hd];
            let r = &mut cache.r[s * hd..(s + 1) * hd];
            for i in 0..hd {
                z[i] = sigmoid(a[i]);
                r[i] = sigmoid(a[hd + i]);
                rh[i] = r[i] * hp[i];
            }
            gemv_acc(&mut a[2 * hd..], u_n, &rh);
            let n = &mut cache.n[s * hd..(s + 1) * hd];
            let hn = &mut rest[..hd];
            let dst = &mut out[pos * 2 * hd + dir * hd..pos * 2 * hd + (dir + 1) * hd];
            for i in 0..hd {
                n[i] = a[2 * hd + i].tanh();
                hn[i] = (1.0 - z[i]) * n[i] + z[i] * hp[i];
                dst[i] = hn[i];
            }
        }
        cache
    }

    /// Runs the backbone on already standardized rows.
    fn run(&self, x: &[f64], steps: usize) -> Trace {
        let hd = self.dims.hidden;
        let mut io = Vec::with_capacity(self.dims.layers + 1);
        io.push(x.to_vec());
        let mut dirs = Vec::with_capacity(self.dims.layers);
        for l in 0..self.dims.layers {
            let mut out = vec![0.0; steps * 2 * hd];
            let input = io.last().expect("non-empty");
            let f = self.run_direction(l, 0, input, steps, &mut out);
            let b = self.run_direction(l, 1, input, steps, &mut out);
            dirs.push([f, b]);
            io.push(out);
        }
        Trace { steps, io, dirs }
    }

    fn head(&self) -> (&[f64], f64) {
        let off = self.dims.head_offset();
        let hd2 = 2 * self.dims.hidden;
        (&self.params[off..off + hd2], self.params[off + hd2])
    }

    fn token_logits(&self, trace: &Trace) -> Vec<f64> {
        let (w, b) = self.head();
        trace
            .top()
            .chunks_exact(w.len())
            .map(|h| b + h.iter().zip(w).map(|(x, y)| x * y).sum::<f64>())
            .collect()
    }

    fn pooled(&self, trace: &Trace) -> Vec<f64> {
        let hd2 = 2 * self.dims.hidden;
        let mut pooled = vec![0.0; hd2];
        for h in trace.top().chunks_exact(hd2) {
            for (p, x) in pooled.iter_mut().zip(h) {
                *p += x;
            }
        }
        let inv = 1.0 / trace.steps as f64;
        pooled.iter_mut().for_each(|p| *p *= inv);
        pooled
    }

    fn utterance_logit(&self, trace: &Trace) -> f64 {
        let (w, b) = self.head();
        b + self.pooled(trace).iter().zip(w).map(|(x, y)| x * y).sum::<f64>()
    }

    fn standardized(&self, m: &FeatureMatrix) -> Result<FeatureMatrix> {
        self.check_width(m)?;
        standardize(&self.stats, m)
    }

    /// Per-token confidences of a CEM.
    pub fn forward_cem(&self, m: &FeatureMatrix) -> Result<Vec<f64>> {
        if self.kind != ModelKind::Cem {
            return Err(Error::invalid("forward_cem called on an R-EBM"));
        }
        let x = self.standardized(m)?;
        Ok(self.cem_scores_std(&x))
    }

    fn cem_scores_std(&self, x: &FeatureMatrix) -> Vec<f64> {
        if x.is_empty() {
            return Vec::new();
        }
        let trace = self.run(x.as_slice(), x.rows());
        self.token_logits(&trace)
            .into_iter()
            .map(|l| sigmoid(l).clamp(OUTPUT_EPS, 1.0 - OUTPUT_EPS))
            .collect()
    }

    /// Utterance confidence of an R-EBM; an empty hypothesis scores 0.
    pub fn forward_rebm(&self, m: &FeatureMatrix) -> Result<f64> {
        if self.kind != ModelKind::Rebm {
            return Err(Error::invalid("forward_rebm called on a CEM"));
        }
        let x = self.standardized(m)?;
        Ok(self.rebm_score_std(&x))
    }

    fn rebm_score_std(&self, x: &FeatureMatrix) -> f64 {
        if x.is_empty() {
            return 0.0;
        }
        let trace = self.run(x.as_slice(), x.rows());
        sigmoid(self.utterance_logit(&trace)).clamp(OUTPUT_EPS, 1.0 - OUTPUT_EPS)
    }

    fn backward_direction(
        &self,
        layer: usize,
        dir: usize,
        trace: &Trace,
        d_out: &[f64],
        grad: &mut [f64],
        d_input: Option<&mut [f64]>,
    ) {
        let hd = self.dims.hidden;
        let steps = trace.steps;
        let o = self.dims.dir_offsets(layer, dir);
        let p = &self.params;
        let w = &p[o.w..o.u];
        let u = &p[o.u..o.b];
        let (u_zr, u_n) = u.split_at(2 * hd * hd);
        let input = &trace.io[layer];
        let cache = &trace.dirs[layer][dir];

        let (g_w, g_rest) = grad[o.w..o.b + 3 * hd].split_at_mut(o.u - o.w);
        let (g_u, g_b) = g_rest.split_at_mut(o.b - o.u);
        let (g_uzr, g_un) = g_u.split_at_mut(2 * hd * hd);

        let mut d_input = d_input;
        let mut dh_carry = vec![0.0; hd];
        let mut dh = vec![0.0; hd];
        let mut da = vec![0.0; 3 * hd];
        let mut rh = vec![0.0; hd];
        let mut d_rh = vec![0.0; hd];
        let mut dh_prev = vec![0.0; hd];
        for s in (0..steps).rev() {
            let pos = if dir == 1 { steps - 1 - s } else { s };
            let x = &input[pos * o.input..(pos + 1) * o.input];
            let hp = &cache.h[s * hd..(s + 1) * hd];
            let z = &cache.z[s * hd..(s + 1) * hd];
            let r = &cache.r[s * hd..(s + 1) * hd];
            let n = &cache.n[s * hd..(s + 1) * hd];
            let d_here = &d_out[pos * 2 * hd + dir * hd..pos * 2 * hd + (dir + 1) * hd];
            for i in 0..hd {
                dh[i] = d_here[i] + dh_carry[i];
                let dz = dh[i] * (hp[i] - n[i]);
                da[i] = dz * z[i] * (1.0 - z[i]);
                let dn = dh[i] * (1.0 - z[i]);
                da[2 * hd + i] = dn * (1.0 - n[i] * n[i]);
                rh[i] = r[i] * hp[i];
            }
            let da_n = &da[2 * hd..];
            ger_acc(g_un, da_n, &rh);
            d_rh.iter_mut().for_each(|v| *v = 0.0);
            gemv_t_acc(&mut d_rh, u_n, da_n);
            for i in 0..hd {
                let dr = d_rh[i] * hp[i];
                da[hd + i] = dr * r[i] * (1.0 - r[i]);
            }
            ger_acc(g_w, &da, x);
            for (g, d) in g_b.iter_mut().zip(&da) {
                *g += d;
            }
            ger_acc(g_uzr, &da[..2 * hd], hp);
            for i in 0..hd {
                dh_prev[i] = dh[i] * z[i] + d_rh[i] * r[i];
            }
            gemv_t_acc(&mut dh_prev, u_zr, &da[..2 * hd]);
            if let Some(di) = d_input.as_deref_mut() {
                gemv_t_acc(&mut di[pos * o.input..(pos + 1) * o.input], w, &da);
            }
            std::mem::swap(&mut dh_carry, &mut dh_prev);
        }
    }

    /// Back-propagates `d_top` (gradient w.r.t. the top-layer states).
    fn backward_backbone(&self, trace: &Trace, mut d_top: Vec<f64>, grad: &mut [f64]) {
        for l in (0..self.dims.layers).rev() {
            let mut d_input = if l > 0 {
                Some(vec![0.0; trace.steps * self.dims.layer_input(l)])
            } else {
                None
            };
            self.backward_direction(l, 0, trace, &d_top, grad, d_input.as_deref_mut());
            self.backward_direction(l, 1, trace, &d_top, grad, d_input.as_deref_mut());
            if let Some(d) = d_input {
                d_top = d;
            }
        }
    }

    /// Loss summed over the example's targets plus the target count;
    /// `grad` receives `d(sum of losses)/d(params) * scale`.
    fn example_loss_grad(&self, x: &FeatureMatrix, labels: &[bool], scale: f64, grad: &mut [f64]) -> (f64, usize) {
        let bce = |s: f64, y: bool| {
            let c = s.clamp(PROB_CLIP, 1.0 - PROB_CLIP);
            if y {
                -c.ln()
            } else {
                -(1.0 - c).ln()
            }
        };
        // d(loss)/d(logit) of the clipped loss.
        let dlogit = |s: f64, y: bool| {
            if (PROB_CLIP..=1.0 - PROB_CLIP).contains(&s) {
                s - f64::from(u8::from(y))
            } else {
                0.0
            }
        };
        let hd2 = 2 * self.dims.hidden;
        let head = self.dims.head_offset();
        match self.kind {
            ModelKind::Cem => {
                if x.is_empty() {
                    return (0.0, 0);
                }
                let trace = self.run(x.as_slice(), x.rows());
                let logits = self.token_logits(&trace);
                let (w, _) = self.head();
                let mut loss = 0.0;
                let mut d_top = vec![0.0; trace.steps * hd2];
                for (t, (&lg, &y)) in logits.iter().zip(labels).enumerate() {
                    let s = sigmoid(lg);
                    loss += bce(s, y);
                    let d = dlogit(s, y) * scale;
                    if d == 0.0 {
                        continue;
                    }
                    let h = &trace.top()[t * hd2..(t + 1) * hd2];
                    for i in 0..hd2 {
                        grad[head + i] += d * h[i];
                        d_top[t * hd2 + i] = d * w[i];
                    }
                    grad[head + hd2] += d;
                }
                self.backward_backbone(&trace, d_top, grad);
                (loss, labels.len())
            }
            ModelKind::Rebm => {
                let y = labels[0];
                if x.is_empty() {
                    return (bce(0.0, y), 1);
                }
                let trace = self.run(x.as_slice(), x.rows());
                let pooled = self.pooled(&trace);
                let (w, b) = self.head();
                let logit = b + pooled.iter().zip(w).map(|(p, q)| p * q).sum::<f64>();
                let s = sigmoid(logit);
                let d = dlogit(s, y) * scale;
                if d != 0.0 {
                    for i in 0..hd2 {
                        grad[head + i] += d * pooled[i];
                    }
                    grad[head + hd2] += d;
                    let per_step: Vec<f64> = w.iter().map(|wi| d * wi / trace.steps as f64).collect();
                    let d_top = per_step.repeat(trace.steps);
                    self.backward_backbone(&trace, d_top, grad);
                }
                (bce(s, y), 1)
            }
        }
    }

    fn check_example(&self, e: &Example) -> Result<()> {
        self.check_width(&e.features)?;
        let want = match self.kind {
            ModelKind::Cem => e.features.rows(),
            ModelKind::Rebm => 1,
        };
        if e.labels.len() != want {
            return Err(Error::invalid(format!(
                "{} labels for an example needing {want}",
                e.labels.len()
            )));
        }
        Ok(())
    }

    /// Mean loss and its gradient over already standardized examples.
    fn batch_loss_grad_std(&self, batch: &[&Example]) -> (f64, Vec<f64>) {
        let count: usize = batch
            .iter()
            .map(|e| match self.kind {
                ModelKind::Cem => e.labels.len(),
                ModelKind::Rebm => 1,
            })
            .sum();
        let mut grad = vec![0.0; self.params.len()];
        if count == 0 {
            return (0.0, grad);
        }
        let scale = 1.0 / count as f64;
        let mut loss = 0.0;
        for e in batch {
            loss += self.example_loss_grad(&e.features, &e.labels, scale, &mut grad).0;
        }
        (loss * scale, grad)
    }

    /// Mean binary cross-entropy over the batch targets and its exact
    /// gradient with respect to `params`.
    pub fn loss_and_gradients(&self, batch: &[Example]) -> Result<(f64, Vec<f64>)> {
        let mut std_batch = Vec::with_capacity(batch.len());
        for e in batch {
            self.check_example(e)?;
            std_batch.push(Example {
                features: standardize(&self.stats, &e.features)?,
                labels: e.labels.clone(),
            });
        }
        let refs: Vec<&Example> = std_batch.iter().collect();
        Ok(self.batch_loss_grad_std(&refs))
    }

    pub fn to_file(&self) -> ModelFile {
        ModelFile {
            format_version: MODEL_FORMAT_VERSION,
            kind: self.kind,
            dims: self.dims,
            schema: self.schema,
            stats: self.stats.clone(),
            params: self
                .dims
                .tensors()
                .into_iter()
                .map(|(name, shape, off)| {
                    let len: usize = shape.iter().product();
                    ParamTensor {
                        name,
                        shape,
                        data: self.params[off..off + len].to_vec(),
                    }
                })
                .collect(),
        }
    }

    pub fn from_file(file: ModelFile) -> Result<Self> {
        if file.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported model format {}", file.format_version)));
        }
        let mut model = Self::zeros(file.kind, file.dims, file.schema, file.stats)?;
        let expected = model.dims.tensors();
        if expected.len() != file.params.len() {
            return Err(Error::Format(format!(
                "model file has {} tensors, expected {}",
                file.params.len(),
                expected.len()
            )));
        }
        for ((name, shape, off), t) in expected.into_iter().zip(file.params) {
            if t.name != name || t.shape != shape || t.data.len() != shape.iter().product::<usize>() {
                return Err(Error::Format(format!("tensor `{}` does not match expected `{name}` {shape:?}", t.name)));
            }
            model.params[off..off + t.data.len()].copy_from_slice(&t.data);
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        json::write_json(path, &self.to_file())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_file(json::read_json(path)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// On-disk model document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub format_version: u32,
    pub kind: ModelKind,
    pub dims: Dims,
    pub schema: FeatureSchema,
    pub stats: FeatureStats,
    pub params: Vec<ParamTensor>,
}

/// Per-word confidence: the minimum over each word's token scores.
pub fn word_confidence(token_scores: &[f64], word_start: &[bool]) -> Result<Vec<f64>> {
    if token_scores.len() != word_start.len() {
        return Err(Error::invalid(format!(
            "{} scores but {} word-start flags",
            token_scores.len(),
            word_start.len()
        )));
    }
    if word_start.first() == Some(&false) {
        return Err(Error::invalid("first token must start a word"));
    }
    let mut out: Vec<f64> = Vec::new();
    for (&s, &start) in token_scores.iter().zip(word_start) {
        if start {
            out.push(s);
        } else {
            let last = out.last_mut().expect("first flag is a start");
            *last = last.min(s);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Fraction of every minibatch drawn from the OOD pool.
    pub ood_mix_ratio: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 32,
            epochs: 10,
            seed: 0,
            ood_mix_ratio: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.ood_mix_ratio) {
            return Err(Error::invalid(format!("ood_mix_ratio {} outside [0, 1]", self.ood_mix_ratio)));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::invalid("learning_rate must be positive"));
        }
        Ok(())
    }

    /// `(in-domain, OOD)` items per minibatch.
    pub fn batch_split(&self, have_ood: bool) -> (usize, usize) {
        let ood = if have_ood {
            (self.ood_mix_ratio * self.batch_size as f64).round() as usize
        } else {
            0
        };
        (self.batch_size - ood.min(self.batch_size), ood.min(self.batch_size))
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainData {
    pub in_domain: Vec<Example>,
    pub ood: Vec<Example>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean loss over all training examples before the first update.
    pub initial_loss: f64,
    /// Mean minibatch loss of every epoch.
    pub loss_trace: Vec<f64>,
    pub in_domain_seen: usize,
    pub ood_seen: usize,
    pub ood_per_batch: Vec<usize>,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn step(&mut self, params: &mut [f64], grad: &[f64], cfg: &TrainConfig) {
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t);
        let c2 = 1.0 - cfg.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g;
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= cfg.learning_rate * mh / (vh.sqrt() + cfg.epsilon);
        }
    }
}

/// Cyclic draws from a pool, reshuffled on every pass.
struct Cycler {
    order: Vec<usize>,
    next: usize,
}

impl Cycler {
    fn new(len: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(rng);
        Self { order, next: 0 }
    }

    fn draw(&mut self, rng: &mut ChaCha8Rng) -> usize {
        if self.next == self.order.len() {
            self.order.shuffle(rng);
            self.next = 0;
        }
        self.next += 1;
        self.order[self.next - 1]
    }
}

/// Minibatch Adam training with a fixed in-domain/OOD split per batch.
///
/// An epoch is one pass over the in-domain pool (or over the OOD pool when
/// every batch slot is OOD). Results depend only on the inputs and
/// `cfg.seed`.
pub fn train(mut model: ConfidenceModel, data: &TrainData, cfg: &TrainConfig) -> Result<(ConfidenceModel, TrainReport)> {
    cfg.validate()?;
    if data.in_domain.is_empty() && data.ood.is_empty() {
        return Err(Error::invalid("no training data"));
    }
    let prep = |pool: &[Example]| -> Result<Vec<Example>> {
        pool.iter()
            .map(|e| {
                model.check_example(e)?;
                Ok(Example {
                    features: standardize(&model.stats, &e.features)?,
                    labels: e.labels.clone(),
                })
            })
            .collect()
    };
    let in_pool = prep(&data.in_domain)?;
    let ood_pool = prep(&data.ood)?;

    let (mut n_in, mut n_ood) = cfg.batch_split(!ood_pool.is_empty());
    if in_pool.is_empty() {
        n_in = 0;
        n_ood = cfg.batch_size;
    }
    let batches = if n_in > 0 {
        in_pool.len().div_ceil(n_in)
    } else if n_ood > 0 {
        ood_pool.len().div_ceil(n_ood)
    } else {
        return Err(Error::invalid("degenerate batch composition"));
    };

    let all: Vec<&Example> = in_pool.iter().chain(&ood_pool).collect();
    let initial_loss = model.batch_loss_grad_std(&all).0;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut in_order: Vec<usize> = (0..in_pool.len()).collect();
    let mut ood = Cycler::new(ood_pool.len(), &mut rng);
    let mut adam = Adam {
        m: vec![0.0; model.params.len()],
        v: vec![0.0; model.params.len()],
        t: 0,
    };
    let mut report = TrainReport {
        initial_loss,
        loss_trace: Vec::with_capacity(cfg.epochs),
        in_domain_seen: 0,
        ood_seen: 0,
        ood_per_batch: Vec::new(),
    };
    for epoch in 0..cfg.epochs {
        in_order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for b in 0..batches {
            let mut batch: Vec<&Example> = Vec::with_capacity(cfg.batch_size);
            if n_in > 0 {
                let lo = b * n_in;
                let hi = (lo + n_in).min(in_order.len());
                batch.extend(in_order[lo..hi].iter().map(|&i| &in_pool[i]));
                report.in_domain_seen += hi - lo;
            }
            for _ in 0..n_ood {
                batch.push(&ood_pool[ood.draw(&mut rng)]);
            }
            report.ood_seen += n_ood;
            report.ood_per_batch.push(n_ood);
            let (loss, grad) = model.batch_loss_grad_std(&batch);
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Numeric(format!("non-finite loss or gradient in epoch {epoch}")));
            }
            adam.step(&mut model.params, &grad, cfg);
            epoch_loss += loss;
        }
        let mean = epoch_loss / batches as f64;
        log::info!(
            target: "confkit::train",
            "{{\"event\":\"epoch\",\"kind\":\"{:?}\",\"epoch\":{},\"loss\":{}}}",
            model.kind,
            epoch,
            mean
        );
        report.loss_trace.push(mean);
    }
    Ok((model, report))
}
