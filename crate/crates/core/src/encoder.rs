//! Transformer encoder over packed `[CLS] x [SEP] x~ [SEP]` sequences.
//!
//! Post-norm layers with learned positions, GELU feed-forward blocks, one
//! linear head per pre-training task and a scalar rating head, all reading
//! the final `[CLS]` vector. Backward passes are written out by hand.
//!
//! Parameters live in one flat `Vec<f64>`; a layout maps tensor names to
//! slices. Gradients share that layout, which keeps the optimizer and
//! checkpoints trivial.

use std::collections::BTreeMap;
use std::ops::Range;
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::rng::{derived_rng, Rng};
use crate::signals::{SignalVector, TaskKind, TaskSet};
use crate::textcore::{TokenSeq, CLS_ID, SEP_ID};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SMCKPT\0\0";
pub const CHECKPOINT_VERSION: u32 = 1;
const LN_EPS: f64 = 1e-12;
const GELU_C: f64 = 0.797_884_560_802_865_4;
/// Examples per gradient work unit. Partial sums are reduced in chunk
/// order so results do not depend on the thread count.
const CHUNK: usize = 4;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("invalid encoder config: {0}")]
    BadConfig(String),
    #[error("sequence of length {len} exceeds max_seq_len {max}")]
    TooLong { len: usize, max: usize },
    #[error("token id {id} outside vocabulary of size {vocab_size}")]
    BadToken { id: u32, vocab_size: usize },
    #[error("malformed input: {0}")]
    BadInput(String),
    #[error("non-finite values in {layer}")]
    NonFinite { layer: String },
    #[error("shape mismatch: {0}")]
    Mismatch(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, EncoderError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    /// Applied to attention and feed-forward outputs during training only.
    pub dropout: f64,
    pub init_seed: u64,
    pub init_std: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            vocab_size: 8000,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 256,
            max_seq_len: 128,
            dropout: 0.1,
            init_seed: 0,
            init_std: 0.02,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(EncoderError::BadConfig(m));
        if self.vocab_size < 6 {
            return bad(format!("vocab_size {} leaves no room for ordinary tokens", self.vocab_size));
        }
        if self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 {
            return bad("d_model, n_heads and d_ff must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.max_seq_len < 3 {
            return bad(format!("max_seq_len {} < 3", self.max_seq_len));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return bad(format!("init_std {}", self.init_std));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadSpec {
    pub name: String,
    pub kind: TaskKind,
}

impl HeadSpec {
    pub fn from_tasks(tasks: &TaskSet) -> Vec<HeadSpec> {
        tasks
            .tasks()
            .iter()
            .map(|t| HeadSpec {
                name: t.name.clone(),
                kind: t.kind,
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Span {
    off: usize,
    rows: usize,
    cols: usize,
}

impl Span {
    fn len(self) -> usize {
        self.rows * self.cols
    }

    fn range(self) -> Range<usize> {
        self.off..self.off + self.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    Normal,
    Ones,
    Zeros,
}

#[derive(Debug, Clone)]
struct LayerSpans {
    wq: Span,
    bq: Span,
    wk: Span,
    bk: Span,
    wv: Span,
    bv: Span,
    wo: Span,
    bo: Span,
    ln1_g: Span,
    ln1_b: Span,
    w1: Span,
    b1: Span,
    w2: Span,
    b2: Span,
    ln2_g: Span,
    ln2_b: Span,
}

#[derive(Debug, Clone)]
struct Layout {
    tok: Span,
    pos: Span,
    seg: Span,
    emb_g: Span,
    emb_b: Span,
    layers: Vec<LayerSpans>,
    heads: Vec<(Span, Span)>,
    rating_w: Span,
    rating_b: Span,
    tensors: Vec<(String, Span, Init)>,
    total: usize,
}

struct Builder {
    off: usize,
    tensors: Vec<(String, Span, Init)>,
}

impl Builder {
    fn add(&mut self, name: impl Into<String>, rows: usize, cols: usize, init: Init) -> Span {
        let s = Span { off: self.off, rows, cols };
        self.off += rows * cols;
        self.tensors.push((name.into(), s, init));
        s
    }
}

impl Layout {
    fn new(cfg: &EncoderConfig, heads: &[HeadSpec]) -> Layout {
        let d = cfg.d_model;
        let mut b = Builder {
            off: 0,
            tensors: Vec::new(),
        };
        let tok = b.add("embeddings.token", cfg.vocab_size, d, Init::Normal);
        let pos = b.add("embeddings.position", cfg.max_seq_len, d, Init::Normal);
        let seg = b.add("embeddings.segment", 2, d, Init::Normal);
        let emb_g = b.add("embeddings.norm.gamma", 1, d, Init::Ones);
        let emb_b = b.add("embeddings.norm.beta", 1, d, Init::Zeros);
        let layers = (0..cfg.n_layers)
            .map(|l| {
                let p = |s: &str| format!("layer{l}.{s}");
                LayerSpans {
                    wq: b.add(p("attn.query.w"), d, d, Init::Normal),
                    bq: b.add(p("attn.query.b"), 1, d, Init::Zeros),
                    wk: b.add(p("attn.key.w"), d, d, Init::Normal),
                    bk: b.add(p("attn.key.b"), 1, d, Init::Zeros),
                    wv: b.add(p("attn.value.w"), d, d, Init::Normal),
                    bv: b.add(p("attn.value.b"), 1, d, Init::Zeros),
                    wo: b.add(p("attn.output.w"), d, d, Init::Normal),
                    bo: b.add(p("attn.output.b"), 1, d, Init::Zeros),
                    ln1_g: b.add(p("attn.norm.gamma"), 1, d, Init::Ones),
                    ln1_b: b.add(p("attn.norm.beta"), 1, d, Init::Zeros),
                    w1: b.add(p("ffn.in.w"), d, cfg.d_ff, Init::Normal),
                    b1: b.add(p("ffn.in.b"), 1, cfg.d_ff, Init::Zeros),
                    w2: b.add(p("ffn.out.w"), cfg.d_ff, d, Init::Normal),
                    b2: b.add(p("ffn.out.b"), 1, d, Init::Zeros),
                    ln2_g: b.add(p("ffn.norm.gamma"), 1, d, Init::Ones),
                    ln2_b: b.add(p("ffn.norm.beta"), 1, d, Init::Zeros),
                }
            })
            .collect();
        let heads = heads
            .iter()
            .map(|h| {
                let w = b.add(format!("head.{}.w", h.name), d, h.kind.width(), Init::Normal);
                let bias = b.add(format!("head.{}.b", h.name), 1, h.kind.width(), Init::Zeros);
                (w, bias)
            })
            .collect();
        let rating_w = b.add("rating.w", d, 1, Init::Normal);
        let rating_b = b.add("rating.b", 1, 1, Init::Zeros);
        Layout {
            tok,
            pos,
            seg,
            emb_g,
            emb_b,
            layers,
            heads,
            rating_w,
            rating_b,
            total: b.off,
            tensors: b.tensors,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ModelParams {
    config: EncoderConfig,
    heads: Vec<HeadSpec>,
    data: Vec<f64>,
    layout: Layout,
}

impl PartialEq for ModelParams {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.heads == other.heads && self.data == other.data
    }
}

/// One packed pair: `[CLS] x [SEP] x~ [SEP]` with segment ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedPair {
    ids: Vec<u32>,
    segments: Vec<u8>,
}

impl EncodedPair {
    pub fn new(ids: Vec<u32>, segments: Vec<u8>) -> Result<Self> {
        if ids.is_empty() || ids.len() != segments.len() || segments.iter().any(|&s| s > 1) {
            return Err(EncoderError::BadInput(format!(
                "{} ids with segments {:?}",
                ids.len(),
                segments
            )));
        }
        Ok(EncodedPair { ids, segments })
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn segments(&self) -> &[u8] {
        &self.segments
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Packs a pair. Overlong pairs are an error, never truncated.
pub fn pack(reference: &TokenSeq, candidate: &TokenSeq, max_seq_len: usize) -> Result<EncodedPair> {
    let len = reference.len() + candidate.len() + 3;
    if len > max_seq_len {
        return Err(EncoderError::TooLong { len, max: max_seq_len });
    }
    let mut ids = Vec::with_capacity(len);
    ids.push(CLS_ID);
    ids.extend_from_slice(reference.ids());
    ids.push(SEP_ID);
    let split = ids.len();
    ids.extend_from_slice(candidate.ids());
    ids.push(SEP_ID);
    let segments = (0..len).map(|i| u8::from(i >= split)).collect();
    Ok(EncodedPair { ids, segments })
}

#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    Rating(f64),
    /// One block per model head, in head order.
    Tasks(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainExample {
    pub input: EncodedPair,
    pub target: Target,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LossSelector {
    /// Mean squared error of the rating head.
    Supervised,
    /// Weighted sum of head losses, one weight per model head.
    Pretrain(Vec<f64>),
    /// Loss of a single head with unit weight.
    SingleTask(usize),
}

impl LossSelector {
    /// Weights for the model's heads taken from `tasks` by name. Heads the
    /// task set does not mention get weight zero.
    pub fn from_tasks(params: &ModelParams, tasks: &TaskSet) -> Result<Self> {
        let mut w = vec![0.0; params.heads.len()];
        for t in tasks.tasks() {
            let i = params
                .head_index(&t.name)
                .ok_or_else(|| EncoderError::Mismatch(format!("model has no head `{}`", t.name)))?;
            if params.heads[i].kind != t.kind {
                return Err(EncoderError::Mismatch(format!("head `{}` has a different shape", t.name)));
            }
            w[i] = t.weight;
        }
        Ok(LossSelector::Pretrain(w))
    }

    fn head_weight(&self, k: usize) -> f64 {
        match self {
            LossSelector::Supervised => 0.0,
            LossSelector::Pretrain(w) => w[k],
            LossSelector::SingleTask(i) => f64::from(u8::from(*i == k)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub cls: Vec<f64>,
    /// Regression values or class logits, per head.
    pub heads: Vec<Vec<f64>>,
    pub rating: f64,
}

struct LnCache {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
}

struct LayerTrace {
    input: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    probs: Vec<f64>,
    ctx: Vec<f64>,
    attn_drop: Option<Vec<f64>>,
    ln1: LnCache,
    h1: Vec<f64>,
    pre: Vec<f64>,
    act: Vec<f64>,
    ffn_drop: Option<Vec<f64>>,
    ln2: LnCache,
}

struct Trace {
    emb_ln: LnCache,
    layers: Vec<LayerTrace>,
    out: Vec<f64>,
}

fn affine(x: &[f64], n: usize, p: &[f64], ws: Span, bs: Span) -> Vec<f64> {
    let (din, dout) = (ws.rows, ws.cols);
    let w = &p[ws.range()];
    let b = &p[bs.range()];
    let mut y = vec![0.0; n * dout];
    for i in 0..n {
        let yi = &mut y[i * dout..(i + 1) * dout];
        yi.copy_from_slice(b);
        for (a, &xa) in x[i * din..(i + 1) * din].iter().enumerate() {
            for (yc, wc) in yi.iter_mut().zip(&w[a * dout..(a + 1) * dout]) {
                *yc += xa * wc;
            }
        }
    }
    y
}

fn affine_back(x: &[f64], dy: &[f64], n: usize, p: &[f64], g: &mut [f64], ws: Span, bs: Span) -> Vec<f64> {
    let (din, dout) = (ws.rows, ws.cols);
    let w = &p[ws.range()];
    let mut dx = vec![0.0; n * din];
    for i in 0..n {
        let dyi = &dy[i * dout..(i + 1) * dout];
        for (gb, d) in g[bs.range()].iter_mut().zip(dyi) {
            *gb += d;
        }
        for a in 0..din {
            let xa = x[i * din + a];
            let wr = &w[a * dout..(a + 1) * dout];
            let gw = &mut g[ws.off + a * dout..ws.off + (a + 1) * dout];
            let mut s = 0.0;
            for c in 0..dout {
                s += wr[c] * dyi[c];
                gw[c] += xa * dyi[c];
            }
            dx[i * din + a] = s;
        }
    }
    dx
}

fn layer_norm(x: &[f64], n: usize, d: usize, p: &[f64], gs: Span, bs: Span) -> (Vec<f64>, LnCache) {
    let (g, b) = (&p[gs.range()], &p[bs.range()]);
    let mut y = vec![0.0; n * d];
    let mut xhat = vec![0.0; n * d];
    let mut inv_std = vec![0.0; n];
    for i in 0..n {
        let row = &x[i * d..(i + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        inv_std[i] = inv;
        for j in 0..d {
            let h = (row[j] - mean) * inv;
            xhat[i * d + j] = h;
            y[i * d + j] = g[j] * h + b[j];
        }
    }
    (y, LnCache { xhat, inv_std })
}

fn layer_norm_back(dy: &[f64], c: &LnCache, n: usize, d: usize, p: &[f64], grad: &mut [f64], gs: Span, bs: Span) -> Vec<f64> {
    let g = &p[gs.range()];
    let mut dx = vec![0.0; n * d];
    let mut dxh = vec![0.0; d];
    for i in 0..n {
        let xh = &c.xhat[i * d..(i + 1) * d];
        let dyi = &dy[i * d..(i + 1) * d];
        let (mut m1, mut m2) = (0.0, 0.0);
        for j in 0..d {
            grad[gs.off + j] += dyi[j] * xh[j];
            grad[bs.off + j] += dyi[j];
            dxh[j] = dyi[j] * g[j];
            m1 += dxh[j];
            m2 += dxh[j] * xh[j];
        }
        m1 /= d as f64;
        m2 /= d as f64;
        for j in 0..d {
            dx[i * d + j] = c.inv_std[i] * (dxh[j] - m1 - xh[j] * m2);
        }
    }
    dx
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn dropout(buf: &mut [f64], rate: f64, rng: Option<&mut Rng>) -> Option<Vec<f64>> {
    let rng = rng?;
    if rate == 0.0 {
        return None;
    }
    let keep = 1.0 / (1.0 - rate);
    let mask: Vec<f64> = buf
        .iter_mut()
        .map(|x| {
            let m = if rng.random::<f64>() < rate { 0.0 } else { keep };
            *x *= m;
            m
        })
        .collect();
    Some(mask)
}

fn check_finite(xs: &[f64], layer: impl FnOnce() -> String) -> Result<()> {
    if xs.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(EncoderError::NonFinite { layer: layer() })
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|z| (z - mx).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// `||t - p||^2 / |t|`.
pub fn regression_loss(pred: &[f64], target: &[f64]) -> f64 {
    pred.iter().zip(target).map(|(p, t)| (t - p) * (t - p)).sum::<f64>() / target.len() as f64
}

/// Cross-entropy of softmax(`logits`) against a target distribution.
pub fn cross_entropy(logits: &[f64], target: &[f64]) -> f64 {
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = mx + logits.iter().map(|z| (z - mx).exp()).sum::<f64>().ln();
    target.iter().zip(logits).map(|(t, z)| t * (lse - z)).sum()
}

fn task_loss(kind: TaskKind, pred: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
    if pred.len() != kind.width() || target.len() != kind.width() {
        return Err(EncoderError::Mismatch(format!(
            "head width {}, prediction {}, target {}",
            kind.width(),
            pred.len(),
            target.len()
        )));
    }
    Ok(match kind {
        TaskKind::Regression { dim } => {
            let grad = pred.iter().zip(target).map(|(p, t)| 2.0 * (p - t) / dim as f64).collect();
            (regression_loss(pred, target), grad)
        }
        TaskKind::Classification { .. } => {
            let sum_t: f64 = target.iter().sum();
            let grad = softmax(pred).iter().zip(target).map(|(s, t)| s * sum_t - t).collect();
            (cross_entropy(pred, target), grad)
        }
    })
}

/// Mean squared error.
pub fn supervised_loss(pred: &[f64], y: &[f64]) -> Result<f64> {
    if pred.is_empty() || pred.len() != y.len() {
        return Err(EncoderError::Mismatch(format!("{} predictions for {} ratings", pred.len(), y.len())));
    }
    Ok(pred.iter().zip(y).map(|(p, t)| (t - p) * (t - p)).sum::<f64>() / pred.len() as f64)
}

/// `(1/M) sum_m sum_k gamma_k l_k`, with predictions and targets given per
/// example, per task, in task-set order.
pub fn pretrain_loss(preds: &[Vec<Vec<f64>>], targets: &[Vec<Vec<f64>>], tasks: &TaskSet) -> Result<f64> {
    if preds.is_empty() || preds.len() != targets.len() {
        return Err(EncoderError::Mismatch(format!("{} predictions for {} targets", preds.len(), targets.len())));
    }
    let mut total = 0.0;
    for (p, t) in preds.iter().zip(targets) {
        if p.len() != tasks.len() || t.len() != tasks.len() {
            return Err(EncoderError::Mismatch(format!("{} task blocks for {} tasks", p.len(), tasks.len())));
        }
        for (k, spec) in tasks.tasks().iter().enumerate() {
            let (l, _) = task_loss(spec.kind, &p[k], &t[k])?;
            total += spec.weight * l;
        }
    }
    Ok(total / preds.len() as f64)
}

impl ModelParams {
    pub fn init(config: EncoderConfig, heads: Vec<HeadSpec>) -> Result<Self> {
        config.validate()?;
        let mut names = std::collections::HashSet::new();
        for h in &heads {
            if !names.insert(h.name.as_str()) || h.kind.width() == 0 {
                return Err(EncoderError::BadConfig(format!("bad head `{}`", h.name)));
            }
        }
        let layout = Layout::new(&config, &heads);
        let mut data = vec![0.0; layout.total];
        // one stream per tensor, so adding a head leaves the rest unchanged
        for (name, span, init) in &layout.tensors {
            let slot = &mut data[span.range()];
            match init {
                Init::Ones => slot.fill(1.0),
                Init::Zeros => {}
                Init::Normal => {
                    let mut rng = derived_rng(config.init_seed, name, 0);
                    for x in slot {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        *x = config.init_std * z;
                    }
                }
            }
        }
        Ok(ModelParams {
            config,
            heads,
            data,
            layout,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn heads(&self) -> &[HeadSpec] {
        &self.heads
    }

    pub fn head_index(&self, name: &str) -> Option<usize> {
        self.heads.iter().position(|h| h.name == name)
    }

    pub fn n_params(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Tensor names with `[rows, cols]` shapes, in storage order.
    pub fn tensor_shapes(&self) -> Vec<(String, [usize; 2])> {
        self.layout
            .tensors
            .iter()
            .map(|(n, s, _)| (n.clone(), [s.rows, s.cols]))
            .collect()
    }

    /// Index range of a named tensor in [`Self::data`] and gradient vectors.
    pub fn tensor_range(&self, name: &str) -> Option<Range<usize>> {
        self.layout.tensors.iter().find(|(n, _, _)| n == name).map(|(_, s, _)| s.range())
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        self.tensor_range(name).map(|r| &self.data[r])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        self.tensor_range(name).map(move |r| &mut self.data[r])
    }

    fn tensor_at(&self, index: usize) -> &str {
        self.layout
            .tensors
            .iter()
            .find(|(_, s, _)| s.range().contains(&index))
            .map(|(n, _, _)| n.as_str())
            .unwrap_or("?")
    }

    /// Per-head target blocks for a signal vector.
    pub fn head_targets(&self, signals: &SignalVector) -> Result<Vec<Vec<f64>>> {
        self.heads
            .iter()
            .map(|h| {
                let block = signals
                    .block(&h.name)
                    .ok_or_else(|| EncoderError::Mismatch(format!("no signal for head `{}`", h.name)))?;
                if block.len() != h.kind.width() {
                    return Err(EncoderError::Mismatch(format!("signal `{}` has width {}", h.name, block.len())));
                }
                Ok(block)
            })
            .collect()
    }

    fn check_input(&self, input: &EncodedPair) -> Result<()> {
        if input.len() > self.config.max_seq_len {
            return Err(EncoderError::TooLong {
                len: input.len(),
                max: self.config.max_seq_len,
            });
        }
        if let Some(&id) = input.ids.iter().find(|&&id| id as usize >= self.config.vocab_size) {
            return Err(EncoderError::BadToken {
                id,
                vocab_size: self.config.vocab_size,
            });
        }
        Ok(())
    }

    fn forward_trace(&self, input: &EncodedPair, mut rng: Option<&mut Rng>) -> Result<Trace> {
        self.check_input(input)?;
        let (p, lay, cfg) = (&self.data, &self.layout, &self.config);
        let (n, d) = (input.len(), cfg.d_model);
        let mut x = vec![0.0; n * d];
        for i in 0..n {
            let t = input.ids[i] as usize;
            let s = input.segments[i] as usize;
            for c in 0..d {
                x[i * d + c] = p[lay.tok.off + t * d + c] + p[lay.pos.off + i * d + c] + p[lay.seg.off + s * d + c];
            }
        }
        let (mut h, emb_ln) = layer_norm(&x, n, d, p, lay.emb_g, lay.emb_b);
        check_finite(&h, || "embeddings".into())?;

        let nh = cfg.n_heads;
        let dh = d / nh;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for (l, ls) in lay.layers.iter().enumerate() {
            let q = affine(&h, n, p, ls.wq, ls.bq);
            let k = affine(&h, n, p, ls.wk, ls.bk);
            let v = affine(&h, n, p, ls.wv, ls.bv);
            let mut probs = vec![0.0; nh * n * n];
            let mut ctx = vec![0.0; n * d];
            for a in 0..nh {
                let o = a * dh;
                for i in 0..n {
                    let row = &mut probs[(a * n + i) * n..(a * n + i + 1) * n];
                    let qi = &q[i * d + o..i * d + o + dh];
                    for j in 0..n {
                        let kj = &k[j * d + o..j * d + o + dh];
                        row[j] = scale * qi.iter().zip(kj).map(|(x, y)| x * y).sum::<f64>();
                    }
                    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut z = 0.0;
                    for r in row.iter_mut() {
                        *r = (*r - mx).exp();
                        z += *r;
                    }
                    for r in row.iter_mut() {
                        *r /= z;
                    }
                    for j in 0..n {
                        let pij = row[j];
                        for e in 0..dh {
                            ctx[i * d + o + e] += pij * v[j * d + o + e];
                        }
                    }
                }
            }
            let mut attn = affine(&ctx, n, p, ls.wo, ls.bo);
            let attn_drop = dropout(&mut attn, cfg.dropout, rng.as_deref_mut());
            let r1: Vec<f64> = h.iter().zip(&attn).map(|(a, b)| a + b).collect();
            let (h1, ln1) = layer_norm(&r1, n, d, p, ls.ln1_g, ls.ln1_b);
            check_finite(&h1, || format!("layer {l} attention"))?;
            let pre = affine(&h1, n, p, ls.w1, ls.b1);
            let act: Vec<f64> = pre.iter().map(|&x| gelu(x)).collect();
            let mut f = affine(&act, n, p, ls.w2, ls.b2);
            let ffn_drop = dropout(&mut f, cfg.dropout, rng.as_deref_mut());
            let r2: Vec<f64> = h1.iter().zip(&f).map(|(a, b)| a + b).collect();
            let (out, ln2) = layer_norm(&r2, n, d, p, ls.ln2_g, ls.ln2_b);
            check_finite(&out, || format!("layer {l} feed-forward"))?;
            layers.push(LayerTrace {
                input: std::mem::replace(&mut h, out),
                q,
                k,
                v,
                probs,
                ctx,
                attn_drop,
                ln1,
                h1,
                pre,
                act,
                ffn_drop,
                ln2,
            });
        }
        Ok(Trace { emb_ln, layers, out: h })
    }

    fn head_output(&self, k: usize, cls: &[f64]) -> Vec<f64> {
        let (w, b) = self.layout.heads[k];
        affine(cls, 1, &self.data, w, b)
    }

    fn rating_output(&self, cls: &[f64]) -> f64 {
        affine(cls, 1, &self.data, self.layout.rating_w, self.layout.rating_b)[0]
    }

    /// Inference forward pass (dropout off).
    pub fn forward(&self, input: &EncodedPair) -> Result<Prediction> {
        let tr = self.forward_trace(input, None)?;
        let cls = tr.out[..self.config.d_model].to_vec();
        let heads: Vec<Vec<f64>> = (0..self.heads.len()).map(|k| self.head_output(k, &cls)).collect();
        check_finite(&heads.concat(), || "task heads".into())?;
        let rating = self.rating_output(&cls);
        check_finite(&[rating], || "rating head".into())?;
        Ok(Prediction { cls, heads, rating })
    }

    pub fn forward_batch(&self, inputs: &[EncodedPair]) -> Result<Vec<Prediction>> {
        inputs.par_iter().map(|x| self.forward(x)).collect()
    }

    pub fn predict_ratings(&self, inputs: &[EncodedPair]) -> Result<Vec<f64>> {
        inputs
            .par_iter()
            .map(|x| {
                let tr = self.forward_trace(x, None)?;
                let y = self.rating_output(&tr.out[..self.config.d_model]);
                check_finite(&[y], || "rating head".into())?;
                Ok(y)
            })
            .collect()
    }

    /// Attention distributions per layer, laid out `[head][query][key]`.
    pub fn attention_probs(&self, input: &EncodedPair) -> Result<Vec<Vec<f64>>> {
        Ok(self.forward_trace(input, None)?.layers.into_iter().map(|l| l.probs).collect())
    }

    /// Adds this example's head gradients (scaled) to `g` and returns its
    /// unscaled loss and the scaled gradient with respect to the CLS vector.
    fn head_grads(&self, cls: &[f64], target: &Target, sel: &LossSelector, scale: f64, g: &mut [f64]) -> Result<(f64, Vec<f64>)> {
        let d = self.config.d_model;
        let mut dcls = vec![0.0; d];
        let p = &self.data;
        match (sel, target) {
            (LossSelector::Supervised, Target::Rating(y)) => {
                let yhat = self.rating_output(cls);
                let dy = [2.0 * (yhat - y) * scale];
                let dc = affine_back(cls, &dy, 1, p, g, self.layout.rating_w, self.layout.rating_b);
                Ok(((yhat - y) * (yhat - y), dc))
            }
            (LossSelector::Pretrain(_) | LossSelector::SingleTask(_), Target::Tasks(blocks)) => {
                if blocks.len() != self.heads.len() {
                    return Err(EncoderError::Mismatch(format!(
                        "{} target blocks for {} heads",
                        blocks.len(),
                        self.heads.len()
                    )));
                }
                if let LossSelector::Pretrain(w) = sel {
                    if w.len() != self.heads.len() {
                        return Err(EncoderError::Mismatch(format!("{} weights for {} heads", w.len(), self.heads.len())));
                    }
                }
                let mut loss = 0.0;
                for (k, head) in self.heads.iter().enumerate() {
                    let gamma = sel.head_weight(k);
                    if gamma == 0.0 {
                        continue;
                    }
                    let out = self.head_output(k, cls);
                    let (l, mut dout) = task_loss(head.kind, &out, &blocks[k])?;
                    loss += gamma * l;
                    dout.iter_mut().for_each(|x| *x *= gamma * scale);
                    let (w, b) = self.layout.heads[k];
                    let dc = affine_back(cls, &dout, 1, p, g, w, b);
                    dcls.iter_mut().zip(dc).for_each(|(a, b)| *a += b);
                }
                Ok((loss, dcls))
            }
            _ => Err(EncoderError::Mismatch("loss selector does not match target kind".into())),
        }
    }

    fn backward(&self, tr: &Trace, input: &EncodedPair, dcls: &[f64], g: &mut [f64]) {
        let (p, lay, cfg) = (&self.data, &self.layout, &self.config);
        let (n, d) = (input.len(), cfg.d_model);
        let nh = cfg.n_heads;
        let dh = d / nh;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dh_out = vec![0.0; n * d];
        dh_out[..d].copy_from_slice(dcls);
        for (lt, ls) in tr.layers.iter().zip(&lay.layers).rev() {
            let dr2 = layer_norm_back(&dh_out, &lt.ln2, n, d, p, g, ls.ln2_g, ls.ln2_b);
            let mut df = dr2.clone();
            if let Some(m) = &lt.ffn_drop {
                df.iter_mut().zip(m).for_each(|(x, m)| *x *= m);
            }
            let dact = affine_back(&lt.act, &df, n, p, g, ls.w2, ls.b2);
            let dpre: Vec<f64> = dact.iter().zip(&lt.pre).map(|(da, &x)| da * gelu_grad(x)).collect();
            let mut dh1 = affine_back(&lt.h1, &dpre, n, p, g, ls.w1, ls.b1);
            dh1.iter_mut().zip(&dr2).for_each(|(a, b)| *a += b);
            let dr1 = layer_norm_back(&dh1, &lt.ln1, n, d, p, g, ls.ln1_g, ls.ln1_b);
            let mut da = dr1.clone();
            if let Some(m) = &lt.attn_drop {
                da.iter_mut().zip(m).for_each(|(x, m)| *x *= m);
            }
            let dctx = affine_back(&lt.ctx, &da, n, p, g, ls.wo, ls.bo);
            let mut dq = vec![0.0; n * d];
            let mut dk = vec![0.0; n * d];
            let mut dv = vec![0.0; n * d];
            let mut dp = vec![0.0; n];
            for a in 0..nh {
                let o = a * dh;
                for i in 0..n {
                    let row = &lt.probs[(a * n + i) * n..(a * n + i + 1) * n];
                    let dci = &dctx[i * d + o..i * d + o + dh];
                    for j in 0..n {
                        let mut s = 0.0;
                        for e in 0..dh {
                            s += dci[e] * lt.v[j * d + o + e];
                            dv[j * d + o + e] += row[j] * dci[e];
                        }
                        dp[j] = s;
                    }
                    let dot: f64 = row.iter().zip(&dp).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        let ds = row[j] * (dp[j] - dot) * scale;
                        for e in 0..dh {
                            dq[i * d + o + e] += ds * lt.k[j * d + o + e];
                            dk[j * d + o + e] += ds * lt.q[i * d + o + e];
                        }
                    }
                }
            }
            let mut dx = dr1;
            for (dy, w, b) in [(&dq, ls.wq, ls.bq), (&dk, ls.wk, ls.bk), (&dv, ls.wv, ls.bv)] {
                let part = affine_back(&lt.input, dy, n, p, g, w, b);
                dx.iter_mut().zip(part).for_each(|(a, b)| *a += b);
            }
            dh_out = dx;
        }
        let dx = layer_norm_back(&dh_out, &tr.emb_ln, n, d, p, g, lay.emb_g, lay.emb_b);
        for i in 0..n {
            let t = input.ids[i] as usize;
            let s = input.segments[i] as usize;
            for c in 0..d {
                let v = dx[i * d + c];
                g[lay.tok.off + t * d + c] += v;
                g[lay.pos.off + i * d + c] += v;
                g[lay.seg.off + s * d + c] += v;
            }
        }
    }

    /// Mean loss over `batch` and its exact gradient. Dropout is applied
    /// when `dropout_seed` is given, with one stream per batch position.
    pub fn loss_and_gradient(
        &self,
        batch: &[TrainExample],
        selector: &LossSelector,
        dropout_seed: Option<u64>,
    ) -> Result<(f64, Vec<f64>)> {
        if batch.is_empty() {
            return Err(EncoderError::Mismatch("empty batch".into()));
        }
        if let LossSelector::SingleTask(k) = selector {
            if *k >= self.heads.len() {
                return Err(EncoderError::Mismatch(format!("no head {k}")));
            }
        }
        let scale = 1.0 / batch.len() as f64;
        let d = self.config.d_model;
        let parts: Vec<(f64, Vec<f64>)> = batch
            .par_chunks(CHUNK)
            .enumerate()
            .map(|(ci, chunk)| {
                let mut g = vec![0.0; self.data.len()];
                let mut loss = 0.0;
                for (j, ex) in chunk.iter().enumerate() {
                    let mut rng = dropout_seed.map(|s| derived_rng(s, "dropout", (ci * CHUNK + j) as u64));
                    let tr = self.forward_trace(&ex.input, rng.as_mut())?;
                    let (l, dcls) = self.head_grads(&tr.out[..d], &ex.target, selector, scale, &mut g)?;
                    if !l.is_finite() {
                        return Err(EncoderError::NonFinite { layer: "loss".into() });
                    }
                    loss += l;
                    if dcls.iter().any(|&x| x != 0.0) {
                        self.backward(&tr, &ex.input, &dcls, &mut g);
                    }
                }
                Ok((loss, g))
            })
            .collect::<Result<_>>()?;
        let mut total = 0.0;
        let mut grad = vec![0.0; self.data.len()];
        for (l, g) in parts {
            total += l;
            grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
        }
        if let Some(i) = grad.iter().position(|x| !x.is_finite()) {
            return Err(EncoderError::NonFinite {
                layer: format!("gradient of {}", self.tensor_at(i)),
            });
        }
        Ok((total * scale, grad))
    }

    /// Mean loss without gradients (dropout off).
    pub fn loss(&self, batch: &[TrainExample], selector: &LossSelector) -> Result<f64> {
        if batch.is_empty() {
            return Err(EncoderError::Mismatch("empty batch".into()));
        }
        let d = self.config.d_model;
        let losses: Vec<f64> = batch
            .par_iter()
            .map(|ex| {
                let tr = self.forward_trace(&ex.input, None)?;
                self.loss_only(&tr.out[..d], &ex.target, selector)
            })
            .collect::<Result<_>>()?;
        Ok(losses.iter().sum::<f64>() / batch.len() as f64)
    }

    fn loss_only(&self, cls: &[f64], target: &Target, sel: &LossSelector) -> Result<f64> {
        match (sel, target) {
            (LossSelector::Supervised, Target::Rating(y)) => {
                let yhat = self.rating_output(cls);
                Ok((yhat - y) * (yhat - y))
            }
            (LossSelector::Pretrain(_) | LossSelector::SingleTask(_), Target::Tasks(blocks)) => {
                if blocks.len() != self.heads.len() {
                    return Err(EncoderError::Mismatch("target blocks do not match heads".into()));
                }
                let mut loss = 0.0;
                for (k, head) in self.heads.iter().enumerate() {
                    let gamma = sel.head_weight(k);
                    if gamma != 0.0 {
                        loss += gamma * task_loss(head.kind, &self.head_output(k, cls), &blocks[k])?.0;
                    }
                }
                Ok(loss)
            }
            _ => Err(EncoderError::Mismatch("loss selector does not match target kind".into())),
        }
    }

    /// Checkpoint bytes: magic, version, JSON header length and header,
    /// then every parameter as little-endian f64 in layout order.
    pub fn to_bytes(&self, metadata: &BTreeMap<String, String>) -> Vec<u8> {
        let header = CheckpointHeader {
            config: self.config.clone(),
            heads: self.heads.clone(),
            tensors: self.tensor_shapes(),
            metadata: metadata.clone(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(24 + json.len() + 8 * self.data.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for x in &self.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, BTreeMap<String, String>)> {
        let bad = |m: &str| EncoderError::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(EncoderError::CheckpointVersion {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = bytes.get(20..).ok_or_else(|| bad("truncated"))?;
        let json = body.get(..hlen).ok_or_else(|| bad("truncated header"))?;
        let header: CheckpointHeader =
            serde_json::from_slice(json).map_err(|e| EncoderError::Checkpoint(format!("header: {e}")))?;
        let mut params = ModelParams::init(header.config, header.heads)?;
        if params.tensor_shapes() != header.tensors {
            return Err(bad("tensor list does not match the config"));
        }
        let raw = &body[hlen..];
        if raw.len() != 8 * params.data.len() {
            return Err(EncoderError::Checkpoint(format!(
                "expected {} parameter bytes, found {}",
                8 * params.data.len(),
                raw.len()
            )));
        }
        for (x, c) in params.data.iter_mut().zip(raw.chunks_exact(8)) {
            *x = f64::from_le_bytes(c.try_into().unwrap());
        }
        if let Some(i) = params.data.iter().position(|x| !x.is_finite()) {
            return Err(EncoderError::NonFinite {
                layer: format!("checkpoint tensor {}", params.tensor_at(i)),
            });
        }
        Ok((params, header.metadata))
    }

    pub fn save(&self, path: &Path, metadata: &BTreeMap<String, String>) -> Result<()> {
        std::fs::write(path, self.to_bytes(metadata))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Self, BTreeMap<String, String>)> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// SHA-256 of the checkpoint bytes without metadata.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes(&BTreeMap::new())))
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    config: EncoderConfig,
    heads: Vec<HeadSpec>,
    tensors: Vec<(String, [usize; 2])>,
    metadata: BTreeMap<String, String>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(heads: Vec<HeadSpec>) -> ModelParams {
        let cfg = EncoderConfig {
            vocab_size: 12,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_ff: 16,
            max_seq_len: 16,
            dropout: 0.0,
            init_seed: 3,
            init_std: 0.3,
        };
        ModelParams::init(cfg, heads).unwrap()
    }

    fn input(ids: &[u32]) -> EncodedPair {
        let half = ids.len() / 2;
        EncodedPair::new(ids.to_vec(), (0..ids.len()).map(|i| u8::from(i >= half)).collect()).unwrap()
    }

    #[test]
    fn zero_rating_weights_give_the_bias() {
        let mut m = tiny(vec![]);
        m.tensor_mut("rating.w").unwrap().fill(0.0);
        m.tensor_mut("rating.b").unwrap()[0] = 0.75;
        for ids in [&[2, 5, 3, 6, 3][..], &[2, 7, 7, 8, 9, 3, 10, 3]] {
            assert_eq!(m.forward(&input(ids)).unwrap().rating, 0.75);
        }
    }

    #[test]
    fn attention_rows_are_distributions() {
        let m = tiny(vec![]);
        let probs = m.attention_probs(&input(&[2, 5, 6, 3, 7, 8, 3])).unwrap();
        let n = 7;
        for layer in probs {
            for row in layer.chunks(n) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn batch_order_permutes_outputs() {
        let m = tiny(HeadSpec::from_tasks(&TaskSet::standard()));
        let xs = vec![input(&[2, 5, 3, 6, 3]), input(&[2, 7, 8, 3, 9, 10, 3]), input(&[2, 11, 3, 3])];
        let a = m.forward_batch(&xs).unwrap();
        let rev: Vec<_> = xs.iter().rev().cloned().collect();
        let mut b = m.forward_batch(&rev).unwrap();
        b.reverse();
        assert_eq!(a, b);
        assert_eq!(a[0].cls.len(), 8);
        assert_eq!(a[0].heads[2].len(), 3);
        assert_eq!(a[0].heads[8].len(), 2);
    }

    #[test]
    fn layer_norm_is_standardized_before_affine() {
        let m = tiny(vec![]);
        let x: Vec<f64> = (0..24).map(|i| ((i * 7) % 11) as f64 * 0.37 - 1.0).collect();
        let (_, c) = layer_norm(&x, 3, 8, &m.data, m.layout.emb_g, m.layout.emb_b);
        for row in c.xhat.chunks(8) {
            let mean = row.iter().sum::<f64>() / 8.0;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-5 && (var - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn supervised_loss_cases() {
        assert_eq!(supervised_loss(&[0.3, 0.4], &[0.3, 0.4]).unwrap(), 0.0);
        assert_eq!(supervised_loss(&[0.0], &[1.0]).unwrap(), 1.0);
        assert!(supervised_loss(&[], &[]).is_err());
    }

    #[test]
    fn pretrain_loss_cases() {
        let one = TaskSet::new(vec![crate::signals::TaskSpec {
            name: "rouge".into(),
            kind: TaskKind::Regression { dim: 3 },
            weight: 2.0,
        }])
        .unwrap();
        let l = pretrain_loss(&[vec![vec![1.0, 1.0, 1.0]]], &[vec![vec![0.0, 0.0, 0.0]]], &one).unwrap();
        assert_eq!(l, 2.0);
        assert!((cross_entropy(&[0.4, 0.4, 0.4], &[0.0, 1.0, 0.0]) - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn overlong_input_is_rejected() {
        let m = tiny(vec![]);
        let ids: Vec<u32> = (0..17).map(|i| 5 + i % 6).collect();
        assert!(matches!(m.forward(&input(&ids)), Err(EncoderError::TooLong { len: 17, max: 16 })));
        let vocab = crate::textcore::Vocabulary::from_tokens(["a"]);
        let seq = crate::textcore::tokenize("a a a a a a a", &vocab);
        assert!(matches!(pack(&seq, &seq, 16), Err(EncoderError::TooLong { len: 17, .. })));
        let ok = pack(&seq, &crate::textcore::TokenSeq::empty(), 16).unwrap();
        assert_eq!(ok.segments(), &[0, 0, 0, 0, 0, 0, 0, 0, 0, 1]);
    }

    #[test]
    fn zero_weight_heads_get_zero_gradient_and_scaling_is_linear() {
        let tasks = TaskSet::standard();
        let m = tiny(HeadSpec::from_tasks(&tasks));
        let sv = SignalVector {
            bleu: 0.5,
            rouge: [0.1, 0.2, 0.3],
            bertscore: [0.4, 0.5, 0.6],
            likelihood: [-1.0, -2.0, -3.0, -4.0],
            entail: [0.2, 0.3, 0.5],
            backtran_flag: [0.0, 1.0],
        };
        let ex = TrainExample {
            input: input(&[2, 5, 6, 3, 7, 3]),
            target: Target::Tasks(m.head_targets(&sv).unwrap()),
        };
        let mut w = vec![1.0; 9];
        w[4] = 0.0;
        let (_, g) = m.loss_and_gradient(std::slice::from_ref(&ex), &LossSelector::Pretrain(w.clone()), None).unwrap();
        for name in ["head.en_fr_zt_given_z.w", "head.en_fr_zt_given_z.b", "rating.w", "rating.b"] {
            assert!(g[m.tensor_range(name).unwrap()].iter().all(|&x| x == 0.0), "{name}");
        }
        let w2: Vec<f64> = w.iter().map(|x| 2.0 * x).collect();
        let (l1, g1) = m.loss_and_gradient(std::slice::from_ref(&ex), &LossSelector::Pretrain(w), None).unwrap();
        let (l2, g2) = m.loss_and_gradient(std::slice::from_ref(&ex), &LossSelector::Pretrain(w2), None).unwrap();
        assert_eq!(l2, 2.0 * l1);
        for (a, b) in g1.iter().zip(&g2) {
            assert!((b - 2.0 * a).abs() <= 1e-12 * a.abs().max(1e-300));
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let m = tiny(HeadSpec::from_tasks(&TaskSet::standard()));
        let meta = BTreeMap::from([("config_hash".to_string(), "abc".to_string())]);
        let bytes = m.to_bytes(&meta);
        let (back, meta2) = ModelParams::from_bytes(&bytes).unwrap();
        assert_eq!(meta2, meta);
        assert!(back.data.iter().zip(&m.data).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_eq!(back.to_bytes(&meta), bytes);
        let mut wrong = bytes.clone();
        wrong[8] = 9;
        assert!(matches!(ModelParams::from_bytes(&wrong), Err(EncoderError::CheckpointVersion { found: 9, .. })));
        assert!(ModelParams::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn inference_is_deterministic_and_dropout_only_in_training() {
        let mut m = tiny(vec![]);
        m.config.dropout = 0.3;
        let x = input(&[2, 5, 6, 3, 7, 3]);
        assert_eq!(m.forward(&x).unwrap(), m.forward(&x).unwrap());
        let ex = TrainExample {
            input: x,
            target: Target::Rating(0.5),
        };
        let batch = std::slice::from_ref(&ex);
        let (a, _) = m.loss_and_gradient(batch, &LossSelector::Supervised, Some(1)).unwrap();
        let (b, _) = m.loss_and_gradient(batch, &LossSelector::Supervised, Some(1)).unwrap();
        let (c, _) = m.loss_and_gradient(batch, &LossSelector::Supervised, None).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(c, m.loss(batch, &LossSelector::Supervised).unwrap());
    }
}
