// SPDX-License-Identifier: MIT OR Apache-2.0

//! Minimal GPT-2 style decoder-only transformer.
//!
//! Pre-norm blocks (LayerNorm -> causal multi-head attention -> residual,
//! LayerNorm -> GELU MLP of width `4 * d_model` -> residual), learned
//! absolute positions, final LayerNorm and an untied, bias-free output
//! projection.
//!
//! Every sequence is processed one position at a time against a per-call
//! key/value cache, so a full forward pass and incremental decoding perform
//! the exact same floating point operations. Activations are f32 with
//! left-to-right sums; softmax denominators and attention renormalization
//! accumulate in f64.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::steering::{steer_row_with, RowOutcome, SteeringConfig};
use crate::tokenizer::{TokenId, Tokenizer, BYTE_VOCAB};

/// File magic for the weight format.
pub const WEIGHTS_MAGIC: &[u8; 8] = b"STRKIT01";

const LN_EPS: f32 = 1e-5;
const INIT_STD: f32 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub vocab_size: usize,
    #[serde(default = "default_max_seq_len")]
    pub max_seq_len: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_max_seq_len() -> usize {
    512
}

impl ModelConfig {
    pub fn new(n_layers: usize, n_heads: usize, d_model: usize, vocab_size: usize) -> Self {
        Self {
            n_layers,
            n_heads,
            d_model,
            vocab_size,
            max_seq_len: default_max_seq_len(),
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_max_seq_len(mut self, max_seq_len: usize) -> Self {
        self.max_seq_len = max_seq_len;
        self
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be at least 1")));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::InvalidConfig(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size < BYTE_VOCAB {
            return Err(Error::InvalidConfig(format!(
                "vocab_size {} is smaller than the {BYTE_VOCAB} byte tokens",
                self.vocab_size
            )));
        }
        Ok(())
    }
}

/// How a tensor is initialized by [`Model::init_random`].
#[derive(Clone, Copy)]
enum Init {
    Normal,
    Zeros,
    Ones,
}

struct TensorSpec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

fn tensor_specs(c: &ModelConfig) -> Vec<TensorSpec> {
    let d = c.d_model;
    let spec = |name: String, shape: Vec<usize>, init| TensorSpec { name, shape, init };
    let mut out = vec![
        spec("wte".into(), vec![c.vocab_size, d], Init::Normal),
        spec("wpe".into(), vec![c.max_seq_len, d], Init::Normal),
    ];
    for i in 0..c.n_layers {
        let p = |s: &str| format!("h.{i}.{s}");
        out.extend([
            spec(p("ln_1.weight"), vec![d], Init::Ones),
            spec(p("ln_1.bias"), vec![d], Init::Zeros),
            spec(p("attn.c_attn.weight"), vec![3 * d, d], Init::Normal),
            spec(p("attn.c_attn.bias"), vec![3 * d], Init::Zeros),
            spec(p("attn.c_proj.weight"), vec![d, d], Init::Normal),
            spec(p("attn.c_proj.bias"), vec![d], Init::Zeros),
            spec(p("ln_2.weight"), vec![d], Init::Ones),
            spec(p("ln_2.bias"), vec![d], Init::Zeros),
            spec(p("mlp.c_fc.weight"), vec![4 * d, d], Init::Normal),
            spec(p("mlp.c_fc.bias"), vec![4 * d], Init::Zeros),
            spec(p("mlp.c_proj.weight"), vec![d, 4 * d], Init::Normal),
            spec(p("mlp.c_proj.bias"), vec![d], Init::Zeros),
        ]);
    }
    out.extend([
        spec("ln_f.weight".into(), vec![d], Init::Ones),
        spec("ln_f.bias".into(), vec![d], Init::Zeros),
        spec("lm_head.weight".into(), vec![c.vocab_size, d], Init::Normal),
    ]);
    out
}

/// Decoder-only transformer weights plus the tokenizer they were built for.
///
/// Matrices are stored `[out, in]`, row-major. Tensors are kept in a fixed
/// canonical order (see [`Model::tensor_names`]).
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    tokenizer: Tokenizer,
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    data: Vec<Vec<f32>>,
}

// offsets into `Model::data`
const GLOBAL_PRE: usize = 2;
const PER_LAYER: usize = 12;

struct LayerView<'a> {
    ln1_g: &'a [f32],
    ln1_b: &'a [f32],
    qkv_w: &'a [f32],
    qkv_b: &'a [f32],
    proj_w: &'a [f32],
    proj_b: &'a [f32],
    ln2_g: &'a [f32],
    ln2_b: &'a [f32],
    fc_w: &'a [f32],
    fc_b: &'a [f32],
    fc_proj_w: &'a [f32],
    fc_proj_b: &'a [f32],
}

impl Model {
    /// Deterministic Gaussian(0, 0.02) initialization from `config.seed`.
    ///
    /// Uses a ChaCha8 stream; tensors draw in canonical order, row-major.
    /// Biases and LayerNorm shifts start at zero, LayerNorm gains at one.
    pub fn init_random(config: ModelConfig) -> Result<Self> {
        Self::init_random_with_tokenizer(config, Tokenizer::bytes_only())
    }

    pub fn init_random_with_tokenizer(config: ModelConfig, tokenizer: Tokenizer) -> Result<Self> {
        config.validate()?;
        check_vocab(&config, &tokenizer)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let normal = Normal::new(0.0f32, INIT_STD).expect("valid std");
        let specs = tensor_specs(&config);
        let mut names = Vec::with_capacity(specs.len());
        let mut shapes = Vec::with_capacity(specs.len());
        let mut data = Vec::with_capacity(specs.len());
        for spec in specs {
            let n: usize = spec.shape.iter().product();
            let values = match spec.init {
                Init::Normal => (0..n).map(|_| normal.sample(&mut rng)).collect(),
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
            };
            names.push(spec.name);
            shapes.push(spec.shape);
            data.push(values);
        }
        Ok(Self {
            config,
            tokenizer,
            names,
            shapes,
            data,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    pub fn tensor_names(&self) -> &[String] {
        &self.names
    }

    pub fn tensor(&self, name: &str) -> Option<&[f32]> {
        let i = self.names.iter().position(|n| n == name)?;
        Some(&self.data[i])
    }

    /// Mutable access to one tensor. Callers must keep values finite.
    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [f32]> {
        let i = self.names.iter().position(|n| n == name)?;
        Some(&mut self.data[i])
    }

    fn layer(&self, i: usize) -> LayerView<'_> {
        let b = GLOBAL_PRE + i * PER_LAYER;
        let t = |k: usize| self.data[b + k].as_slice();
        LayerView {
            ln1_g: t(0),
            ln1_b: t(1),
            qkv_w: t(2),
            qkv_b: t(3),
            proj_w: t(4),
            proj_b: t(5),
            ln2_g: t(6),
            ln2_b: t(7),
            fc_w: t(8),
            fc_b: t(9),
            fc_proj_w: t(10),
            fc_proj_b: t(11),
        }
    }

    fn tail(&self) -> (&[f32], &[f32], &[f32]) {
        let b = GLOBAL_PRE + self.config.n_layers * PER_LAYER;
        (&self.data[b], &self.data[b + 1], &self.data[b + 2])
    }

    /// Serializes to the weight file format: magic, u64 little-endian header
    /// length, JSON header, then raw little-endian f32 tensor data.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0usize;
        let tensors = self
            .names
            .iter()
            .zip(&self.shapes)
            .map(|(name, shape)| {
                let rec = TensorRecord {
                    name: name.clone(),
                    shape: shape.clone(),
                    offset,
                };
                offset += shape.iter().product::<usize>() * 4;
                rec
            })
            .collect();
        let header = WeightHeader {
            config: self.config,
            merges: self
                .tokenizer
                .merges()
                .iter()
                .map(|&(a, b)| [a, b])
                .collect(),
            tensors,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + json.len() + offset);
        out.extend_from_slice(WEIGHTS_MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in &self.data {
            for v in t {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fmt = |m: String| Error::Format(m);
        if bytes.len() < 16 || &bytes[..8] != WEIGHTS_MAGIC {
            return Err(fmt("missing STRKIT01 magic".into()));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let data_start = 16usize
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| fmt("truncated header".into()))?;
        let header: WeightHeader = serde_json::from_slice(&bytes[16..data_start])
            .map_err(|e| fmt(format!("bad header: {e}")))?;
        let config = header.config;
        config.validate()?;
        let tokenizer =
            Tokenizer::with_merges(header.merges.iter().map(|m| (m[0], m[1])).collect())?;
        check_vocab(&config, &tokenizer)?;

        let payload = &bytes[data_start..];
        let mut records: HashMap<&str, &TensorRecord> = HashMap::new();
        for r in &header.tensors {
            if records.insert(r.name.as_str(), r).is_some() {
                return Err(fmt(format!("tensor {} listed twice", r.name)));
            }
        }
        let specs = tensor_specs(&config);
        if records.len() != specs.len() {
            let known: Vec<&str> = specs.iter().map(|s| s.name.as_str()).collect();
            if let Some(extra) = header
                .tensors
                .iter()
                .find(|r| !known.contains(&r.name.as_str()))
            {
                return Err(fmt(format!("unexpected tensor {}", extra.name)));
            }
        }

        let mut names = Vec::with_capacity(specs.len());
        let mut shapes = Vec::with_capacity(specs.len());
        let mut data = Vec::with_capacity(specs.len());
        for spec in specs {
            let rec = records
                .get(spec.name.as_str())
                .ok_or_else(|| fmt(format!("missing tensor {}", spec.name)))?;
            if rec.shape != spec.shape {
                return Err(Error::ShapeMismatch {
                    name: spec.name,
                    expected: spec.shape,
                    found: rec.shape.clone(),
                });
            }
            let n: usize = spec.shape.iter().product();
            let end = rec
                .offset
                .checked_add(n * 4)
                .filter(|&e| e <= payload.len())
                .ok_or_else(|| fmt(format!("truncated data for tensor {}", spec.name)))?;
            let values: Vec<f32> = payload[rec.offset..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            if values.iter().any(|v| !v.is_finite()) {
                return Err(fmt(format!("non-finite value in tensor {}", spec.name)));
            }
            names.push(spec.name);
            shapes.push(spec.shape);
            data.push(values);
        }
        Ok(Self {
            config,
            tokenizer,
            names,
            shapes,
            data,
        })
    }

    pub fn save_weights(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load_weights(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn check_vocab(config: &ModelConfig, tokenizer: &Tokenizer) -> Result<()> {
    if config.vocab_size != tokenizer.vocab_size() {
        return Err(Error::InvalidConfig(format!(
            "vocab_size {} does not match tokenizer vocabulary {} (256 bytes + {} merges)",
            config.vocab_size,
            tokenizer.vocab_size(),
            tokenizer.merges().len()
        )));
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct WeightHeader {
    config: ModelConfig,
    #[serde(default)]
    merges: Vec<[TokenId; 2]>,
    tensors: Vec<TensorRecord>,
}

/// Post-softmax attention probabilities, `L x N x T x T`. Entries above the
/// diagonal are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMaps {
    n_layers: usize,
    n_heads: usize,
    seq_len: usize,
    data: Vec<f32>,
}

impl AttentionMaps {
    pub fn zeros(n_layers: usize, n_heads: usize, seq_len: usize) -> Self {
        Self {
            n_layers,
            n_heads,
            seq_len,
            data: vec![0.0; n_layers * n_heads * seq_len * seq_len],
        }
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn n_heads(&self) -> usize {
        self.n_heads
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    fn base(&self, layer: usize, head: usize, query: usize) -> usize {
        ((layer * self.n_heads + head) * self.seq_len + query) * self.seq_len
    }

    /// Attention of `query` over all `T` key positions.
    pub fn row(&self, layer: usize, head: usize, query: usize) -> &[f32] {
        let b = self.base(layer, head, query);
        &self.data[b..b + self.seq_len]
    }

    pub fn row_mut(&mut self, layer: usize, head: usize, query: usize) -> &mut [f32] {
        let b = self.base(layer, head, query);
        let t = self.seq_len;
        &mut self.data[b..b + t]
    }
}

/// Row-major `rows x cols` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Matrix {
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    /// `T x V` next-token logits.
    pub logits: Matrix,
    /// Post-steering attention, when captured.
    pub attentions: Option<AttentionMaps>,
    /// Attention before steering was applied, when captured with steering.
    pub unsteered_attentions: Option<AttentionMaps>,
    /// Rows left unscaled because steering would have zeroed them.
    pub degenerate_rows: usize,
}

/// Per-call decoding state: key/value cache and scratch buffers.
struct Session<'m> {
    model: &'m Model,
    steering: Option<&'m SteeringConfig>,
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
    pos: usize,
    capture: Option<Vec<Vec<f32>>>,
    capture_raw: Option<Vec<Vec<f32>>>,
    degenerate_rows: usize,
}

impl<'m> Session<'m> {
    fn new(model: &'m Model, steering: Option<&'m SteeringConfig>, capture: bool) -> Result<Self> {
        let c = &model.config;
        if let Some(s) = steering {
            s.validate(c.n_layers, c.n_heads, c.max_seq_len)?;
        }
        let heads = c.n_layers * c.n_heads;
        Ok(Self {
            model,
            steering,
            keys: vec![Vec::new(); c.n_layers],
            values: vec![Vec::new(); c.n_layers],
            pos: 0,
            capture: capture.then(|| vec![Vec::new(); heads]),
            capture_raw: (capture && steering.is_some()).then(|| vec![Vec::new(); heads]),
            degenerate_rows: 0,
        })
    }

    /// Feeds one token and returns the next-token logits at its position.
    fn step(&mut self, token: TokenId) -> Result<Vec<f32>> {
        let model = self.model;
        let c = &model.config;
        if self.pos >= c.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: self.pos + 1,
                max: c.max_seq_len,
            });
        }
        if token as usize >= c.vocab_size {
            return Err(Error::UnknownTokenId(token));
        }
        let d = c.d_model;
        let hd = c.head_dim();
        let pos = self.pos;
        let scale = 1.0 / (hd as f32).sqrt();

        let wte = &model.data[0][token as usize * d..(token as usize + 1) * d];
        let wpe = &model.data[1][pos * d..(pos + 1) * d];
        let mut x: Vec<f32> = wte.iter().zip(wpe).map(|(a, b)| a + b).collect();

        let mut h = vec![0.0f32; d];
        let mut qkv = vec![0.0f32; 3 * d];
        let mut attn_out = vec![0.0f32; d];
        let mut proj = vec![0.0f32; d];
        let mut fc = vec![0.0f32; 4 * d];
        let mut row = Vec::with_capacity(pos + 1);

        for layer in 0..c.n_layers {
            let w = model.layer(layer);
            layer_norm(&x, w.ln1_g, w.ln1_b, &mut h);
            matvec(w.qkv_w, w.qkv_b, &h, &mut qkv);
            let (q, kv) = qkv.split_at(d);
            let (k, v) = kv.split_at(d);
            self.keys[layer].extend_from_slice(k);
            self.values[layer].extend_from_slice(v);
            let keys = &self.keys[layer];
            let values = &self.values[layer];

            for head in 0..c.n_heads {
                let qh = &q[head * hd..(head + 1) * hd];
                row.clear();
                for j in 0..=pos {
                    let kj = &keys[j * d + head * hd..j * d + (head + 1) * hd];
                    row.push(dot(qh, kj) * scale);
                }
                softmax_in_place(&mut row);

                let slot = layer * c.n_heads + head;
                if let Some(raw) = self.capture_raw.as_mut() {
                    raw[slot].extend_from_slice(&row);
                }
                if let Some(s) = self.steering.filter(|s| s.applies_to(layer, head)) {
                    let seg = s.segment;
                    if steer_row_with(&mut row, |j| seg.contains(j), s.alpha)
                        == RowOutcome::Degenerate
                    {
                        self.degenerate_rows += 1;
                    }
                }
                if let Some(cap) = self.capture.as_mut() {
                    cap[slot].extend_from_slice(&row);
                }

                let out = &mut attn_out[head * hd..(head + 1) * hd];
                out.fill(0.0);
                for (j, &p) in row.iter().enumerate() {
                    let vj = &values[j * d + head * hd..j * d + (head + 1) * hd];
                    for (o, &vv) in out.iter_mut().zip(vj) {
                        *o += p * vv;
                    }
                }
            }
            matvec(w.proj_w, w.proj_b, &attn_out, &mut proj);
            for (xi, pi) in x.iter_mut().zip(&proj) {
                *xi += pi;
            }

            layer_norm(&x, w.ln2_g, w.ln2_b, &mut h);
            matvec(w.fc_w, w.fc_b, &h, &mut fc);
            fc.iter_mut().for_each(|v| *v = gelu(*v));
            matvec(w.fc_proj_w, w.fc_proj_b, &fc, &mut proj);
            for (xi, pi) in x.iter_mut().zip(&proj) {
                *xi += pi;
            }
        }

        let (lnf_g, lnf_b, lm_head) = model.tail();
        layer_norm(&x, lnf_g, lnf_b, &mut h);
        let mut logits = vec![0.0f32; c.vocab_size];
        for (t, out) in logits.iter_mut().enumerate() {
            *out = dot(&lm_head[t * d..(t + 1) * d], &h);
        }
        self.pos += 1;
        Ok(logits)
    }

    fn attention_maps(
        rows: Option<Vec<Vec<f32>>>,
        c: &ModelConfig,
        t: usize,
    ) -> Option<AttentionMaps> {
        let rows = rows?;
        let mut maps = AttentionMaps::zeros(c.n_layers, c.n_heads, t);
        for layer in 0..c.n_layers {
            for head in 0..c.n_heads {
                let flat = &rows[layer * c.n_heads + head];
                let mut at = 0;
                for q in 0..t {
                    maps.row_mut(layer, head, q)[..=q].copy_from_slice(&flat[at..at + q + 1]);
                    at += q + 1;
                }
            }
        }
        Some(maps)
    }
}

fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut s = 0.0f32;
    for (x, y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

/// `out = W x + b` for `W` stored `[out, in]`.
fn matvec(w: &[f32], b: &[f32], x: &[f32], out: &mut [f32]) {
    let n_in = x.len();
    for (i, o) in out.iter_mut().enumerate() {
        *o = dot(&w[i * n_in..(i + 1) * n_in], x) + b[i];
    }
}

fn layer_norm(x: &[f32], g: &[f32], b: &[f32], out: &mut [f32]) {
    let n = x.len() as f32;
    let mean = x.iter().sum::<f32>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n;
    let inv = 1.0 / (var + LN_EPS).sqrt();
    for i in 0..x.len() {
        out[i] = (x[i] - mean) * inv * g[i] + b[i];
    }
}

fn gelu(x: f32) -> f32 {
    const C: f32 = 0.797_884_6; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f64;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v as f64;
    }
    for v in row.iter_mut() {
        *v = (*v as f64 / sum) as f32;
    }
}

fn check_len(model: &Model, len: usize) -> Result<()> {
    if len == 0 {
        return Err(Error::EmptyInput);
    }
    if len > model.config.max_seq_len {
        return Err(Error::SequenceTooLong {
            len,
            max: model.config.max_seq_len,
        });
    }
    Ok(())
}

/// Full causal forward pass.
///
/// With `steering`, every listed head steers every query row towards
/// `steering.segment` after its softmax.
pub fn forward(
    model: &Model,
    tokens: &[TokenId],
    steering: Option<&SteeringConfig>,
    capture_attn: bool,
) -> Result<ForwardOutput> {
    check_len(model, tokens.len())?;
    let c = &model.config;
    if let Some(s) = steering {
        s.validate(c.n_layers, c.n_heads, tokens.len())?;
    }
    let mut session = Session::new(model, steering, capture_attn)?;
    let mut data = Vec::with_capacity(tokens.len() * c.vocab_size);
    for &t in tokens {
        data.extend(session.step(t)?);
    }
    let t = tokens.len();
    Ok(ForwardOutput {
        logits: Matrix {
            rows: t,
            cols: c.vocab_size,
            data,
        },
        attentions: Session::attention_maps(session.capture.take(), c, t),
        unsteered_attentions: Session::attention_maps(session.capture_raw.take(), c, t),
        degenerate_rows: session.degenerate_rows,
    })
}

/// Index of the largest logit; ties go to the lowest id.
pub fn argmax(logits: &[f32]) -> TokenId {
    let mut best = 0usize;
    for (i, &v) in logits.iter().enumerate().skip(1) {
        if v > logits[best] {
            best = i;
        }
    }
    best as TokenId
}

/// `log softmax(logits)[target]`, computed in f64.
pub fn log_prob(logits: &[f32], target: TokenId) -> f64 {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let sum: f64 = logits.iter().map(|&l| (l as f64 - max).exp()).sum();
    logits[target as usize] as f64 - max - sum.ln()
}

/// Greedy decoding options.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub max_new: usize,
    pub stop_on_newline: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            max_new: 32,
            stop_on_newline: true,
        }
    }
}

/// Result of [`generate_scored`].
#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub new_tokens: Vec<TokenId>,
    /// Log-probability of prompt tokens `1..`, each given its true prefix.
    pub prompt_logprobs: Vec<f64>,
    pub degenerate_rows: usize,
}

/// Scores the prompt and greedily continues it in a single pass.
///
/// Generation stops after `max_new` tokens, when the total length reaches
/// `max_seq_len`, or (with `stop_on_newline`) at the first token whose
/// bytes contain `\n`; that token is not emitted.
pub fn generate_scored(
    model: &Model,
    prompt: &[TokenId],
    decode: DecodeConfig,
    steering: Option<&SteeringConfig>,
) -> Result<Generation> {
    check_len(model, prompt.len())?;
    let max_len = model.config.max_seq_len;
    let mut session = Session::new(model, steering, false)?;
    let mut prompt_logprobs = Vec::with_capacity(prompt.len().saturating_sub(1));
    let mut logits = Vec::new();
    for (i, &t) in prompt.iter().enumerate() {
        if i > 0 {
            prompt_logprobs.push(log_prob(&logits, t));
        }
        logits = session.step(t)?;
    }

    let mut new_tokens = Vec::new();
    while new_tokens.len() < decode.max_new && prompt.len() + new_tokens.len() < max_len {
        let next = argmax(&logits);
        if decode.stop_on_newline && model.tokenizer.token_bytes(next)?.contains(&b'\n') {
            break;
        }
        new_tokens.push(next);
        if new_tokens.len() < decode.max_new && prompt.len() + new_tokens.len() < max_len {
            logits = session.step(next)?;
        }
    }
    Ok(Generation {
        new_tokens,
        prompt_logprobs,
        degenerate_rows: session.degenerate_rows,
    })
}

/// Greedy (argmax) continuation of `prompt`.
pub fn generate_greedy(
    model: &Model,
    prompt: &[TokenId],
    max_new: usize,
    steering: Option<&SteeringConfig>,
    stop_on_newline: bool,
) -> Result<Vec<TokenId>> {
    let decode = DecodeConfig {
        max_new,
        stop_on_newline,
    };
    Ok(generate_scored(model, prompt, decode, steering)?.new_tokens)
}

/// Natural-log probability of each token after the first, conditioned on
/// its true prefix. No BOS token is added, so position 0 is never scored.
pub fn sequence_logprobs(model: &Model, tokens: &[TokenId]) -> Result<Vec<f64>> {
    sequence_logprobs_steered(model, tokens, None)
}

pub fn sequence_logprobs_steered(
    model: &Model,
    tokens: &[TokenId],
    steering: Option<&SteeringConfig>,
) -> Result<Vec<f64>> {
    if tokens.len() < 2 {
        return Err(Error::TooShort(tokens.len()));
    }
    let out = forward(model, tokens, steering, false)?;
    Ok((1..tokens.len())
        .map(|i| log_prob(out.logits.row(i - 1), tokens[i]))
        .collect())
}
