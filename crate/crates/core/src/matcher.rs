//! Transformer pair-matching network.
//!
//! Position, joint-type and temporal-gap tokens are embedded and summed, run
//! through a stack of post-LN self-attention blocks, pooled from the first
//! token, and classified into {no match, match}. Invisible keypoints are
//! removed from attention with an additive mask.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::NUM_JOINTS;
use crate::tensor::{DenseTensor, Tape, TensorError, Var};
use crate::tokenizer::{PositionMode, TokenGrid, TokenizedPair, Tokenizer, SEQ_LEN};

/// Added to attention scores of masked keys before the softmax.
pub const MASK_VALUE: f64 = -1e4;
pub const LAYER_NORM_EPS: f64 = 1e-12;
/// Classifier output index of the "same person" class.
pub const MATCH_CLASS: usize = 1;

const CHECKPOINT_MAGIC: &[u8; 8] = b"PTMATCH\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum MatcherError {
    #[error("invalid matcher config: {0}")]
    Config(String),
    #[error("pair {pair}: {field} token {value} at index {index} outside 1..={max}")]
    Vocab {
        pair: usize,
        field: &'static str,
        index: usize,
        value: usize,
        max: usize,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: String, msg: String },
    #[error("checkpoint {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, MatcherError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MatcherConfig {
    pub num_layers: usize,
    pub hidden: usize,
    pub intermediate: usize,
    pub heads: usize,
    pub dropout_p: f64,
    /// Largest temporal gap, i.e. the segment vocabulary size.
    pub max_segment: usize,
    pub grid: TokenGrid,
    pub position_mode: PositionMode,
    /// Ablation switches: when false the corresponding embedding is left out
    /// of the input sum.
    pub use_type_embeddings: bool,
    pub use_segment_embeddings: bool,
}

impl Default for MatcherConfig {
    fn default() -> Self {
        Self {
            num_layers: 4,
            hidden: 128,
            intermediate: 128,
            heads: 4,
            dropout_p: 0.1,
            max_segment: 4,
            grid: TokenGrid::default(),
            position_mode: PositionMode::Absolute,
            use_type_embeddings: true,
            use_segment_embeddings: true,
        }
    }
}

impl MatcherConfig {
    pub fn position_vocab(&self) -> usize {
        self.grid.vocab()
    }

    pub fn type_vocab(&self) -> usize {
        NUM_JOINTS
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn tokenizer(&self) -> Tokenizer {
        Tokenizer {
            grid: self.grid,
            mode: self.position_mode,
            max_gap: self.max_segment,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_layers", self.num_layers),
            ("hidden", self.hidden),
            ("intermediate", self.intermediate),
            ("heads", self.heads),
            ("max_segment", self.max_segment),
            ("grid.width", self.grid.width as usize),
            ("grid.height", self.grid.height as usize),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(MatcherError::Config(format!("{name} must be positive")));
        }
        if self.hidden % self.heads != 0 {
            return Err(MatcherError::Config(format!(
                "hidden size {} not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(MatcherError::Config(format!("dropout_p {} outside [0, 1)", self.dropout_p)));
        }
        if self.position_vocab() > u16::MAX as usize || self.max_segment > u8::MAX as usize {
            return Err(MatcherError::Config("vocabulary too large for token width".into()));
        }
        Ok(())
    }

    fn tensor_specs(&self) -> Vec<(String, Vec<usize>, Init)> {
        let (h, i) = (self.hidden, self.intermediate);
        let mut specs = vec![
            ("embeddings.position".to_string(), vec![self.position_vocab(), h], Init::GridSinusoid),
            ("embeddings.type".to_string(), vec![self.type_vocab(), h], Init::Normal),
            ("embeddings.segment".to_string(), vec![self.max_segment, h], Init::Normal),
            ("embeddings.norm.gain".to_string(), vec![h], Init::Ones),
            ("embeddings.norm.bias".to_string(), vec![h], Init::Zeros),
        ];
        for l in 0..self.num_layers {
            let p = |s: &str| format!("layers.{l}.{s}");
            specs.extend([
                (p("attention.query.weight"), vec![h, h], Init::Normal),
                (p("attention.query.bias"), vec![h], Init::Zeros),
                (p("attention.key.weight"), vec![h, h], Init::Normal),
                (p("attention.key.bias"), vec![h], Init::Zeros),
                (p("attention.value.weight"), vec![h, h], Init::Normal),
                (p("attention.value.bias"), vec![h], Init::Zeros),
                (p("attention.output.weight"), vec![h, h], Init::Normal),
                (p("attention.output.bias"), vec![h], Init::Zeros),
                (p("attention.norm.gain"), vec![h], Init::Ones),
                (p("attention.norm.bias"), vec![h], Init::Zeros),
                (p("feed_forward.input.weight"), vec![h, i], Init::Normal),
                (p("feed_forward.input.bias"), vec![i], Init::Zeros),
                (p("feed_forward.output.weight"), vec![i, h], Init::Normal),
                (p("feed_forward.output.bias"), vec![h], Init::Zeros),
                (p("feed_forward.norm.gain"), vec![h], Init::Ones),
                (p("feed_forward.norm.bias"), vec![h], Init::Zeros),
            ]);
        }
        specs.extend([
            ("pooler.weight".to_string(), vec![h, h], Init::Normal),
            ("pooler.bias".to_string(), vec![h], Init::Zeros),
            ("classifier.weight".to_string(), vec![h, 2], Init::Normal),
            ("classifier.bias".to_string(), vec![2], Init::Zeros),
        ]);
        specs
    }
}

#[derive(Debug, Clone, Copy)]
enum Init {
    Normal,
    /// Sine/cosine features of the cell's column (first half of the width)
    /// and row (second half), at geometrically spaced wavelengths of 2 to 64
    /// cells, scaled to the same spread as `Normal`.
    GridSinusoid,
    Zeros,
    Ones,
}

const EMB_POSITION: usize = 0;
const EMB_TYPE: usize = 1;
const EMB_SEGMENT: usize = 2;
const EMB_LN_G: usize = 3;
const EMB_LN_B: usize = 4;
const LAYER_BASE: usize = 5;
const PER_LAYER: usize = 16;

/// Offsets of tensors within one encoder layer.
mod slot {
    pub const Q_W: usize = 0;
    pub const Q_B: usize = 1;
    pub const K_W: usize = 2;
    pub const K_B: usize = 3;
    pub const V_W: usize = 4;
    pub const V_B: usize = 5;
    pub const O_W: usize = 6;
    pub const O_B: usize = 7;
    pub const ATTN_LN_G: usize = 8;
    pub const ATTN_LN_B: usize = 9;
    pub const FF_IN_W: usize = 10;
    pub const FF_IN_B: usize = 11;
    pub const FF_OUT_W: usize = 12;
    pub const FF_OUT_B: usize = 13;
    pub const FF_LN_G: usize = 14;
    pub const FF_LN_B: usize = 15;
}

/// Every learned tensor of the matcher, in a fixed declared order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub names: Vec<String>,
    pub tensors: Vec<DenseTensor>,
}

impl ModelParams {
    pub fn get(&self, name: &str) -> Option<&DenseTensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    fn pooler_index(num_layers: usize) -> usize {
        LAYER_BASE + num_layers * PER_LAYER
    }
}

/// Parameter totals broken down by component.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ParamCount {
    pub embeddings: usize,
    pub encoder: usize,
    pub pooler: usize,
    pub classifier: usize,
    pub total: usize,
}

impl ParamCount {
    pub fn without_embeddings(&self) -> usize {
        self.total - self.embeddings
    }
}

pub fn parameter_count(config: &MatcherConfig) -> ParamCount {
    let mut count = ParamCount {
        embeddings: 0,
        encoder: 0,
        pooler: 0,
        classifier: 0,
        total: 0,
    };
    for (name, shape, _) in config.tensor_specs() {
        let n: usize = shape.iter().product();
        let bucket = if name.starts_with("embeddings.") {
            &mut count.embeddings
        } else if name.starts_with("layers.") {
            &mut count.encoder
        } else if name.starts_with("pooler.") {
            &mut count.pooler
        } else {
            &mut count.classifier
        };
        *bucket += n;
        count.total += n;
    }
    count
}

/// Weights drawn from N(0, 0.02); biases zero; layer-norm gains one. The
/// position table starts from smooth features of the grid coordinates.
pub fn init_params(config: &MatcherConfig, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 0.02).expect("valid std");
    let mut names = Vec::new();
    let mut tensors = Vec::new();
    for (name, shape, init) in config.tensor_specs() {
        let mut t = match init {
            Init::Zeros => DenseTensor::zeros(&shape),
            Init::Ones => DenseTensor::filled(&shape, 1.0),
            Init::Normal => {
                let n = shape.iter().product();
                DenseTensor::new(shape, (0..n).map(|_| normal.sample(&mut rng)).collect())?
            }
            Init::GridSinusoid => grid_sinusoid(config.grid, shape[1])?,
        };
        t.requires_grad = true;
        names.push(name);
        tensors.push(t);
    }
    Ok(ModelParams { names, tensors })
}

fn grid_sinusoid(grid: TokenGrid, width: usize) -> Result<DenseTensor> {
    let half = width / 2;
    let per_axis = |len: usize| len.div_ceil(2).max(1);
    let mut data = Vec::with_capacity(grid.vocab() * width);
    for cell in 0..grid.vocab() {
        let coords = [(cell % grid.width as usize) as f64, (cell / grid.width as usize) as f64];
        for d in 0..width {
            let (axis, j, len) = if d < half { (0, d, half) } else { (1, d - half, width - half) };
            let n = per_axis(len);
            let k = (j / 2) as f64;
            let wavelength = 2.0 * 32f64.powf(if n > 1 { k / (n - 1) as f64 } else { 0.0 });
            let angle = 2.0 * std::f64::consts::PI * coords[axis] / wavelength;
            let v = if j % 2 == 0 { angle.sin() } else { angle.cos() };
            data.push(0.02 * std::f64::consts::SQRT_2 * v);
        }
    }
    Ok(DenseTensor::new(vec![grid.vocab(), width], data)?)
}

/// Attention probabilities of one pair: `[layer][head][query][key]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMaps {
    pub layers: usize,
    pub heads: usize,
    pub data: Vec<f64>,
}

impl AttentionMaps {
    pub fn matrix(&self, layer: usize, head: usize) -> &[f64] {
        let size = SEQ_LEN * SEQ_LEN;
        let start = (layer * self.heads + head) * size;
        &self.data[start..start + size]
    }

    pub fn get(&self, layer: usize, head: usize, query: usize, key: usize) -> f64 {
        self.matrix(layer, head)[query * SEQ_LEN + key]
    }

    /// Attention received by each token: column sums over all queries,
    /// normalized to sum to one.
    pub fn keypoint_attention(&self, layer: usize, head: usize) -> [f64; SEQ_LEN] {
        let m = self.matrix(layer, head);
        let mut cols = [0.0; SEQ_LEN];
        for row in m.chunks(SEQ_LEN) {
            for (c, v) in cols.iter_mut().zip(row) {
                *c += v;
            }
        }
        let total: f64 = cols.iter().sum();
        if total > 0.0 {
            cols.iter_mut().for_each(|c| *c /= total);
        }
        cols
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `[no match, match]` logits per pair.
    pub logits: Vec<[f64; 2]>,
    pub attention: Vec<AttentionMaps>,
}

/// Output of [`forward_on_tape`]: graph handles for logits and per-layer
/// attention probabilities `[batch, heads, 30, 30]`.
pub struct GraphOutput {
    pub logits: Var,
    pub attention: Vec<Var>,
}

fn check_vocab(config: &MatcherConfig, pairs: &[TokenizedPair]) -> Result<()> {
    for (p, pair) in pairs.iter().enumerate() {
        for i in 0..SEQ_LEN {
            let checks = [
                ("position", pair.position[i] as usize, config.position_vocab()),
                ("type", pair.joint_type[i] as usize, config.type_vocab()),
                ("segment", pair.segment[i] as usize, config.max_segment),
            ];
            for (field, value, max) in checks {
                if value < 1 || value > max {
                    return Err(MatcherError::Vocab {
                        pair: p,
                        field,
                        index: i,
                        value,
                        max,
                    });
                }
            }
        }
    }
    Ok(())
}

fn linear(tape: &mut Tape<'_>, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    Ok(tape.add_broadcast(y, b)?)
}

/// Builds the forward graph on `tape`. `vars` are the parameter leaves in
/// declared order.
pub fn forward_on_tape(
    tape: &mut Tape<'_>,
    vars: &[Var],
    config: &MatcherConfig,
    pairs: &[TokenizedPair],
    training: bool,
) -> Result<GraphOutput> {
    check_vocab(config, pairs)?;
    let b = pairs.len();
    let l = SEQ_LEN;
    let (h, heads, dh) = (config.hidden, config.heads, config.head_dim());
    let p = config.dropout_p;

    let ids = |f: &dyn Fn(&TokenizedPair, usize) -> usize| -> Vec<usize> {
        pairs.iter().flat_map(|pair| (0..l).map(move |i| f(pair, i) - 1)).collect()
    };
    let pos_ids = ids(&|pair, i| pair.position[i] as usize);
    let mut x = tape.embedding_lookup(vars[EMB_POSITION], &pos_ids)?;
    if config.use_type_embeddings {
        let type_ids = ids(&|pair, i| pair.joint_type[i] as usize);
        let e = tape.embedding_lookup(vars[EMB_TYPE], &type_ids)?;
        x = tape.add(x, e)?;
    }
    if config.use_segment_embeddings {
        let seg_ids = ids(&|pair, i| pair.segment[i] as usize);
        let e = tape.embedding_lookup(vars[EMB_SEGMENT], &seg_ids)?;
        x = tape.add(x, e)?;
    }
    x = tape.layer_norm(x, vars[EMB_LN_G], vars[EMB_LN_B], LAYER_NORM_EPS)?;
    x = tape.dropout(x, p, training)?;

    let mask: Vec<f64> = pairs
        .iter()
        .flat_map(|pair| pair.attn_mask.iter().map(|&m| if m { 0.0 } else { MASK_VALUE }))
        .collect();
    let mask = tape.constant(&[b, 1, 1, l], mask)?;
    let inv_sqrt = 1.0 / (dh as f64).sqrt();

    let mut attention = Vec::with_capacity(config.num_layers);
    for layer in 0..config.num_layers {
        let w = |k: usize| vars[LAYER_BASE + layer * PER_LAYER + k];
        let heads_of = |tape: &mut Tape<'_>, wk: usize, bk: usize| -> Result<Var> {
            let y = linear(tape, x, w(wk), w(bk))?;
            let y = tape.reshape(y, &[b, l, heads, dh])?;
            Ok(tape.permute(y, &[0, 2, 1, 3])?)
        };
        let q = heads_of(tape, slot::Q_W, slot::Q_B)?;
        let k = heads_of(tape, slot::K_W, slot::K_B)?;
        let v = heads_of(tape, slot::V_W, slot::V_B)?;
        let kt = tape.transpose_last_two(k)?;
        let scores = tape.matmul(q, kt)?;
        let scores = tape.scale(scores, inv_sqrt);
        let scores = tape.add_broadcast(scores, mask)?;
        let probs = tape.softmax_last_dim(scores);
        attention.push(probs);
        let probs = tape.dropout(probs, p, training)?;
        let ctx = tape.matmul(probs, v)?;
        let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = tape.reshape(ctx, &[b * l, h])?;
        let out = linear(tape, ctx, w(slot::O_W), w(slot::O_B))?;
        let out = tape.dropout(out, p, training)?;
        let res = tape.add(x, out)?;
        x = tape.layer_norm(res, w(slot::ATTN_LN_G), w(slot::ATTN_LN_B), LAYER_NORM_EPS)?;

        let ff = linear(tape, x, w(slot::FF_IN_W), w(slot::FF_IN_B))?;
        let ff = tape.gelu(ff);
        let ff = linear(tape, ff, w(slot::FF_OUT_W), w(slot::FF_OUT_B))?;
        let ff = tape.dropout(ff, p, training)?;
        let res = tape.add(x, ff)?;
        x = tape.layer_norm(res, w(slot::FF_LN_G), w(slot::FF_LN_B), LAYER_NORM_EPS)?;
    }

    let pooler = ModelParams::pooler_index(config.num_layers);
    let seq = tape.reshape(x, &[b, l, h])?;
    let first = tape.select(seq, 1, 0)?;
    let pooled = linear(tape, first, vars[pooler], vars[pooler + 1])?;
    let pooled = tape.tanh(pooled);
    let pooled = tape.dropout(pooled, p, training)?;
    let logits = linear(tape, pooled, vars[pooler + 2], vars[pooler + 3])?;
    Ok(GraphOutput { logits, attention })
}

fn check_params(params: &ModelParams, config: &MatcherConfig) -> Result<()> {
    let specs = config.tensor_specs();
    if specs.len() != params.tensors.len() {
        return Err(MatcherError::Config(format!(
            "config expects {} tensors, params hold {}",
            specs.len(),
            params.tensors.len()
        )));
    }
    for ((name, shape, _), t) in specs.iter().zip(&params.tensors) {
        if *shape != t.shape {
            return Err(MatcherError::Config(format!(
                "{name}: config shape {shape:?}, param shape {:?}",
                t.shape
            )));
        }
    }
    Ok(())
}

/// Inference forward pass. `seed` only matters when `training` is true.
pub fn forward(
    params: &ModelParams,
    config: &MatcherConfig,
    pairs: &[TokenizedPair],
    training: bool,
    seed: u64,
) -> Result<ForwardOutput> {
    check_params(params, config)?;
    if pairs.is_empty() {
        return Ok(ForwardOutput {
            logits: Vec::new(),
            attention: Vec::new(),
        });
    }
    let mut tape = Tape::inference(seed);
    let vars: Vec<Var> = params.tensors.iter().map(|t| tape.leaf_ref(t)).collect();
    let out = forward_on_tape(&mut tape, &vars, config, pairs, training)?;
    let logits = tape.value(out.logits).chunks(2).map(|c| [c[0], c[1]]).collect();
    let per_pair = config.heads * SEQ_LEN * SEQ_LEN;
    let attention = (0..pairs.len())
        .map(|i| {
            let mut data = Vec::with_capacity(config.num_layers * per_pair);
            for &a in &out.attention {
                data.extend_from_slice(&tape.value(a)[i * per_pair..(i + 1) * per_pair]);
            }
            AttentionMaps {
                layers: config.num_layers,
                heads: config.heads,
                data,
            }
        })
        .collect();
    Ok(ForwardOutput { logits, attention })
}

/// Probability of the match class for a pair of logits.
pub fn match_probability(logits: [f64; 2]) -> f64 {
    let other = 1 - MATCH_CLASS;
    1.0 / (1.0 + (logits[other] - logits[MATCH_CLASS]).exp())
}

pub fn match_score(params: &ModelParams, config: &MatcherConfig, pair: &TokenizedPair) -> Result<f64> {
    let out = forward(params, config, std::slice::from_ref(pair), false, 0)?;
    Ok(match_probability(out.logits[0]))
}

pub fn extract_attention(params: &ModelParams, config: &MatcherConfig, pair: &TokenizedPair) -> Result<AttentionMaps> {
    let mut out = forward(params, config, std::slice::from_ref(pair), false, 0)?;
    Ok(out.attention.remove(0))
}

/// A trained network bundled with its configuration.
#[derive(Debug, Clone)]
pub struct Matcher {
    pub params: ModelParams,
    pub config: MatcherConfig,
}

impl Matcher {
    /// Pairs per forward pass when scoring many pairs.
    pub const CHUNK: usize = 256;

    pub fn new(params: ModelParams, config: MatcherConfig) -> Result<Self> {
        config.validate()?;
        check_params(&params, &config)?;
        Ok(Self { params, config })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (params, config) = load_checkpoint(path)?;
        Ok(Self { params, config })
    }

    pub fn score_pairs(&self, pairs: &[TokenizedPair]) -> Result<Vec<f64>> {
        let mut scores = Vec::with_capacity(pairs.len());
        for chunk in pairs.chunks(Self::CHUNK) {
            let out = forward(&self.params, &self.config, chunk, false, 0)?;
            scores.extend(out.logits.into_iter().map(match_probability));
        }
        Ok(scores)
    }
}

// Checkpoint layout (little endian):
//   magic[8] | version u32 | config_len u32 | config JSON
//   | count u32 | per tensor: name_len u32, name, rank u32, dims u32*, f64*
pub fn save_checkpoint(params: &ModelParams, config: &MatcherConfig, path: &Path) -> Result<()> {
    let io = |source| MatcherError::Io {
        path: path.display().to_string(),
        source,
    };
    check_params(params, config)?;
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    let config_json = serde_json::to_vec(config).expect("config serializes");
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(config_json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&config_json);
    buf.extend_from_slice(&(params.tensors.len() as u32).to_le_bytes());
    for (name, t) in params.names.iter().zip(&params.tensors) {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &d in &t.shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &t.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&buf).map_err(io)?;
    w.flush().map_err(io)
}

struct Cursor<'b> {
    bytes: &'b [u8],
    at: usize,
}

impl<'b> Cursor<'b> {
    fn take(&mut self, n: usize) -> Option<&'b [u8]> {
        let s = self.bytes.get(self.at..self.at.checked_add(n)?)?;
        self.at += n;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn f64(&mut self) -> Option<f64> {
        self.take(8).map(|b| f64::from_le_bytes(b.try_into().unwrap()))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelParams, MatcherConfig)> {
    let p = path.display().to_string();
    let fail = |msg: String| MatcherError::Checkpoint { path: p.clone(), msg };
    let mut bytes = Vec::new();
    BufReader::new(File::open(path).map_err(|source| MatcherError::Io {
        path: p.clone(),
        source,
    })?)
    .read_to_end(&mut bytes)
    .map_err(|source| MatcherError::Io { path: p.clone(), source })?;
    let mut c = Cursor { bytes: &bytes, at: 0 };
    let truncated = || fail("truncated file".into());
    if c.take(8) != Some(&CHECKPOINT_MAGIC[..]) {
        return Err(fail("not a matcher checkpoint (bad magic)".into()));
    }
    let version = c.u32().ok_or_else(truncated)?;
    if version != CHECKPOINT_VERSION {
        return Err(fail(format!("unsupported version {version}, expected {CHECKPOINT_VERSION}")));
    }
    let len = c.u32().ok_or_else(truncated)? as usize;
    let config: MatcherConfig = serde_json::from_slice(c.take(len).ok_or_else(truncated)?)
        .map_err(|e| fail(format!("config block: {e}")))?;
    config.validate().map_err(|e| fail(e.to_string()))?;
    let specs = config.tensor_specs();
    let count = c.u32().ok_or_else(truncated)? as usize;
    if count != specs.len() {
        return Err(fail(format!("{count} tensors stored, config needs {}", specs.len())));
    }
    let mut names = Vec::with_capacity(count);
    let mut tensors = Vec::with_capacity(count);
    for (name, shape, _) in specs {
        let nlen = c.u32().ok_or_else(truncated)? as usize;
        let stored = std::str::from_utf8(c.take(nlen).ok_or_else(truncated)?)
            .map_err(|_| fail("tensor name is not UTF-8".into()))?;
        if stored != name {
            return Err(fail(format!("expected tensor {name}, found {stored}")));
        }
        let rank = c.u32().ok_or_else(truncated)? as usize;
        let dims = (0..rank)
            .map(|_| c.u32().map(|d| d as usize))
            .collect::<Option<Vec<_>>>()
            .ok_or_else(truncated)?;
        if dims != shape {
            return Err(fail(format!("{name}: stored shape {dims:?}, config needs {shape:?}")));
        }
        let n: usize = dims.iter().product();
        let data = (0..n).map(|_| c.f64()).collect::<Option<Vec<_>>>().ok_or_else(truncated)?;
        let mut t = DenseTensor::new(dims, data)?;
        t.requires_grad = true;
        names.push(name);
        tensors.push(t);
    }
    if c.at != bytes.len() {
        return Err(fail(format!("{} trailing bytes", bytes.len() - c.at)));
    }
    Ok((ModelParams { names, tensors }, config))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::test_util::grid_pose;
    use crate::tokenizer::tokenize_pair;

    fn small_config() -> MatcherConfig {
        MatcherConfig {
            num_layers: 2,
            hidden: 8,
            intermediate: 12,
            heads: 2,
            ..MatcherConfig::default()
        }
    }

    fn sample_pair(shift: f64, gap: usize) -> TokenizedPair {
        let cur = grid_pose(300.0 + shift, 200.0, 1);
        let past = grid_pose(300.0, 200.0 + shift, 0);
        tokenize_pair(&cur, &past, gap, 4, 640, 480, TokenGrid::default()).unwrap()
    }

    #[test]
    fn default_parameter_breakdown() {
        let c = parameter_count(&MatcherConfig::default());
        assert_eq!(c.embeddings, 432 * 128 + 15 * 128 + 4 * 128 + 2 * 128);
        assert_eq!(c.encoder, 4 * (4 * (128 * 128 + 128) + 2 * (128 * 128 + 128) + 4 * 128));
        assert_eq!(c.pooler, 128 * 128 + 128);
        assert_eq!(c.classifier, 128 * 2 + 2);
        assert_eq!(c.total, 473_090);
        assert_eq!(c.without_embeddings(), 415_106);
        let params = init_params(&MatcherConfig::default(), 0).unwrap();
        assert_eq!(params.num_scalars(), c.total);
    }

    #[test]
    fn init_is_seeded_and_layer_norms_are_identity() {
        let cfg = small_config();
        let a = init_params(&cfg, 3).unwrap();
        assert_eq!(a, init_params(&cfg, 3).unwrap());
        assert_ne!(a, init_params(&cfg, 4).unwrap());
        let g = a.get("layers.1.feed_forward.norm.gain").unwrap();
        assert!(g.data.iter().all(|&v| v == 1.0));
        let b = a.get("layers.0.attention.norm.bias").unwrap();
        assert!(b.data.iter().all(|&v| v == 0.0));
        let w = a.get("embeddings.position").unwrap();
        let std = (w.data.iter().map(|v| v * v).sum::<f64>() / w.numel() as f64).sqrt();
        assert!((std - 0.02).abs() < 0.002, "{std}");
    }

    #[test]
    fn position_table_starts_smooth_over_the_grid() {
        let cfg = MatcherConfig::default();
        let params = init_params(&cfg, 0).unwrap();
        let table = params.get("embeddings.position").unwrap();
        let h = cfg.hidden;
        let row = |col: u32, r: u32| {
            let i = cfg.grid.cell_token(col, r) as usize - 1;
            &table.data[i * h..(i + 1) * h]
        };
        let cos = |a: &[f64], b: &[f64]| {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
            dot / (norm(a) * norm(b))
        };
        let near = cos(row(10, 8), row(11, 8));
        let far = cos(row(10, 8), row(18, 8));
        assert!(near > 0.7 && near > far + 0.2, "near {near} far {far}");
        assert!(cos(row(10, 8), row(10, 9)) > cos(row(10, 8), row(10, 16)));
        assert_eq!(params, init_params(&cfg, 0).unwrap());
    }

    #[test]
    fn config_validation() {
        let mut cfg = small_config();
        cfg.heads = 3;
        assert!(cfg.validate().is_err());
        cfg.heads = 2;
        cfg.dropout_p = 1.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn match_probability_examples() {
        assert_eq!(match_probability([0.0, 0.0]), 0.5);
        assert!((match_probability([-10.0, 10.0]) - 1.0).abs() < 1e-4);
        assert!(match_probability([1.0, 2.0]) < match_probability([1.0, 3.0]));
    }

    #[test]
    fn forward_is_deterministic_without_dropout() {
        let cfg = small_config();
        let params = init_params(&cfg, 1).unwrap();
        let pair = sample_pair(10.0, 1);
        let a = forward(&params, &cfg, std::slice::from_ref(&pair), false, 0).unwrap();
        let b = forward(&params, &cfg, std::slice::from_ref(&pair), false, 99).unwrap();
        assert_eq!(a.logits, b.logits);
        assert!(a.logits[0].iter().all(|v| v.is_finite()));
    }

    #[test]
    fn masked_second_pose_receives_no_attention() {
        let cfg = small_config();
        let params = init_params(&cfg, 2).unwrap();
        let mut pair = sample_pair(5.0, 2);
        for m in pair.attn_mask[15..].iter_mut() {
            *m = false;
        }
        let maps = extract_attention(&params, &cfg, &pair).unwrap();
        for l in 0..cfg.num_layers {
            for h in 0..cfg.heads {
                for q in 0..SEQ_LEN {
                    let first: f64 = (0..15).map(|k| maps.get(l, h, q, k)).sum();
                    assert!(first >= 1.0 - 1e-6);
                }
                let ka = maps.keypoint_attention(l, h);
                assert!((ka.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                assert!(ka[15..].iter().all(|&v| v < 1e-6));
            }
        }
    }

    #[test]
    fn batch_permutation_permutes_outputs() {
        let cfg = small_config();
        let params = init_params(&cfg, 5).unwrap();
        let pairs = vec![sample_pair(0.0, 1), sample_pair(40.0, 2), sample_pair(-30.0, 3)];
        let out = forward(&params, &cfg, &pairs, false, 0).unwrap();
        let rev: Vec<TokenizedPair> = pairs.iter().rev().cloned().collect();
        let out_rev = forward(&params, &cfg, &rev, false, 0).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                assert!((out.logits[i][j] - out_rev.logits[2 - i][j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn accepts_either_pose_order() {
        let cfg = small_config();
        let params = init_params(&cfg, 6).unwrap();
        let cur = grid_pose(300.0, 200.0, 3);
        let past = grid_pose(340.0, 220.0, 0);
        let g = TokenGrid::default();
        let fwd = tokenize_pair(&cur, &past, 3, 4, 640, 480, g).unwrap();
        let bwd = tokenize_pair(&past, &cur, 3, 4, 640, 480, g).unwrap();
        let s1 = match_score(&params, &cfg, &fwd).unwrap();
        let s2 = match_score(&params, &cfg, &bwd).unwrap();
        assert!(s1 > 0.0 && s1 < 1.0 && s2 > 0.0 && s2 < 1.0);
    }

    #[test]
    fn vocab_violation_names_index() {
        let cfg = small_config();
        let params = init_params(&cfg, 0).unwrap();
        let mut pair = sample_pair(0.0, 1);
        pair.segment[20] = 9;
        let err = match_score(&params, &cfg, &pair).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("segment token 9 at index 20"), "{msg}");
    }

    #[test]
    fn checkpoint_round_trip_and_rejections() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_config();
        let params = init_params(&cfg, 8).unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&params, &cfg, &path).unwrap();
        let (p2, c2) = load_checkpoint(&path).unwrap();
        assert_eq!(p2, params);
        assert_eq!(c2, cfg);

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[8] = 7;
        std::fs::write(&path, &bytes).unwrap();
        let msg = load_checkpoint(&path).unwrap_err().to_string();
        assert!(msg.contains("version 7"), "{msg}");

        let other = MatcherConfig {
            hidden: 10,
            ..cfg.clone()
        };
        assert!(save_checkpoint(&params, &other, &path).is_err());
        save_checkpoint(&params, &cfg, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(load_checkpoint(&path).unwrap_err().to_string().contains("truncated"));
        assert!(load_checkpoint(&dir.path().join("missing.ckpt")).is_err());
    }
}
