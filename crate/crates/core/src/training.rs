//! Supervised training of the pair matcher.
//!
//! Labeled pairs are mined from tracked sequences over temporal gaps
//! `1..=delta`, drawn class-balanced with replacement, and fit with Adam under
//! a linear warmup / linear decay schedule.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::Sequence;
use crate::matcher::{forward, forward_on_tape, match_probability, MatcherConfig, MatcherError, ModelParams, MATCH_CLASS};
use crate::tensor::{Tape, TensorError, Var};
use crate::tokenizer::{PositionMode, TokenGrid, TokenizeError, TokenizedPair, Tokenizer};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("loss became non-finite ({loss}) at step {step}")]
    Diverged { step: usize, loss: f64 },
    #[error(transparent)]
    Tokenize(#[from] TokenizeError),
    #[error(transparent)]
    Matcher(#[from] MatcherError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_fraction: f64,
    pub epochs: usize,
    /// Optimizer steps per epoch. `None` means one pass worth of examples,
    /// `ceil(dataset_len / batch_size)`.
    pub steps_per_epoch: Option<usize>,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm clip; off by default.
    pub grad_clip: Option<f64>,
    /// Largest random translation, in grid cells, applied to both poses of
    /// each training pair; 0 turns it off. Absolute positions only.
    pub shift_augment: u32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            peak_lr: 1e-4,
            warmup_fraction: 0.01,
            epochs: 25,
            steps_per_epoch: None,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: None,
            shift_augment: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(TrainError::Config(msg));
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch_size and epochs must be positive".into());
        }
        if self.steps_per_epoch == Some(0) {
            return bad("steps_per_epoch must be positive".into());
        }
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return bad(format!("warmup_fraction {} outside (0, 1)", self.warmup_fraction));
        }
        if !(self.peak_lr > 0.0 && self.adam_eps > 0.0) {
            return bad("peak_lr and adam_eps must be positive".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0, 1)".into());
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad(format!("grad_clip {c} must be positive"));
            }
        }
        Ok(())
    }

    pub fn steps_for(&self, dataset_len: usize) -> usize {
        self.steps_per_epoch.unwrap_or_else(|| dataset_len.div_ceil(self.batch_size).max(1))
    }
}

/// A tokenized pair with its label and where it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPair {
    pub pair: TokenizedPair,
    pub label: bool,
    pub video_id: String,
    pub current_frame: usize,
    pub past_frame: usize,
    pub gap: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PairDataset {
    pub pairs: Vec<LabeledPair>,
}

impl PairDataset {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn num_positive(&self) -> usize {
        self.pairs.iter().filter(|p| p.label).count()
    }

    pub fn num_negative(&self) -> usize {
        self.len() - self.num_positive()
    }

    /// Keeps every example of the rarer class and an equal-sized random
    /// subset of the other, preserving order.
    pub fn balanced_subset(&self, seed: u64) -> PairDataset {
        let (pos, neg): (Vec<usize>, Vec<usize>) = (0..self.len()).partition(|&i| self.pairs[i].label);
        let n = pos.len().min(neg.len());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut keep: Vec<usize> = Vec::with_capacity(2 * n);
        for mut class in [pos, neg] {
            class.shuffle(&mut rng);
            keep.extend_from_slice(&class[..n]);
        }
        keep.sort_unstable();
        PairDataset {
            pairs: keep.into_iter().map(|i| self.pairs[i].clone()).collect(),
        }
    }

    pub fn extend(&mut self, other: PairDataset) {
        self.pairs.extend(other.pairs);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeSampling {
    /// Every cross-identity pair of each frame pair.
    All,
    /// About this many negatives per positive, drawn uniformly from all.
    PerPositive(f64),
}

/// Enumerates labeled pairs: for every frame `t`, gap `d in 1..=delta` and
/// every combination of an identified pose at `t` with one at `t - d`.
pub fn mine_pairs(
    sequences: &[Sequence],
    tokenizer: &Tokenizer,
    delta: usize,
    negatives: NegativeSampling,
    seed: u64,
) -> Result<PairDataset> {
    if delta == 0 || delta > tokenizer.max_gap {
        return Err(TrainError::Config(format!(
            "delta {delta} must lie in 1..={}",
            tokenizer.max_gap
        )));
    }
    let mut positives = Vec::new();
    let mut all_negatives = Vec::new();
    for seq in sequences {
        for t in 1..seq.frames.len() {
            for d in 1..=delta.min(t) {
                let (cur, past) = (&seq.frames[t], &seq.frames[t - d]);
                for a in cur.poses.iter().filter(|p| p.track_id.is_some()) {
                    for b in past.poses.iter().filter(|p| p.track_id.is_some()) {
                        let label = a.track_id == b.track_id;
                        let mut pair = tokenizer.tokenize(a, b, d, seq.width, seq.height)?;
                        pair.label = Some(label);
                        let item = LabeledPair {
                            pair,
                            label,
                            video_id: seq.video_id.clone(),
                            current_frame: cur.index,
                            past_frame: past.index,
                            gap: d,
                        };
                        if label {
                            positives.push(item);
                        } else {
                            all_negatives.push(item);
                        }
                    }
                }
            }
        }
    }
    let chosen = match negatives {
        NegativeSampling::All => all_negatives,
        NegativeSampling::PerPositive(ratio) => {
            if !(ratio >= 0.0) {
                return Err(TrainError::Config(format!("negative ratio {ratio} must be non-negative")));
            }
            let want = ((ratio * positives.len() as f64).round() as usize).min(all_negatives.len());
            let mut idx: Vec<usize> = (0..all_negatives.len()).collect();
            idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let mut keep = idx[..want].to_vec();
            keep.sort_unstable();
            keep.into_iter().map(|i| all_negatives[i].clone()).collect()
        }
    };
    log::debug!("mined {} positives and {} negatives", positives.len(), chosen.len());
    let mut pairs = positives;
    pairs.extend(chosen);
    Ok(PairDataset { pairs })
}

/// Endless stream of index batches with each example drawn from either class
/// with probability one half, then uniformly within the class.
pub struct BalancedBatches {
    positives: Vec<usize>,
    negatives: Vec<usize>,
    batch_size: usize,
    rng: ChaCha8Rng,
}

impl BalancedBatches {
    pub fn new(dataset: &PairDataset, batch_size: usize, seed: u64) -> Result<Self> {
        let (positives, negatives): (Vec<usize>, Vec<usize>) =
            (0..dataset.len()).partition(|&i| dataset.pairs[i].label);
        if positives.is_empty() || negatives.is_empty() {
            return Err(TrainError::Dataset(format!(
                "balanced sampling needs both classes, got {} positives and {} negatives",
                positives.len(),
                negatives.len()
            )));
        }
        if batch_size == 0 {
            return Err(TrainError::Config("batch_size must be positive".into()));
        }
        Ok(Self {
            positives,
            negatives,
            batch_size,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }
}

impl Iterator for BalancedBatches {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        let batch = (0..self.batch_size)
            .map(|_| {
                let class = if self.rng.random::<bool>() { &self.positives } else { &self.negatives };
                class[self.rng.random_range(0..class.len())]
            })
            .collect();
        Some(batch)
    }
}

pub fn balanced_batches(dataset: &PairDataset, batch_size: usize, seed: u64) -> Result<BalancedBatches> {
    BalancedBatches::new(dataset, batch_size, seed)
}

pub fn warmup_steps(total_steps: usize, config: &TrainConfig) -> usize {
    ((config.warmup_fraction * total_steps as f64).ceil() as usize).max(1)
}

/// Learning rate at optimizer step `step` (zero-based) of `total_steps`.
pub fn lr_at(step: usize, total_steps: usize, config: &TrainConfig) -> f64 {
    let warm = warmup_steps(total_steps, config);
    if step >= total_steps {
        return 0.0;
    }
    if step < warm {
        return config.peak_lr * step as f64 / warm as f64;
    }
    if total_steps <= warm {
        return config.peak_lr;
    }
    config.peak_lr * (total_steps - step) as f64 / (total_steps - warm) as f64
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    fn new(params: &ModelParams) -> Self {
        let zeros = || params.tensors.iter().map(|t| vec![0.0; t.numel()]).collect();
        Self { m: zeros(), v: zeros(), t: 0 }
    }

    fn step(&mut self, params: &mut ModelParams, grads: &[Vec<f64>], lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t);
        let c2 = 1.0 - cfg.beta2.powi(self.t);
        for (k, tensor) in params.tensors.iter_mut().enumerate() {
            let (m, v, g) = (&mut self.m[k], &mut self.v[k], &grads[k]);
            for i in 0..tensor.data.len() {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                tensor.data[i] -= lr * mhat / (vhat.sqrt() + cfg.adam_eps);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Optimizer steps completed at the end of the epoch.
    pub step: usize,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    pub loss: f64,
    /// Accuracy on the validation set when one is given, otherwise on the
    /// epoch's training batches.
    pub match_accuracy: f64,
}

pub fn metrics_csv(log: &[EpochMetrics]) -> String {
    let mut out = String::from("epoch,step,lr,loss,match_accuracy\n");
    for m in log {
        let _ = writeln!(out, "{},{},{:e},{:.6},{:.6}", m.epoch, m.step, m.lr, m.loss, m.match_accuracy);
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub log: Vec<EpochMetrics>,
}

/// One forward/backward pass over `batch`. Returns the loss, the number of
/// correct training-mode predictions and the gradients in parameter order.
fn batch_gradients(
    params: &ModelParams,
    config: &MatcherConfig,
    pairs: &[TokenizedPair],
    labels: &[usize],
    seed: u64,
) -> Result<(f64, usize, Vec<Vec<f64>>)> {
    let mut tape = Tape::new(seed);
    let vars: Vec<Var> = params.tensors.iter().map(|t| tape.leaf_ref(t)).collect();
    let out = forward_on_tape(&mut tape, &vars, config, pairs, true)?;
    let correct = tape
        .value(out.logits)
        .chunks(2)
        .zip(labels)
        .filter(|(l, &y)| (l[MATCH_CLASS] > l[1 - MATCH_CLASS]) == (y == MATCH_CLASS))
        .count();
    let loss = tape.cross_entropy(out.logits, labels)?;
    let loss_value = tape.value(loss)[0];
    if !loss_value.is_finite() {
        return Ok((loss_value, correct, Vec::new()));
    }
    tape.backward(loss)?;
    let grads = vars
        .iter()
        .zip(&params.tensors)
        .map(|(&v, t)| tape.grad(v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();
    Ok((loss_value, correct, grads))
}

/// Moves every visible position token of `pair` by the same random cell
/// offset of at most `max_shift` per axis, keeping all of them on the grid.
pub fn shift_pair(pair: &TokenizedPair, grid: TokenGrid, max_shift: u32, rng: &mut impl Rng) -> TokenizedPair {
    if max_shift == 0 {
        return pair.clone();
    }
    let (w, h) = (grid.width as i64, grid.height as i64);
    let cells: Vec<(usize, i64, i64)> = (0..pair.position.len())
        .filter(|&i| pair.attn_mask[i])
        .map(|i| {
            let t = pair.position[i] as i64 - 1;
            (i, t % w, t / w)
        })
        .collect();
    if cells.is_empty() {
        return pair.clone();
    }
    let m = max_shift as i64;
    let span = |lo: i64, hi: i64, size: i64| ((-lo).max(-m), (size - 1 - hi).min(m));
    let (min_c, max_c) = cells.iter().fold((w, -1), |(a, b), c| (a.min(c.1), b.max(c.1)));
    let (min_r, max_r) = cells.iter().fold((h, -1), |(a, b), c| (a.min(c.2), b.max(c.2)));
    let (dx_lo, dx_hi) = span(min_c, max_c, w);
    let (dy_lo, dy_hi) = span(min_r, max_r, h);
    let dx = rng.random_range(dx_lo..=dx_hi);
    let dy = rng.random_range(dy_lo..=dy_hi);
    let mut out = pair.clone();
    for (i, c, r) in cells {
        out.position[i] = grid.cell_token((c + dx) as u32, (r + dy) as u32);
    }
    out
}

fn clip_gradients(grads: &mut [Vec<f64>], max_norm: f64) {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
}

/// Fits `params` on `dataset`. When `validation` is given its accuracy is
/// logged after every epoch.
pub fn train(
    mut params: ModelParams,
    model: &MatcherConfig,
    config: &TrainConfig,
    dataset: &PairDataset,
    validation: Option<&PairDataset>,
) -> Result<TrainOutcome> {
    config.validate()?;
    model.validate()?;
    for t in params.tensors.iter_mut() {
        t.requires_grad = true;
    }
    let steps_per_epoch = config.steps_for(dataset.len());
    let total = steps_per_epoch * config.epochs;
    let mut batches = balanced_batches(dataset, config.batch_size, config.seed)?;
    let mut adam = Adam::new(&params);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_d209);
    let mut shift_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x0005_41f7);
    let shift = match model.position_mode {
        PositionMode::Absolute => config.shift_augment,
        PositionMode::Relative => 0,
    };
    let mut log = Vec::with_capacity(config.epochs);
    let mut step = 0;
    for epoch in 1..=config.epochs {
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);
        let mut lr = 0.0;
        for _ in 0..steps_per_epoch {
            let idx = batches.next().expect("endless sampler");
            let pairs: Vec<TokenizedPair> = idx
                .iter()
                .map(|&i| shift_pair(&dataset.pairs[i].pair, model.grid, shift, &mut shift_rng))
                .collect();
            let labels: Vec<usize> = idx
                .iter()
                .map(|&i| if dataset.pairs[i].label { MATCH_CLASS } else { 1 - MATCH_CLASS })
                .collect();
            let (loss, ok, mut grads) = batch_gradients(&params, model, &pairs, &labels, dropout_rng.random())?;
            if !loss.is_finite() {
                return Err(TrainError::Diverged { step, loss });
            }
            if let Some(c) = config.grad_clip {
                clip_gradients(&mut grads, c);
            }
            lr = lr_at(step, total, config);
            adam.step(&mut params, &grads, lr, config);
            if !params.is_finite() {
                return Err(TrainError::Diverged { step, loss: f64::NAN });
            }
            loss_sum += loss;
            correct += ok;
            seen += idx.len();
            step += 1;
        }
        let match_accuracy = match validation {
            Some(v) => match_accuracy(&params, model, v)?,
            None => correct as f64 / seen as f64,
        };
        let m = EpochMetrics {
            epoch,
            step,
            lr,
            loss: loss_sum / steps_per_epoch as f64,
            match_accuracy,
        };
        log::info!(
            "epoch {} step {} lr {:.3e} loss {:.4} acc {:.4}",
            m.epoch,
            m.step,
            m.lr,
            m.loss,
            m.match_accuracy
        );
        log.push(m);
    }
    Ok(TrainOutcome { params, log })
}

/// Match probabilities for every pair in `dataset`.
pub fn predict(params: &ModelParams, model: &MatcherConfig, dataset: &PairDataset) -> Result<Vec<f64>> {
    let mut scores = Vec::with_capacity(dataset.len());
    let pairs: Vec<TokenizedPair> = dataset.pairs.iter().map(|p| p.pair.clone()).collect();
    for chunk in pairs.chunks(256) {
        let out = forward(params, model, chunk, false, 0)?;
        scores.extend(out.logits.into_iter().map(match_probability));
    }
    Ok(scores)
}

/// Fraction of pairs whose thresholded score (>= 0.5) agrees with the label.
pub fn match_accuracy(params: &ModelParams, model: &MatcherConfig, dataset: &PairDataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(TrainError::Dataset("accuracy of an empty dataset".into()));
    }
    let scores = predict(params, model, dataset)?;
    let correct = scores
        .iter()
        .zip(&dataset.pairs)
        .filter(|(&s, p)| (s >= 0.5) == p.label)
        .count();
    Ok(correct as f64 / dataset.len() as f64)
}
