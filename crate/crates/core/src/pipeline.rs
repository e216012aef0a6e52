//! End-to-end stages shared by the command-line tool and the tests.
//!
//! Output layout, relative to each stage's output directory:
//!
//! ```text
//! synth:  config.json  truth/<video>.json  detected/<video>.json  labeled/<video>.json
//! train:  config.json  matcher.ckpt  metrics.csv
//! track:  config.json  tracked/<video>.json  assignments/<video>.csv
//! eval:   config.json  report.csv  report.txt  counts.csv  sweep.csv
//! attn:   config.json  layer<L>_head<H>.csv  layer<L>_head<H>.pgm
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::{generate_synthetic, load_sequence, save_sequence, DataError, Sequence, SynthConfig};
use crate::domain::JOINT_NAMES;
use crate::matcher::{extract_attention, init_params, save_checkpoint, Matcher, MatcherConfig, MatcherError};
use crate::metrics::{
    counts_csv, evaluate_ap_videos, evaluate_mota_videos, report_csv, report_text, sweep_csv, sweep_videos, MatchConfig,
    MetricsError,
};
use crate::tokenizer::SEQ_LEN;
use crate::toks::{OracleJitterEstimator, ToksConfig, ToksError};
use crate::tracker::{assignment_log_csv, track_video, IouScorer, PairScorer, ToksStage, TrackError, TrackerConfig};
use crate::training::{metrics_csv, mine_pairs, train, NegativeSampling, TrainConfig, TrainError};

/// Broad class of a failure, used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Numeric,
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Config { path: String, msg: String },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Matcher(#[from] MatcherError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Track(#[from] TrackError),
    #[error(transparent)]
    Toks(#[from] ToksError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

impl PipelineError {
    pub fn kind(&self) -> ErrorKind {
        match self {
            PipelineError::Usage(_) | PipelineError::Config { .. } => ErrorKind::Usage,
            PipelineError::Train(TrainError::Diverged { .. }) => ErrorKind::Numeric,
            PipelineError::Matcher(MatcherError::Tensor(_)) | PipelineError::Train(TrainError::Tensor(_)) => {
                ErrorKind::Numeric
            }
            PipelineError::Matcher(MatcherError::Config(_))
            | PipelineError::Train(TrainError::Config(_))
            | PipelineError::Track(TrackError::Config(_))
            | PipelineError::Toks(ToksError::Config(_))
            | PipelineError::Metrics(MetricsError::Config(_))
            | PipelineError::Data(DataError::Config(_)) => ErrorKind::Usage,
            _ => ErrorKind::Data,
        }
    }
}

pub type Result<T> = std::result::Result<T, PipelineError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScorerKind {
    #[default]
    Matcher,
    Iou,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleConfig {
    pub sigma: f64,
    pub dropout: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            sigma: 3.0,
            dropout: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub matching: MatchConfig,
    pub sweep_thresholds: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            matching: MatchConfig::default(),
            sweep_thresholds: vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.57, 0.6, 0.7, 0.8, 0.9],
        }
    }
}

/// Every setting of every stage. `seed` overrides the per-section seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub num_videos: usize,
    pub synth: SynthConfig,
    pub matcher: MatcherConfig,
    pub train: TrainConfig,
    pub negatives: NegativeSampling,
    pub tracker: TrackerConfig,
    pub scorer: ScorerKind,
    pub use_toks: bool,
    pub toks: ToksConfig,
    pub oracle: OracleConfig,
    pub eval: EvalConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            num_videos: 20,
            synth: SynthConfig::default(),
            matcher: MatcherConfig::default(),
            train: TrainConfig::default(),
            negatives: NegativeSampling::All,
            tracker: TrackerConfig::default(),
            scorer: ScorerKind::Matcher,
            use_toks: false,
            toks: ToksConfig::default(),
            oracle: OracleConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// Seed of stream `stream` (`index`-th member) derived from a master seed.
pub fn derive_seed(master: u64, stream: u64, index: u64) -> u64 {
    // splitmix64 finalizer over the combined input
    let mut z = master
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STREAM_SYNTH: u64 = 1;
const STREAM_TRAIN: u64 = 2;
const STREAM_INIT: u64 = 3;
const STREAM_MINING: u64 = 4;
const STREAM_ORACLE: u64 = 5;

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|e| PipelineError::Config {
            path: path.display().to_string(),
            msg: e.to_string(),
        })
    }

    /// Settings with every section seed tied to `seed`.
    pub fn effective(&self) -> Self {
        let mut c = self.clone();
        c.synth.seed = self.seed;
        c.train.seed = derive_seed(self.seed, STREAM_TRAIN, 0);
        c
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    pub fn synth_for_video(&self, video: usize) -> SynthConfig {
        SynthConfig {
            seed: derive_seed(self.seed, STREAM_SYNTH, video as u64),
            ..self.synth.clone()
        }
    }

    pub fn init_seed(&self) -> u64 {
        derive_seed(self.seed, STREAM_INIT, 0)
    }

    pub fn mining_seed(&self) -> u64 {
        derive_seed(self.seed, STREAM_MINING, 0)
    }

    pub fn oracle_seed(&self, video: usize) -> u64 {
        derive_seed(self.seed, STREAM_ORACLE, video as u64)
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, text).map_err(io_err(path))
}

fn store(seq: &Sequence, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    Ok(save_sequence(seq, path)?)
}

fn echo_config(config: &PipelineConfig, out: &Path) -> Result<()> {
    write(&out.join("config.json"), &config.to_json())
}

/// Sequence files under `path`: the file itself, or every `*.json` in the
/// directory except `config.json`, sorted by name.
pub fn sequence_files(path: &Path) -> Result<Vec<PathBuf>> {
    let meta = fs::metadata(path).map_err(io_err(path))?;
    if meta.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut files: Vec<PathBuf> = fs::read_dir(path)
        .map_err(io_err(path))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "json") && p.file_name().is_some_and(|n| n != "config.json"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(PipelineError::Usage(format!("{}: no sequence files", path.display())));
    }
    Ok(files)
}

pub fn load_sequences(paths: &[PathBuf]) -> Result<Vec<Sequence>> {
    let mut out = Vec::new();
    for p in paths {
        for f in sequence_files(p)? {
            out.push(load_sequence(&f)?);
        }
    }
    Ok(out)
}

fn video_file(dir: &Path, video_id: &str, ext: &str) -> PathBuf {
    dir.join(format!("{video_id}.{ext}"))
}

/// Generates `num_videos` synthetic videos.
pub fn run_synth(config: &PipelineConfig, out: &Path) -> Result<Vec<String>> {
    let config = config.effective();
    config.synth.validate()?;
    if config.num_videos == 0 {
        return Err(PipelineError::Usage("num_videos must be positive".into()));
    }
    let mut ids = Vec::new();
    for v in 0..config.num_videos {
        let id = format!("video{v:03}");
        let data = generate_synthetic(&config.synth_for_video(v), &id)?;
        store(&data.ground_truth, &video_file(&out.join("truth"), &id, "json"))?;
        store(&data.detected, &video_file(&out.join("detected"), &id, "json"))?;
        store(&data.labeled_detections, &video_file(&out.join("labeled"), &id, "json"))?;
        ids.push(id);
    }
    echo_config(&config, out)?;
    Ok(ids)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub pairs: usize,
    pub final_loss: f64,
    pub final_accuracy: f64,
}

/// Mines pairs from `inputs` (sequences with track ids), trains a fresh
/// matcher and writes the checkpoint and metrics log.
pub fn run_train(config: &PipelineConfig, inputs: &[PathBuf], validation: &[PathBuf], out: &Path) -> Result<TrainSummary> {
    let config = config.effective();
    config.matcher.validate()?;
    config.train.validate()?;
    let sequences = load_sequences(inputs)?;
    let tokenizer = config.matcher.tokenizer();
    let data = mine_pairs(&sequences, &tokenizer, config.tracker.delta, config.negatives, config.mining_seed())?;
    let held = if validation.is_empty() {
        None
    } else {
        let seqs = load_sequences(validation)?;
        let d = mine_pairs(&seqs, &tokenizer, config.tracker.delta, NegativeSampling::All, 0)?;
        Some(d.balanced_subset(config.mining_seed()))
    };
    log::info!("training on {} pairs ({} positive)", data.len(), data.num_positive());
    let params = init_params(&config.matcher, config.init_seed())?;
    let outcome = train(params, &config.matcher, &config.train, &data, held.as_ref())?;
    let checkpoint = out.join("matcher.ckpt");
    fs::create_dir_all(out).map_err(io_err(out))?;
    save_checkpoint(&outcome.params, &config.matcher, &checkpoint)?;
    write(&out.join("metrics.csv"), &metrics_csv(&outcome.log))?;
    echo_config(&config, out)?;
    let last = outcome.log.last().expect("at least one epoch");
    Ok(TrainSummary {
        checkpoint,
        pairs: data.len(),
        final_loss: last.loss,
        final_accuracy: last.match_accuracy,
    })
}

/// Tracks every input sequence. With `use_toks` set, detections are refined
/// first by an oracle estimator reading the matching file of `truth`.
pub fn run_track(
    config: &PipelineConfig,
    inputs: &[PathBuf],
    checkpoint: Option<&Path>,
    truth: &[PathBuf],
    out: &Path,
) -> Result<Vec<Sequence>> {
    let config = config.effective();
    config.tracker.validate()?;
    let matcher = match (config.scorer, checkpoint) {
        (ScorerKind::Matcher, Some(path)) => Some(Matcher::load(path)?),
        (ScorerKind::Matcher, None) => return Err(PipelineError::Usage("tracking with the matcher needs a checkpoint".into())),
        (ScorerKind::Iou, _) => None,
    };
    let scorer: &dyn PairScorer = match &matcher {
        Some(m) => m,
        None => &IouScorer,
    };
    let truth_by_id: BTreeMap<String, Sequence> = if config.use_toks {
        if truth.is_empty() {
            return Err(PipelineError::Usage("TOKS refinement needs ground truth for the oracle estimator".into()));
        }
        load_sequences(truth)?.into_iter().map(|s| (s.video_id.clone(), s)).collect()
    } else {
        BTreeMap::new()
    };
    let sequences = load_sequences(inputs)?;
    let mut tracked = Vec::with_capacity(sequences.len());
    for (v, seq) in sequences.iter().enumerate() {
        let mut estimator;
        let stage = if config.use_toks {
            let t = truth_by_id.get(&seq.video_id).ok_or_else(|| {
                PipelineError::Usage(format!("no ground truth for video '{}'", seq.video_id))
            })?;
            estimator = OracleJitterEstimator::new(t.clone(), config.oracle.sigma, config.oracle.dropout, config.oracle_seed(v))?;
            Some(ToksStage {
                estimator: &mut estimator,
                config: &config.toks,
            })
        } else {
            None
        };
        let (result, log) = track_video(seq, scorer, &config.tracker, stage)?;
        store(&result, &video_file(&out.join("tracked"), &seq.video_id, "json"))?;
        write(&video_file(&out.join("assignments"), &seq.video_id, "csv"), &assignment_log_csv(&log))?;
        tracked.push(result);
    }
    echo_config(&config, out)?;
    Ok(tracked)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    pub mota: f64,
    pub idsw_rate: f64,
    pub id_switches: usize,
    pub ap: f64,
}

/// Evaluates tracked sequences against ground truth matched by video id.
pub fn run_eval(config: &PipelineConfig, predicted: &[PathBuf], truth: &[PathBuf], out: &Path) -> Result<EvalSummary> {
    let config = config.effective();
    config.eval.matching.validate()?;
    let preds = load_sequences(predicted)?;
    let truths: BTreeMap<String, Sequence> = load_sequences(truth)?
        .into_iter()
        .map(|s| (s.video_id.clone(), s))
        .collect();
    let mut pairs = Vec::new();
    for p in &preds {
        let t = truths
            .get(&p.video_id)
            .ok_or_else(|| PipelineError::Usage(format!("no ground truth for video '{}'", p.video_id)))?;
        pairs.push((p, t));
    }
    let m = &config.eval.matching;
    let mota = evaluate_mota_videos(&pairs, m)?;
    let ap = evaluate_ap_videos(&pairs, m)?;
    let sweep = sweep_videos(&pairs, &config.eval.sweep_thresholds, m)?;
    write(&out.join("report.csv"), &report_csv(&mota, Some(&ap)))?;
    write(&out.join("report.txt"), &report_text(&mota, Some(&ap)))?;
    write(&out.join("counts.csv"), &counts_csv(&mota))?;
    write(&out.join("sweep.csv"), &sweep_csv(&sweep))?;
    echo_config(&config, out)?;
    Ok(EvalSummary {
        mota: mota.total_mota(),
        idsw_rate: mota.total_idsw_rate(),
        id_switches: mota.total_id_switches(),
        ap: ap.total(),
    })
}

/// Which pose pair to feed the network for attention export.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairSelector {
    pub frame: usize,
    pub pose: usize,
    pub gap: usize,
    pub past_pose: usize,
}

fn token_labels() -> Vec<String> {
    ["cur", "past"]
        .iter()
        .flat_map(|half| JOINT_NAMES.iter().map(move |j| format!("{half}:{j}")))
        .collect()
}

/// Binary graymap of a row-major `[rows, cols]` matrix scaled to its
/// maximum, each cell drawn as a `cell x cell` block.
pub fn graymap(values: &[f64], rows: usize, cols: usize, cell: usize) -> Vec<u8> {
    let max = values.iter().cloned().fold(0.0_f64, f64::max);
    let (w, h) = (cols * cell, rows * cell);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    for y in 0..h {
        for x in 0..w {
            let v = values[(y / cell) * cols + x / cell];
            let g = if max > 0.0 { (v / max * 255.0).round() as u8 } else { 0 };
            out.push(g);
        }
    }
    out
}

/// Writes every layer/head attention matrix of the selected pair. Returns
/// the number of matrices written.
pub fn run_attn_export(
    config: &PipelineConfig,
    checkpoint: &Path,
    sequence: &Path,
    selector: PairSelector,
    out: &Path,
) -> Result<usize> {
    let matcher = Matcher::load(checkpoint)?;
    let seq = load_sequence(sequence)?;
    let PairSelector { frame, pose, gap, past_pose } = selector;
    let bad = |msg: String| PipelineError::Usage(msg);
    if gap == 0 || gap > frame {
        return Err(bad(format!("gap {gap} must lie in 1..={frame}")));
    }
    let cur_frame = seq.frames.get(frame).ok_or_else(|| bad(format!("no frame {frame}")))?;
    let past_frame = &seq.frames[frame - gap];
    let cur = cur_frame.poses.get(pose).ok_or_else(|| bad(format!("frame {frame} has no pose {pose}")))?;
    let past = past_frame
        .poses
        .get(past_pose)
        .ok_or_else(|| bad(format!("frame {} has no pose {past_pose}", frame - gap)))?;
    let pair = matcher
        .config
        .tokenizer()
        .tokenize(cur, past, gap, seq.width, seq.height)
        .map_err(|e| bad(e.to_string()))?;
    let maps = extract_attention(&matcher.params, &matcher.config, &pair)?;
    let labels = token_labels();
    for layer in 0..maps.layers {
        for head in 0..maps.heads {
            let m = maps.matrix(layer, head);
            let mut csv = format!("query,{}\n", labels.join(","));
            for q in 0..SEQ_LEN {
                let row: Vec<String> = m[q * SEQ_LEN..(q + 1) * SEQ_LEN].iter().map(|v| format!("{v:.8e}")).collect();
                csv.push_str(&format!("{},{}\n", labels[q], row.join(",")));
            }
            let stem = format!("layer{layer}_head{head}");
            write(&out.join(format!("{stem}.csv")), &csv)?;
            let pgm = out.join(format!("{stem}.pgm"));
            fs::write(&pgm, graymap(m, SEQ_LEN, SEQ_LEN, 8)).map_err(io_err(&pgm))?;
        }
    }
    echo_config(&config.effective(), out)?;
    Ok(maps.layers * maps.heads)
}
