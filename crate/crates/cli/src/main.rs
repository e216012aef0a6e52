//! `posetrack`: synthesize data, train the matcher, track, evaluate and
//! export attention maps.
//!
//! Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure.
//! Failures print one line to stderr: `posetrack: <kind> error: <message>`.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use posetrack::pipeline::{
    run_attn_export, run_eval, run_synth, run_track, run_train, ErrorKind, PairSelector, PipelineConfig,
    PipelineError, ScorerKind,
};
use posetrack::tracker::AssignmentMode;

#[derive(Parser)]
#[command(name = "posetrack", version, about = "Multi-person pose tracking by pairwise pose matching")]
struct Cli {
    /// JSON settings file; flags override it, it overrides defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed for every stochastic component.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic ground truth and detection sequences.
    Synth(SynthArgs),
    /// Train the pair matcher on sequences with track ids.
    Train(TrainArgs),
    /// Assign track ids to detection sequences.
    Track(TrackArgs),
    /// Score tracked sequences against ground truth.
    Eval(EvalArgs),
    /// Dump per-head attention matrices for one pose pair.
    AttnExport(AttnArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    videos: Option<usize>,
    #[arg(long)]
    persons: Option<usize>,
    #[arg(long)]
    frames: Option<usize>,
    /// Everyone moves with one shared velocity.
    #[arg(long)]
    uniform_motion: bool,
    #[arg(long)]
    occlusion_rate: Option<f64>,
    /// Probability that the detector misses a pose.
    #[arg(long)]
    missed: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    /// Sequence files or directories with track ids.
    #[arg(long, required = true, num_args = 1..)]
    data: Vec<PathBuf>,
    /// Held-out sequences whose accuracy is logged each epoch.
    #[arg(long, num_args = 1..)]
    validation: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    steps_per_epoch: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    delta: Option<usize>,
    /// Random joint translation of training pairs, in grid cells.
    #[arg(long)]
    shift_augment: Option<u32>,
    #[arg(long)]
    no_type_embeddings: bool,
    #[arg(long)]
    no_segment_embeddings: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScorerArg {
    Matcher,
    Iou,
}

#[derive(Clone, Copy, ValueEnum)]
enum AssignArg {
    Greedy,
    Hungarian,
}

#[derive(Args)]
struct TrackArgs {
    /// Detection sequence files or directories.
    #[arg(long, required = true, num_args = 1..)]
    input: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, value_enum)]
    scorer: Option<ScorerArg>,
    #[arg(long, value_enum)]
    assignment: Option<AssignArg>,
    #[arg(long)]
    delta: Option<usize>,
    #[arg(long)]
    n_nearest: Option<usize>,
    #[arg(long)]
    min_score: Option<f64>,
    /// Refine detections with TOKS using an oracle estimator on `--truth`.
    #[arg(long)]
    toks: bool,
    #[arg(long, num_args = 1..)]
    truth: Vec<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, required = true, num_args = 1..)]
    tracked: Vec<PathBuf>,
    #[arg(long, required = true, num_args = 1..)]
    truth: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Matching gate as a fraction of head size.
    #[arg(long)]
    gate: Option<f64>,
}

#[derive(Args)]
struct AttnArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    sequence: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Frame of the current pose.
    #[arg(long)]
    frame: usize,
    #[arg(long, default_value_t = 0)]
    pose: usize,
    #[arg(long, default_value_t = 1)]
    gap: usize,
    #[arg(long, default_value_t = 0)]
    past_pose: usize,
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn settings(cli: &Cli) -> Result<PipelineConfig, PipelineError> {
    let mut c = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    set(&mut c.seed, cli.seed);
    match &cli.command {
        Command::Synth(a) => {
            set(&mut c.num_videos, a.videos);
            set(&mut c.synth.num_persons, a.persons);
            set(&mut c.synth.num_frames, a.frames);
            set(&mut c.synth.occlusion_rate, a.occlusion_rate);
            set(&mut c.synth.noise.missed_pose, a.missed);
            c.synth.uniform_motion |= a.uniform_motion;
        }
        Command::Train(a) => {
            set(&mut c.train.epochs, a.epochs);
            if a.steps_per_epoch.is_some() {
                c.train.steps_per_epoch = a.steps_per_epoch;
            }
            set(&mut c.train.batch_size, a.batch_size);
            set(&mut c.train.peak_lr, a.lr);
            set(&mut c.train.shift_augment, a.shift_augment);
            set(&mut c.tracker.delta, a.delta);
            c.matcher.use_type_embeddings &= !a.no_type_embeddings;
            c.matcher.use_segment_embeddings &= !a.no_segment_embeddings;
        }
        Command::Track(a) => {
            set(
                &mut c.scorer,
                a.scorer.map(|s| match s {
                    ScorerArg::Matcher => ScorerKind::Matcher,
                    ScorerArg::Iou => ScorerKind::Iou,
                }),
            );
            set(
                &mut c.tracker.assignment,
                a.assignment.map(|s| match s {
                    AssignArg::Greedy => AssignmentMode::Greedy,
                    AssignArg::Hungarian => AssignmentMode::Hungarian,
                }),
            );
            set(&mut c.tracker.delta, a.delta);
            set(&mut c.tracker.n_nearest, a.n_nearest);
            set(&mut c.tracker.min_match_score, a.min_score);
            c.use_toks |= a.toks;
        }
        Command::Eval(a) => set(&mut c.eval.matching.threshold, a.gate),
        Command::AttnExport(_) => {}
    }
    Ok(c)
}

fn require_file(path: &Path) -> Result<(), PipelineError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(PipelineError::Io {
            path: path.display().to_string(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "no such file"),
        })
    }
}

fn run(cli: &Cli) -> Result<(), PipelineError> {
    let config = settings(cli)?;
    match &cli.command {
        Command::Synth(a) => {
            let ids = run_synth(&config, &a.out)?;
            println!("wrote {} videos to {}", ids.len(), a.out.display());
        }
        Command::Train(a) => {
            let s = run_train(&config, &a.data, &a.validation, &a.out)?;
            println!(
                "trained on {} pairs: final loss {:.4}, match accuracy {:.4}; checkpoint {}",
                s.pairs,
                s.final_loss,
                s.final_accuracy,
                s.checkpoint.display()
            );
        }
        Command::Track(a) => {
            if let Some(ckpt) = &a.checkpoint {
                require_file(ckpt)?;
            }
            let tracked = run_track(&config, &a.input, a.checkpoint.as_deref(), &a.truth, &a.out)?;
            println!("tracked {} videos into {}", tracked.len(), a.out.display());
        }
        Command::Eval(a) => {
            let s = run_eval(&config, &a.tracked, &a.truth, &a.out)?;
            println!(
                "MOTA {:.2}  %IDSW {:.2}  AP {:.2}  (id switches {})",
                100.0 * s.mota,
                100.0 * s.idsw_rate,
                100.0 * s.ap,
                s.id_switches
            );
        }
        Command::AttnExport(a) => {
            require_file(&a.checkpoint)?;
            let selector = PairSelector {
                frame: a.frame,
                pose: a.pose,
                gap: a.gap,
                past_pose: a.past_pose,
            };
            let n = run_attn_export(&config, &a.checkpoint, &a.sequence, selector, &a.out)?;
            println!("wrote {n} attention maps to {}", a.out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (kind, code) = match e.kind() {
                ErrorKind::Usage => ("usage", 2),
                ErrorKind::Data => ("data", 3),
                ErrorKind::Numeric => ("numeric", 4),
            };
            let msg = e.to_string().replace('\n', " ");
            eprintln!("posetrack: {kind} error: {msg}");
            ExitCode::from(code)
        }
    }
}
