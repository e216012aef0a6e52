//! Online identity assignment.
//!
//! Each new pose is scored against the identified poses of the last `delta`
//! frames (the `n_nearest` closest per frame), the best score per track is
//! kept, and poses are matched to tracks greedily or optimally. Poses left
//! without a good enough match start new tracks.

use std::collections::{BTreeMap, VecDeque};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::Sequence;
use crate::domain::{nearest_indices, Pose};
use crate::matcher::{Matcher, MatcherError};
use crate::tokenizer::TokenizeError;
use crate::toks::{toks_refine, FrameRef, PoseEstimator, ToksConfig, ToksError};

#[derive(Debug, Error)]
pub enum TrackError {
    #[error("invalid tracker config: {0}")]
    Config(String),
    #[error(transparent)]
    Matcher(#[from] MatcherError),
    #[error(transparent)]
    Tokenize(#[from] TokenizeError),
    #[error(transparent)]
    Toks(#[from] ToksError),
}

pub type Result<T> = std::result::Result<T, TrackError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssignmentMode {
    #[default]
    Greedy,
    Hungarian,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackerConfig {
    pub delta: usize,
    pub n_nearest: usize,
    pub assignment: AssignmentMode,
    pub min_match_score: f64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            delta: 4,
            n_nearest: 6,
            assignment: AssignmentMode::Greedy,
            min_match_score: 0.5,
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.delta == 0 || self.n_nearest == 0 {
            return Err(TrackError::Config("delta and n_nearest must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.min_match_score) {
            return Err(TrackError::Config(format!(
                "min_match_score {} outside [0, 1]",
                self.min_match_score
            )));
        }
        Ok(())
    }
}

/// A `(current, past)` pose pair to score, `gap` frames apart.
#[derive(Debug, Clone, Copy)]
pub struct PairQuery<'a> {
    pub current: &'a Pose,
    pub past: &'a Pose,
    pub gap: usize,
}

/// Anything that can say how likely two poses are the same person.
pub trait PairScorer {
    fn score(&self, queries: &[PairQuery<'_>], frame_w: u32, frame_h: u32) -> Result<Vec<f64>>;

    /// Largest gap the scorer understands.
    fn max_gap(&self) -> usize {
        usize::MAX
    }
}

impl PairScorer for Matcher {
    fn score(&self, queries: &[PairQuery<'_>], frame_w: u32, frame_h: u32) -> Result<Vec<f64>> {
        let tokenizer = self.config.tokenizer();
        let pairs = queries
            .iter()
            .map(|q| tokenizer.tokenize(q.current, q.past, q.gap, frame_w, frame_h))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(self.score_pairs(&pairs)?)
    }

    fn max_gap(&self) -> usize {
        self.config.max_segment
    }
}

/// Spatial baseline: intersection over union of the two poses' boxes.
#[derive(Debug, Clone, Copy, Default)]
pub struct IouScorer;

impl PairScorer for IouScorer {
    fn score(&self, queries: &[PairQuery<'_>], _w: u32, _h: u32) -> Result<Vec<f64>> {
        let bbox = |p: &Pose| p.bbox.or_else(|| p.hull_box(0.1));
        Ok(queries
            .iter()
            .map(|q| match (bbox(q.current), bbox(q.past)) {
                (Some(a), Some(b)) => a.iou(&b),
                _ => 0.0,
            })
            .collect())
    }
}

/// One candidate identity for a pose.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub track_id: u32,
    pub score: f64,
    pub gap: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssignmentRecord {
    pub frame: usize,
    pub pose_index: usize,
    pub track_id: u32,
    /// Best candidate score, if any candidate was scored.
    pub best_score: Option<f64>,
    /// Gap of the match when an existing track was continued.
    pub gap_used: Option<usize>,
    pub spawned: bool,
}

pub fn assignment_log_csv(log: &[AssignmentRecord]) -> String {
    let mut out = String::from("frame,pose_index,track_id,best_score,gap_used,spawned\n");
    for r in log {
        let score = r.best_score.map(|s| format!("{s:.6}")).unwrap_or_default();
        let gap = r.gap_used.map(|g| g.to_string()).unwrap_or_default();
        let _ = writeln!(out, "{},{},{},{},{},{}", r.frame, r.pose_index, r.track_id, score, gap, r.spawned as u8);
    }
    out
}

/// Poses assigned in the last `delta` frames, plus the id counter and log.
#[derive(Debug, Clone, Default)]
pub struct TrackState {
    history: VecDeque<(usize, Vec<Pose>)>,
    next_id: u32,
    pub log: Vec<AssignmentRecord>,
    /// Pairs scored so far.
    pub scored_pairs: usize,
}

impl TrackState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn next_id(&self) -> u32 {
        self.next_id
    }

    pub fn history_len(&self) -> usize {
        self.history.len()
    }

    fn push(&mut self, frame: usize, poses: Vec<Pose>, delta: usize) {
        self.history.push_back((frame, poses));
        while self.history.len() > delta {
            self.history.pop_front();
        }
    }

    /// Past poses the given pose should be compared with: `(gap, pose)` for
    /// the `n_nearest` closest poses of each buffered frame within `delta`.
    fn lookback<'a>(&'a self, pose: &Pose, frame: usize, config: &TrackerConfig) -> Vec<(usize, &'a Pose)> {
        let mut out = Vec::new();
        for (past_frame, poses) in self.history.iter().rev() {
            let Some(gap) = frame.checked_sub(*past_frame) else {
                continue;
            };
            if gap == 0 || gap > config.delta {
                continue;
            }
            for i in nearest_indices(pose, poses, config.n_nearest) {
                out.push((gap, &poses[i]));
            }
        }
        out
    }
}

fn sort_candidates(list: &mut [Candidate]) {
    list.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.gap.cmp(&b.gap))
            .then(a.track_id.cmp(&b.track_id))
    });
}

fn check_scorer(scorer: &dyn PairScorer, config: &TrackerConfig) -> Result<()> {
    config.validate()?;
    if config.delta > scorer.max_gap() {
        return Err(TrackError::Config(format!(
            "delta {} exceeds the scorer's largest gap {}",
            config.delta,
            scorer.max_gap()
        )));
    }
    Ok(())
}

/// Scores `pose` at `frame` against the buffered history. Sorted by score
/// descending, then gap, then track id.
pub fn score_candidates(
    pose: &Pose,
    frame: usize,
    state: &mut TrackState,
    scorer: &dyn PairScorer,
    config: &TrackerConfig,
    frame_w: u32,
    frame_h: u32,
) -> Result<Vec<Candidate>> {
    check_scorer(scorer, config)?;
    let mut all = score_frame(std::slice::from_ref(pose), frame, state, scorer, config, frame_w, frame_h)?;
    Ok(all.remove(0))
}

fn score_frame(
    poses: &[Pose],
    frame: usize,
    state: &mut TrackState,
    scorer: &dyn PairScorer,
    config: &TrackerConfig,
    frame_w: u32,
    frame_h: u32,
) -> Result<Vec<Vec<Candidate>>> {
    let mut owners = Vec::new();
    let mut queries = Vec::new();
    let mut ids = Vec::new();
    for (pi, pose) in poses.iter().enumerate() {
        for (gap, past) in state.lookback(pose, frame, config) {
            let Some(id) = past.track_id else { continue };
            owners.push(pi);
            ids.push((id, gap));
            queries.push(PairQuery {
                current: pose,
                past,
                gap,
            });
        }
    }
    let scores = if queries.is_empty() {
        Vec::new()
    } else {
        scorer.score(&queries, frame_w, frame_h)?
    };
    state.scored_pairs += scores.len();
    let mut out = vec![Vec::new(); poses.len()];
    for ((&pi, &(track_id, gap)), &score) in owners.iter().zip(&ids).zip(&scores) {
        out[pi].push(Candidate { track_id, score, gap });
    }
    for list in out.iter_mut() {
        sort_candidates(list);
    }
    Ok(out)
}

/// Keeps the first (best) candidate of every track.
pub fn best_per_track(sorted: &[Candidate]) -> Vec<Candidate> {
    let mut seen = BTreeMap::new();
    for c in sorted {
        seen.entry(c.track_id).or_insert(*c);
    }
    let mut out: Vec<Candidate> = seen.into_values().collect();
    sort_candidates(&mut out);
    out
}

/// Greedy matching on a score matrix: repeatedly take the largest remaining
/// entry whose row and column are both free (earlier row, then column, on
/// ties). Entries that are `None` are not allowed.
pub fn greedy_assignment(scores: &[Vec<Option<f64>>]) -> Vec<Option<usize>> {
    let mut edges: Vec<(f64, usize, usize)> = Vec::new();
    for (r, row) in scores.iter().enumerate() {
        for (c, s) in row.iter().enumerate() {
            if let Some(s) = s {
                edges.push((*s, r, c));
            }
        }
    }
    edges.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let cols = scores.iter().map(Vec::len).max().unwrap_or(0);
    let mut row_of = vec![None; scores.len()];
    let mut col_used = vec![false; cols];
    for (_, r, c) in edges {
        if row_of[r].is_none() && !col_used[c] {
            row_of[r] = Some(c);
            col_used[c] = true;
        }
    }
    row_of
}

/// Maximum-weight one-to-one matching (Kuhn-Munkres with potentials).
/// `None` entries are forbidden; rows may stay unmatched.
pub fn hungarian_assignment(scores: &[Vec<Option<f64>>]) -> Vec<Option<usize>> {
    let rows = scores.len();
    let cols = scores.iter().map(Vec::len).max().unwrap_or(0);
    if rows == 0 || cols == 0 {
        return vec![None; rows];
    }
    // Square cost matrix; padding and forbidden cells cost 0 (weight 0), so
    // an optimal matching never needs them and they are dropped afterwards.
    let n = rows.max(cols);
    let max_w = scores
        .iter()
        .flatten()
        .flatten()
        .cloned()
        .fold(0.0_f64, f64::max);
    let weight = |r: usize, c: usize| -> f64 {
        scores.get(r).and_then(|row| row.get(c)).copied().flatten().unwrap_or(0.0).max(0.0)
    };
    let cost = |r: usize, c: usize| max_w - weight(r, c);

    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_of = vec![None; rows];
    for j in 1..=n {
        let (r, c) = (p[j] - 1, j - 1);
        if r < rows && c < cols {
            let allowed = scores[r].get(c).copied().flatten().is_some();
            if allowed && weight(r, c) > 0.0 {
                row_of[r] = Some(c);
            }
        }
    }
    row_of
}

/// Sum of the matched entries.
pub fn assignment_total(scores: &[Vec<Option<f64>>], assignment: &[Option<usize>]) -> f64 {
    assignment
        .iter()
        .enumerate()
        .filter_map(|(r, c)| c.and_then(|c| scores[r][c]))
        .sum()
}

/// Assigns track ids to the poses of one frame and records the frame in the
/// history. Returns the poses with ids set, in input order.
pub fn assign_frame(
    poses: &[Pose],
    frame: usize,
    state: &mut TrackState,
    scorer: &dyn PairScorer,
    config: &TrackerConfig,
    frame_w: u32,
    frame_h: u32,
) -> Result<Vec<Pose>> {
    check_scorer(scorer, config)?;
    let candidates = score_frame(poses, frame, state, scorer, config, frame_w, frame_h)?;
    let best: Vec<Vec<Candidate>> = candidates.iter().map(|c| best_per_track(c)).collect();

    let mut tracks: Vec<u32> = best.iter().flatten().map(|c| c.track_id).collect();
    tracks.sort_unstable();
    tracks.dedup();
    let col = |id: u32| tracks.binary_search(&id).expect("track listed");
    let mut matrix = vec![vec![None; tracks.len()]; poses.len()];
    let mut gaps = vec![vec![0usize; tracks.len()]; poses.len()];
    for (r, list) in best.iter().enumerate() {
        for c in list {
            if c.score >= config.min_match_score {
                matrix[r][col(c.track_id)] = Some(c.score);
                gaps[r][col(c.track_id)] = c.gap;
            }
        }
    }
    let chosen = match config.assignment {
        AssignmentMode::Greedy => greedy_assignment(&matrix),
        AssignmentMode::Hungarian => hungarian_assignment(&matrix),
    };

    let mut out = poses.to_vec();
    for (r, pose) in out.iter_mut().enumerate() {
        pose.frame_index = frame;
        let best_score = best[r].first().map(|c| c.score);
        let record = match chosen[r] {
            Some(c) => {
                pose.track_id = Some(tracks[c]);
                AssignmentRecord {
                    frame,
                    pose_index: r,
                    track_id: tracks[c],
                    best_score,
                    gap_used: Some(gaps[r][c]),
                    spawned: false,
                }
            }
            None => {
                let id = state.next_id;
                state.next_id += 1;
                pose.track_id = Some(id);
                AssignmentRecord {
                    frame,
                    pose_index: r,
                    track_id: id,
                    best_score,
                    gap_used: None,
                    spawned: true,
                }
            }
        };
        state.log.push(record);
    }
    state.push(frame, out.clone(), config.delta);
    Ok(out)
}

/// Optional detection refinement run before assignment.
pub struct ToksStage<'a> {
    pub estimator: &'a mut dyn PoseEstimator,
    pub config: &'a ToksConfig,
}

/// Tracks a whole sequence frame by frame. Frame `t` only ever sees frames
/// `<= t`.
pub fn track_video(
    detections: &Sequence,
    scorer: &dyn PairScorer,
    config: &TrackerConfig,
    mut toks: Option<ToksStage<'_>>,
) -> Result<(Sequence, Vec<AssignmentRecord>)> {
    check_scorer(scorer, config)?;
    let mut state = TrackState::new();
    let mut out = detections.clone();
    let mut previous: Vec<Pose> = Vec::new();
    for (i, frame) in detections.frames.iter().enumerate() {
        let poses = match toks.as_mut() {
            Some(stage) => {
                let fref = FrameRef {
                    index: frame.index,
                    width: detections.width,
                    height: detections.height,
                };
                toks_refine(&previous, &frame.poses, fref, &mut *stage.estimator, stage.config)?
            }
            None => frame.poses.clone(),
        };
        let assigned = assign_frame(&poses, frame.index, &mut state, scorer, config, detections.width, detections.height)?;
        previous = assigned.clone();
        out.frames[i].poses = assigned;
    }
    log::debug!(
        "tracked {} frames, {} ids, {} pairs scored",
        detections.frames.len(),
        state.next_id,
        state.scored_pairs
    );
    Ok((out, state.log))
}
