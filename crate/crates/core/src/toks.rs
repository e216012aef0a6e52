//! Temporal OKS refinement of per-frame detections.
//!
//! Boxes of the previous frame's poses are dilated and handed to a pose
//! estimator in the current frame. Detections and propagated estimates are
//! then thresholded and deduplicated by keypoint similarity, keeping the
//! candidate with the higher mean keypoint confidence.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::{keypoint_confidence, round_to, Sequence};
use crate::domain::{dilate_box, mutual_oks, oks, BBox, Frame, JointSigmas, Keypoint, Pose};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ToksError {
    #[error("invalid TOKS config: {0}")]
    Config(String),
    #[error("frame {frame}: estimation failed: {msg}")]
    Estimate { frame: usize, msg: String },
}

pub type Result<T> = std::result::Result<T, ToksError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToksConfig {
    /// Box dilation factor.
    pub alpha: f64,
    /// Candidates at or above this mutual OKS are duplicates.
    pub oks_threshold: f64,
    pub keypoint_conf_min: f64,
    pub box_conf_min: f64,
    /// Also propagate detections of frame `t + 1` (offline use).
    pub use_next_frame: bool,
    pub sigmas: JointSigmas,
}

impl Default for ToksConfig {
    fn default() -> Self {
        Self {
            alpha: 1.25,
            oks_threshold: 0.35,
            keypoint_conf_min: 0.1,
            box_conf_min: 0.2,
            use_next_frame: false,
            sigmas: JointSigmas::default(),
        }
    }
}

impl ToksConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 1.0) {
            return Err(ToksError::Config(format!("alpha {} must be >= 1", self.alpha)));
        }
        for (name, v) in [
            ("oks_threshold", self.oks_threshold),
            ("keypoint_conf_min", self.keypoint_conf_min),
            ("box_conf_min", self.box_conf_min),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(ToksError::Config(format!("{name} {v} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Identifies the frame an estimate is requested for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameRef {
    pub index: usize,
    pub width: u32,
    pub height: u32,
}

/// A top-down pose estimator run on one box of one frame.
pub trait PoseEstimator {
    /// Estimate the pose inside `bbox` of `frame`. `prior` is the pose whose
    /// box was propagated; estimators that look at pixels ignore it.
    fn estimate(&mut self, frame: FrameRef, bbox: &BBox, prior: &Pose) -> Result<Pose>;
}

/// Returns the prior pose moved to the requested frame, untouched otherwise.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityEstimator;

impl PoseEstimator for IdentityEstimator {
    fn estimate(&mut self, frame: FrameRef, _bbox: &BBox, prior: &Pose) -> Result<Pose> {
        let mut p = prior.clone();
        p.frame_index = frame.index;
        p.track_id = None;
        Ok(p)
    }
}

/// Synthetic estimator: finds the ground-truth person occupying the box and
/// returns them with Gaussian jitter and per-keypoint dropout. Keypoints
/// outside the box are not predicted.
#[derive(Debug, Clone)]
pub struct OracleJitterEstimator {
    truth: Sequence,
    pub sigma: f64,
    pub dropout: f64,
    rng: ChaCha8Rng,
}

impl OracleJitterEstimator {
    pub fn new(truth: Sequence, sigma: f64, dropout: f64, seed: u64) -> Result<Self> {
        if !(sigma >= 0.0) || !(0.0..=1.0).contains(&dropout) {
            return Err(ToksError::Config(format!("oracle sigma {sigma} / dropout {dropout} invalid")));
        }
        Ok(Self {
            truth,
            sigma,
            dropout,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    fn occupant<'a>(frame: &'a Frame, bbox: &BBox) -> Option<&'a Pose> {
        let mut best: Option<(f64, f64, &Pose)> = None;
        for p in &frame.poses {
            let n = p.num_visible();
            if n == 0 {
                continue;
            }
            let inside = p.visible().filter(|k| bbox.contains(k.x, k.y)).count() as f64 / n as f64;
            let overlap = p.hull_box(0.0).map(|h| h.iou(bbox)).unwrap_or(0.0);
            if best.is_none_or(|(bi, bo, _)| inside > bi || (inside == bi && overlap > bo)) {
                best = Some((inside, overlap, p));
            }
        }
        best.filter(|(inside, _, _)| *inside >= 0.5).map(|(_, _, p)| p)
    }
}

impl PoseEstimator for OracleJitterEstimator {
    fn estimate(&mut self, frame: FrameRef, bbox: &BBox, _prior: &Pose) -> Result<Pose> {
        let fail = |msg: &str| ToksError::Estimate {
            frame: frame.index,
            msg: msg.to_string(),
        };
        let truth_frame = self
            .truth
            .frames
            .iter()
            .find(|f| f.index == frame.index)
            .ok_or_else(|| fail("no ground truth for frame"))?;
        let person = Self::occupant(truth_frame, bbox).ok_or_else(|| fail("no person in box"))?;
        let normal = Normal::new(0.0, self.sigma.max(1e-12)).expect("valid sigma");
        let mut pose = person.clone();
        pose.track_id = None;
        pose.frame_index = frame.index;
        for kp in pose.keypoints.iter_mut() {
            let (nx, ny): (f64, f64) = if self.sigma > 0.0 {
                (normal.sample(&mut self.rng), normal.sample(&mut self.rng))
            } else {
                (0.0, 0.0)
            };
            let drop = self.dropout > 0.0 && self.rng.random::<f64>() < self.dropout;
            if !kp.visible {
                continue;
            }
            let (x, y) = (round_to(kp.x + nx, 0.01), round_to(kp.y + ny, 0.01));
            if drop || !bbox.contains(x, y) {
                *kp = Keypoint::invisible(kp.type_id);
                continue;
            }
            let conf = round_to(keypoint_confidence((nx * nx + ny * ny).sqrt()), 1e-4);
            *kp = Keypoint::new(kp.type_id, x, y, conf, true);
        }
        if pose.num_visible() == 0 {
            return Err(fail("every keypoint dropped"));
        }
        pose.bbox = pose.hull_box(0.1).and_then(|b| b.clamp_to(frame.width as f64, frame.height as f64));
        pose.score = round_to(pose.mean_confidence(), 1e-4);
        Ok(pose)
    }
}

/// Applies the confidence floors: low-confidence keypoints become invisible,
/// and poses with a low box score or nothing visible are dropped.
pub fn apply_floors(pose: &Pose, config: &ToksConfig) -> Option<Pose> {
    if pose.score < config.box_conf_min {
        return None;
    }
    let mut p = pose.clone();
    for kp in p.keypoints.iter_mut() {
        if kp.visible && kp.confidence < config.keypoint_conf_min {
            *kp = Keypoint::invisible(kp.type_id);
        }
    }
    (p.num_visible() > 0).then_some(p)
}

/// Greedy suppression: candidates are visited by descending mean keypoint
/// confidence (earlier index first on ties) and kept unless they reach the
/// OKS threshold against an already kept pose. Returns kept indices in
/// visiting order.
pub fn suppress_duplicates(candidates: &[Pose], config: &ToksConfig) -> Vec<usize> {
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    let conf: Vec<f64> = candidates.iter().map(Pose::mean_confidence).collect();
    order.sort_by(|&a, &b| conf[b].total_cmp(&conf[a]).then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        let dup = kept
            .iter()
            .any(|&k| mutual_oks(&candidates[i], &candidates[k], &config.sigmas) >= config.oks_threshold);
        if !dup {
            kept.push(i);
        }
    }
    kept
}

fn propagated_box(pose: &Pose, config: &ToksConfig, frame: FrameRef) -> Option<BBox> {
    let b = pose.bbox.or_else(|| pose.hull_box(0.1))?;
    dilate_box(&b, config.alpha)
        .ok()?
        .clamp_to(frame.width as f64, frame.height as f64)
}

/// Refines the detections of one frame given the poses of the adjacent
/// frame(s). Estimator failures skip the candidate.
pub fn toks_refine(
    previous: &[Pose],
    detections: &[Pose],
    frame: FrameRef,
    estimator: &mut dyn PoseEstimator,
    config: &ToksConfig,
) -> Result<Vec<Pose>> {
    config.validate()?;
    let mut candidates: Vec<Pose> = detections.to_vec();
    for prior in previous {
        let Some(bbox) = propagated_box(prior, config, frame) else {
            continue;
        };
        match estimator.estimate(frame, &bbox, prior) {
            Ok(p) => candidates.push(p),
            Err(e) => log::debug!("skipping propagated box: {e}"),
        }
    }
    let floored: Vec<Pose> = candidates.iter().filter_map(|p| apply_floors(p, config)).collect();
    let kept = suppress_duplicates(&floored, config);
    let mut out: Vec<Pose> = kept.into_iter().map(|i| floored[i].clone()).collect();
    for p in out.iter_mut() {
        p.frame_index = frame.index;
    }
    Ok(out)
}

/// Runs [`toks_refine`] over a whole detection sequence, propagating the
/// refined poses of each frame into the next.
pub fn refine_video(detections: &Sequence, estimator: &mut dyn PoseEstimator, config: &ToksConfig) -> Result<Sequence> {
    config.validate()?;
    let mut out = detections.clone();
    let mut previous: Vec<Pose> = Vec::new();
    for (i, frame) in detections.frames.iter().enumerate() {
        let fref = FrameRef {
            index: frame.index,
            width: detections.width,
            height: detections.height,
        };
        let mut sources = previous.clone();
        if config.use_next_frame {
            if let Some(next) = detections.frames.get(i + 1) {
                sources.extend(next.poses.iter().cloned());
            }
        }
        let refined = toks_refine(&sources, &frame.poses, fref, estimator, config)?;
        out.frames[i].poses = refined.clone();
        previous = refined;
    }
    Ok(out)
}

/// Mean over ground-truth poses of the best OKS any prediction reaches
/// against them (0 for a person nobody predicted).
pub fn mean_oks_to_truth(predicted: &Sequence, truth: &Sequence, sigmas: &JointSigmas) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for gt_frame in &truth.frames {
        let preds = predicted
            .frames
            .iter()
            .find(|f| f.index == gt_frame.index)
            .map(|f| f.poses.as_slice())
            .unwrap_or(&[]);
        for gt in &gt_frame.poses {
            let best = preds.iter().map(|p| oks(p, gt, sigmas).value).fold(0.0, f64::max);
            total += best;
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{generate_synthetic, DetectorNoise, SynthConfig};
    use crate::domain::test_util::grid_pose;

    const FRAME: FrameRef = FrameRef {
        index: 1,
        width: 640,
        height: 480,
    };

    fn with_conf(mut p: Pose, c: f64) -> Pose {
        for k in p.keypoints.iter_mut().filter(|k| k.visible) {
            k.confidence = c;
        }
        p.score = c;
        p
    }

    fn truth_of(poses: Vec<Vec<Pose>>) -> Sequence {
        let mut seq = Sequence::new("t", 640, 480, poses.len());
        for (t, ps) in poses.into_iter().enumerate() {
            seq.frames[t].poses = ps;
        }
        seq
    }

    #[test]
    fn empty_previous_frame_only_thresholds() {
        let a = with_conf(grid_pose(100.0, 100.0, 1), 0.9);
        let mut b = with_conf(grid_pose(400.0, 300.0, 1), 0.8);
        b.keypoints[3].confidence = 0.05;
        let low = with_conf(grid_pose(250.0, 200.0, 1), 0.15);
        let out = toks_refine(&[], &[a.clone(), b.clone(), low], FRAME, &mut IdentityEstimator, &ToksConfig::default()).unwrap();
        let floored_b = apply_floors(&b, &ToksConfig::default()).unwrap();
        assert!(!floored_b.keypoints[3].visible);
        assert_eq!(out, vec![a, floored_b]);
    }

    #[test]
    fn duplicate_keeps_more_confident() {
        let hi = with_conf(grid_pose(200.0, 200.0, 1), 0.9);
        let lo = with_conf(grid_pose(200.0, 200.0, 1).translated(2.0, 1.0), 0.6);
        let cfg = ToksConfig::default();
        let m = mutual_oks(&hi, &lo, &cfg.sigmas);
        assert!(m >= 0.8, "constructed pair has mutual OKS {m}");
        let out = toks_refine(&[], &[lo, hi.clone()], FRAME, &mut IdentityEstimator, &cfg).unwrap();
        assert_eq!(out, vec![hi]);
    }

    #[test]
    fn transitive_overlaps_resolved_greedily() {
        let cfg = ToksConfig::default();
        let a = with_conf(grid_pose(200.0, 200.0, 1), 0.9);
        let b = with_conf(grid_pose(200.0, 200.0, 1).translated(9.0, 0.0), 0.8);
        let c = with_conf(grid_pose(200.0, 200.0, 1).translated(18.0, 0.0), 0.7);
        let ab = mutual_oks(&a, &b, &cfg.sigmas);
        let ac = mutual_oks(&a, &c, &cfg.sigmas);
        let bc = mutual_oks(&b, &c, &cfg.sigmas);
        assert!(ab >= 0.35 && bc >= 0.35 && ac < 0.35, "{ab} {bc} {ac}");
        // b falls to a, after which c no longer overlaps anything kept
        let kept = suppress_duplicates(&[c.clone(), b, a.clone()], &cfg);
        assert_eq!(kept, vec![2, 0]);
    }

    #[test]
    fn missed_person_is_recovered() {
        let gt_prev = grid_pose(300.0, 240.0, 0);
        let gt_now = grid_pose(304.0, 240.0, 1);
        let other = grid_pose(100.0, 100.0, 1);
        let truth = truth_of(vec![vec![gt_prev.clone()], vec![gt_now.clone(), other.clone()]]);
        let mut est = OracleJitterEstimator::new(truth, 1.0, 0.0, 3).unwrap();
        let detections = vec![with_conf(other.clone(), 0.95)];
        let out = toks_refine(&[gt_prev], &detections, FRAME, &mut est, &ToksConfig::default()).unwrap();
        assert_eq!(out.len(), 2);
        let cfg = ToksConfig::default();
        let hits: Vec<f64> = out.iter().map(|p| oks(p, &gt_now, &cfg.sigmas).value).filter(|&v| v >= 0.9).collect();
        assert_eq!(hits.len(), 1, "{out:?}");
    }

    #[test]
    fn estimator_failure_is_skipped() {
        let truth = truth_of(vec![vec![], vec![]]);
        let mut est = OracleJitterEstimator::new(truth, 1.0, 0.0, 3).unwrap();
        let out = toks_refine(&[grid_pose(300.0, 240.0, 0)], &[], FRAME, &mut est, &ToksConfig::default()).unwrap();
        assert!(out.is_empty());
    }

    #[test]
    fn oracle_stays_inside_box() {
        let gt = grid_pose(300.0, 240.0, 1);
        let truth = truth_of(vec![vec![], vec![gt]]);
        let mut est = OracleJitterEstimator::new(truth, 4.0, 0.0, 9).unwrap();
        let bbox = BBox::new(278.0, 205.0, 40.0, 60.0).unwrap();
        for _ in 0..20 {
            let p = est.estimate(FRAME, &bbox, &grid_pose(0.0, 0.0, 0)).unwrap();
            assert!(p.visible().all(|k| bbox.contains(k.x, k.y)));
        }
    }

    #[test]
    fn unit_alpha_identity_is_dedup_threshold() {
        let cfg = ToksConfig {
            alpha: 1.0,
            ..ToksConfig::default()
        };
        let prev = vec![with_conf(grid_pose(200.0, 200.0, 0), 0.7), with_conf(grid_pose(500.0, 100.0, 0), 0.5)];
        let dets = vec![with_conf(grid_pose(201.0, 200.0, 1), 0.8), with_conf(grid_pose(50.0, 400.0, 1), 0.15)];
        let out = toks_refine(&prev, &dets, FRAME, &mut IdentityEstimator, &cfg).unwrap();
        let mut pool = dets.clone();
        pool.extend(prev.iter().map(|p| {
            let mut q = p.clone();
            q.frame_index = 1;
            q
        }));
        let floored: Vec<Pose> = pool.iter().filter_map(|p| apply_floors(p, &cfg)).collect();
        let expect: Vec<Pose> = suppress_duplicates(&floored, &cfg).into_iter().map(|i| floored[i].clone()).collect();
        assert_eq!(out, expect);
        assert_eq!(out.len(), 2);
    }

    fn noisy_corpus(seed: u64) -> crate::dataio::SynthOutput {
        let cfg = SynthConfig {
            num_frames: 30,
            seed,
            noise: DetectorNoise {
                missed_pose: 0.2,
                ..DetectorNoise::moderate()
            },
            ..SynthConfig::default()
        };
        generate_synthetic(&cfg, "toks").unwrap()
    }

    #[test]
    fn refined_output_has_no_duplicates() {
        let cfg = ToksConfig::default();
        for seed in 0..3 {
            let data = noisy_corpus(seed);
            let mut est = OracleJitterEstimator::new(data.ground_truth.clone(), 3.0, 0.05, seed).unwrap();
            let out = refine_video(&data.detected, &mut est, &cfg).unwrap();
            for f in &out.frames {
                for i in 0..f.poses.len() {
                    for j in i + 1..f.poses.len() {
                        assert!(mutual_oks(&f.poses[i], &f.poses[j], &cfg.sigmas) < cfg.oks_threshold);
                    }
                }
            }
        }
    }

    #[test]
    fn perfect_oracle_never_lowers_oks_to_truth() {
        let cfg = ToksConfig::default();
        for seed in 0..4 {
            let data = noisy_corpus(100 + seed);
            let mut est = OracleJitterEstimator::new(data.ground_truth.clone(), 0.0, 0.0, seed).unwrap();
            let out = refine_video(&data.detected, &mut est, &cfg).unwrap();
            let raw = mean_oks_to_truth(&data.detected, &data.ground_truth, &cfg.sigmas);
            let refined = mean_oks_to_truth(&out, &data.ground_truth, &cfg.sigmas);
            assert!(refined >= raw, "seed {seed}: {refined} < {raw}");
        }
    }

    #[test]
    fn next_frame_option_adds_sources() {
        let gt0 = grid_pose(300.0, 240.0, 0);
        let gt1 = grid_pose(303.0, 240.0, 1);
        let truth = truth_of(vec![vec![gt0.clone()], vec![gt1.clone()]]);
        let mut dets = truth.clone();
        dets.frames[0].poses.clear();
        let cfg = ToksConfig {
            use_next_frame: true,
            ..ToksConfig::default()
        };
        let mut est = OracleJitterEstimator::new(truth, 0.0, 0.0, 0).unwrap();
        let out = refine_video(&dets, &mut est, &cfg).unwrap();
        assert_eq!(out.frames[0].poses.len(), 1);
    }

    #[test]
    fn config_validation() {
        assert!(ToksConfig { alpha: 0.9, ..ToksConfig::default() }.validate().is_err());
        assert!(ToksConfig { oks_threshold: 1.5, ..ToksConfig::default() }.validate().is_err());
        assert!(ToksConfig::default().validate().is_ok());
    }
}
