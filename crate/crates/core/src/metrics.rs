//! Tracking and keypoint evaluation: per-joint MOTA, identity switches and
//! average precision.
//!
//! A predicted keypoint can only match a ground-truth keypoint of the same
//! joint within a gate of `threshold` times the ground-truth person's head
//! size. Within a frame, matches are chosen to be as many as possible; among
//! those, correspondences carried over from earlier frames are preferred, then
//! smaller total distance.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::Sequence;
use crate::domain::{Frame, Pose, HEAD_BOTTOM, HEAD_TOP, NUM_JOINTS};
use crate::tracker::hungarian_assignment;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("frame {0} is missing from the ground truth")]
    MissingTruthFrame(usize),
    #[error("frame {0} is missing from the predictions")]
    MissingPredictedFrame(usize),
    #[error("{stream} frame {frame}: pose {pose} has no track id")]
    MissingTrackId { stream: &'static str, frame: usize, pose: usize },
    #[error("invalid evaluation config: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// Report columns: label and member joints.
pub const JOINT_GROUPS: [(&str, &[usize]); 7] = [
    ("Head", &[0, 1, 2]),
    ("Shou", &[3, 4]),
    ("Elb", &[5, 6]),
    ("Wri", &[7, 8]),
    ("Hip", &[9, 10]),
    ("Knee", &[11, 12]),
    ("Ankl", &[13, 14]),
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MatchConfig {
    /// Gate as a fraction of head size.
    pub threshold: f64,
    /// Head size as a fraction of the keypoint hull height, used when a
    /// ground-truth pose lacks a visible head pair.
    pub fallback_head_ratio: f64,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            fallback_head_ratio: 1.0 / 6.0,
        }
    }
}

impl MatchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0) || !(self.fallback_head_ratio > 0.0) {
            return Err(MetricsError::Config("threshold and fallback_head_ratio must be positive".into()));
        }
        Ok(())
    }
}

/// Head size of a ground-truth pose: head-top to head-bottom distance, or a
/// fraction of the keypoint hull height when that pair is not visible.
pub fn head_size(pose: &Pose, config: &MatchConfig) -> f64 {
    let (top, bottom) = (&pose.keypoints[HEAD_TOP], &pose.keypoints[HEAD_BOTTOM]);
    if top.visible && bottom.visible {
        let d = top.distance(bottom);
        if d > 0.0 {
            return d;
        }
    }
    pose.keypoint_hull()
        .map(|(_, y0, _, y1)| (y1 - y0) * config.fallback_head_ratio)
        .filter(|&h| h > 0.0)
        .unwrap_or(1.0)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct JointCounts {
    pub gt: usize,
    pub predicted: usize,
    pub matches: usize,
    pub false_negatives: usize,
    pub false_positives: usize,
    pub id_switches: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotaReport {
    pub joints: [JointCounts; NUM_JOINTS],
}

impl MotaReport {
    /// `None` for a joint that never appears in the ground truth.
    pub fn joint_mota(&self, j: usize) -> Option<f64> {
        let c = &self.joints[j];
        (c.gt > 0).then(|| 1.0 - (c.false_negatives + c.false_positives + c.id_switches) as f64 / c.gt as f64)
    }

    pub fn joint_idsw_rate(&self, j: usize) -> Option<f64> {
        let c = &self.joints[j];
        (c.gt > 0).then(|| c.id_switches as f64 / c.gt as f64)
    }

    /// Mean of the per-joint MOTA values.
    pub fn total_mota(&self) -> f64 {
        mean_defined((0..NUM_JOINTS).map(|j| self.joint_mota(j)))
    }

    /// Mean of the per-joint identity switch rates (a fraction, not percent).
    pub fn total_idsw_rate(&self) -> f64 {
        mean_defined((0..NUM_JOINTS).map(|j| self.joint_idsw_rate(j)))
    }

    pub fn total_id_switches(&self) -> usize {
        self.joints.iter().map(|c| c.id_switches).sum()
    }

    /// Adds the counts of another (independent) video.
    pub fn merge(&mut self, other: &MotaReport) {
        for (a, b) in self.joints.iter_mut().zip(&other.joints) {
            a.gt += b.gt;
            a.predicted += b.predicted;
            a.matches += b.matches;
            a.false_negatives += b.false_negatives;
            a.false_positives += b.false_positives;
            a.id_switches += b.id_switches;
        }
    }
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> f64 {
    let v: Vec<f64> = values.flatten().collect();
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Pairs the frames of both streams by index; every frame of either stream
/// must exist in the other.
fn aligned<'a>(predicted: &'a Sequence, truth: &'a Sequence) -> Result<Vec<(&'a Frame, &'a Frame)>> {
    let by_index: HashMap<usize, &Frame> = predicted.frames.iter().map(|f| (f.index, f)).collect();
    let truth_indices: HashMap<usize, ()> = truth.frames.iter().map(|f| (f.index, ())).collect();
    if let Some(f) = predicted.frames.iter().find(|f| !truth_indices.contains_key(&f.index)) {
        return Err(MetricsError::MissingTruthFrame(f.index));
    }
    truth
        .frames
        .iter()
        .map(|g| {
            by_index
                .get(&g.index)
                .map(|p| (*p, g))
                .ok_or(MetricsError::MissingPredictedFrame(g.index))
        })
        .collect()
}

fn track_ids(frame: &Frame, stream: &'static str) -> Result<Vec<u32>> {
    frame
        .poses
        .iter()
        .enumerate()
        .map(|(i, p)| {
            p.track_id.ok_or(MetricsError::MissingTrackId {
                stream,
                frame: frame.index,
                pose: i,
            })
        })
        .collect()
}

/// Gated normalized distance between a predicted and a ground-truth keypoint
/// of joint `j`, or `None` if they cannot match.
fn gated_distance(pred: &Pose, gt: &Pose, j: usize, head: f64, config: &MatchConfig) -> Option<f64> {
    let (p, g) = (&pred.keypoints[j], &gt.keypoints[j]);
    if !(p.visible && g.visible) {
        return None;
    }
    let d = p.distance(g) / head;
    (d <= config.threshold).then_some(d)
}

/// Matching of one joint in one frame: for each ground-truth index, the
/// matched prediction index. Maximizes the number of matches, then the number
/// of `preferred` pairs kept, then minimizes total distance.
fn match_joint(dist: &[Vec<Option<f64>>], preferred: &[Option<usize>], threshold: f64) -> Vec<Option<usize>> {
    let n_edges = dist.iter().flatten().filter(|d| d.is_some()).count();
    if n_edges == 0 {
        return vec![None; dist.len()];
    }
    // Each tier outweighs everything below it summed over a whole matching.
    let tier_distance = 1.0;
    let tier_keep = (n_edges as f64 + 1.0) * tier_distance;
    let tier_match = (n_edges as f64 + 1.0) * (tier_keep + tier_distance);
    let weights: Vec<Vec<Option<f64>>> = dist
        .iter()
        .enumerate()
        .map(|(g, row)| {
            row.iter()
                .enumerate()
                .map(|(p, d)| {
                    d.map(|d| {
                        let keep = if preferred[g] == Some(p) { tier_keep } else { 0.0 };
                        tier_match + keep + tier_distance * (1.0 - d / (threshold * 2.0))
                    })
                })
                .collect()
        })
        .collect();
    hungarian_assignment(&weights)
}

/// Counts summed over several `(predicted, truth)` videos.
pub fn evaluate_mota_videos(videos: &[(&Sequence, &Sequence)], config: &MatchConfig) -> Result<MotaReport> {
    let mut total = MotaReport {
        joints: [JointCounts::default(); NUM_JOINTS],
    };
    for (p, t) in videos {
        total.merge(&evaluate_mota(p, t, config)?);
    }
    Ok(total)
}

/// Per-joint MOTA counts of a tracked prediction against ground truth.
pub fn evaluate_mota(predicted: &Sequence, truth: &Sequence, config: &MatchConfig) -> Result<MotaReport> {
    config.validate()?;
    let frames = aligned(predicted, truth)?;
    let mut joints = [JointCounts::default(); NUM_JOINTS];
    // last predicted id seen with each ground-truth track, per joint
    let mut last: Vec<HashMap<u32, u32>> = vec![HashMap::new(); NUM_JOINTS];
    for (pf, gf) in frames {
        let gt_ids = track_ids(gf, "ground truth")?;
        let pr_ids = track_ids(pf, "prediction")?;
        let heads: Vec<f64> = gf.poses.iter().map(|g| head_size(g, config)).collect();
        for j in 0..NUM_JOINTS {
            let gts: Vec<usize> = (0..gf.poses.len()).filter(|&i| gf.poses[i].keypoints[j].visible).collect();
            let prs: Vec<usize> = (0..pf.poses.len()).filter(|&i| pf.poses[i].keypoints[j].visible).collect();
            let dist: Vec<Vec<Option<f64>>> = gts
                .iter()
                .map(|&g| {
                    prs.iter()
                        .map(|&p| gated_distance(&pf.poses[p], &gf.poses[g], j, heads[g], config))
                        .collect()
                })
                .collect();
            let preferred: Vec<Option<usize>> = gts
                .iter()
                .map(|&g| {
                    let want = last[j].get(&gt_ids[g])?;
                    prs.iter().position(|&p| pr_ids[p] == *want)
                })
                .collect();
            let matched = match_joint(&dist, &preferred, config.threshold);
            let c = &mut joints[j];
            c.gt += gts.len();
            c.predicted += prs.len();
            let n_matched = matched.iter().flatten().count();
            c.matches += n_matched;
            c.false_negatives += gts.len() - n_matched;
            c.false_positives += prs.len() - n_matched;
            for (gi, m) in matched.iter().enumerate() {
                let Some(pi) = m else { continue };
                let (gid, pid) = (gt_ids[gts[gi]], pr_ids[prs[*pi]]);
                if let Some(prev) = last[j].insert(gid, pid) {
                    if prev != pid {
                        c.id_switches += 1;
                    }
                }
            }
        }
    }
    Ok(MotaReport { joints })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApReport {
    /// `None` for joints without ground truth.
    pub per_joint: [Option<f64>; NUM_JOINTS],
}

impl ApReport {
    pub fn total(&self) -> f64 {
        mean_defined(self.per_joint.iter().copied())
    }
}

/// Area under the precision-recall curve with the precision envelope
/// (all-points interpolation). `ranked` holds true/false positive flags in
/// descending confidence.
pub fn average_precision(ranked: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut points = Vec::with_capacity(ranked.len());
    for (i, &hit) in ranked.iter().enumerate() {
        tp += hit as usize;
        points.push((tp as f64 / num_gt as f64, tp as f64 / (i + 1) as f64));
    }
    let mut envelope = 0.0_f64;
    for p in points.iter_mut().rev() {
        envelope = envelope.max(p.1);
        p.1 = envelope;
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in points {
        ap += (r - prev_recall) * p;
        prev_recall = r;
    }
    ap
}

/// Per-joint AP. Within each frame, predictions are visited by descending
/// keypoint confidence and each takes the closest free ground-truth keypoint
/// inside the gate.
pub fn evaluate_ap(predicted: &Sequence, truth: &Sequence, config: &MatchConfig) -> Result<ApReport> {
    evaluate_ap_videos(&[(predicted, truth)], config)
}

/// AP with the detections of several `(predicted, truth)` videos ranked
/// together.
pub fn evaluate_ap_videos(videos: &[(&Sequence, &Sequence)], config: &MatchConfig) -> Result<ApReport> {
    config.validate()?;
    let mut frames = Vec::new();
    for (predicted, truth) in videos {
        frames.extend(aligned(predicted, truth)?);
    }
    let mut scored: Vec<Vec<(f64, bool)>> = vec![Vec::new(); NUM_JOINTS];
    let mut num_gt = [0usize; NUM_JOINTS];
    for (pf, gf) in frames {
        let heads: Vec<f64> = gf.poses.iter().map(|g| head_size(g, config)).collect();
        for j in 0..NUM_JOINTS {
            num_gt[j] += gf.poses.iter().filter(|g| g.keypoints[j].visible).count();
            let mut preds: Vec<usize> = (0..pf.poses.len()).filter(|&i| pf.poses[i].keypoints[j].visible).collect();
            preds.sort_by(|&a, &b| {
                pf.poses[b].keypoints[j]
                    .confidence
                    .total_cmp(&pf.poses[a].keypoints[j].confidence)
                    .then(a.cmp(&b))
            });
            let mut taken = vec![false; gf.poses.len()];
            for p in preds {
                let best = (0..gf.poses.len())
                    .filter(|&g| !taken[g])
                    .filter_map(|g| gated_distance(&pf.poses[p], &gf.poses[g], j, heads[g], config).map(|d| (d, g)))
                    .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                if let Some((_, g)) = best {
                    taken[g] = true;
                }
                scored[j].push((pf.poses[p].keypoints[j].confidence, best.is_some()));
            }
        }
    }
    let mut per_joint = [None; NUM_JOINTS];
    for j in 0..NUM_JOINTS {
        if num_gt[j] == 0 {
            continue;
        }
        // stable: equal confidences keep frame order
        scored[j].sort_by(|a, b| b.0.total_cmp(&a.0));
        let ranked: Vec<bool> = scored[j].iter().map(|s| s.1).collect();
        per_joint[j] = Some(average_precision(&ranked, num_gt[j]));
    }
    Ok(ApReport { per_joint })
}

/// Hides every keypoint whose confidence is below `threshold`.
pub fn threshold_keypoints(seq: &Sequence, threshold: f64) -> Sequence {
    let mut out = seq.clone();
    for kp in out.frames.iter_mut().flat_map(|f| f.poses.iter_mut()).flat_map(|p| p.keypoints.iter_mut()) {
        if kp.visible && kp.confidence < threshold {
            kp.visible = false;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub threshold: f64,
    pub ap: f64,
    pub idsw_rate: f64,
    pub mota: f64,
}

pub fn sweep_confidence_threshold(
    predicted: &Sequence,
    truth: &Sequence,
    thresholds: &[f64],
    config: &MatchConfig,
) -> Result<Vec<SweepRow>> {
    sweep_videos(&[(predicted, truth)], thresholds, config)
}

/// One row per threshold with keypoints below it removed from every
/// prediction first.
pub fn sweep_videos(videos: &[(&Sequence, &Sequence)], thresholds: &[f64], config: &MatchConfig) -> Result<Vec<SweepRow>> {
    thresholds
        .iter()
        .map(|&t| {
            let filtered: Vec<Sequence> = videos.iter().map(|(p, _)| threshold_keypoints(p, t)).collect();
            let pairs: Vec<(&Sequence, &Sequence)> = filtered.iter().zip(videos).map(|(p, (_, g))| (p, *g)).collect();
            let mota = evaluate_mota_videos(&pairs, config)?;
            let ap = evaluate_ap_videos(&pairs, config)?;
            Ok(SweepRow {
                threshold: t,
                ap: ap.total(),
                idsw_rate: mota.total_idsw_rate(),
                mota: mota.total_mota(),
            })
        })
        .collect()
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("threshold,ap,idsw_pct,mota\n");
    for r in rows {
        let _ = writeln!(out, "{:.4},{:.4},{:.4},{:.4}", r.threshold, 100.0 * r.ap, 100.0 * r.idsw_rate, 100.0 * r.mota);
    }
    out
}

fn grouped(values: impl Fn(usize) -> Option<f64>, total: f64) -> Vec<f64> {
    let mut row: Vec<f64> = JOINT_GROUPS
        .iter()
        .map(|(_, members)| mean_defined(members.iter().map(|&j| values(j))))
        .collect();
    row.push(total);
    row
}

/// Rows of the summary table, values in percent.
pub fn report_rows(mota: &MotaReport, ap: Option<&ApReport>) -> Vec<(&'static str, Vec<f64>)> {
    let pct = |v: Vec<f64>| v.into_iter().map(|x| 100.0 * x).collect::<Vec<_>>();
    let mut rows = vec![
        ("MOTA", pct(grouped(|j| mota.joint_mota(j), mota.total_mota()))),
        ("%IDSW", pct(grouped(|j| mota.joint_idsw_rate(j), mota.total_idsw_rate()))),
    ];
    if let Some(ap) = ap {
        rows.push(("AP", pct(grouped(|j| ap.per_joint[j], ap.total()))));
    }
    rows
}

fn header() -> Vec<&'static str> {
    let mut h: Vec<&str> = JOINT_GROUPS.iter().map(|(n, _)| *n).collect();
    h.push("Total");
    h
}

pub fn report_csv(mota: &MotaReport, ap: Option<&ApReport>) -> String {
    let mut out = format!("metric,{}\n", header().join(","));
    for (name, values) in report_rows(mota, ap) {
        let cells: Vec<String> = values.iter().map(|v| format!("{v:.4}")).collect();
        let _ = writeln!(out, "{name},{}", cells.join(","));
    }
    out
}

pub fn report_text(mota: &MotaReport, ap: Option<&ApReport>) -> String {
    let mut out = format!("{:<6}", "");
    for h in header() {
        let _ = write!(out, " {h:>6}");
    }
    out.push('\n');
    for (name, values) in report_rows(mota, ap) {
        let _ = write!(out, "{name:<6}");
        for v in values {
            let _ = write!(out, " {v:>6.1}");
        }
        out.push('\n');
    }
    out
}

/// Raw per-joint counts, one row per joint.
pub fn counts_csv(mota: &MotaReport) -> String {
    let mut out = String::from("joint,gt,predicted,matches,fn,fp,idsw,mota\n");
    for (j, c) in mota.joints.iter().enumerate() {
        let m = mota.joint_mota(j).map(|v| format!("{v:.6}")).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            crate::domain::JOINT_NAMES[j],
            c.gt,
            c.predicted,
            c.matches,
            c.false_negatives,
            c.false_positives,
            c.id_switches,
            m
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::test_util::grid_pose;
    use crate::domain::Keypoint;

    fn person(x: f64, y: f64, frame: usize, id: u32) -> Pose {
        let mut p = grid_pose(x, y, frame);
        p.track_id = Some(id);
        // head pair 10 px apart in grid_pose; widen to 20 for a 10 px gate
        p.keypoints[HEAD_TOP] = Keypoint::new(HEAD_TOP as u8 + 1, x, y - 40.0, 1.0, true);
        p.keypoints[HEAD_BOTTOM] = Keypoint::new(HEAD_BOTTOM as u8 + 1, x, y - 20.0, 1.0, true);
        p
    }

    fn seq(frames: Vec<Vec<Pose>>) -> Sequence {
        let mut s = Sequence::new("m", 640, 480, frames.len());
        for (t, poses) in frames.into_iter().enumerate() {
            s.frames[t].poses = poses;
        }
        s
    }

    fn walk(id: u32, x0: f64, n: usize) -> Vec<Pose> {
        (0..n).map(|t| person(x0 + 5.0 * t as f64, 200.0, t, id)).collect()
    }

    fn transpose(tracks: Vec<Vec<Pose>>, n: usize) -> Vec<Vec<Pose>> {
        (0..n).map(|t| tracks.iter().filter_map(|tr| tr.get(t).cloned()).collect()).collect()
    }

    #[test]
    fn perfect_predictions() {
        let gt = seq(transpose(vec![walk(0, 100.0, 5), walk(1, 400.0, 5)], 5));
        let pred = seq(transpose(vec![walk(7, 100.0, 5), walk(3, 400.0, 5)], 5));
        let m = evaluate_mota(&pred, &gt, &MatchConfig::default()).unwrap();
        assert_eq!(m.total_mota(), 1.0);
        assert_eq!(m.total_idsw_rate(), 0.0);
        let ap = evaluate_ap(&pred, &gt, &MatchConfig::default()).unwrap();
        assert_eq!(ap.total(), 1.0);
    }

    #[test]
    fn one_switch_in_ten() {
        let gt = seq(transpose(vec![walk(0, 100.0, 10)], 10));
        let mut pred = gt.clone();
        for f in pred.frames.iter_mut().skip(5) {
            f.poses[0].track_id = Some(9);
        }
        let m = evaluate_mota(&pred, &gt, &MatchConfig::default()).unwrap();
        for j in 0..NUM_JOINTS {
            assert_eq!(m.joints[j].gt, 10);
            assert_eq!(m.joints[j].id_switches, 1);
            assert_eq!((m.joints[j].false_negatives, m.joints[j].false_positives), (0, 0));
            assert!((m.joint_mota(j).unwrap() - 0.9).abs() < 1e-12);
        }
        assert!((m.total_idsw_rate() - 0.1).abs() < 1e-12);
    }

    #[test]
    fn half_missed_gives_half_ap() {
        let gt = seq(transpose(vec![walk(0, 100.0, 10)], 10));
        let mut pred = gt.clone();
        for f in pred.frames.iter_mut().step_by(2) {
            f.poses.clear();
        }
        let ap = evaluate_ap(&pred, &gt, &MatchConfig::default()).unwrap();
        for j in 0..NUM_JOINTS {
            assert!((ap.per_joint[j].unwrap() - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn ap_envelope() {
        // hits at ranks 1 and 3 of 2 GT: precision envelope 1, then 2/3
        let ap = average_precision(&[true, false, true], 2);
        assert!((ap - (0.5 * 1.0 + 0.5 * 2.0 / 3.0)).abs() < 1e-12);
        assert_eq!(average_precision(&[], 3), 0.0);
    }

    #[test]
    fn missing_frames_are_fatal() {
        let gt = seq(vec![vec![], vec![]]);
        let mut pred = gt.clone();
        pred.frames.pop();
        assert_eq!(evaluate_mota(&pred, &gt, &MatchConfig::default()).unwrap_err(), MetricsError::MissingPredictedFrame(1));
        let mut extra = gt.clone();
        extra.frames.push(Frame::new(5, 640, 480));
        assert_eq!(evaluate_mota(&extra, &gt, &MatchConfig::default()).unwrap_err(), MetricsError::MissingTruthFrame(5));
    }

    #[test]
    fn untracked_prediction_rejected() {
        let gt = seq(transpose(vec![walk(0, 100.0, 2)], 2));
        let pred = gt.without_track_ids();
        assert!(matches!(
            evaluate_mota(&pred, &gt, &MatchConfig::default()),
            Err(MetricsError::MissingTrackId { .. })
        ));
    }

    #[test]
    fn gate_scales_with_head() {
        let gt = seq(vec![vec![person(100.0, 200.0, 0, 0)]]);
        // head size 20, gate 10 px
        for (shift, hit) in [(9.9, true), (10.1, false)] {
            let pred = seq(vec![vec![person(100.0 + shift, 200.0, 0, 0)]]);
            let m = evaluate_mota(&pred, &gt, &MatchConfig::default()).unwrap();
            assert_eq!(m.joints[5].matches == 1, hit, "shift {shift}");
        }
    }

    #[test]
    fn report_layout() {
        let gt = seq(transpose(vec![walk(0, 100.0, 3)], 3));
        let m = evaluate_mota(&gt, &gt, &MatchConfig::default()).unwrap();
        let ap = evaluate_ap(&gt, &gt, &MatchConfig::default()).unwrap();
        let csv = report_csv(&m, Some(&ap));
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("metric,Head,Shou,Elb,Wri,Hip,Knee,Ankl,Total"));
        assert_eq!(lines.next(), Some("MOTA,100.0000,100.0000,100.0000,100.0000,100.0000,100.0000,100.0000,100.0000"));
        assert!(report_text(&m, Some(&ap)).contains("Total"));
        assert_eq!(counts_csv(&m).lines().count(), 16);
    }

    #[test]
    fn raising_threshold_never_adds_false_positives() {
        let data = crate::dataio::generate_synthetic(
            &crate::dataio::SynthConfig {
                num_frames: 20,
                seed: 4,
                ..Default::default()
            },
            "s",
        )
        .unwrap();
        let pred = data.labeled_detections;
        let gt = data.ground_truth;
        let mut last = usize::MAX;
        for t in [0.0, 0.2, 0.4, 0.6, 0.8, 0.95] {
            let m = evaluate_mota(&threshold_keypoints(&pred, t), &gt, &MatchConfig::default()).unwrap();
            let fp: usize = m.joints.iter().map(|c| c.false_positives).sum();
            assert!(fp <= last, "threshold {t}: {fp} > {last}");
            last = fp;
        }
        let rows = sweep_confidence_threshold(&pred, &gt, &[0.1, 0.5], &MatchConfig::default()).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(sweep_csv(&rows).starts_with("threshold,ap,idsw_pct,mota\n"));
    }

    #[test]
    fn relabeling_predictions_changes_nothing() {
        let data = crate::dataio::generate_synthetic(
            &crate::dataio::SynthConfig {
                num_frames: 15,
                seed: 8,
                ..Default::default()
            },
            "s",
        )
        .unwrap();
        let pred = data.labeled_detections;
        let mut relabeled = pred.clone();
        for p in relabeled.frames.iter_mut().flat_map(|f| f.poses.iter_mut()) {
            p.track_id = p.track_id.map(|id| 1000 - 3 * id);
        }
        let cfg = MatchConfig::default();
        assert_eq!(
            evaluate_mota(&pred, &data.ground_truth, &cfg).unwrap(),
            evaluate_mota(&relabeled, &data.ground_truth, &cfg).unwrap()
        );
    }
}
