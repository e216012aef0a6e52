//! Independent recount of MOTA, identity switches and AP by exhaustive
//! enumeration, plus hand-built three-frame micro-sequences.

use std::collections::HashMap;

use posetrack::dataio::Sequence;
use posetrack::domain::{Keypoint, Pose, HEAD_BOTTOM, HEAD_TOP, NUM_JOINTS};

pub const GATE: f64 = 0.5;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Counts {
    pub gt: usize,
    pub fn_: usize,
    pub fp: usize,
    pub idsw: usize,
}

fn head(p: &Pose) -> f64 {
    let (a, b) = (&p.keypoints[HEAD_TOP], &p.keypoints[HEAD_BOTTOM]);
    ((a.x - b.x).powi(2) + (a.y - b.y).powi(2)).sqrt()
}

fn dist(pred: &Pose, gt: &Pose, j: usize) -> Option<f64> {
    let (p, g) = (&pred.keypoints[j], &gt.keypoints[j]);
    if !(p.visible && g.visible) {
        return None;
    }
    let d = ((p.x - g.x).powi(2) + (p.y - g.y).powi(2)).sqrt() / head(gt);
    (d <= GATE).then_some(d)
}

/// Every partial one-to-one matching of `rows` onto `cols` using allowed
/// edges; returns the one maximizing (size, kept, -distance).
fn best_matching(
    allowed: &[Vec<Option<f64>>],
    preferred: &[Option<usize>],
) -> Vec<Option<usize>> {
    fn go(
        r: usize,
        allowed: &[Vec<Option<f64>>],
        preferred: &[Option<usize>],
        used: &mut Vec<bool>,
        cur: &mut Vec<Option<usize>>,
        best: &mut Option<((usize, usize, f64), Vec<Option<usize>>)>,
    ) {
        if r == allowed.len() {
            let size = cur.iter().flatten().count();
            let kept = cur.iter().enumerate().filter(|(i, c)| c.is_some() && **c == preferred[*i]).count();
            let d: f64 = cur.iter().enumerate().filter_map(|(i, c)| c.map(|c| allowed[i][c].unwrap())).sum();
            let better = match best {
                None => true,
                Some(((s, k, bd), _)) => (size, kept) > (*s, *k) || ((size, kept) == (*s, *k) && d < *bd),
            };
            if better {
                *best = Some(((size, kept, d), cur.clone()));
            }
            return;
        }
        cur.push(None);
        go(r + 1, allowed, preferred, used, cur, best);
        cur.pop();
        for c in 0..used.len() {
            if !used[c] && allowed[r][c].is_some() {
                used[c] = true;
                cur.push(Some(c));
                go(r + 1, allowed, preferred, used, cur, best);
                cur.pop();
                used[c] = false;
            }
        }
    }
    let cols = allowed.first().map(Vec::len).unwrap_or(0);
    let mut best = None;
    go(0, allowed, preferred, &mut vec![false; cols], &mut Vec::new(), &mut best);
    best.map(|(_, m)| m).unwrap_or_default()
}

/// Per-joint FN/FP/IDSW recount.
pub fn recount_mota(pred: &Sequence, gt: &Sequence) -> [Counts; NUM_JOINTS] {
    let mut out = [Counts::default(); NUM_JOINTS];
    for j in 0..NUM_JOINTS {
        let mut last: HashMap<u32, u32> = HashMap::new();
        for (t, gf) in gt.frames.iter().enumerate() {
            let pf = &pred.frames[t];
            let gts: Vec<&Pose> = gf.poses.iter().filter(|p| p.keypoints[j].visible).collect();
            let prs: Vec<&Pose> = pf.poses.iter().filter(|p| p.keypoints[j].visible).collect();
            let allowed: Vec<Vec<Option<f64>>> =
                gts.iter().map(|g| prs.iter().map(|p| dist(p, g, j)).collect()).collect();
            let preferred: Vec<Option<usize>> = gts
                .iter()
                .map(|g| {
                    let want = last.get(&g.track_id.unwrap())?;
                    prs.iter().position(|p| p.track_id == Some(*want))
                })
                .collect();
            let m = best_matching(&allowed, &preferred);
            let n = m.iter().flatten().count();
            out[j].gt += gts.len();
            out[j].fn_ += gts.len() - n;
            out[j].fp += prs.len() - n;
            for (gi, c) in m.iter().enumerate() {
                if let Some(c) = c {
                    let (gid, pid) = (gts[gi].track_id.unwrap(), prs[*c].track_id.unwrap());
                    if last.insert(gid, pid).is_some_and(|prev| prev != pid) {
                        out[j].idsw += 1;
                    }
                }
            }
        }
    }
    out
}

pub fn mota_of(c: &Counts) -> f64 {
    1.0 - (c.fn_ + c.fp + c.idsw) as f64 / c.gt as f64
}

/// AP recount: for every distinct confidence level, rerun the in-frame greedy
/// matching with only the predictions at or above it and take precision and
/// recall directly; then integrate the precision envelope over recall.
pub fn recount_ap(pred: &Sequence, gt: &Sequence) -> [Option<f64>; NUM_JOINTS] {
    let mut out = [None; NUM_JOINTS];
    for j in 0..NUM_JOINTS {
        let num_gt: usize = gt.frames.iter().map(|f| f.poses.iter().filter(|p| p.keypoints[j].visible).count()).sum();
        if num_gt == 0 {
            continue;
        }
        let mut levels: Vec<f64> = pred
            .frames
            .iter()
            .flat_map(|f| f.poses.iter())
            .filter(|p| p.keypoints[j].visible)
            .map(|p| p.keypoints[j].confidence)
            .collect();
        levels.sort_by(|a, b| b.total_cmp(a));
        levels.dedup();
        let mut pr = Vec::new();
        for &level in &levels {
            let (mut tp, mut n) = (0usize, 0usize);
            for (t, gf) in gt.frames.iter().enumerate() {
                let mut prs: Vec<&Pose> = pred.frames[t]
                    .poses
                    .iter()
                    .filter(|p| p.keypoints[j].visible && p.keypoints[j].confidence >= level)
                    .collect();
                prs.sort_by(|a, b| b.keypoints[j].confidence.total_cmp(&a.keypoints[j].confidence));
                let mut taken = vec![false; gf.poses.len()];
                for p in prs {
                    n += 1;
                    let mut best: Option<(f64, usize)> = None;
                    for (g, gp) in gf.poses.iter().enumerate() {
                        if let (false, Some(d)) = (taken[g], dist(p, gp, j)) {
                            if best.is_none_or(|(bd, _)| d < bd) {
                                best = Some((d, g));
                            }
                        }
                    }
                    if let Some((_, g)) = best {
                        taken[g] = true;
                        tp += 1;
                    }
                }
            }
            pr.push((tp as f64 / num_gt as f64, tp as f64 / n as f64));
        }
        let mut ap = 0.0;
        let mut prev = 0.0;
        for k in 0..pr.len() {
            let envelope = pr[k..].iter().map(|x| x.1).fold(0.0, f64::max);
            ap += (pr[k].0 - prev) * envelope;
            prev = pr[k].0;
        }
        out[j] = Some(ap);
    }
    out
}

/// A person with a 20 px head (gate 10 px) whose joints sit on a grid.
pub fn person(x: f64, y: f64, id: u32, conf: f64) -> Pose {
    let kps = (0..NUM_JOINTS)
        .map(|j| {
            let (dx, dy) = match j {
                HEAD_TOP => (0.0, -40.0),
                HEAD_BOTTOM => (0.0, -20.0),
                _ => ((j % 3) as f64 * 12.0 - 12.0, (j / 3) as f64 * 14.0),
            };
            Keypoint::new(j as u8 + 1, x + dx, y + dy, conf, true)
        })
        .collect();
    Pose::new(kps, None, Some(id), 0).unwrap()
}

fn hide(mut p: Pose, joints: &[usize]) -> Pose {
    for &j in joints {
        p.keypoints[j].visible = false;
    }
    p
}

fn seq(frames: Vec<Vec<Pose>>) -> Sequence {
    let mut s = Sequence::new("micro", 640, 480, frames.len());
    for (t, mut poses) in frames.into_iter().enumerate() {
        for p in poses.iter_mut() {
            p.frame_index = t;
        }
        s.frames[t].poses = poses;
    }
    s
}

/// Ten (name, prediction, ground truth) micro-sequences of three frames.
pub fn micro_sequences() -> Vec<(&'static str, Sequence, Sequence)> {
    let a = |t: f64| person(100.0 + 4.0 * t, 200.0, 0, 0.9);
    let b = |t: f64| person(300.0 - 4.0 * t, 200.0, 1, 0.9);
    let gt2 = seq((0..3).map(|t| vec![a(t as f64), b(t as f64)]).collect());
    let with_ids = |ids: [[u32; 2]; 3]| {
        seq((0..3)
            .map(|t| {
                let mut pa = a(t as f64);
                let mut pb = b(t as f64);
                pa.track_id = Some(ids[t][0]);
                pb.track_id = Some(ids[t][1]);
                vec![pa, pb]
            })
            .collect())
    };
    let shifted = |p: Pose, dx: f64, dy: f64, conf: f64| {
        let mut q = p.translated(dx, dy);
        q.keypoints.iter_mut().for_each(|k| k.confidence = conf);
        q
    };
    let retag = |mut p: Pose, id: u32| {
        p.track_id = Some(id);
        p
    };
    vec![
        ("perfect", with_ids([[5, 6], [5, 6], [5, 6]]), gt2.clone()),
        ("swap at last frame", with_ids([[5, 6], [5, 6], [6, 5]]), gt2.clone()),
        ("fragment and return", with_ids([[5, 6], [7, 6], [5, 6]]), gt2.clone()),
        (
            "missed person",
            seq(vec![vec![a(0.0), b(0.0)], vec![a(1.0)], vec![a(2.0), b(2.0)]]),
            gt2.clone(),
        ),
        (
            "extra false positive",
            seq(vec![
                vec![a(0.0), b(0.0)],
                vec![a(1.0), b(1.0), retag(shifted(a(1.0), 0.0, 150.0, 0.3), 9)],
                vec![a(2.0), b(2.0)],
            ]),
            gt2.clone(),
        ),
        (
            "outside the gate",
            seq(vec![
                vec![a(0.0), b(0.0)],
                vec![shifted(a(1.0), 11.0, 0.0, 0.8), b(1.0)],
                vec![shifted(a(2.0), 6.0, 3.0, 0.7), b(2.0)],
            ]),
            gt2.clone(),
        ),
        (
            "duplicate detection",
            seq(vec![
                vec![a(0.0), retag(shifted(a(0.0), 3.0, 1.0, 0.95), 4), b(0.0)],
                vec![a(1.0), b(1.0)],
                vec![a(2.0), b(2.0), retag(shifted(b(2.0), -2.0, 2.0, 0.6), 8)],
            ]),
            gt2.clone(),
        ),
        (
            "partial keypoints",
            seq(vec![
                vec![hide(a(0.0), &[7, 8, 13]), b(0.0)],
                vec![a(1.0), hide(b(1.0), &[0, 1, 2])],
                vec![hide(a(2.0), &[3]), hide(b(2.0), &[14])],
            ]),
            gt2.clone(),
        ),
        (
            "late arrival",
            seq(vec![vec![a(0.0)], vec![a(1.0), retag(b(1.0), 3)], vec![a(2.0), retag(b(2.0), 3)]]),
            seq(vec![vec![a(0.0)], vec![a(1.0), b(1.0)], vec![a(2.0), b(2.0)]]),
        ),
        (
            "crossing ambiguity",
            {
                // at frame 2 both predictions fall inside both gates and the
                // closer pairing contradicts the earlier identities
                let c = |x: f64, id: u32, conf: f64| person(x, 200.0, id, conf);
                seq(vec![
                    vec![c(100.0, 0, 0.9), c(130.0, 1, 0.8)],
                    vec![c(110.0, 0, 0.9), c(121.0, 1, 0.85)],
                    vec![c(113.0, 1, 0.7), c(117.0, 0, 0.75)],
                ])
            },
            {
                let c = |x: f64, id: u32| person(x, 200.0, id, 1.0);
                seq(vec![
                    vec![c(100.0, 0), c(130.0, 1)],
                    vec![c(110.0, 0), c(120.0, 1)],
                    vec![c(114.0, 0), c(116.0, 1)],
                ])
            },
        ),
    ]
}
