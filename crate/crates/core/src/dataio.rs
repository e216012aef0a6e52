//! Keypoint sequence files, the synthetic sequence generator, and a converter
//! for PoseTrack-style annotation JSON.
//!
//! # Sequence file format (schema version 1)
//!
//! ```json
//! {
//!   "schema_version": 1,
//!   "video_id": "synth_0000",
//!   "frame_width": 640,
//!   "frame_height": 480,
//!   "joints": { "nose": 1, "head_bottom": 2, ... },
//!   "frames": [
//!     { "index": 0,
//!       "poses": [ { "track_id": 0, "score": 1.0, "bbox": [x, y, w, h],
//!                    "keypoints": [[x, y, confidence, visible], ...] } ] }
//!   ]
//! }
//! ```
//!
//! `joints` maps each of the 15 joint names to the 1-based position of that
//! joint inside every `keypoints` array, so files may use their own order.
//! `track_id`, `score` and `bbox` are optional. Frame indices are contiguous
//! from the first frame.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::domain::{BBox, Frame, Keypoint, Pose, JOINT_NAMES, NUM_JOINTS};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{context}: line {line}, column {column}: {msg}")]
    Parse {
        context: String,
        line: usize,
        column: usize,
        msg: String,
    },
    #[error("{context}: {field}: {msg}")]
    Schema {
        context: String,
        field: String,
        msg: String,
    },
    #[error("synthetic config: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// A video's worth of frames plus the metadata stored alongside them.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub video_id: String,
    pub width: u32,
    pub height: u32,
    pub frames: Vec<Frame>,
}

impl Sequence {
    pub fn new(video_id: impl Into<String>, width: u32, height: u32, num_frames: usize) -> Self {
        Self {
            video_id: video_id.into(),
            width,
            height,
            frames: (0..num_frames).map(|i| Frame::new(i, width, height)).collect(),
        }
    }

    pub fn num_poses(&self) -> usize {
        self.frames.iter().map(|f| f.poses.len()).sum()
    }

    pub fn without_track_ids(&self) -> Sequence {
        let mut out = self.clone();
        for p in out.frames.iter_mut().flat_map(|f| f.poses.iter_mut()) {
            p.track_id = None;
        }
        out
    }
}

#[derive(Serialize, Deserialize)]
struct FileDoc {
    schema_version: u32,
    video_id: String,
    frame_width: u32,
    frame_height: u32,
    joints: BTreeMap<String, usize>,
    frames: Vec<FrameDoc>,
}

#[derive(Serialize, Deserialize)]
struct FrameDoc {
    index: usize,
    poses: Vec<PoseDoc>,
}

#[derive(Serialize, Deserialize)]
struct PoseDoc {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    track_id: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bbox: Option<[f64; 4]>,
    keypoints: Vec<[f64; 4]>,
}

fn schema_err(context: &str, field: impl Into<String>, msg: impl Into<String>) -> DataError {
    DataError::Schema {
        context: context.to_string(),
        field: field.into(),
        msg: msg.into(),
    }
}

/// Serializes to the sequence file format with joints in internal order.
pub fn to_json(seq: &Sequence) -> String {
    let doc = FileDoc {
        schema_version: SCHEMA_VERSION,
        video_id: seq.video_id.clone(),
        frame_width: seq.width,
        frame_height: seq.height,
        joints: JOINT_NAMES.iter().enumerate().map(|(i, n)| (n.to_string(), i + 1)).collect(),
        frames: seq
            .frames
            .iter()
            .map(|f| FrameDoc {
                index: f.index,
                poses: f
                    .poses
                    .iter()
                    .map(|p| PoseDoc {
                        track_id: p.track_id,
                        score: (p.score != 1.0).then_some(p.score),
                        bbox: p.bbox.map(|b| [b.x, b.y, b.width, b.height]),
                        keypoints: p
                            .keypoints
                            .iter()
                            .map(|k| [k.x, k.y, k.confidence, if k.visible { 1.0 } else { 0.0 }])
                            .collect(),
                    })
                    .collect(),
            })
            .collect(),
    };
    let mut text = serde_json::to_string_pretty(&doc).expect("sequence serializes");
    text.push('\n');
    text
}

/// Parses and validates a sequence document. `context` names the source in
/// error messages.
pub fn from_json(text: &str, context: &str) -> Result<Sequence> {
    let doc: FileDoc = serde_json::from_str(text).map_err(|e| DataError::Parse {
        context: context.to_string(),
        line: e.line(),
        column: e.column(),
        msg: e.to_string(),
    })?;
    if doc.schema_version != SCHEMA_VERSION {
        return Err(schema_err(
            context,
            "schema_version",
            format!("unsupported version {}, expected {SCHEMA_VERSION}", doc.schema_version),
        ));
    }
    if doc.frame_width == 0 || doc.frame_height == 0 {
        return Err(schema_err(context, "frame_width/frame_height", "must be positive"));
    }
    // file column -> internal type id
    let mut column_of = [usize::MAX; NUM_JOINTS];
    for (name, &col) in &doc.joints {
        let Some(internal) = JOINT_NAMES.iter().position(|n| n == name) else {
            return Err(schema_err(context, format!("joints.{name}"), "unknown joint name"));
        };
        if !(1..=NUM_JOINTS).contains(&col) {
            return Err(schema_err(context, format!("joints.{name}"), format!("index {col} outside 1..=15")));
        }
        column_of[internal] = col - 1;
    }
    if let Some(missing) = column_of.iter().position(|&c| c == usize::MAX) {
        return Err(schema_err(
            context,
            "joints",
            format!("missing joint '{}' ({} of 15 joints declared)", JOINT_NAMES[missing], doc.joints.len()),
        ));
    }
    let mut seen = [false; NUM_JOINTS];
    for &c in &column_of {
        if std::mem::replace(&mut seen[c], true) {
            return Err(schema_err(context, "joints", format!("index {} assigned twice", c + 1)));
        }
    }

    let first = doc.frames.first().map(|f| f.index).unwrap_or(0);
    let mut frames = Vec::with_capacity(doc.frames.len());
    for (fi, fdoc) in doc.frames.into_iter().enumerate() {
        let field = |rest: &str| format!("frames[{fi}]{rest}");
        if fdoc.index != first + fi {
            return Err(schema_err(
                context,
                field(".index"),
                format!("expected {} (indices must be contiguous), got {}", first + fi, fdoc.index),
            ));
        }
        let mut frame = Frame::new(fdoc.index, doc.frame_width, doc.frame_height);
        for (pi, pdoc) in fdoc.poses.into_iter().enumerate() {
            let pf = |rest: &str| field(&format!(".poses[{pi}]{rest}"));
            if pdoc.keypoints.len() != NUM_JOINTS {
                return Err(schema_err(
                    context,
                    pf(".keypoints"),
                    format!("expected {NUM_JOINTS} entries, got {}", pdoc.keypoints.len()),
                ));
            }
            let mut kps = Vec::with_capacity(NUM_JOINTS);
            for (internal, &col) in column_of.iter().enumerate() {
                let [x, y, c, v] = pdoc.keypoints[col];
                let visible = v > 0.0;
                if visible && !(x.is_finite() && y.is_finite()) {
                    return Err(schema_err(context, pf(&format!(".keypoints[{col}]")), "non-finite coordinate"));
                }
                if !(0.0..=1.0).contains(&c) {
                    return Err(schema_err(
                        context,
                        pf(&format!(".keypoints[{col}]")),
                        format!("confidence {c} outside [0, 1]"),
                    ));
                }
                kps.push(Keypoint::new(internal as u8 + 1, x, y, c, visible));
            }
            let bbox = match pdoc.bbox {
                None => None,
                Some([x, y, w, h]) => Some(
                    BBox::new(x, y, w, h).map_err(|e| schema_err(context, pf(".bbox"), e.to_string()))?,
                ),
            };
            let mut pose = Pose::new(kps, bbox, pdoc.track_id, fdoc.index)
                .map_err(|e| schema_err(context, pf(""), e.to_string()))?;
            pose.score = pdoc.score.unwrap_or(1.0);
            frame.poses.push(pose);
        }
        frame
            .validate()
            .map_err(|e| schema_err(context, field(""), e.to_string()))?;
        frames.push(frame);
    }
    Ok(Sequence {
        video_id: doc.video_id,
        width: doc.frame_width,
        height: doc.frame_height,
        frames,
    })
}

pub fn save_sequence(seq: &Sequence, path: &Path) -> Result<()> {
    std::fs::write(path, to_json(seq)).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_sequence(path: &Path) -> Result<Sequence> {
    let text = std::fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    from_json(&text, &path.display().to_string())
}

/// Converts a PoseTrack-style annotation document (`images`, `annotations`
/// with flat `[x, y, v]` keypoint triples, `categories[0].keypoints` names)
/// into a sequence. Joints outside the 15-joint skeleton (ears) are dropped.
pub fn import_posetrack(text: &str, video_id: &str, width: u32, height: u32) -> Result<Sequence> {
    let ctx = format!("posetrack:{video_id}");
    let root: Value = serde_json::from_str(text).map_err(|e| DataError::Parse {
        context: ctx.clone(),
        line: e.line(),
        column: e.column(),
        msg: e.to_string(),
    })?;
    let names: Vec<String> = root["categories"][0]["keypoints"]
        .as_array()
        .ok_or_else(|| schema_err(&ctx, "categories[0].keypoints", "missing keypoint name list"))?
        .iter()
        .map(|v| v.as_str().unwrap_or_default().to_string())
        .collect();
    let mut source_of = [usize::MAX; NUM_JOINTS];
    for (i, joint) in JOINT_NAMES.iter().enumerate() {
        source_of[i] = names
            .iter()
            .position(|n| n == joint)
            .ok_or_else(|| schema_err(&ctx, "categories[0].keypoints", format!("missing joint '{joint}'")))?;
    }
    let images = root["images"]
        .as_array()
        .ok_or_else(|| schema_err(&ctx, "images", "missing image list"))?;
    let mut order: Vec<(i64, i64)> = images
        .iter()
        .enumerate()
        .map(|(i, im)| {
            let id = im["id"].as_i64().unwrap_or(i as i64);
            let key = im["frame_id"].as_i64().unwrap_or(i as i64);
            (key, id)
        })
        .collect();
    order.sort();
    let frame_of: BTreeMap<i64, usize> = order.iter().enumerate().map(|(f, &(_, id))| (id, f)).collect();
    let mut seq = Sequence::new(video_id, width, height, order.len());
    let empty = Vec::new();
    for (ai, ann) in root["annotations"].as_array().unwrap_or(&empty).iter().enumerate() {
        let field = format!("annotations[{ai}]");
        let image_id = ann["image_id"]
            .as_i64()
            .ok_or_else(|| schema_err(&ctx, format!("{field}.image_id"), "missing"))?;
        let &frame = frame_of
            .get(&image_id)
            .ok_or_else(|| schema_err(&ctx, format!("{field}.image_id"), format!("unknown image {image_id}")))?;
        let flat: Vec<f64> = ann["keypoints"]
            .as_array()
            .ok_or_else(|| schema_err(&ctx, format!("{field}.keypoints"), "missing"))?
            .iter()
            .map(|v| v.as_f64().unwrap_or(0.0))
            .collect();
        if flat.len() != 3 * names.len() {
            return Err(schema_err(
                &ctx,
                format!("{field}.keypoints"),
                format!("expected {} values, got {}", 3 * names.len(), flat.len()),
            ));
        }
        let kps = (0..NUM_JOINTS)
            .map(|j| {
                let s = source_of[j];
                let (x, y, v) = (flat[3 * s], flat[3 * s + 1], flat[3 * s + 2]);
                let inside = x >= 0.0 && y >= 0.0 && x <= width as f64 && y <= height as f64;
                Keypoint::new(j as u8 + 1, x, y, if v > 0.0 { 1.0 } else { 0.0 }, v > 0.0 && inside)
            })
            .collect();
        let bbox = ann["bbox"].as_array().and_then(|b| {
            let v: Vec<f64> = b.iter().filter_map(|x| x.as_f64()).collect();
            (v.len() == 4).then(|| BBox::new(v[0], v[1], v[2], v[3]).ok()).flatten()
        });
        let track_id = ann["track_id"].as_u64().map(|t| t as u32);
        let pose = Pose::new(kps, bbox, track_id, frame).map_err(|e| schema_err(&ctx, field, e.to_string()))?;
        if pose.num_visible() > 0 {
            seq.frames[frame].poses.push(pose);
        }
    }
    Ok(seq)
}

/// Noise applied to ground truth to imitate a detector + pose estimator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorNoise {
    /// Gaussian keypoint jitter, pixels.
    pub jitter_sigma: f64,
    pub keypoint_dropout: f64,
    pub missed_pose: f64,
    pub duplicate_pose: f64,
}

impl DetectorNoise {
    pub fn none() -> Self {
        Self {
            jitter_sigma: 0.0,
            keypoint_dropout: 0.0,
            missed_pose: 0.0,
            duplicate_pose: 0.0,
        }
    }

    pub fn moderate() -> Self {
        Self {
            jitter_sigma: 3.0,
            keypoint_dropout: 0.05,
            missed_pose: 0.05,
            duplicate_pose: 0.02,
        }
    }
}

/// A person hidden for `length` frames starting at `start`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Occlusion {
    pub person: usize,
    pub start: usize,
    pub length: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub num_persons: usize,
    pub num_frames: usize,
    pub frame_width: u32,
    pub frame_height: u32,
    /// Person height range (head top to ankles), pixels.
    pub person_height: (f64, f64),
    /// Speed range, pixels per frame.
    pub speed: (f64, f64),
    /// Everyone shares one velocity and runs in a column spaced
    /// `uniform_spacing` frames of travel apart.
    pub uniform_motion: bool,
    pub uniform_spacing: f64,
    /// Shared speed range, pixels per frame, used when `uniform_motion` is set.
    pub uniform_speed: (f64, f64),
    /// Limb swing amplitude, radians.
    pub swing: f64,
    /// Gait cycles per frame range.
    pub gait_frequency: (f64, f64),
    /// Per-person, per-frame probability that a random occlusion starts.
    pub occlusion_rate: f64,
    pub max_occlusion: usize,
    /// Explicit occlusion events in addition to random ones.
    pub occlusions: Vec<Occlusion>,
    pub noise: DetectorNoise,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_persons: 4,
            num_frames: 60,
            frame_width: 640,
            frame_height: 480,
            person_height: (110.0, 170.0),
            speed: (2.0, 7.0),
            uniform_motion: false,
            uniform_spacing: 3.0,
            uniform_speed: (12.0, 18.0),
            swing: 0.5,
            gait_frequency: (0.04, 0.09),
            occlusion_rate: 0.0,
            max_occlusion: 3,
            occlusions: Vec::new(),
            noise: DetectorNoise::moderate(),
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let probs = [
            ("noise.keypoint_dropout", self.noise.keypoint_dropout),
            ("noise.missed_pose", self.noise.missed_pose),
            ("noise.duplicate_pose", self.noise.duplicate_pose),
            ("occlusion_rate", self.occlusion_rate),
        ];
        if let Some((name, p)) = probs.iter().find(|(_, p)| !(0.0..=1.0).contains(p)) {
            return Err(DataError::Config(format!("{name} = {p} is not a probability")));
        }
        if self.frame_width == 0 || self.frame_height == 0 {
            return Err(DataError::Config("frame dimensions must be positive".into()));
        }
        if self.person_height.0 <= 0.0 || self.person_height.1 < self.person_height.0 {
            return Err(DataError::Config("person_height must be an increasing positive range".into()));
        }
        if self.person_height.1 >= self.frame_height as f64 * 0.9 {
            return Err(DataError::Config("persons taller than the frame".into()));
        }
        if self.speed.0 < 0.0 || self.speed.1 < self.speed.0 {
            return Err(DataError::Config("speed must be an increasing non-negative range".into()));
        }
        if self.uniform_speed.0 < 0.0 || self.uniform_speed.1 < self.uniform_speed.0 {
            return Err(DataError::Config("uniform_speed must be an increasing non-negative range".into()));
        }
        if self.noise.jitter_sigma < 0.0 {
            return Err(DataError::Config("noise.jitter_sigma must be non-negative".into()));
        }
        for o in &self.occlusions {
            if o.person >= self.num_persons {
                return Err(DataError::Config(format!("occlusion names person {} of {}", o.person, self.num_persons)));
            }
        }
        Ok(())
    }
}

/// Output of [`generate_synthetic`].
#[derive(Debug, Clone, PartialEq)]
pub struct SynthOutput {
    pub ground_truth: Sequence,
    /// Noisy detections without identities, in shuffled order per frame.
    pub detected: Sequence,
    /// The same detections with the identity of the person each came from.
    pub labeled_detections: Sequence,
}

/// Scale of the keypoint confidence model: a keypoint displaced by this many
/// pixels from the truth reports confidence ~0.58.
const CONFIDENCE_SCALE: f64 = 8.0;

/// Confidence reported for a keypoint `displacement` pixels from the truth.
pub fn keypoint_confidence(displacement: f64) -> f64 {
    0.05 + 0.95 * (-displacement * displacement / (2.0 * CONFIDENCE_SCALE * CONFIDENCE_SCALE)).exp()
}

pub(crate) fn round_to(v: f64, step: f64) -> f64 {
    (v / step).round() * step
}

struct Walker {
    height: f64,
    origin: (f64, f64),
    velocity: (f64, f64),
    phase: f64,
    frequency: f64,
}

/// Folds `v` into `[lo, hi]` as if bouncing between the walls; returns the
/// folded value and whether the direction is currently reversed.
fn fold(v: f64, lo: f64, hi: f64) -> (f64, bool) {
    let span = hi - lo;
    if span <= 0.0 {
        return (lo, false);
    }
    let m = (v - lo).rem_euclid(2.0 * span);
    if m <= span {
        (lo + m, false)
    } else {
        (lo + 2.0 * span - m, true)
    }
}

impl Walker {
    fn margins(&self, w: f64, h: f64) -> ((f64, f64), (f64, f64)) {
        let hx = 0.3 * self.height;
        ((hx, w - hx), (0.55 * self.height, h - 0.55 * self.height))
    }

    /// Keypoints at frame `t` in internal joint order.
    fn skeleton(&self, t: usize, w: f64, h: f64, swing: f64) -> [(f64, f64); NUM_JOINTS] {
        let ((x0, x1), (y0, y1)) = self.margins(w, h);
        let (cx, flip_x) = fold(self.origin.0 + self.velocity.0 * t as f64, x0, x1);
        let (cy, _) = fold(self.origin.1 + self.velocity.1 * t as f64, y0, y1);
        let vx = if flip_x { -self.velocity.0 } else { self.velocity.0 };
        let facing = if vx < 0.0 { -1.0 } else { 1.0 };
        let s = self.height;
        let phase = self.phase + 2.0 * PI * self.frequency * t as f64;
        let arm = swing * phase.sin();
        let leg = 0.8 * swing * phase.sin();
        let knee_bend = 0.6 * swing * (phase + PI / 2.0).sin().max(0.0);
        let bob = 0.01 * s * (2.0 * phase).sin();
        let lean = 0.03 * s * facing;
        let at = |dx: f64, dy: f64| (cx + dx, cy + dy + bob);
        let limb = |from: (f64, f64), angle: f64, len: f64| {
            (from.0 + facing * len * angle.sin(), from.1 + len * angle.cos())
        };
        let head_top = at(lean, -0.50 * s);
        let head_bottom = at(lean * 0.8, -0.36 * s);
        let nose = at(lean + 0.04 * s * facing, -0.42 * s);
        let ls = at(lean * 0.6 - 0.10 * s, -0.31 * s);
        let rs = at(lean * 0.6 + 0.10 * s, -0.31 * s);
        let le = limb(ls, arm, 0.16 * s);
        let re = limb(rs, -arm, 0.16 * s);
        let lw = limb(le, arm + 0.3 * swing, 0.14 * s);
        let rw = limb(re, -arm + 0.3 * swing, 0.14 * s);
        let lh = at(-0.07 * s, 0.0);
        let rh = at(0.07 * s, 0.0);
        let lk = limb(lh, -leg, 0.24 * s);
        let rk = limb(rh, leg, 0.24 * s);
        let la = limb(lk, -leg - knee_bend, 0.24 * s);
        let ra = limb(rk, leg - knee_bend, 0.24 * s);
        [nose, head_bottom, head_top, ls, rs, le, re, lw, rw, lh, rh, lk, rk, la, ra]
    }
}

fn truth_pose(points: &[(f64, f64); NUM_JOINTS], w: f64, h: f64, id: u32, frame: usize) -> Pose {
    let kps = points
        .iter()
        .enumerate()
        .map(|(j, &(x, y))| {
            let (x, y) = (round_to(x, 0.01), round_to(y, 0.01));
            let inside = (0.0..=w).contains(&x) && (0.0..=h).contains(&y);
            Keypoint::new(j as u8 + 1, x, y, 1.0, inside)
        })
        .collect();
    let mut pose = Pose::new(kps, None, Some(id), frame).expect("generator emits 15 joints");
    pose.bbox = pose.hull_box(0.1).and_then(|b| b.clamp_to(w, h)).map(round_box);
    pose
}

fn round_box(b: BBox) -> BBox {
    BBox {
        x: round_to(b.x, 0.01),
        y: round_to(b.y, 0.01),
        width: round_to(b.width, 0.01).max(0.01),
        height: round_to(b.height, 0.01).max(0.01),
    }
}

/// Applies jitter and keypoint dropout to a ground-truth pose. Returns `None`
/// if nothing stays visible.
fn corrupt(
    truth: &Pose,
    sigma: f64,
    dropout: f64,
    rng: &mut ChaCha8Rng,
    w: f64,
    h: f64,
) -> Option<Pose> {
    let normal = Normal::new(0.0, sigma.max(1e-12)).expect("valid sigma");
    let mut pose = truth.clone();
    for kp in pose.keypoints.iter_mut() {
        let (nx, ny): (f64, f64) = if sigma > 0.0 {
            (normal.sample(rng), normal.sample(rng))
        } else {
            (0.0, 0.0)
        };
        let drop = dropout > 0.0 && rng.random::<f64>() < dropout;
        if !kp.visible {
            continue;
        }
        let x = round_to(kp.x + nx, 0.01);
        let y = round_to(kp.y + ny, 0.01);
        if drop || !(0.0..=w).contains(&x) || !(0.0..=h).contains(&y) {
            *kp = Keypoint::invisible(kp.type_id);
            continue;
        }
        let d = (nx * nx + ny * ny).sqrt();
        *kp = Keypoint::new(kp.type_id, x, y, round_to(keypoint_confidence(d), 1e-4), true);
    }
    if pose.num_visible() == 0 {
        return None;
    }
    pose.bbox = pose.hull_box(0.1).and_then(|b| b.clamp_to(w, h)).map(round_box);
    pose.score = round_to(pose.mean_confidence(), 1e-4);
    Some(pose)
}

/// Renders `num_persons` walking stick figures and a noisy detection stream
/// from them. Fully determined by `config.seed`.
pub fn generate_synthetic(config: &SynthConfig, video_id: &str) -> Result<SynthOutput> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (w, h) = (config.frame_width as f64, config.frame_height as f64);

    let shared_dir = rng.random::<f64>() * 2.0 * PI;
    let shared_range = if config.uniform_motion { config.uniform_speed } else { config.speed };
    let shared_speed = rng.random_range(shared_range.0..=shared_range.1);
    let shared_freq = rng.random_range(config.gait_frequency.0..=config.gait_frequency.1);
    let column_start = (rng.random::<f64>() * w, rng.random::<f64>() * h);
    let mut walkers = Vec::with_capacity(config.num_persons);
    for i in 0..config.num_persons {
        let height = rng.random_range(config.person_height.0..=config.person_height.1);
        let phase = rng.random::<f64>() * 2.0 * PI;
        let (origin, velocity, frequency) = if config.uniform_motion {
            let (vx, vy) = (shared_speed * shared_dir.cos(), shared_speed * shared_dir.sin());
            let back = config.uniform_spacing * i as f64;
            let jitter = rng.random_range(-0.15..=0.15) * height;
            (
                (
                    column_start.0 - vx * back - vy.signum() * jitter,
                    column_start.1 - vy * back + vx.signum() * jitter,
                ),
                (vx, vy),
                shared_freq,
            )
        } else {
            let dir = rng.random::<f64>() * 2.0 * PI;
            let speed = rng.random_range(config.speed.0..=config.speed.1);
            (
                (rng.random::<f64>() * w, rng.random::<f64>() * h),
                (speed * dir.cos(), speed * dir.sin()),
                rng.random_range(config.gait_frequency.0..=config.gait_frequency.1),
            )
        };
        walkers.push(Walker {
            height,
            origin,
            velocity,
            phase,
            frequency,
        });
    }

    // hidden[p][t]
    let mut hidden = vec![vec![false; config.num_frames]; config.num_persons];
    for o in &config.occlusions {
        for t in o.start..(o.start + o.length).min(config.num_frames) {
            hidden[o.person][t] = true;
        }
    }
    if config.occlusion_rate > 0.0 && config.max_occlusion > 0 {
        for row in hidden.iter_mut() {
            let mut t = 1;
            while t < config.num_frames {
                if !row[t] && !row[t - 1] && rng.random::<f64>() < config.occlusion_rate {
                    let len = rng.random_range(1..=config.max_occlusion);
                    // keep a visible frame after the gap so the span is exactly `len`
                    if t + len < config.num_frames {
                        for r in row.iter_mut().skip(t).take(len) {
                            *r = true;
                        }
                        t += len + 1;
                        continue;
                    }
                }
                t += 1;
            }
        }
    }

    let mut gt = Sequence::new(video_id, config.frame_width, config.frame_height, config.num_frames);
    let mut labeled = gt.clone();
    let noise = &config.noise;
    for t in 0..config.num_frames {
        let mut dets = Vec::new();
        for (p, walker) in walkers.iter().enumerate() {
            let points = walker.skeleton(t, w, h, config.swing);
            let truth = truth_pose(&points, w, h, p as u32, t);
            // draws happen whether or not the person is hidden so that the
            // random stream does not depend on occlusion layout
            let missed = rng.random::<f64>() < noise.missed_pose;
            let dup = rng.random::<f64>() < noise.duplicate_pose;
            let det = corrupt(&truth, noise.jitter_sigma, noise.keypoint_dropout, &mut rng, w, h);
            let extra = corrupt(
                &truth,
                noise.jitter_sigma * 2.0 + 2.0,
                noise.keypoint_dropout,
                &mut rng,
                w,
                h,
            );
            if hidden[p][t] || truth.num_visible() == 0 {
                continue;
            }
            gt.frames[t].poses.push(truth);
            if !missed {
                dets.extend(det);
            }
            if dup {
                dets.extend(extra);
            }
        }
        dets.shuffle(&mut rng);
        labeled.frames[t].poses = dets;
    }
    let detected = labeled.without_track_ids();
    Ok(SynthOutput {
        ground_truth: gt,
        detected,
        labeled_detections: labeled,
    })
}
