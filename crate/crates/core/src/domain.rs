//! Geometric types shared by every stage of the pipeline: keypoints, poses,
//! frames, boxes, and the keypoint-similarity math built on them.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of keypoints per pose.
pub const NUM_JOINTS: usize = 15;

/// Joint names in internal index order (type id = position + 1).
pub const JOINT_NAMES: [&str; NUM_JOINTS] = [
    "nose",
    "head_bottom",
    "head_top",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
    "left_hip",
    "right_hip",
    "left_knee",
    "right_knee",
    "left_ankle",
    "right_ankle",
];

/// Internal index of the joint pair used to size heads for PCKh gating.
pub const HEAD_TOP: usize = 2;
pub const HEAD_BOTTOM: usize = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DomainError {
    #[error("joint type id {0} outside 1..=15")]
    JointOutOfRange(usize),
    #[error("pose must carry exactly one keypoint per joint: {0}")]
    MalformedPose(String),
    #[error("bounding box needs positive width and height, got {width}x{height}")]
    DegenerateBox { width: f64, height: f64 },
    #[error("dilation factor must be >= 1, got {0}")]
    BadDilation(f64),
    #[error("non-finite coordinate in keypoint {0}")]
    NonFinite(usize),
    #[error("sigma table: {0}")]
    Sigmas(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    /// Joint identity in `1..=15`.
    pub type_id: u8,
    pub x: f64,
    pub y: f64,
    pub confidence: f64,
    pub visible: bool,
}

impl Keypoint {
    pub fn new(type_id: u8, x: f64, y: f64, confidence: f64, visible: bool) -> Self {
        Self {
            type_id,
            x,
            y,
            confidence,
            visible,
        }
    }

    pub fn invisible(type_id: u8) -> Self {
        Self::new(type_id, 0.0, 0.0, 0.0, false)
    }

    pub fn distance(&self, other: &Keypoint) -> f64 {
        ((self.x - other.x).powi(2) + (self.y - other.y).powi(2)).sqrt()
    }
}

/// Axis-aligned box stored as `(x_min, y_min, width, height)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub width: f64,
    pub height: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, width: f64, height: f64) -> Result<Self, DomainError> {
        if !(width > 0.0 && height > 0.0) {
            return Err(DomainError::DegenerateBox { width, height });
        }
        Ok(Self {
            x,
            y,
            width,
            height,
        })
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.width / 2.0, self.y + self.height / 2.0)
    }

    pub fn area(&self) -> f64 {
        self.width * self.height
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x && x <= self.x + self.width && y >= self.y && y <= self.y + self.height
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let x0 = self.x.max(other.x);
        let y0 = self.y.max(other.y);
        let x1 = (self.x + self.width).min(other.x + other.width);
        let y1 = (self.y + self.height).min(other.y + other.height);
        let inter = (x1 - x0).max(0.0) * (y1 - y0).max(0.0);
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    /// Intersect with `[0,width]x[0,height]`; `None` if nothing is left.
    pub fn clamp_to(&self, width: f64, height: f64) -> Option<BBox> {
        let x0 = self.x.max(0.0);
        let y0 = self.y.max(0.0);
        let x1 = (self.x + self.width).min(width);
        let y1 = (self.y + self.height).min(height);
        BBox::new(x0, y0, x1 - x0, y1 - y0).ok()
    }
}

/// Scale a box about its center.
pub fn dilate_box(bbox: &BBox, factor: f64) -> Result<BBox, DomainError> {
    if !(factor >= 1.0) {
        return Err(DomainError::BadDilation(factor));
    }
    let (cx, cy) = bbox.center();
    let width = bbox.width * factor;
    let height = bbox.height * factor;
    BBox::new(cx - width / 2.0, cy - height / 2.0, width, height)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub keypoints: [Keypoint; NUM_JOINTS],
    pub bbox: Option<BBox>,
    /// `None` until the tracker assigns an identity.
    pub track_id: Option<u32>,
    pub frame_index: usize,
    /// Detector confidence for the person box; 1.0 for annotations.
    pub score: f64,
}

impl Pose {
    /// Builds a pose, checking that every joint appears exactly once. Keypoints
    /// are reordered into type-id order.
    pub fn new(
        keypoints: Vec<Keypoint>,
        bbox: Option<BBox>,
        track_id: Option<u32>,
        frame_index: usize,
    ) -> Result<Self, DomainError> {
        if keypoints.len() != NUM_JOINTS {
            return Err(DomainError::MalformedPose(format!(
                "expected {NUM_JOINTS} keypoints, got {}",
                keypoints.len()
            )));
        }
        let mut slots: [Option<Keypoint>; NUM_JOINTS] = [None; NUM_JOINTS];
        for kp in keypoints {
            let t = kp.type_id as usize;
            if !(1..=NUM_JOINTS).contains(&t) {
                return Err(DomainError::JointOutOfRange(t));
            }
            if kp.visible && !(kp.x.is_finite() && kp.y.is_finite()) {
                return Err(DomainError::NonFinite(t));
            }
            if slots[t - 1].replace(kp).is_some() {
                return Err(DomainError::MalformedPose(format!(
                    "joint {} appears twice",
                    JOINT_NAMES[t - 1]
                )));
            }
        }
        let keypoints = slots.map(|kp| kp.expect("all 15 slots filled"));
        Ok(Self {
            keypoints,
            bbox,
            track_id,
            frame_index,
            score: 1.0,
        })
    }

    pub fn visible(&self) -> impl Iterator<Item = &Keypoint> {
        self.keypoints.iter().filter(|k| k.visible)
    }

    pub fn num_visible(&self) -> usize {
        self.visible().count()
    }

    /// Tight box around visible keypoints. `None` when nothing is visible.
    pub fn keypoint_hull(&self) -> Option<(f64, f64, f64, f64)> {
        let mut it = self.visible();
        let first = it.next()?;
        let init = (first.x, first.y, first.x, first.y);
        Some(it.fold(init, |(x0, y0, x1, y1), k| {
            (x0.min(k.x), y0.min(k.y), x1.max(k.x), y1.max(k.y))
        }))
    }

    /// Hull of the visible keypoints grown by `pad` of its size on each side.
    pub fn hull_box(&self, pad: f64) -> Option<BBox> {
        let (x0, y0, x1, y1) = self.keypoint_hull()?;
        let w = (x1 - x0).max(1.0);
        let h = (y1 - y0).max(1.0);
        BBox::new(x0 - pad * w, y0 - pad * h, w * (1.0 + 2.0 * pad), h * (1.0 + 2.0 * pad)).ok()
    }

    /// Object scale squared: box area, else the keypoint hull area.
    pub fn scale_sq(&self) -> f64 {
        match self.bbox {
            Some(b) => b.area(),
            None => self
                .keypoint_hull()
                .map(|(x0, y0, x1, y1)| (x1 - x0) * (y1 - y0))
                .unwrap_or(0.0),
        }
    }

    pub fn center(&self) -> (f64, f64) {
        if let Some(b) = self.bbox {
            return b.center();
        }
        match self.keypoint_hull() {
            Some((x0, y0, x1, y1)) => ((x0 + x1) / 2.0, (y0 + y1) / 2.0),
            None => (0.0, 0.0),
        }
    }

    /// Centroid of visible keypoints.
    pub fn centroid(&self) -> Option<(f64, f64)> {
        let n = self.num_visible();
        if n == 0 {
            return None;
        }
        let (sx, sy) = self.visible().fold((0.0, 0.0), |(sx, sy), k| (sx + k.x, sy + k.y));
        Some((sx / n as f64, sy / n as f64))
    }

    /// Mean confidence over visible keypoints (0 when none are visible).
    pub fn mean_confidence(&self) -> f64 {
        let n = self.num_visible();
        if n == 0 {
            return 0.0;
        }
        self.visible().map(|k| k.confidence).sum::<f64>() / n as f64
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Pose {
        let mut out = self.clone();
        for kp in out.keypoints.iter_mut() {
            kp.x += dx;
            kp.y += dy;
        }
        if let Some(b) = out.bbox.as_mut() {
            b.x += dx;
            b.y += dy;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub index: usize,
    pub width: u32,
    pub height: u32,
    pub poses: Vec<Pose>,
}

impl Frame {
    pub fn new(index: usize, width: u32, height: u32) -> Self {
        Self {
            index,
            width,
            height,
            poses: Vec::new(),
        }
    }

    /// Checks the frame-level invariants: shared frame index and visible
    /// keypoints inside the image.
    pub fn validate(&self) -> Result<(), DomainError> {
        let (w, h) = (self.width as f64, self.height as f64);
        for (i, pose) in self.poses.iter().enumerate() {
            if pose.frame_index != self.index {
                return Err(DomainError::MalformedPose(format!(
                    "pose {i} has frame_index {} in frame {}",
                    pose.frame_index, self.index
                )));
            }
            for kp in pose.visible() {
                if kp.x < 0.0 || kp.x > w || kp.y < 0.0 || kp.y > h {
                    return Err(DomainError::MalformedPose(format!(
                        "pose {i} joint {} at ({}, {}) lies outside the {}x{} frame",
                        JOINT_NAMES[kp.type_id as usize - 1],
                        kp.x,
                        kp.y,
                        self.width,
                        self.height
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Per-joint falloff constants used by [`oks`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointSigmas(pub [f64; NUM_JOINTS]);

impl Default for JointSigmas {
    /// COCO per-keypoint constants (twice the published sigmas) mapped onto
    /// the 15-joint skeleton. Head-bottom and head-top use the mean of the
    /// COCO nose and eye values.
    fn default() -> Self {
        let head = (0.026 + 0.025 + 0.025) / 3.0 * 2.0;
        Self([
            0.052, head, head, 0.158, 0.158, 0.144, 0.144, 0.124, 0.124, 0.214, 0.214, 0.174,
            0.174, 0.178, 0.178,
        ])
    }
}

impl JointSigmas {
    pub fn new(values: [f64; NUM_JOINTS]) -> Result<Self, DomainError> {
        if let Some(i) = values.iter().position(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(DomainError::Sigmas(format!(
                "entry {} ({}) must be positive",
                i + 1,
                values[i]
            )));
        }
        Ok(Self(values))
    }

    pub fn uniform(sigma: f64) -> Self {
        Self([sigma; NUM_JOINTS])
    }

    /// Parses 15 whitespace-separated reals in joint order.
    pub fn parse(text: &str) -> Result<Self, DomainError> {
        let values = text
            .split_whitespace()
            .map(|tok| {
                tok.parse::<f64>()
                    .map_err(|e| DomainError::Sigmas(format!("bad value {tok:?}: {e}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let arr: [f64; NUM_JOINTS] = values.as_slice().try_into().map_err(|_| {
            DomainError::Sigmas(format!("expected {NUM_JOINTS} values, got {}", values.len()))
        })?;
        Self::new(arr)
    }

    pub fn load(path: &Path) -> Result<Self, DomainError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| DomainError::Sigmas(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }
}

impl fmt::Display for JointSigmas {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|s| s.to_string()).collect();
        write!(f, "{}", parts.join(" "))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OksScore {
    pub value: f64,
    /// Set when the poses share no visible joint; `value` is then 0.
    pub disjoint: bool,
}

/// Object keypoint similarity of `candidate` against `reference`, averaged
/// over mutually visible joints and scaled by the reference's area.
pub fn oks(candidate: &Pose, reference: &Pose, sigmas: &JointSigmas) -> OksScore {
    let s2 = reference.scale_sq().max(f64::EPSILON);
    let mut total = 0.0;
    let mut count = 0usize;
    for ((c, r), sigma) in candidate
        .keypoints
        .iter()
        .zip(reference.keypoints.iter())
        .zip(sigmas.0.iter())
    {
        if !(c.visible && r.visible) {
            continue;
        }
        let d2 = (c.x - r.x).powi(2) + (c.y - r.y).powi(2);
        total += (-d2 / (2.0 * s2 * sigma * sigma)).exp();
        count += 1;
    }
    if count == 0 {
        return OksScore {
            value: 0.0,
            disjoint: true,
        };
    }
    OksScore {
        value: total / count as f64,
        disjoint: false,
    }
}

/// OKS taken with each pose as reference in turn; the larger value.
pub fn mutual_oks(a: &Pose, b: &Pose, sigmas: &JointSigmas) -> f64 {
    oks(a, b, sigmas).value.max(oks(b, a, sigmas).value)
}

/// Indices of the `n` poses in `pool` whose centers are closest to `query`,
/// nearest first; ties keep pool order.
pub fn nearest_indices(query: &Pose, pool: &[Pose], n: usize) -> Vec<usize> {
    let (qx, qy) = query.center();
    let mut order: Vec<(f64, usize)> = pool
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let (x, y) = p.center();
            (((x - qx).powi(2) + (y - qy).powi(2)).sqrt(), i)
        })
        .collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    order.into_iter().take(n).map(|(_, i)| i).collect()
}

pub fn nearest_poses<'a>(query: &Pose, pool: &'a [Pose], n: usize) -> Vec<&'a Pose> {
    nearest_indices(query, pool, n)
        .into_iter()
        .map(|i| &pool[i])
        .collect()
}

#[cfg(test)]
pub(crate) mod test_util {
    use super::*;

    /// A pose with every joint visible, laid out on a small grid around `(cx, cy)`.
    pub fn grid_pose(cx: f64, cy: f64, frame_index: usize) -> Pose {
        let kps = (0..NUM_JOINTS)
            .map(|j| {
                let dx = (j % 3) as f64 * 10.0 - 10.0;
                let dy = (j / 3) as f64 * 10.0 - 20.0;
                Keypoint::new(j as u8 + 1, cx + dx, cy + dy, 1.0, true)
            })
            .collect();
        Pose::new(
            kps,
            Some(BBox::new(cx - 20.0, cy - 30.0, 40.0, 60.0).unwrap()),
            None,
            frame_index,
        )
        .unwrap()
    }
}
