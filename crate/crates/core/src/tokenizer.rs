//! Turns a (current, past) pose pair into the three parallel token sequences
//! consumed by the matcher: spatial cell, joint type, and temporal gap.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{Pose, NUM_JOINTS};

/// Tokens per pair: 15 for the current pose followed by 15 for the past one.
pub const SEQ_LEN: usize = 2 * NUM_JOINTS;

/// Position token assigned to invisible keypoints. Masked, so never attended.
pub const PLACEHOLDER_TOKEN: u16 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TokenizeError {
    #[error("temporal gap {gap} outside 1..={max_gap}")]
    GapOutOfRange { gap: usize, max_gap: usize },
    #[error("frame dimensions must be positive, got {0}x{1}")]
    BadFrame(u32, u32),
}

/// Downsampled spatial grid; each cell is one position token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenGrid {
    pub width: u32,
    pub height: u32,
}

impl Default for TokenGrid {
    fn default() -> Self {
        Self {
            width: 24,
            height: 18,
        }
    }
}

impl TokenGrid {
    pub fn vocab(&self) -> usize {
        (self.width * self.height) as usize
    }

    /// Row-major, 1-indexed token of cell `(col, row)`.
    pub fn cell_token(&self, col: u32, row: u32) -> u16 {
        (row * self.width + col + 1) as u16
    }

    pub fn center_token(&self) -> u16 {
        self.cell_token(self.width / 2, self.height / 2)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PositionToken {
    pub token: u16,
    /// The point fell outside the frame and was pulled onto the border cell.
    pub clamped: bool,
}

fn quantize(v: f64, extent: f64, cells: u32) -> (u32, bool) {
    let cell = (v / extent * cells as f64).floor();
    if cell < 0.0 || !cell.is_finite() {
        (0, true)
    } else if cell >= cells as f64 {
        // The far edge itself belongs to the last cell.
        (cells - 1, v > extent)
    } else {
        (cell as u32, false)
    }
}

/// Absolute spatial token of pixel `(x, y)` in a `frame_w x frame_h` image.
pub fn position_token(x: f64, y: f64, frame_w: u32, frame_h: u32, grid: TokenGrid) -> PositionToken {
    let (col, cx) = quantize(x, frame_w as f64, grid.width);
    let (row, cy) = quantize(y, frame_h as f64, grid.height);
    PositionToken {
        token: grid.cell_token(col, row),
        clamped: cx || cy,
    }
}

/// Token of an offset from the pose centroid; zero offset lands in the grid's
/// center cell.
pub fn relative_position_token(dx: f64, dy: f64, frame_w: u32, frame_h: u32, grid: TokenGrid) -> PositionToken {
    let shift = |d: f64, extent: f64, cells: u32| {
        // Centroid subtraction leaves ~1e-13 noise; snap so offsets sitting on
        // a cell boundary quantize the same way after translation.
        let d = (d * 1e6).round() / 1e6;
        let cell = (d / extent * cells as f64 + (cells / 2) as f64).floor();
        if cell < 0.0 || !cell.is_finite() {
            (0, true)
        } else if cell >= cells as f64 {
            (cells - 1, true)
        } else {
            (cell as u32, false)
        }
    };
    let (col, cx) = shift(dx, frame_w as f64, grid.width);
    let (row, cy) = shift(dy, frame_h as f64, grid.height);
    PositionToken {
        token: grid.cell_token(col, row),
        clamped: cx || cy,
    }
}

/// One tokenized pose pair. Index `i < 15` is joint `i+1` of the current pose,
/// index `15 + i` the same joint of the past pose.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizedPair {
    pub position: [u16; SEQ_LEN],
    pub joint_type: [u8; SEQ_LEN],
    pub segment: [u8; SEQ_LEN],
    /// `false` where the source keypoint is invisible.
    pub attn_mask: [bool; SEQ_LEN],
    pub label: Option<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionMode {
    /// Cell of the keypoint in the downsampled frame.
    #[default]
    Absolute,
    /// Cell of the keypoint's offset from its pose centroid.
    Relative,
}

/// Tokenization settings shared by training and inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tokenizer {
    pub grid: TokenGrid,
    pub mode: PositionMode,
    pub max_gap: usize,
}

impl Default for Tokenizer {
    fn default() -> Self {
        Self {
            grid: TokenGrid::default(),
            mode: PositionMode::Absolute,
            max_gap: 4,
        }
    }
}

impl Tokenizer {
    pub fn tokenize(
        &self,
        current: &Pose,
        past: &Pose,
        gap: usize,
        frame_w: u32,
        frame_h: u32,
    ) -> Result<TokenizedPair, TokenizeError> {
        match self.mode {
            PositionMode::Absolute => {
                tokenize_pair(current, past, gap, self.max_gap, frame_w, frame_h, self.grid)
            }
            PositionMode::Relative => {
                tokenize_pair_relative(current, past, gap, self.max_gap, frame_w, frame_h, self.grid)
            }
        }
    }
}

fn build_pair(
    current: &Pose,
    past: &Pose,
    gap: usize,
    max_gap: usize,
    frame_w: u32,
    frame_h: u32,
    mut token_of: impl FnMut(usize, &Pose, f64, f64) -> u16,
) -> Result<TokenizedPair, TokenizeError> {
    if gap < 1 || gap > max_gap {
        return Err(TokenizeError::GapOutOfRange { gap, max_gap });
    }
    if frame_w == 0 || frame_h == 0 {
        return Err(TokenizeError::BadFrame(frame_w, frame_h));
    }
    let mut pair = TokenizedPair {
        position: [PLACEHOLDER_TOKEN; SEQ_LEN],
        joint_type: [0; SEQ_LEN],
        segment: [1; SEQ_LEN],
        attn_mask: [false; SEQ_LEN],
        label: None,
    };
    for (half, pose) in [current, past].into_iter().enumerate() {
        for (j, kp) in pose.keypoints.iter().enumerate() {
            let i = half * NUM_JOINTS + j;
            pair.joint_type[i] = (j + 1) as u8;
            pair.segment[i] = if half == 0 { 1 } else { gap as u8 };
            if kp.visible {
                pair.position[i] = token_of(half, pose, kp.x, kp.y);
                pair.attn_mask[i] = true;
            }
        }
    }
    Ok(pair)
}

/// Absolute tokenization of `(current, past)` separated by `gap` frames.
pub fn tokenize_pair(
    current: &Pose,
    past: &Pose,
    gap: usize,
    max_gap: usize,
    frame_w: u32,
    frame_h: u32,
    grid: TokenGrid,
) -> Result<TokenizedPair, TokenizeError> {
    build_pair(current, past, gap, max_gap, frame_w, frame_h, |_, _, x, y| {
        position_token(x, y, frame_w, frame_h, grid).token
    })
}

/// Tokenization of keypoint offsets from each pose's own centroid.
pub fn tokenize_pair_relative(
    current: &Pose,
    past: &Pose,
    gap: usize,
    max_gap: usize,
    frame_w: u32,
    frame_h: u32,
    grid: TokenGrid,
) -> Result<TokenizedPair, TokenizeError> {
    let centroids = [
        current.centroid().unwrap_or((0.0, 0.0)),
        past.centroid().unwrap_or((0.0, 0.0)),
    ];
    build_pair(current, past, gap, max_gap, frame_w, frame_h, |half, _, x, y| {
        let (cx, cy) = centroids[half];
        relative_position_token(x - cx, y - cy, frame_w, frame_h, grid).token
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::test_util::grid_pose;
    use proptest::prelude::*;

    const G: TokenGrid = TokenGrid {
        width: 24,
        height: 18,
    };

    #[test]
    fn position_token_examples() {
        assert_eq!(position_token(0.0, 0.0, 640, 480, G).token, 1);
        let eps = 1e-6;
        assert_eq!(position_token(640.0 - eps, 480.0 - eps, 640, 480, G).token, 432);
        let t = position_token(960.0, 540.0, 1920, 1080, G);
        assert_eq!(t.token, 9 * 24 + 12 + 1);
        assert_eq!(t.token, 229);
        assert!(!t.clamped);
    }

    #[test]
    fn edges_and_out_of_frame() {
        let t = position_token(640.0, 480.0, 640, 480, G);
        assert_eq!((t.token, t.clamped), (432, false));
        let t = position_token(-3.0, 700.0, 640, 480, G);
        assert_eq!(t.token, G.cell_token(0, 17));
        assert!(t.clamped);
    }

    #[test]
    fn identical_poses_gap_one() {
        let p = grid_pose(300.0, 200.0, 0);
        let pair = tokenize_pair(&p, &p, 1, 4, 640, 480, G).unwrap();
        assert_eq!(pair.position[..15], pair.position[15..]);
        assert!(pair.segment.iter().all(|&s| s == 1));
        let types: Vec<u8> = (1..=15).chain(1..=15).collect();
        assert_eq!(pair.joint_type.to_vec(), types);
        assert!(pair.attn_mask.iter().all(|&m| m));
    }

    #[test]
    fn invisible_past_joint_is_masked() {
        let cur = grid_pose(300.0, 200.0, 1);
        let mut past = grid_pose(300.0, 200.0, 0);
        let left_wrist = 7;
        past.keypoints[left_wrist].visible = false;
        let pair = tokenize_pair(&cur, &past, 2, 4, 640, 480, G).unwrap();
        assert!(!pair.attn_mask[15 + left_wrist]);
        assert_eq!(pair.position[15 + left_wrist], PLACEHOLDER_TOKEN);
        assert!(pair.attn_mask[left_wrist]);
    }

    #[test]
    fn gap_four_segments() {
        let p = grid_pose(300.0, 200.0, 0);
        let pair = tokenize_pair(&p, &p, 4, 4, 640, 480, G).unwrap();
        assert!(pair.segment[..15].iter().all(|&s| s == 1));
        assert!(pair.segment[15..].iter().all(|&s| s == 4));
        assert_eq!(
            tokenize_pair(&p, &p, 5, 4, 640, 480, G),
            Err(TokenizeError::GapOutOfRange { gap: 5, max_gap: 4 })
        );
        assert!(tokenize_pair(&p, &p, 0, 4, 640, 480, G).is_err());
    }

    #[test]
    fn relative_examples() {
        assert_eq!(relative_position_token(0.0, 0.0, 640, 480, G).token, G.center_token());
        assert_eq!(G.center_token(), 229);
        let t = relative_position_token(320.0, 0.0, 640, 480, G);
        assert_eq!(t.token, G.cell_token(23, 9));
        assert!(t.clamped);
        let t = relative_position_token(160.0, 0.0, 640, 480, G);
        assert_eq!(t.token, G.cell_token(12 + 6, 9));
    }

    proptest! {
        #[test]
        fn relative_ignores_translation(dx in -150.0..150.0f64, dy in -100.0..100.0f64, gap in 1usize..=4) {
            let cur = grid_pose(320.0, 240.0, 1);
            let past = grid_pose(300.0, 250.0, 0);
            let a = tokenize_pair_relative(&cur, &past, gap, 4, 640, 480, G).unwrap();
            let b = tokenize_pair_relative(&cur.translated(dx, dy), &past.translated(dx, dy), gap, 4, 640, 480, G).unwrap();
            prop_assert_eq!(&a, &b);
            let c = tokenize_pair(&cur, &past, gap, 4, 640, 480, G).unwrap();
            let d = tokenize_pair(&cur.translated(dx, dy), &past.translated(dx, dy), gap, 4, 640, 480, G).unwrap();
            // A shift of at least one cell always moves some absolute token.
            if dx.abs() >= 640.0 / 24.0 || dy.abs() >= 480.0 / 18.0 {
                prop_assert_ne!(c.position, d.position);
            }
            prop_assert_eq!(c, tokenize_pair(&cur, &past, gap, 4, 640, 480, G).unwrap());
        }

        #[test]
        fn tokens_stay_in_vocab(xs in proptest::collection::vec((-100.0..800.0f64, -100.0..600.0f64, any::<bool>()), 30),
                                gap in 1usize..=4, relative in any::<bool>()) {
            let mut cur = grid_pose(0.0, 0.0, 1);
            let mut past = grid_pose(0.0, 0.0, 0);
            for (i, &(x, y, v)) in xs.iter().enumerate() {
                let kp = if i < 15 { &mut cur.keypoints[i] } else { &mut past.keypoints[i - 15] };
                kp.x = x;
                kp.y = y;
                kp.visible = v;
            }
            let pair = if relative {
                tokenize_pair_relative(&cur, &past, gap, 4, 640, 480, G).unwrap()
            } else {
                tokenize_pair(&cur, &past, gap, 4, 640, 480, G).unwrap()
            };
            for i in 0..SEQ_LEN {
                prop_assert!((1..=432).contains(&(pair.position[i] as usize)));
                prop_assert!((1..=15).contains(&pair.joint_type[i]));
                prop_assert!((1..=4).contains(&pair.segment[i]));
                prop_assert_eq!(pair.attn_mask[i], xs[i].2);
            }
        }
    }
}
