//! Multi-person pose tracking by pairwise pose matching.
//!
//! Poses from consecutive frames are tokenized in pairs and scored by a small
//! transformer; the best-scoring previous identity is assigned greedily.
//! Detections can be refined beforehand by propagating boxes from the
//! previous frame and suppressing duplicates by keypoint similarity.

pub mod dataio;
pub mod domain;
pub mod matcher;
pub mod metrics;
pub mod pipeline;
pub mod tensor;
pub mod tokenizer;
pub mod tracker;
pub mod toks;
pub mod training;
