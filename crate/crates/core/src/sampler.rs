//! Segment-balanced random frame selection.
//!
//! A video of `n` frames is cut into `k` contiguous segments whose lengths
//! differ by at most one (longer segments first), and one frame is drawn
//! uniformly from each segment. When `n < k` every frame is its own
//! segment.
//!
//! The draw for segment `i` uses ChaCha8 seeded with `seed` on stream `i`
//! (see [`crate::seed`]), so each index depends only on `(seed, i)`.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::seed::{stream_rng, uniform_below};

pub const DEFAULT_SEGMENTS: usize = 6;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentPlan {
    pub segments: Vec<Range<u64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerConfig {
    #[serde(default = "default_segments")]
    pub k_segments: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_segments() -> usize {
    DEFAULT_SEGMENTS
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            k_segments: DEFAULT_SEGMENTS,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }
}

/// Splits `[0, n_frames)` into `min(k, n_frames)` balanced contiguous ranges.
///
/// # Panics
/// If `n_frames` or `k` is zero.
pub fn plan_segments(n_frames: u64, k: usize) -> SegmentPlan {
    assert!(n_frames >= 1, "n_frames must be positive");
    assert!(k >= 1, "k must be positive");
    let parts = (k as u64).min(n_frames);
    let base = n_frames / parts;
    let extra = n_frames % parts;
    let mut lo = 0;
    let segments = (0..parts)
        .map(|i| {
            let len = base + u64::from(i < extra);
            let seg = lo..lo + len;
            lo += len;
            seg
        })
        .collect();
    SegmentPlan { segments }
}

/// Picks one frame per segment; strictly increasing, `min(k, n_frames)` long.
pub fn sample_frames(n_frames: u64, config: &SamplerConfig) -> Vec<u64> {
    plan_segments(n_frames, config.k_segments)
        .segments
        .iter()
        .enumerate()
        .map(|(i, seg)| {
            let mut rng = stream_rng(config.seed, i as u64);
            seg.start + uniform_below(&mut rng, seg.end - seg.start)
        })
        .collect()
}
