//! Synthetic video-caption pairs.
//!
//! Each frame is low-intensity noise with one bright (red) quadrant. The caption
//! names the brightest quadrant of every frame and ends with whether it
//! stayed put across the clip, so the text can only be predicted by looking.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::error::{config, contract, Result};
use crate::tensor::Tensor;
use crate::vision::VideoFrames;

pub const BOS: usize = 0;
/// Quadrant tokens, raster order: top-left, top-right, bottom-left, bottom-right.
pub const QUADRANT: [usize; 4] = [1, 2, 3, 4];
pub const SAME: usize = 5;
pub const MOVED: usize = 6;
/// A frame with no quadrant brighter than [`DARK_THRESHOLD`].
pub const DARK: usize = 7;
pub const VOCAB: usize = 8;

const DARK_THRESHOLD: f64 = 0.5;
const NOISE: (f64, f64) = (0.0, 0.3);
const BRIGHT: (f64, f64) = (0.7, 1.0);
/// The lit quadrant glows in one colour channel, so it differs from the
/// background in hue as well as in intensity.
const LIT_CHANNEL: usize = 0;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSample {
    pub video: VideoFrames,
    pub caption: Vec<usize>,
}

impl SynthSample {
    /// Teacher-forcing pair: `[BOS] + caption[..n-1]` predicts `caption`.
    pub fn inputs(&self) -> Vec<usize> {
        let mut ids = Vec::with_capacity(self.caption.len());
        ids.push(BOS);
        ids.extend_from_slice(&self.caption[..self.caption.len() - 1]);
        ids
    }

    pub fn targets(&self) -> &[usize] {
        &self.caption
    }

    /// Same caption, every frame replaced by a uniform grey.
    pub fn blank(&self) -> Self {
        let v = &self.video;
        Self {
            video: VideoFrames::constant(v.frame_count(), v.height(), 0.5).expect("0.5 is a valid pixel"),
            caption: self.caption.clone(),
        }
    }
}

/// Brightness of each quadrant of frame `t`, raster order: the largest of
/// its per-channel mean intensities.
fn quadrant_means(video: &VideoFrames, t: usize) -> [f64; 4] {
    let (h, w) = (video.height(), video.width());
    let mut sums = [[0.0; 3]; 4];
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let q = 2 * usize::from(y >= h / 2) + usize::from(x >= w / 2);
                sums[q][c] += video.pixel(t, c, y, x);
            }
        }
    }
    let count = (h / 2 * (w / 2)) as f64;
    sums.map(|s| s.iter().fold(f64::MIN, |m, &v| m.max(v / count)))
}

/// The caption is a pure function of the pixels.
pub fn caption_for(video: &VideoFrames) -> Vec<usize> {
    let mut caption: Vec<usize> = (0..video.frame_count())
        .map(|t| {
            let means = quadrant_means(video, t);
            let mut best = 0;
            for q in 1..4 {
                if means[q] > means[best] {
                    best = q;
                }
            }
            if means[best] < DARK_THRESHOLD {
                DARK
            } else {
                QUADRANT[best]
            }
        })
        .collect();
    let first = caption[0];
    caption.push(if caption.iter().all(|&q| q == first) { SAME } else { MOVED });
    caption
}

fn synth_video(frames: usize, side: usize, rng: &mut ChaCha8Rng) -> Result<VideoFrames> {
    let half = side / 2;
    let mut data = Vec::with_capacity(frames * 3 * side * side);
    for _ in 0..frames {
        let q = rng.gen_range(0..4);
        let (qy, qx) = (q / 2, q % 2);
        for c in 0..3 {
            for y in 0..side {
                for x in 0..side {
                    let lit = c == LIT_CHANNEL && y / half == qy && x / half == qx;
                    let (lo, hi) = if lit { BRIGHT } else { NOISE };
                    data.push(rng.gen_range(lo..=hi));
                }
            }
        }
    }
    VideoFrames::new(Tensor::new(vec![frames, 3, side, side], data)?)
}

pub fn make_dataset(seed: u64, count: usize, frames: usize, cfg: &ModelConfig) -> Result<Vec<SynthSample>> {
    if count == 0 {
        return Err(contract("dataset needs at least one sample"));
    }
    if frames == 0 || frames > cfg.max_frames {
        return Err(config(format!("frames must be in 1..={}", cfg.max_frames)));
    }
    if cfg.vocab_size < VOCAB {
        return Err(config(format!("synthetic captions need vocab_size >= {VOCAB}")));
    }
    let side = cfg.image_side();
    if side < 2 || !side.is_multiple_of(2) {
        return Err(config("synthetic frames need an even image side"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let video = synth_video(frames, side, &mut rng)?;
            let caption = caption_for(&video);
            Ok(SynthSample { video, caption })
        })
        .collect()
}
