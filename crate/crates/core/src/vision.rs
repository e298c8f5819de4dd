//! Frame encoding, spatial token merging and the vision-language projector.
//!
//! The encoder is a toy stand-in: a linear patch embedding plus a learned
//! position table, applied to each frame independently. Token layout is
//! always frame-major, raster order within a frame: row `t·N + y·G + x`.

use crate::error::{config, contract, Result};
use crate::tensor::{Tape, Tensor, Var};

/// `T` frames of RGB pixels, stored as `[T, 3, H, W]` with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoFrames {
    frames: Tensor,
}

impl VideoFrames {
    pub fn new(frames: Tensor) -> Result<Self> {
        let s = frames.shape();
        if s.len() != 4 || s[1] != 3 {
            return Err(contract(format!("video must be [T, 3, H, W], got {s:?}")));
        }
        if frames.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(contract("pixel values must lie in [0, 1]"));
        }
        Ok(Self { frames })
    }

    pub fn constant(frames: usize, side: usize, value: f64) -> Result<Self> {
        Self::new(Tensor::full(&[frames, 3, side, side], value))
    }

    pub fn frame_count(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.frames.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.frames.shape()[3]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.frames
    }

    pub fn pixel(&self, t: usize, c: usize, y: usize, x: usize) -> f64 {
        let (h, w) = (self.height(), self.width());
        self.frames.data()[((t * 3 + c) * h + y) * w + x]
    }

    /// Reorders frames; `order[i]` is the source frame for output frame `i`.
    pub fn permute_frames(&self, order: &[usize]) -> Result<Self> {
        let per_frame = 3 * self.height() * self.width();
        let mut data = Vec::with_capacity(order.len() * per_frame);
        for &t in order {
            if t >= self.frame_count() {
                return Err(contract(format!("frame {t} out of range")));
            }
            data.extend_from_slice(&self.frames.data()[t * per_frame..(t + 1) * per_frame]);
        }
        Self::new(Tensor::new(
            vec![order.len(), 3, self.height(), self.width()],
            data,
        )?)
    }
}

/// Full-resolution per-frame tokens, `[T·N × width]` with `N = grid²`.
#[derive(Debug, Clone, Copy)]
pub struct OriginalVisualTokens {
    pub tokens: Var,
    pub frames: usize,
    pub grid: usize,
}

impl OriginalVisualTokens {
    pub fn tokens_per_frame(&self) -> usize {
        self.grid * self.grid
    }

    pub fn len(&self) -> usize {
        self.frames * self.tokens_per_frame()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Pooled tokens, `[T·M × width]` with `M = (grid / pool_window)²`.
#[derive(Debug, Clone, Copy)]
pub struct CompressedVisualTokens {
    pub tokens: Var,
    pub frames: usize,
    pub pooled_grid: usize,
    pub pool_window: usize,
}

impl CompressedVisualTokens {
    pub fn tokens_per_frame(&self) -> usize {
        self.pooled_grid * self.pooled_grid
    }

    pub fn len(&self) -> usize {
        self.frames * self.tokens_per_frame()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Flattens each `patch_size × patch_size` patch to a row of length
/// `3·patch_size²`, channel-major then row-major within the patch.
pub fn patchify(video: &VideoFrames, patch_size: usize) -> Result<Tensor> {
    let (h, w) = (video.height(), video.width());
    if patch_size == 0 || h % patch_size != 0 || w % patch_size != 0 || h != w {
        return Err(config(format!(
            "frame {h}×{w} is not a square multiple of patch size {patch_size}"
        )));
    }
    let g = h / patch_size;
    let t = video.frame_count();
    let pd = 3 * patch_size * patch_size;
    let mut data = Vec::with_capacity(t * g * g * pd);
    for f in 0..t {
        for gy in 0..g {
            for gx in 0..g {
                for c in 0..3 {
                    for dy in 0..patch_size {
                        for dx in 0..patch_size {
                            data.push(video.pixel(f, c, gy * patch_size + dy, gx * patch_size + dx));
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![t * g * g, pd], data)
}

/// Linear patch embedding plus additive position embedding, per frame.
pub fn encode_frames(
    tape: &mut Tape,
    video: &VideoFrames,
    patch_embed: Var,
    pos_embed: Var,
    patch_size: usize,
) -> Result<OriginalVisualTokens> {
    let patches = patchify(video, patch_size)?;
    let grid = video.height() / patch_size;
    let n = grid * grid;
    if tape.shape(pos_embed)[0] != n {
        return Err(config(format!(
            "position table has {} rows but frames yield {n} patches",
            tape.shape(pos_embed)[0]
        )));
    }
    let patches = tape.constant(patches);
    let embedded = tape.matmul(patches, patch_embed)?;
    let tokens = tape.add_tiled(embedded, pos_embed)?;
    Ok(OriginalVisualTokens {
        tokens,
        frames: video.frame_count(),
        grid,
    })
}

/// Row groups for non-overlapping `window × window` mean pooling of a
/// `grid × grid` token map, frame by frame.
pub fn pool_groups(frames: usize, grid: usize, window: usize) -> Result<Vec<Vec<usize>>> {
    if window == 0 || !grid.is_multiple_of(window) {
        return Err(config(format!("pool_window {window} does not divide grid {grid}")));
    }
    let pooled = grid / window;
    let n = grid * grid;
    let mut groups = Vec::with_capacity(frames * pooled * pooled);
    for t in 0..frames {
        for py in 0..pooled {
            for px in 0..pooled {
                let mut members = Vec::with_capacity(window * window);
                for dy in 0..window {
                    for dx in 0..window {
                        members.push(t * n + (py * window + dy) * grid + px * window + dx);
                    }
                }
                groups.push(members);
            }
        }
    }
    Ok(groups)
}

/// Parameter-free spatial merge: each output token is the mean of its block.
pub fn pool_merge(
    tape: &mut Tape,
    tokens: &OriginalVisualTokens,
    pool_window: usize,
) -> Result<CompressedVisualTokens> {
    let groups = pool_groups(tokens.frames, tokens.grid, pool_window)?;
    let pooled = tape.mean_rows(tokens.tokens, groups)?;
    Ok(CompressedVisualTokens {
        tokens: pooled,
        frames: tokens.frames,
        pooled_grid: tokens.grid / pool_window,
        pool_window,
    })
}

/// Projector weights bound on a tape.
#[derive(Debug, Clone, Copy)]
pub struct ProjectorVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    pub ln_gain: Var,
    pub ln_bias: Var,
}

/// `LayerNorm(GeLU(x·w1 + b1)·w2 + b2)`
pub fn project(tape: &mut Tape, x: Var, p: &ProjectorVars, eps: f64) -> Result<Var> {
    let h = tape.matmul(x, p.w1)?;
    let h = tape.add_tiled(h, p.b1)?;
    let h = tape.gelu(h)?;
    let y = tape.matmul(h, p.w2)?;
    let y = tape.add_tiled(y, p.b2)?;
    tape.layer_norm(y, p.ln_gain, p.ln_bias, eps)
}
