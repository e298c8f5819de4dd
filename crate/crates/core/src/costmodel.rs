//! Analytic prefill cost: FLOPs, memory and a roofline time estimate.
//!
//! Two variants are compared on the same language model:
//!
//! - `Baseline` feeds every per-frame token (`T·G²` rows) through the
//!   decoder and has no cross-attention;
//! - `Crosslmm` feeds the pooled tokens (`T·(G/p)²` rows) and reaches the
//!   full-resolution tokens through cross-attention layers.
//!
//! Only matrix products are counted, two FLOPs per multiply-accumulate. The
//! per-term formulas mirror the forward pass exactly, so the count equals
//! twice the tape's MAC counter for any configuration.

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{config, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Baseline,
    Crosslmm,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Crosslmm => "crosslmm",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostConfig {
    pub arch: ModelConfig,
    pub bytes_per_value: u64,
    /// Effective FLOPs per second used for the prefill-time estimate.
    pub device_throughput: f64,
}

impl CostConfig {
    pub fn new(arch: ModelConfig, bytes_per_value: u64, device_throughput: f64) -> Result<Self> {
        let cfg = Self {
            arch,
            bytes_per_value,
            device_throughput,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        if self.bytes_per_value == 0 {
            return Err(config("bytes_per_value must be positive"));
        }
        if !(self.device_throughput.is_finite() && self.device_throughput > 0.0) {
            return Err(config("device_throughput must be a positive number"));
        }
        Ok(())
    }

    /// The architecture a variant actually runs.
    pub fn arch_for(&self, variant: Variant) -> ModelConfig {
        match variant {
            Variant::Crosslmm => self.arch.clone(),
            Variant::Baseline => ModelConfig {
                pool_window: 1,
                k_insert: None,
                ..self.arch.clone()
            },
        }
    }
}

/// Multiply-accumulates of one forward pass (`Model::forward_on`) over
/// `frames` frames and `text_len` text tokens.
pub fn forward_macs(arch: &ModelConfig, frames: usize, text_len: usize, t2v_active: bool) -> u64 {
    let c = |x: usize| x as u64;
    let (d, dp, dh, f) = (c(arch.enc_dim), c(arch.llm_dim), c(arch.proj_hidden), c(arch.mlp_hidden));
    let n_all = c(frames * arch.patches_per_frame());
    let lv = c(frames * arch.tokens_per_frame());
    let lt = c(text_len);
    let l = lv + lt;
    let project = |rows: u64| rows * (d * dh + dh * dp);

    let mut macs = n_all * c(arch.patch_dim()) * d;
    macs += project(lv);

    let v2v = arch.v2v_enabled && lv > 0;
    let t2v = arch.t2v_enabled && t2v_active && lt > 0;
    let cross_layers = c(arch.dcal_layer_count());
    if cross_layers > 0 && (v2v || t2v) {
        macs += project(n_all);
    }

    let self_attn = 4 * l * dp * dp + 2 * l * l * dp;
    let mlp = 2 * l * dp * f;
    macs += c(arch.n_layers) * (self_attn + mlp);

    // q and output projections over the queries, k/v over the memory,
    // scores and weighted values over all (query, key) pairs
    let cross = |queries: u64| 2 * queries * dp * dp + 2 * n_all * dp * dp + 2 * queries * n_all * dp;
    if v2v {
        macs += cross_layers * cross(lv);
    }
    if t2v {
        macs += cross_layers * cross(lt);
    }

    macs + lt * dp * c(arch.vocab_size)
}

pub fn flops_forward(cfg: &CostConfig, variant: Variant, frames: usize, text_len: usize) -> u64 {
    2 * forward_macs(&cfg.arch_for(variant), frames, text_len, true)
}

/// Values cached for decoding: self-attention keys and values for every
/// sequence position in every layer, plus the text-to-visual keys and values
/// over the full-resolution tokens for each cross-attention layer.
pub fn kv_values(arch: &ModelConfig, frames: usize, text_len: usize) -> u64 {
    let dp = arch.llm_dim as u64;
    let l = arch.sequence_len(frames, text_len) as u64;
    let mut values = 2 * l * dp * arch.n_layers as u64;
    if arch.t2v_enabled && arch.dcal_layer_count() > 0 {
        let n_all = (frames * arch.patches_per_frame()) as u64;
        values += 2 * n_all * dp * arch.dcal_layer_count() as u64;
    }
    values
}

pub fn kv_memory(cfg: &CostConfig, variant: Variant, frames: usize, text_len: usize) -> u64 {
    kv_values(&cfg.arch_for(variant), frames, text_len) * cfg.bytes_per_value
}

/// Largest per-layer transient during prefill: hidden-state working set
/// (input, norm, q, k, v, attention output), the attention score matrices
/// and the MLP hidden layer; cross-attention layers add the full-resolution
/// memory, its keys/values and the cross scores of each active branch.
pub fn activation_values(arch: &ModelConfig, frames: usize, text_len: usize) -> u64 {
    let c = |x: usize| x as u64;
    let (dp, h, f) = (c(arch.llm_dim), c(arch.n_heads), c(arch.mlp_hidden));
    let lv = c(frames * arch.tokens_per_frame());
    let lt = c(text_len);
    let l = lv + lt;
    let plain = 6 * l * dp + h * l * l + l * f;
    if arch.dcal_layer_count() == 0 || !(arch.v2v_enabled || arch.t2v_enabled) {
        return plain;
    }
    let n_all = c(frames * arch.patches_per_frame());
    let mut extra = n_all * dp;
    for (on, queries) in [(arch.v2v_enabled, lv), (arch.t2v_enabled, lt)] {
        if on && queries > 0 {
            extra += 2 * n_all * dp + h * queries * n_all;
        }
    }
    plain + extra
}

/// Exact scalar count of the parameters allocated for `arch`.
pub fn param_count(arch: &ModelConfig) -> u64 {
    let c = |x: usize| x as u64;
    let (d, dp, dh, f, v) = (
        c(arch.enc_dim),
        c(arch.llm_dim),
        c(arch.proj_hidden),
        c(arch.mlp_hidden),
        c(arch.vocab_size),
    );
    let n = c(arch.patches_per_frame());
    let mut total = c(arch.patch_dim()) * d + n * d;
    total += d * dh + dh + dh * dp + dp + 2 * dp;
    if arch.uses_cross_attention() {
        total += c(arch.max_frames) * dp + n * dp;
    }
    total += v * dp;
    let layer = 4 * dp + 4 * dp * dp + dp * f + f + f * dp + dp;
    total += c(arch.n_layers) * layer;
    let branches = c(usize::from(arch.v2v_enabled) + usize::from(arch.t2v_enabled));
    total += c(arch.dcal_layer_count()) * branches * (4 * dp * dp + 1);
    total + 2 * dp + dp * v
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub variant: Variant,
    pub frames: usize,
    pub flops: u64,
    pub kv_bytes: u64,
    pub act_bytes: u64,
    pub param_bytes: u64,
    pub prefill_s: f64,
}

pub fn report(cfg: &CostConfig, variant: Variant, frames: usize, text_len: usize) -> CostReport {
    let arch = cfg.arch_for(variant);
    let flops = flops_forward(cfg, variant, frames, text_len);
    CostReport {
        variant,
        frames,
        flops,
        kv_bytes: kv_values(&arch, frames, text_len) * cfg.bytes_per_value,
        act_bytes: activation_values(&arch, frames, text_len) * cfg.bytes_per_value,
        param_bytes: param_count(&arch) * cfg.bytes_per_value,
        prefill_s: flops as f64 / cfg.device_throughput,
    }
}

/// Percentage saved by `new` relative to `old`.
pub fn reduction_pct(old: f64, new: f64) -> f64 {
    if old == 0.0 {
        0.0
    } else {
        100.0 * (1.0 - new / old)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub frames: usize,
    pub baseline: CostReport,
    pub crosslmm: CostReport,
    pub flops_reduction_pct: f64,
    pub kv_reduction_pct: f64,
    pub act_reduction_pct: f64,
    pub prefill_reduction_pct: f64,
}

pub fn sweep(cfg: &CostConfig, frames: &[usize], text_len: usize) -> Result<Vec<SweepRow>> {
    if frames.is_empty() {
        return Err(config("frame list is empty"));
    }
    if let Some(&t) = frames.iter().find(|&&t| t == 0) {
        return Err(config(format!("frame count {t} must be positive")));
    }
    Ok(frames
        .iter()
        .map(|&t| {
            let b = report(cfg, Variant::Baseline, t, text_len);
            let x = report(cfg, Variant::Crosslmm, t, text_len);
            SweepRow {
                frames: t,
                flops_reduction_pct: reduction_pct(b.flops as f64, x.flops as f64),
                kv_reduction_pct: reduction_pct(b.kv_bytes as f64, x.kv_bytes as f64),
                act_reduction_pct: reduction_pct(b.act_bytes as f64, x.act_bytes as f64),
                prefill_reduction_pct: reduction_pct(b.prefill_s, x.prefill_s),
                baseline: b,
                crosslmm: x,
            }
        })
        .collect())
}

/// FLOPs growth of one variant between two frame counts.
pub fn scaling_ratio(cfg: &CostConfig, variant: Variant, from: usize, to: usize, text_len: usize) -> f64 {
    flops_forward(cfg, variant, to, text_len) as f64 / flops_forward(cfg, variant, from, text_len) as f64
}

/// A 7B-class decoder (`D′=3584`, 28 layers, 28 heads) behind a SigLIP-sized
/// encoder on a 27×27 grid, pooled to 3×3 with cross-attention every 4th
/// layer.
pub fn like_7b() -> ModelConfig {
    ModelConfig {
        grid: 27,
        patch_size: 14,
        pool_window: 9,
        enc_dim: 1152,
        llm_dim: 3584,
        proj_hidden: 3584,
        mlp_hidden: 18944,
        n_layers: 28,
        n_heads: 28,
        k_insert: Some(4),
        vocab_size: 152_064,
        max_seq: 1 << 18,
        max_frames: 256,
        ..ModelConfig::toy()
    }
}

/// The 2B-class counterpart (`D′=1536`, 28 layers, 12 heads).
pub fn like_2b() -> ModelConfig {
    ModelConfig {
        llm_dim: 1536,
        proj_hidden: 1536,
        mlp_hidden: 8960,
        n_heads: 12,
        vocab_size: 151_936,
        ..like_7b()
    }
}
