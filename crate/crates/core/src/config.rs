//! Architectural hyperparameters shared by the model and the cost model.

use serde::{Deserialize, Serialize};

use crate::error::{config, Result};

/// How a cross-attention output is combined with its query rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GateMode {
    /// `attn + γ·input`: the gate scales the query rows that are added back.
    ScaledInput,
    /// `input + γ·attn`; with `γ = 0` the cross-attention is an identity.
    Residual,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Patch grid side `G`; each frame yields `N = G²` tokens.
    pub grid: usize,
    pub patch_size: usize,
    /// Spatial pooling window `p`; must divide `grid`.
    pub pool_window: usize,
    /// Vision feature width `D`.
    pub enc_dim: usize,
    /// Language-model width `D′`.
    pub llm_dim: usize,
    /// Projector hidden width `d_h`.
    pub proj_hidden: usize,
    pub mlp_hidden: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Decoder layers `0, k, 2k, …` (zero-based) carry dual cross-attention.
    /// `None` disables the cross-attention layers entirely.
    #[serde(default)]
    pub k_insert: Option<usize>,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub max_frames: usize,
    pub gate_mode: GateMode,
    pub v2v_enabled: bool,
    pub t2v_enabled: bool,
    #[serde(default = "default_gamma_init")]
    pub gamma_init: f64,
    #[serde(default = "default_ln_eps")]
    pub ln_eps: f64,
    #[serde(default = "default_rope_base")]
    pub rope_base: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_gamma_init() -> f64 {
    1.0
}

fn default_ln_eps() -> f64 {
    1e-5
}

fn default_rope_base() -> f64 {
    10_000.0
}

impl ModelConfig {
    /// The small configuration used by gradient checks and unit tests:
    /// `D′=16, H=2`, two layers with the first one carrying cross-attention,
    /// a 4×4 patch grid pooled 2×2.
    pub fn toy() -> Self {
        Self {
            grid: 4,
            patch_size: 2,
            pool_window: 2,
            enc_dim: 8,
            llm_dim: 16,
            proj_hidden: 12,
            mlp_hidden: 32,
            n_layers: 2,
            n_heads: 2,
            k_insert: Some(2),
            vocab_size: 8,
            max_seq: 64,
            max_frames: 8,
            gate_mode: GateMode::ScaledInput,
            v2v_enabled: true,
            t2v_enabled: true,
            gamma_init: default_gamma_init(),
            ln_eps: default_ln_eps(),
            rope_base: default_rope_base(),
            seed: 0,
        }
    }

    /// A wider variant of [`ModelConfig::toy`] (`D′=64, H=4`) used for
    /// overfitting runs; the narrow model learns to read the frames too
    /// slowly for a few hundred single-sample steps.
    pub fn toy_overfit() -> Self {
        Self {
            enc_dim: 32,
            llm_dim: 64,
            proj_hidden: 64,
            mlp_hidden: 128,
            n_heads: 4,
            ..Self::toy()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("grid", self.grid),
            ("patch_size", self.patch_size),
            ("pool_window", self.pool_window),
            ("enc_dim", self.enc_dim),
            ("llm_dim", self.llm_dim),
            ("proj_hidden", self.proj_hidden),
            ("mlp_hidden", self.mlp_hidden),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("vocab_size", self.vocab_size),
            ("max_seq", self.max_seq),
            ("max_frames", self.max_frames),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(config(format!("{name} must be positive")));
        }
        if !self.grid.is_multiple_of(self.pool_window) {
            return Err(config(format!(
                "pool_window {} does not divide grid {}",
                self.pool_window, self.grid
            )));
        }
        if !self.llm_dim.is_multiple_of(self.n_heads) {
            return Err(config(format!(
                "llm_dim {} not divisible by n_heads {}",
                self.llm_dim, self.n_heads
            )));
        }
        if !self.head_dim().is_multiple_of(2) {
            return Err(config(format!(
                "head dim {} must be even for rotary encoding",
                self.head_dim()
            )));
        }
        if self.k_insert == Some(0) {
            return Err(config("k_insert must be at least 1 (omit it to disable)"));
        }
        if !(self.ln_eps > 0.0) {
            return Err(config("ln_eps must be positive"));
        }
        if !self.gamma_init.is_finite() {
            return Err(config("gamma_init must be finite"));
        }
        Ok(())
    }

    pub fn patches_per_frame(&self) -> usize {
        self.grid * self.grid
    }

    pub fn pooled_grid(&self) -> usize {
        self.grid / self.pool_window
    }

    /// `M = (G/p)²`
    pub fn tokens_per_frame(&self) -> usize {
        self.pooled_grid() * self.pooled_grid()
    }

    pub fn head_dim(&self) -> usize {
        self.llm_dim / self.n_heads
    }

    pub fn image_side(&self) -> usize {
        self.grid * self.patch_size
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }

    /// Whether zero-based layer `index` is a dual cross-attention layer.
    /// Layers `0, K, 2K, …` qualify.
    pub fn is_dcal_layer(&self, index: usize) -> bool {
        self.k_insert.is_some_and(|k| index.is_multiple_of(k))
    }

    pub fn dcal_layer_count(&self) -> usize {
        self.k_insert.map_or(0, |k| self.n_layers.div_ceil(k))
    }

    /// Whether any layer runs cross-attention, so that the full set of
    /// per-frame tokens has to be projected.
    pub fn uses_cross_attention(&self) -> bool {
        self.dcal_layer_count() > 0 && (self.v2v_enabled || self.t2v_enabled)
    }

    /// LLM sequence length `T·(G/p)² + L_t`.
    pub fn sequence_len(&self, frames: usize, text_len: usize) -> usize {
        frames * self.tokens_per_frame() + text_len
    }
}
