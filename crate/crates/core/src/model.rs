//! Decoder-only language model with dual cross-attention layers.
//!
//! The decoder sees `[pooled visual ; text]`. Every `k_insert`-th layer also
//! lets the visual span (V2V) and the text span (T2V) attend to the full set
//! of per-frame tokens, which never enter the sequence itself.
//!
//! Layer structure. A plain layer is pre-norm:
//!
//! ```text
//! h   = x + SelfAttn(LN1(x))
//! out = h + MLP(LN2(h))
//! ```
//!
//! A cross-attention layer normalises the self-attention result
//! (`I′ = LN2(h)`), updates the visual rows of `I′` with V2V and the text rows
//! with T2V (both read the same `I′`), and feeds the result to the MLP:
//!
//! ```text
//! I″  = [gate(V2V(I′[:Lv]), I′[:Lv]) ; gate(T2V(I′[Lv:]), I′[Lv:])]
//! out = h + MLP(I″)
//! ```
//!
//! With both branches off, or with residual gating at `γ = 0`, `I″ = I′` and
//! the layer reduces exactly to a plain layer.

use std::collections::BTreeSet;

use crate::attention::{
    self, cross_attention, cross_kv, gate, AttnVars, CrossAttnVars, CrossKv, PastKv,
};
use crate::config::ModelConfig;
use crate::error::{config, contract, Error, Result};
use crate::params::{init_params, AttnIds, Bound, CrossAttnIds, DecoderLayerIds, Layout, ParamGroup, ParamStore};
use crate::tensor::{Tape, Tensor, Var};
use crate::vision::{encode_frames, pool_merge, project, CompressedVisualTokens, ProjectorVars, VideoFrames};

/// The concatenated `[visual ; text]` rows fed to the decoder.
#[derive(Debug, Clone, Copy)]
pub struct SequenceState {
    pub x: Var,
    pub visual_len: usize,
    pub text_len: usize,
}

impl SequenceState {
    pub fn len(&self) -> usize {
        self.visual_len + self.text_len
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Stacks projected compressed visual tokens (frame-major, raster order)
/// on top of the embedded text tokens.
pub fn build_sequence(
    tape: &mut Tape,
    visual: &CompressedVisualTokens,
    text_ids: &[usize],
    embed_table: Var,
    max_seq: usize,
) -> Result<SequenceState> {
    let visual_len = visual.len();
    let len = visual_len + text_ids.len();
    if len > max_seq {
        return Err(Error::SequenceLength { len, max: max_seq });
    }
    if tape.shape(visual.tokens)[1] != tape.shape(embed_table)[1] {
        return Err(Error::Shape {
            op: "build_sequence",
            lhs: tape.shape(visual.tokens).to_vec(),
            rhs: tape.shape(embed_table).to_vec(),
        });
    }
    let x = if text_ids.is_empty() {
        visual.tokens
    } else {
        let text = tape.embedding(embed_table, text_ids)?;
        tape.concat_rows(&[visual.tokens, text])?
    };
    Ok(SequenceState {
        x,
        visual_len,
        text_len: text_ids.len(),
    })
}

/// Options that vary between training stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ForwardOptions {
    /// Text-to-visual cross-attention runs only when this is set (and the
    /// config enables it).
    pub t2v_active: bool,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        Self { t2v_active: true }
    }
}

/// Handles produced by one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// `[L_t × vocab]`
    pub logits: Var,
    pub visual_len: usize,
    pub text_len: usize,
    /// Hidden states after each decoder layer, `[L × D′]`.
    pub layer_outputs: Vec<Var>,
    /// Every attention probability matrix computed, self and cross.
    pub attention_probs: Vec<Var>,
}

impl ForwardTrace {
    pub fn sequence_len(&self) -> usize {
        self.visual_len + self.text_len
    }
}

/// Per-layer cache for incremental decoding.
#[derive(Debug, Clone, Default)]
pub struct DecodeCache {
    self_kv: Vec<Option<(Tensor, Tensor)>>,
    /// Text-to-visual keys/values per cross-attention layer, computed once.
    t2v_kv: Vec<Option<(Tensor, Tensor)>>,
    len: usize,
}

impl DecodeCache {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub layout: Layout,
}

/// Where cross-attention keys and values come from in one pass.
enum Memory {
    None,
    /// Projected full-resolution tokens, `[T·N × D′]`.
    Tokens(Var),
    /// Reuse text-to-visual keys/values from the decode cache.
    Cached,
}

struct Chunk {
    x: Var,
    visual_len: usize,
    text_len: usize,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let (params, layout) = init_params(&config);
        Ok(Self {
            config,
            params,
            layout,
        })
    }

    /// Adopts an existing parameter set, checking that names and shapes match
    /// what `config` would allocate.
    pub fn with_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let (fresh, layout) = init_params(&config);
        if fresh.len() != params.len() {
            return Err(config_mismatch(format!(
                "expected {} tensors, found {}",
                fresh.len(),
                params.len()
            )));
        }
        for (a, b) in fresh.entries().iter().zip(params.entries()) {
            if a.name != b.name || a.value.shape() != b.value.shape() || a.group != b.group {
                return Err(config_mismatch(format!(
                    "expected {} {:?}, found {} {:?}",
                    a.name,
                    a.value.shape(),
                    b.name,
                    b.value.shape()
                )));
            }
        }
        Ok(Self {
            config,
            params,
            layout,
        })
    }

    /// A model for `config` that reuses every tensor of `self` whose name and
    /// shape match; anything else keeps its fresh initialisation. Used to
    /// compare ablations on identical shared weights.
    pub fn with_shared_weights(&self, config: ModelConfig) -> Result<Self> {
        let mut other = Self::new(config)?;
        for entry in other.params.entries_mut() {
            if let Some(id) = self.params.find(&entry.name) {
                let src = self.params.get(id);
                if src.shape() == entry.value.shape() {
                    entry.value = src.clone();
                }
            }
        }
        Ok(other)
    }

    pub fn bind(&self, tape: &mut Tape, trainable: &BTreeSet<ParamGroup>) -> Bound {
        self.params.bind(tape, trainable)
    }

    fn attn(b: &Bound, ids: &AttnIds) -> AttnVars {
        AttnVars {
            wq: b[ids.wq],
            wk: b[ids.wk],
            wv: b[ids.wv],
            wo: b[ids.wo],
        }
    }

    fn cross(b: &Bound, ids: &CrossAttnIds) -> CrossAttnVars {
        CrossAttnVars {
            attn: Self::attn(b, &ids.attn),
            gamma_raw: b[ids.gamma_raw],
        }
    }

    pub fn projector_vars(&self, b: &Bound) -> ProjectorVars {
        let p = &self.layout.projector;
        ProjectorVars {
            w1: b[p.w1],
            b1: b[p.b1],
            w2: b[p.w2],
            b2: b[p.b2],
            ln_gain: b[p.ln_gain],
            ln_bias: b[p.ln_bias],
        }
    }

    /// End-to-end pass: encode, pool, project, decode, and produce logits
    /// for every text position.
    pub fn forward_on(
        &self,
        tape: &mut Tape,
        b: &Bound,
        video: &VideoFrames,
        text_ids: &[usize],
        opts: ForwardOptions,
    ) -> Result<ForwardTrace> {
        if text_ids.is_empty() {
            return Err(contract("forward needs at least one text token"));
        }
        let (state, memory) = self.prefill_inputs(tape, b, video, text_ids, opts)?;
        let mut trace = ForwardTrace {
            logits: state.x,
            visual_len: state.visual_len,
            text_len: state.text_len,
            layer_outputs: Vec::new(),
            attention_probs: Vec::new(),
        };
        let chunk = Chunk {
            x: state.x,
            visual_len: state.visual_len,
            text_len: state.text_len,
        };
        let hidden = self.run_layers(tape, b, chunk, &memory, opts, None, &mut trace)?;
        trace.logits = self.logits(tape, b, hidden, state.visual_len, state.text_len)?;
        Ok(trace)
    }

    /// Convenience wrapper: logits `[L_t × vocab]` on a private tape.
    pub fn forward(&self, video: &VideoFrames, text_ids: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, &BTreeSet::new());
        let trace = self.forward_on(&mut tape, &b, video, text_ids, ForwardOptions::default())?;
        Ok(tape.value(trace.logits).clone())
    }

    /// Mean next-token cross-entropy and its gradient for every parameter in
    /// a `trainable` group (others come back as `None`).
    pub fn loss_and_grads(
        &self,
        video: &VideoFrames,
        input_ids: &[usize],
        targets: &[usize],
        trainable: &BTreeSet<ParamGroup>,
        opts: ForwardOptions,
    ) -> Result<(f64, Vec<Option<Tensor>>)> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, trainable);
        let trace = self.forward_on(&mut tape, &b, video, input_ids, opts)?;
        let loss = tape.cross_entropy(trace.logits, targets)?;
        let value = tape.value(loss).item();
        let grads = tape.backward(loss)?;
        let out = b
            .vars()
            .iter()
            .map(|&v| tape.requires_grad(v).then(|| grads.get(v)))
            .collect();
        Ok((value, out))
    }

    pub fn loss(&self, video: &VideoFrames, input_ids: &[usize], targets: &[usize], opts: ForwardOptions) -> Result<f64> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, &BTreeSet::new());
        let trace = self.forward_on(&mut tape, &b, video, input_ids, opts)?;
        let loss = tape.cross_entropy(trace.logits, targets)?;
        Ok(tape.value(loss).item())
    }

    fn prefill_inputs(
        &self,
        tape: &mut Tape,
        b: &Bound,
        video: &VideoFrames,
        text_ids: &[usize],
        opts: ForwardOptions,
    ) -> Result<(SequenceState, Memory)> {
        let cfg = &self.config;
        if video.frame_count() > cfg.max_frames {
            return Err(config(format!(
                "{} frames exceed max_frames {}",
                video.frame_count(),
                cfg.max_frames
            )));
        }
        if video.height() != cfg.image_side() {
            return Err(config(format!(
                "frames are {}px but the encoder expects {}px",
                video.height(),
                cfg.image_side()
            )));
        }
        let enc = &self.layout.encoder;
        let original = encode_frames(tape, video, b[enc.patch_embed], b[enc.pos_embed], cfg.patch_size)?;
        let mut compressed = pool_merge(tape, &original, cfg.pool_window)?;
        let proj = self.projector_vars(b);
        compressed.tokens = project(tape, compressed.tokens, &proj, cfg.ln_eps)?;
        let state = build_sequence(tape, &compressed, text_ids, b[self.layout.embed], cfg.max_seq)?;

        let needs_memory = cfg.dcal_layer_count() > 0
            && ((cfg.v2v_enabled && state.visual_len > 0)
                || (cfg.t2v_enabled && opts.t2v_active && state.text_len > 0));
        let memory = if needs_memory {
            let projected = project(tape, original.tokens, &proj, cfg.ln_eps)?;
            let pos = self
                .layout
                .visual_pos
                .as_ref()
                .ok_or_else(|| contract("cross-attention memory without position tables"))?;
            let n = original.tokens_per_frame();
            let frame_ids: Vec<usize> = (0..original.len()).map(|r| r / n).collect();
            let temporal = tape.embedding(b[pos.temporal], &frame_ids)?;
            let with_grid = tape.add_tiled(projected, b[pos.grid])?;
            Memory::Tokens(tape.add(with_grid, temporal)?)
        } else {
            Memory::None
        };
        Ok((state, memory))
    }

    fn logits(&self, tape: &mut Tape, b: &Bound, hidden: Var, skip: usize, text_len: usize) -> Result<Var> {
        let text = if skip == 0 {
            hidden
        } else {
            tape.slice_rows(hidden, skip, text_len)?
        };
        let normed = tape.layer_norm(
            text,
            b[self.layout.final_ln_gain],
            b[self.layout.final_ln_bias],
            self.config.ln_eps,
        )?;
        tape.matmul(normed, b[self.layout.lm_head])
    }

    fn mlp(&self, tape: &mut Tape, b: &Bound, ids: &DecoderLayerIds, x: Var) -> Result<Var> {
        let h = tape.matmul(x, b[ids.mlp_w1])?;
        let h = tape.add_tiled(h, b[ids.mlp_b1])?;
        let h = tape.gelu(h)?;
        let y = tape.matmul(h, b[ids.mlp_w2])?;
        tape.add_tiled(y, b[ids.mlp_b2])
    }

    #[allow(clippy::too_many_arguments)]
    fn run_layers(
        &self,
        tape: &mut Tape,
        b: &Bound,
        chunk: Chunk,
        memory: &Memory,
        opts: ForwardOptions,
        mut cache: Option<&mut DecodeCache>,
        trace: &mut ForwardTrace,
    ) -> Result<Var> {
        let cfg = &self.config;
        let mut x = chunk.x;
        if let Some(c) = cache.as_deref_mut() {
            c.self_kv.resize(cfg.n_layers, None);
            c.t2v_kv.resize(cfg.n_layers, None);
        }
        for (i, ids) in self.layout.layers.iter().enumerate() {
            let normed = tape.layer_norm(x, b[ids.ln1_gain], b[ids.ln1_bias], cfg.ln_eps)?;
            let past = cache
                .as_deref()
                .and_then(|c| c.self_kv[i].as_ref())
                .map(|(k, v)| PastKv { keys: k, values: v });
            let sa = attention::self_attention(
                tape,
                normed,
                &Self::attn(b, &ids.attn),
                cfg.n_heads,
                cfg.rope_base,
                past,
                &mut trace.attention_probs,
            )?;
            if let Some(c) = cache.as_deref_mut() {
                let (k, v) = (tape.value(sa.keys).clone(), tape.value(sa.values).clone());
                c.self_kv[i] = Some(match c.self_kv[i].take() {
                    Some((pk, pv)) => (stack(&pk, &k)?, stack(&pv, &v)?),
                    None => (k, v),
                });
            }
            let h = tape.add(x, sa.out)?;
            let integrated = tape.layer_norm(h, b[ids.ln2_gain], b[ids.ln2_bias], cfg.ln_eps)?;

            let mlp_in = match &self.layout.dcal[i] {
                Some(dcal) => {
                    let spans = SpanUpdate {
                        integrated,
                        visual_len: chunk.visual_len,
                        text_len: chunk.text_len,
                    };
                    let v2v = dcal.v2v.as_ref().map(|ids| Self::cross(b, ids));
                    let t2v = dcal
                        .t2v
                        .as_ref()
                        .filter(|_| opts.t2v_active)
                        .map(|ids| Self::cross(b, ids));
                    self.dual_cross_attention(tape, spans, v2v, t2v, memory, cache.as_deref_mut(), i, trace)?
                }
                None => integrated,
            };
            let m = self.mlp(tape, b, ids, mlp_in)?;
            x = tape.add(h, m)?;
            trace.layer_outputs.push(x);
        }
        if let Some(c) = cache {
            c.len += chunk.visual_len + chunk.text_len;
        }
        Ok(x)
    }

    #[allow(clippy::too_many_arguments)]
    fn dual_cross_attention(
        &self,
        tape: &mut Tape,
        spans: SpanUpdate,
        v2v: Option<CrossAttnVars>,
        t2v: Option<CrossAttnVars>,
        memory: &Memory,
        cache: Option<&mut DecodeCache>,
        layer: usize,
        trace: &mut ForwardTrace,
    ) -> Result<Var> {
        let cfg = &self.config;
        let SpanUpdate {
            integrated,
            visual_len,
            text_len,
        } = spans;
        if v2v.is_none() && t2v.is_none() {
            return Ok(integrated);
        }
        let mut visual = (visual_len > 0)
            .then(|| tape.slice_rows(integrated, 0, visual_len))
            .transpose()?;
        let mut text = (text_len > 0)
            .then(|| tape.slice_rows(integrated, visual_len, text_len))
            .transpose()?;

        if let (Some(params), Some(rows)) = (v2v, visual) {
            let kv = match memory {
                Memory::Tokens(m) => cross_kv(tape, *m, &params.attn)?,
                _ => return Err(contract("visual-to-visual attention needs the original tokens")),
            };
            visual = Some(gated_cross(tape, rows, &kv, &params, cfg, trace)?);
        }
        if let (Some(params), Some(rows)) = (t2v, text) {
            let kv = match memory {
                Memory::Tokens(m) => cross_kv(tape, *m, &params.attn)?,
                Memory::Cached => {
                    let (k, v) = cache
                        .as_deref()
                        .and_then(|c| c.t2v_kv[layer].as_ref())
                        .ok_or_else(|| contract("text-to-visual attention needs the original tokens"))?;
                    CrossKv {
                        keys: tape.constant(k.clone()),
                        values: tape.constant(v.clone()),
                    }
                }
                Memory::None => {
                    return Err(contract("text-to-visual attention needs the original tokens"))
                }
            };
            if let (Some(c), Memory::Tokens(_)) = (cache, memory) {
                c.t2v_kv[layer] = Some((tape.value(kv.keys).clone(), tape.value(kv.values).clone()));
            }
            text = Some(gated_cross(tape, rows, &kv, &params, cfg, trace)?);
        }

        match (visual, text) {
            (Some(v), Some(t)) => tape.concat_rows(&[v, t]),
            (Some(v), None) => Ok(v),
            (None, Some(t)) => Ok(t),
            (None, None) => Err(contract("empty sequence")),
        }
    }

    /// Greedy autoregressive decoding. Returns the prompt followed by
    /// `max_new` generated ids.
    ///
    /// The prompt is processed once; each later step feeds only the newest
    /// token, reusing cached self-attention keys/values and the text-to-visual
    /// keys/values computed from the original tokens at prefill.
    pub fn greedy_decode(&self, video: &VideoFrames, prompt_ids: &[usize], max_new: usize) -> Result<Vec<usize>> {
        if max_new == 0 {
            return Err(contract("max_new must be at least 1"));
        }
        if prompt_ids.is_empty() {
            return Err(contract("prompt must contain at least one token"));
        }
        let needed = self.config.sequence_len(video.frame_count(), prompt_ids.len() + max_new - 1);
        if needed > self.config.max_seq {
            return Err(Error::SequenceLength {
                len: needed,
                max: self.config.max_seq,
            });
        }
        let opts = ForwardOptions::default();
        let mut cache = DecodeCache::default();
        let mut tokens = prompt_ids.to_vec();

        let mut tape = Tape::new();
        let b = self.bind(&mut tape, &BTreeSet::new());
        let (state, memory) = self.prefill_inputs(&mut tape, &b, video, prompt_ids, opts)?;
        let mut trace = empty_trace(state.x);
        let chunk = Chunk {
            x: state.x,
            visual_len: state.visual_len,
            text_len: state.text_len,
        };
        let hidden = self.run_layers(&mut tape, &b, chunk, &memory, opts, Some(&mut cache), &mut trace)?;
        let logits = self.logits(&mut tape, &b, hidden, state.visual_len, state.text_len)?;
        tokens.push(argmax(tape.value(logits).row(state.text_len - 1)));

        while tokens.len() < prompt_ids.len() + max_new {
            let mut tape = Tape::new();
            let b = self.bind(&mut tape, &BTreeSet::new());
            let last = *tokens.last().unwrap();
            let x = tape.embedding(b[self.layout.embed], &[last])?;
            let mut trace = empty_trace(x);
            let chunk = Chunk {
                x,
                visual_len: 0,
                text_len: 1,
            };
            let hidden = self.run_layers(&mut tape, &b, chunk, &Memory::Cached, opts, Some(&mut cache), &mut trace)?;
            let logits = self.logits(&mut tape, &b, hidden, 0, 1)?;
            tokens.push(argmax(tape.value(logits).row(0)));
        }
        Ok(tokens)
    }
}

struct SpanUpdate {
    integrated: Var,
    visual_len: usize,
    text_len: usize,
}

fn gated_cross(
    tape: &mut Tape,
    rows: Var,
    kv: &CrossKv,
    params: &CrossAttnVars,
    cfg: &ModelConfig,
    trace: &mut ForwardTrace,
) -> Result<Var> {
    let attended = cross_attention(tape, rows, kv, &params.attn, cfg.n_heads, &mut trace.attention_probs)?;
    gate(tape, attended, rows, params.gamma_raw, cfg.gate_mode)
}

/// Visual-to-visual update of the visual span of `integrated` (the
/// normalised self-attention output). Only rows `0..visual_len` are returned.
pub fn v2v_cross_attention(
    tape: &mut Tape,
    integrated: &SequenceState,
    memory: Option<Var>,
    params: &CrossAttnVars,
    cfg: &ModelConfig,
) -> Result<Var> {
    let memory = memory.ok_or_else(|| contract("visual-to-visual attention needs the original tokens"))?;
    if integrated.visual_len == 0 {
        return Err(contract("visual-to-visual attention with an empty visual span"));
    }
    let rows = tape.slice_rows(integrated.x, 0, integrated.visual_len)?;
    let kv = cross_kv(tape, memory, &params.attn)?;
    let attended = cross_attention(tape, rows, &kv, &params.attn, cfg.n_heads, &mut Vec::new())?;
    gate(tape, attended, rows, params.gamma_raw, cfg.gate_mode)
}

/// Text-to-visual update of the text span. With no text rows there is
/// nothing to update and `None` is returned.
pub fn t2v_cross_attention(
    tape: &mut Tape,
    integrated: &SequenceState,
    memory: Option<Var>,
    params: &CrossAttnVars,
    cfg: &ModelConfig,
) -> Result<Option<Var>> {
    if integrated.text_len == 0 {
        return Ok(None);
    }
    let memory = memory.ok_or_else(|| contract("text-to-visual attention needs the original tokens"))?;
    let rows = tape.slice_rows(integrated.x, integrated.visual_len, integrated.text_len)?;
    let kv = cross_kv(tape, memory, &params.attn)?;
    let attended = cross_attention(tape, rows, &kv, &params.attn, cfg.n_heads, &mut Vec::new())?;
    gate(tape, attended, rows, params.gamma_raw, cfg.gate_mode).map(Some)
}

fn empty_trace(x: Var) -> ForwardTrace {
    ForwardTrace {
        logits: x,
        visual_len: 0,
        text_len: 0,
        layer_outputs: Vec::new(),
        attention_probs: Vec::new(),
    }
}

fn stack(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut data = a.data().to_vec();
    data.extend_from_slice(b.data());
    Tensor::new(vec![a.rows() + b.rows(), a.cols()], data)
}

/// Index of the largest entry; the first one wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn config_mismatch(msg: String) -> Error {
    Error::Checkpoint(format!("parameters do not match config: {msg}"))
}
