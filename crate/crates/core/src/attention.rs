//! Multi-head attention: causal self-attention with rotary positions, and
//! unmasked cross-attention against a fixed key/value memory.

use crate::config::GateMode;
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Projection weights for one attention block, all `[D′ × D′]`.
#[derive(Debug, Clone, Copy)]
pub struct AttnVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct CrossAttnVars {
    pub attn: AttnVars,
    pub gamma_raw: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct SelfAttnOutput {
    pub out: Var,
    /// Rotated keys of the rows just processed.
    pub keys: Var,
    pub values: Var,
}

/// Keys and values cached from earlier positions, already rotated.
#[derive(Debug, Clone, Copy)]
pub struct PastKv<'a> {
    pub keys: &'a Tensor,
    pub values: &'a Tensor,
}

/// Causal multi-head self-attention over `x: [L × D′]`.
///
/// Row `r` sits at sequence position `past_len + r`, where `past_len` is the
/// number of cached positions. Attention probabilities are appended to
/// `probs` (one `[L × (past_len + L)]` matrix per head).
pub fn self_attention(
    tape: &mut Tape,
    x: Var,
    attn: &AttnVars,
    n_heads: usize,
    rope_base: f64,
    past: Option<PastKv<'_>>,
    probs: &mut Vec<Var>,
) -> Result<SelfAttnOutput> {
    let width = tape.shape(x)[1];
    let head_dim = width / n_heads;
    let past_len = past.map_or(0, |p| p.keys.rows());

    let q = tape.matmul(x, attn.wq)?;
    let k = tape.matmul(x, attn.wk)?;
    let v = tape.matmul(x, attn.wv)?;
    let q = tape.rope(q, head_dim, past_len, rope_base)?;
    let k = tape.rope(k, head_dim, past_len, rope_base)?;

    let (k_all, v_all) = match past {
        Some(p) if past_len > 0 => {
            let pk = tape.constant(p.keys.clone());
            let pv = tape.constant(p.values.clone());
            (tape.concat_rows(&[pk, k])?, tape.concat_rows(&[pv, v])?)
        }
        _ => (k, v),
    };

    let heads = attend(tape, q, k_all, v_all, n_heads, Some(past_len), probs)?;
    let out = tape.matmul(heads, attn.wo)?;
    Ok(SelfAttnOutput { out, keys: k, values: v })
}

/// Keys and values of a cross-attention memory, `[S × D′]` each.
#[derive(Debug, Clone, Copy)]
pub struct CrossKv {
    pub keys: Var,
    pub values: Var,
}

pub fn cross_kv(tape: &mut Tape, memory: Var, attn: &AttnVars) -> Result<CrossKv> {
    Ok(CrossKv {
        keys: tape.matmul(memory, attn.wk)?,
        values: tape.matmul(memory, attn.wv)?,
    })
}

/// `Attn(Q, K, V)` for `queries: [Lq × D′]` against every memory row,
/// including the output projection.
pub fn cross_attention(
    tape: &mut Tape,
    queries: Var,
    kv: &CrossKv,
    attn: &AttnVars,
    n_heads: usize,
    probs: &mut Vec<Var>,
) -> Result<Var> {
    let q = tape.matmul(queries, attn.wq)?;
    let heads = attend(tape, q, kv.keys, kv.values, n_heads, None, probs)?;
    tape.matmul(heads, attn.wo)
}

/// Combines a cross-attention output with its query rows using the clamped
/// gate `γ = clamp(gamma_raw, −1, 1)`.
pub fn gate(tape: &mut Tape, attn_out: Var, input: Var, gamma_raw: Var, mode: GateMode) -> Result<Var> {
    let gamma = tape.clamp(gamma_raw, -1.0, 1.0)?;
    match mode {
        GateMode::ScaledInput => {
            let scaled = tape.scale_by(input, gamma)?;
            tape.add(attn_out, scaled)
        }
        GateMode::Residual => {
            let scaled = tape.scale_by(attn_out, gamma)?;
            tape.add(input, scaled)
        }
    }
}

/// Scaled dot-product attention per head, heads concatenated along columns.
/// `causal_offset = Some(o)` lets query row `i` see key rows `j <= i + o`.
fn attend(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    n_heads: usize,
    causal_offset: Option<usize>,
    probs: &mut Vec<Var>,
) -> Result<Var> {
    let width = tape.shape(q)[1];
    if !width.is_multiple_of(n_heads) || tape.shape(k)[1] != width || tape.shape(v)[1] != width {
        return Err(Error::Shape {
            op: "attention",
            lhs: tape.shape(q).to_vec(),
            rhs: tape.shape(k).to_vec(),
        });
    }
    let head_dim = width / n_heads;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut outs = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = tape.slice_cols(q, h * head_dim, head_dim)?;
        let kh = tape.slice_cols(k, h * head_dim, head_dim)?;
        let vh = tape.slice_cols(v, h * head_dim, head_dim)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, scale)?;
        let p = match causal_offset {
            Some(off) => tape.causal_softmax_rows(scores, off)?,
            None => tape.softmax_rows(scores)?,
        };
        probs.push(p);
        outs.push(tape.matmul(p, vh)?);
    }
    if outs.len() == 1 {
        Ok(outs[0])
    } else {
        tape.concat_cols(&outs)
    }
}
