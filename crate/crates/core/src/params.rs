//! Named parameter storage in canonical order, plus the typed layout that the
//! forward pass uses to find each tensor.

use std::collections::BTreeSet;
use std::fmt;
use std::ops::Index;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::tensor::{Tape, Tensor, Var};

/// Coarse parameter groups used for freezing and for gradient reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamGroup {
    Encoder,
    Projector,
    Llm,
    V2v,
    T2v,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 5] = [
        ParamGroup::Encoder,
        ParamGroup::Projector,
        ParamGroup::Llm,
        ParamGroup::V2v,
        ParamGroup::T2v,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Encoder => "encoder",
            ParamGroup::Projector => "projector",
            ParamGroup::Llm => "llm",
            ParamGroup::V2v => "v2v",
            ParamGroup::T2v => "t2v",
        }
    }

    pub fn all() -> BTreeSet<ParamGroup> {
        Self::ALL.into_iter().collect()
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor,
}

impl ParamEntry {
    /// Cross-attention gates are stored unconstrained and clamped after
    /// every optimizer step.
    pub fn is_gate(&self) -> bool {
        self.name.ends_with(".gamma_raw")
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    pub fn group_scalar_count(&self, group: ParamGroup) -> usize {
        self.entries
            .iter()
            .filter(|e| e.group == group)
            .map(|e| e.value.numel())
            .sum()
    }

    fn push(&mut self, name: String, group: ParamGroup, value: Tensor) -> ParamId {
        self.entries.push(ParamEntry { name, group, value });
        ParamId(self.entries.len() - 1)
    }

    /// Records every parameter on `tape`; only groups in `trainable` get
    /// gradients.
    pub fn bind(&self, tape: &mut Tape, trainable: &BTreeSet<ParamGroup>) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|e| tape.leaf(e.value.clone(), trainable.contains(&e.group)))
            .collect();
        Bound { vars }
    }
}

/// Tape handles for a [`ParamStore`], addressed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

#[derive(Debug, Clone)]
pub struct EncoderIds {
    pub patch_embed: ParamId,
    pub pos_embed: ParamId,
}

#[derive(Debug, Clone)]
pub struct ProjectorIds {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub ln_gain: ParamId,
    pub ln_bias: ParamId,
}

/// Position information added to projected full-resolution tokens before
/// they serve as cross-attention keys and values.
#[derive(Debug, Clone)]
pub struct VisualPosIds {
    pub temporal: ParamId,
    pub grid: ParamId,
}

#[derive(Debug, Clone)]
pub struct AttnIds {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
}

#[derive(Debug, Clone)]
pub struct DecoderLayerIds {
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub attn: AttnIds,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
    pub mlp_w1: ParamId,
    pub mlp_b1: ParamId,
    pub mlp_w2: ParamId,
    pub mlp_b2: ParamId,
}

#[derive(Debug, Clone)]
pub struct CrossAttnIds {
    pub attn: AttnIds,
    pub gamma_raw: ParamId,
}

#[derive(Debug, Clone, Default)]
pub struct DcalIds {
    pub v2v: Option<CrossAttnIds>,
    pub t2v: Option<CrossAttnIds>,
}

#[derive(Debug, Clone)]
pub struct Layout {
    pub encoder: EncoderIds,
    pub projector: ProjectorIds,
    pub visual_pos: Option<VisualPosIds>,
    pub embed: ParamId,
    pub layers: Vec<DecoderLayerIds>,
    /// One slot per decoder layer; `Some` on cross-attention layers.
    pub dcal: Vec<Option<DcalIds>>,
    pub final_ln_gain: ParamId,
    pub final_ln_bias: ParamId,
    pub lm_head: ParamId,
}

struct Init {
    store: ParamStore,
    rng: ChaCha8Rng,
}

impl Init {
    fn uniform(&mut self, name: String, group: ParamGroup, shape: &[usize], bound: f64) -> ParamId {
        let t = Tensor::uniform(shape, -bound, bound, &mut self.rng);
        self.store.push(name, group, t)
    }

    /// Weight matrix `[fan_in × fan_out]` in `U(−1/√fan_in, 1/√fan_in)`.
    fn linear(&mut self, name: String, group: ParamGroup, fan_in: usize, fan_out: usize) -> ParamId {
        self.uniform(name, group, &[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt())
    }

    fn fill(&mut self, name: String, group: ParamGroup, shape: &[usize], value: f64) -> ParamId {
        self.store.push(name, group, Tensor::full(shape, value))
    }

    fn attn(&mut self, prefix: &str, group: ParamGroup, d: usize) -> AttnIds {
        AttnIds {
            wq: self.linear(format!("{prefix}.wq"), group, d, d),
            wk: self.linear(format!("{prefix}.wk"), group, d, d),
            wv: self.linear(format!("{prefix}.wv"), group, d, d),
            wo: self.linear(format!("{prefix}.wo"), group, d, d),
        }
    }

    fn cross(&mut self, prefix: String, group: ParamGroup, d: usize, gamma: f64) -> CrossAttnIds {
        let attn = self.attn(&prefix, group, d);
        let gamma_raw = self.fill(format!("{prefix}.gamma_raw"), group, &[1], gamma);
        CrossAttnIds { attn, gamma_raw }
    }
}

/// Seeded initialisation of every parameter in canonical order.
///
/// The order (and therefore every name/shape pair) is a pure function of the
/// config, which is what checkpoints rely on.
pub fn init_params(cfg: &ModelConfig) -> (ParamStore, Layout) {
    use ParamGroup::*;
    let mut init = Init {
        store: ParamStore::default(),
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
    };
    let (d, dp) = (cfg.enc_dim, cfg.llm_dim);
    let n = cfg.patches_per_frame();

    let encoder = EncoderIds {
        patch_embed: init.uniform("encoder.patch_embed".into(), Encoder, &[cfg.patch_dim(), d], 0.02),
        pos_embed: init.uniform("encoder.pos_embed".into(), Encoder, &[n, d], 0.02),
    };
    let projector = ProjectorIds {
        w1: init.linear("projector.w1".into(), Projector, d, cfg.proj_hidden),
        b1: init.fill("projector.b1".into(), Projector, &[cfg.proj_hidden], 0.0),
        w2: init.linear("projector.w2".into(), Projector, cfg.proj_hidden, dp),
        b2: init.fill("projector.b2".into(), Projector, &[dp], 0.0),
        ln_gain: init.fill("projector.ln_gain".into(), Projector, &[dp], 1.0),
        ln_bias: init.fill("projector.ln_bias".into(), Projector, &[dp], 0.0),
    };
    let visual_pos = cfg.uses_cross_attention().then(|| VisualPosIds {
        temporal: init.uniform("projector.temporal_embed".into(), Projector, &[cfg.max_frames, dp], 0.1),
        grid: init.uniform("projector.grid_embed".into(), Projector, &[n, dp], 0.1),
    });
    let embed = init.uniform("llm.embed".into(), Llm, &[cfg.vocab_size, dp], 1.0);

    let mut layers = Vec::with_capacity(cfg.n_layers);
    let mut dcal = Vec::with_capacity(cfg.n_layers);
    for i in 0..cfg.n_layers {
        let p = format!("llm.layers.{i}");
        layers.push(DecoderLayerIds {
            ln1_gain: init.fill(format!("{p}.ln1_gain"), Llm, &[dp], 1.0),
            ln1_bias: init.fill(format!("{p}.ln1_bias"), Llm, &[dp], 0.0),
            attn: init.attn(&format!("{p}.attn"), Llm, dp),
            ln2_gain: init.fill(format!("{p}.ln2_gain"), Llm, &[dp], 1.0),
            ln2_bias: init.fill(format!("{p}.ln2_bias"), Llm, &[dp], 0.0),
            mlp_w1: init.linear(format!("{p}.mlp_w1"), Llm, dp, cfg.mlp_hidden),
            mlp_b1: init.fill(format!("{p}.mlp_b1"), Llm, &[cfg.mlp_hidden], 0.0),
            mlp_w2: init.linear(format!("{p}.mlp_w2"), Llm, cfg.mlp_hidden, dp),
            mlp_b2: init.fill(format!("{p}.mlp_b2"), Llm, &[dp], 0.0),
        });
        dcal.push(cfg.is_dcal_layer(i).then(|| DcalIds {
            v2v: cfg
                .v2v_enabled
                .then(|| init.cross(format!("dcal.{i}.v2v"), V2v, dp, cfg.gamma_init)),
            t2v: cfg
                .t2v_enabled
                .then(|| init.cross(format!("dcal.{i}.t2v"), T2v, dp, cfg.gamma_init)),
        }));
    }
    let layout = Layout {
        encoder,
        projector,
        visual_pos,
        embed,
        layers,
        dcal,
        final_ln_gain: init.fill("llm.final_ln_gain".into(), Llm, &[dp], 1.0),
        final_ln_bias: init.fill("llm.final_ln_bias".into(), Llm, &[dp], 0.0),
        lm_head: init.linear("llm.lm_head".into(), Llm, dp, cfg.vocab_size),
    };
    (init.store, layout)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let cfg = ModelConfig::toy();
        let (a, _) = init_params(&cfg);
        let (b, _) = init_params(&cfg);
        assert_eq!(a, b);
        let (c, _) = init_params(&ModelConfig { seed: 9, ..cfg });
        assert_ne!(a, c);
    }

    #[test]
    fn names_are_unique_and_grouped() {
        let (store, layout) = init_params(&ModelConfig::toy());
        let names: BTreeSet<_> = store.entries().iter().map(|e| e.name.as_str()).collect();
        assert_eq!(names.len(), store.len());
        let gates: Vec<_> = store.entries().iter().filter(|e| e.is_gate()).collect();
        assert_eq!(gates.len(), 2);
        assert!(gates.iter().all(|g| g.value.data() == [1.0]));
        assert!(layout.dcal[0].as_ref().unwrap().v2v.is_some());
        assert!(layout.dcal[1].is_none());
        for g in ParamGroup::ALL {
            assert!(store.group_scalar_count(g) > 0, "{g} empty");
        }
    }

    #[test]
    fn disabled_branches_allocate_nothing() {
        let cfg = ModelConfig {
            v2v_enabled: false,
            t2v_enabled: false,
            ..ModelConfig::toy()
        };
        let (store, layout) = init_params(&cfg);
        assert_eq!(store.group_scalar_count(ParamGroup::V2v), 0);
        assert_eq!(store.group_scalar_count(ParamGroup::T2v), 0);
        assert!(layout.visual_pos.is_none());
    }

    #[test]
    fn encoder_init_range() {
        let (store, layout) = init_params(&ModelConfig::toy());
        let pe = store.get(layout.encoder.patch_embed);
        assert!(pe.data().iter().all(|v| v.abs() < 0.02));
    }
}
