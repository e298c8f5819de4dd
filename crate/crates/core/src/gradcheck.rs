//! Finite-difference check of end-to-end gradients, per parameter group.
//!
//! For a sampled set of coordinates in each group the analytic gradient of
//! the cross-entropy loss is compared with a central difference. Gates form
//! their own group; they are first moved off the clamp boundary (where the
//! loss has a kink and the central difference is meaningless).

use rand::seq::index;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::costmodel::param_count;
use crate::error::{config, contract, Result};
use crate::model::{ForwardOptions, Model};
use crate::params::{ParamEntry, ParamGroup};
use crate::tensor::Tensor;
use crate::training::data::{make_dataset, SynthSample};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradcheckConfig {
    #[serde(default = "default_coords")]
    pub coords_per_group: usize,
    #[serde(default = "default_step")]
    pub step: f64,
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    /// Gradients smaller than this are compared in absolute terms.
    #[serde(default = "default_floor")]
    pub denominator_floor: f64,
    #[serde(default = "default_frames")]
    pub frames: usize,
    /// Refuse models with more scalars than this.
    #[serde(default = "default_max_params")]
    pub max_params: usize,
}

fn default_coords() -> usize {
    32
}

fn default_step() -> f64 {
    1e-5
}

fn default_tolerance() -> f64 {
    1e-4
}

fn default_floor() -> f64 {
    1e-6
}

fn default_frames() -> usize {
    2
}

fn default_max_params() -> usize {
    1_000_000
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            coords_per_group: default_coords(),
            step: default_step(),
            tolerance: default_tolerance(),
            denominator_floor: default_floor(),
            frames: default_frames(),
            max_params: default_max_params(),
        }
    }
}

impl GradcheckConfig {
    pub fn validate(&self) -> Result<()> {
        if self.coords_per_group == 0 || self.frames == 0 {
            return Err(config("gradcheck needs at least one coordinate and one frame"));
        }
        for (name, v) in [
            ("step", self.step),
            ("tolerance", self.tolerance),
            ("denominator_floor", self.denominator_floor),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(config(format!("gradcheck.{name} must be positive")));
            }
        }
        Ok(())
    }
}

/// Groups reported by the check. Gates are split out of V2V/T2V.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckGroup {
    Encoder,
    Projector,
    Llm,
    V2v,
    T2v,
    Gamma,
}

impl CheckGroup {
    pub const ALL: [CheckGroup; 6] = [
        CheckGroup::Encoder,
        CheckGroup::Projector,
        CheckGroup::Llm,
        CheckGroup::V2v,
        CheckGroup::T2v,
        CheckGroup::Gamma,
    ];

    pub fn of(entry: &ParamEntry) -> Self {
        if entry.is_gate() {
            return CheckGroup::Gamma;
        }
        match entry.group {
            ParamGroup::Encoder => CheckGroup::Encoder,
            ParamGroup::Projector => CheckGroup::Projector,
            ParamGroup::Llm => CheckGroup::Llm,
            ParamGroup::V2v => CheckGroup::V2v,
            ParamGroup::T2v => CheckGroup::T2v,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            CheckGroup::Encoder => "encoder",
            CheckGroup::Projector => "projector",
            CheckGroup::Llm => "llm",
            CheckGroup::V2v => "v2v",
            CheckGroup::T2v => "t2v",
            CheckGroup::Gamma => "gamma",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupResult {
    pub group: CheckGroup,
    pub coords: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub param_count: usize,
    pub groups: Vec<GroupResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.passed)
    }

    pub fn failed_groups(&self) -> Vec<CheckGroup> {
        self.groups.iter().filter(|g| !g.passed).map(|g| g.group).collect()
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Builds the model and sample for `model_cfg` and checks it.
pub fn gradcheck(model_cfg: &ModelConfig, cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    cfg.validate()?;
    // counted before allocating, so large presets are refused cheaply
    let n = param_count(model_cfg);
    if n > cfg.max_params as u64 {
        return Err(config(format!(
            "gradcheck is meant for toy models: {n} parameters exceed the limit of {}; \
             shrink the model (e.g. the `toy` preset) or raise gradcheck.max_params",
            cfg.max_params
        )));
    }
    let model = Model::new(model_cfg.clone())?;
    let sample = make_dataset(model_cfg.seed, 1, cfg.frames, model_cfg)?.remove(0);
    let model = jitter_gates(model, model_cfg.seed);
    check_model(&model, &sample, cfg, analytic_gradients)
}

/// Moves every gate to a seeded point strictly inside the clamp range.
pub fn jitter_gates(mut model: Model, seed: u64) -> Model {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6a7e);
    for e in model.params.entries_mut().iter_mut().filter(|e| e.is_gate()) {
        e.value = Tensor::scalar(rng.gen_range(-0.9..0.9));
    }
    model
}

/// Back-propagated gradients for every parameter.
pub fn analytic_gradients(model: &Model, sample: &SynthSample) -> Result<Vec<Tensor>> {
    let (_, grads) = model.loss_and_grads(
        &sample.video,
        &sample.inputs(),
        sample.targets(),
        &ParamGroup::all(),
        ForwardOptions::default(),
    )?;
    grads
        .into_iter()
        .map(|g| g.ok_or_else(|| contract("missing gradient")))
        .collect()
}

/// Compares `analytic` against central differences on `model`. The
/// gradient source is injectable so the checker itself can be tested.
pub fn check_model(
    model: &Model,
    sample: &SynthSample,
    cfg: &GradcheckConfig,
    analytic: impl Fn(&Model, &SynthSample) -> Result<Vec<Tensor>>,
) -> Result<GradcheckReport> {
    let grads = analytic(model, sample)?;
    if grads.len() != model.params.len() {
        return Err(contract("analytic gradient count does not match parameters"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(model.config.seed);
    let mut probe = model.clone();
    let loss = |m: &Model| m.loss(&sample.video, &sample.inputs(), sample.targets(), ForwardOptions::default());

    let mut groups = Vec::new();
    for group in CheckGroup::ALL {
        let coords: Vec<(usize, usize)> = model
            .params
            .entries()
            .iter()
            .enumerate()
            .filter(|(_, e)| CheckGroup::of(e) == group)
            .flat_map(|(i, e)| (0..e.value.numel()).map(move |j| (i, j)))
            .collect();
        if coords.is_empty() {
            continue;
        }
        let chosen: Vec<(usize, usize)> = if coords.len() <= cfg.coords_per_group {
            coords
        } else {
            let mut idx = index::sample(&mut rng, coords.len(), cfg.coords_per_group).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|k| coords[k]).collect()
        };
        let mut worst = 0.0f64;
        for &(i, j) in &chosen {
            let x = model.params.entries()[i].value.data()[j];
            probe.params.entries_mut()[i].value.data_mut()[j] = x + cfg.step;
            let up = loss(&probe)?;
            probe.params.entries_mut()[i].value.data_mut()[j] = x - cfg.step;
            let down = loss(&probe)?;
            probe.params.entries_mut()[i].value.data_mut()[j] = x;
            let numeric = (up - down) / (2.0 * cfg.step);
            let err = relative_error(grads[i].data()[j], numeric, cfg.denominator_floor);
            // NaN compares false, so fold it in explicitly
            worst = if err.is_nan() { f64::INFINITY } else { worst.max(err) };
        }
        groups.push(GroupResult {
            group,
            coords: chosen.len(),
            max_rel_error: worst,
            passed: worst <= cfg.tolerance,
        });
    }
    Ok(GradcheckReport {
        param_count: model.params.scalar_count(),
        groups,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_uses_floor() {
        assert_eq!(relative_error(2.0, 1.0, 1e-6), 0.5);
        assert!((relative_error(1e-9, 0.0, 1e-6) - 1e-3).abs() < 1e-15);
    }

    #[test]
    fn jitter_keeps_gates_inside() {
        let model = jitter_gates(Model::new(ModelConfig::toy()).unwrap(), 0);
        for e in model.params.entries().iter().filter(|e| e.is_gate()) {
            assert!(e.value.item().abs() < 0.9);
        }
    }

    #[test]
    fn oversized_models_are_refused() {
        let cfg = GradcheckConfig {
            max_params: 100,
            ..GradcheckConfig::default()
        };
        let err = gradcheck(&ModelConfig::toy(), &cfg).unwrap_err();
        assert!(err.to_string().contains("toy"));
    }
}
