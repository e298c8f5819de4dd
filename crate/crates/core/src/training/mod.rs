//! Two-stage training on synthetic clips.
//!
//! Stage 1 aligns the visual path: only the projector and the V2V
//! cross-attention learn, and T2V is switched off in the forward pass.
//! Stage 2 trains everything with T2V active.

pub mod data;
pub mod optim;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::model::{ForwardOptions, Model};
use crate::params::ParamGroup;
use crate::tensor::Tape;

pub use data::{make_dataset, SynthSample};
pub use optim::{adam_step, AdamConfig, OptimState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageId {
    Stage1,
    Stage2,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainStage {
    pub id: StageId,
    pub trainable: BTreeSet<ParamGroup>,
    pub t2v_active: bool,
    pub steps: usize,
    pub optim: AdamConfig,
}

impl TrainStage {
    pub fn stage1(steps: usize, optim: AdamConfig) -> Self {
        Self {
            id: StageId::Stage1,
            trainable: [ParamGroup::Projector, ParamGroup::V2v].into(),
            t2v_active: false,
            steps,
            optim,
        }
    }

    pub fn stage2(steps: usize, optim: AdamConfig) -> Self {
        Self {
            id: StageId::Stage2,
            trainable: ParamGroup::all(),
            t2v_active: true,
            steps,
            optim,
        }
    }

    pub fn frozen(&self) -> BTreeSet<ParamGroup> {
        ParamGroup::all().difference(&self.trainable).copied().collect()
    }

    pub fn options(&self) -> ForwardOptions {
        ForwardOptions {
            t2v_active: self.t2v_active,
        }
    }
}

pub const DEFAULT_LR: f64 = 3e-4;

/// Knobs for a full two-stage run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub dataset_size: usize,
    pub frames: usize,
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    pub stage1: AdamConfig,
    pub stage2: AdamConfig,
    /// Replace every frame with uniform grey (vision ablation).
    #[serde(default)]
    pub constant_frames: bool,
}

impl TrainConfig {
    /// Short run at the default learning rate.
    pub fn toy() -> Self {
        Self {
            dataset_size: 8,
            frames: 2,
            stage1_steps: 20,
            stage2_steps: 60,
            stage1: AdamConfig::with_lr(DEFAULT_LR),
            stage2: AdamConfig::with_lr(DEFAULT_LR),
            constant_frames: false,
        }
    }

    /// Eight clips memorised in 300 Stage-2 steps; pairs with
    /// [`ModelConfig::toy_overfit`].
    pub fn overfit() -> Self {
        Self {
            stage1_steps: 40,
            stage2_steps: 300,
            stage1: AdamConfig::with_lr(5e-4),
            stage2: AdamConfig::with_lr(5e-4),
            ..Self::toy()
        }
    }

    pub fn stages(&self) -> [TrainStage; 2] {
        [
            TrainStage::stage1(self.stage1_steps, self.stage1),
            TrainStage::stage2(self.stage2_steps, self.stage2),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if self.dataset_size == 0 {
            return Err(Error::Config("dataset_size must be positive".into()));
        }
        if self.frames == 0 {
            return Err(Error::Config("frames must be positive".into()));
        }
        for (name, o) in [("stage1", &self.stage1), ("stage2", &self.stage2)] {
            let ok = o.lr > 0.0
                && (0.0..1.0).contains(&o.beta1)
                && (0.0..1.0).contains(&o.beta2)
                && o.eps > 0.0
                && o.weight_decay >= 0.0;
            if !ok {
                return Err(Error::Config(format!("{name}: invalid optimizer settings")));
            }
        }
        Ok(())
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: usize,
    pub stage: StageId,
    pub loss: f64,
    /// Effective (clamped) gate values in parameter order.
    pub gamma_values: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct StageSummary {
    pub id: StageId,
    /// Mean dataset loss before and after the stage.
    pub start_loss: f64,
    pub end_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub metrics: Vec<MetricRecord>,
    pub stages: Vec<StageSummary>,
    /// Mean dataset loss before any training, with T2V active.
    pub initial_loss: f64,
    pub final_loss: f64,
}

pub fn gamma_values(model: &Model) -> Vec<f64> {
    model
        .params
        .entries()
        .iter()
        .filter(|e| e.is_gate())
        .map(|e| e.value.item().clamp(-1.0, 1.0))
        .collect()
}

/// Mean per-sample loss over `dataset`.
pub fn eval_loss(model: &Model, dataset: &[SynthSample], opts: ForwardOptions) -> Result<f64> {
    if dataset.is_empty() {
        return Err(contract("empty dataset"));
    }
    let mut total = 0.0;
    for s in dataset {
        total += model.loss(&s.video, &s.inputs(), s.targets(), opts)?;
    }
    Ok(total / dataset.len() as f64)
}

fn diverged(stage: StageId, step: usize, loss: f64) -> Error {
    Error::Divergence {
        stage: format!("{stage:?}").to_lowercase(),
        step,
        loss,
    }
}

/// Turns a non-finite forward pass into a divergence report.
fn guard<T>(stage: StageId, step: usize, r: Result<T>) -> Result<T> {
    match r {
        Err(Error::NonFinite { .. }) => Err(diverged(stage, step, f64::NAN)),
        other => other,
    }
}

/// Runs `stages` in order over `dataset`, one sample per step in a fixed
/// cyclic order. Each stage starts with fresh optimizer moments.
pub fn train(mut model: Model, stages: &[TrainStage], dataset: &[SynthSample]) -> Result<TrainOutcome> {
    if dataset.is_empty() {
        return Err(contract("training needs a non-empty dataset"));
    }
    let first = stages.first().map_or(StageId::Stage1, |s| s.id);
    let initial_loss = guard(first, 0, eval_loss(&model, dataset, ForwardOptions::default()))?;
    let mut metrics = Vec::new();
    let mut summaries = Vec::new();
    let mut step = 0;
    for stage in stages {
        let opts = stage.options();
        let frozen = stage.frozen();
        let start_loss = guard(stage.id, step, eval_loss(&model, dataset, opts))?;
        let mut state = OptimState::new(stage.optim, &model.params);
        for i in 0..stage.steps {
            step += 1;
            let sample = &dataset[i % dataset.len()];
            let (loss, grads) = guard(
                stage.id,
                step,
                model.loss_and_grads(&sample.video, &sample.inputs(), sample.targets(), &stage.trainable, opts),
            )?;
            if !loss.is_finite() || grads.iter().flatten().any(|g| !g.is_finite()) {
                return Err(diverged(stage.id, step, loss));
            }
            adam_step(&mut model.params, &grads, &mut state, &frozen)?;
            metrics.push(MetricRecord {
                step,
                stage: stage.id,
                loss,
                gamma_values: gamma_values(&model),
            });
        }
        let end_loss = guard(stage.id, step, eval_loss(&model, dataset, opts))?;
        summaries.push(StageSummary {
            id: stage.id,
            start_loss,
            end_loss,
        });
    }
    let last = stages.last().map_or(StageId::Stage2, |s| s.id);
    let final_loss = guard(last, step, eval_loss(&model, dataset, ForwardOptions::default()))?;
    Ok(TrainOutcome {
        model,
        metrics,
        stages: summaries,
        initial_loss,
        final_loss,
    })
}

/// Builds the dataset described by `cfg` (grey frames when
/// `constant_frames` is set) and trains a fresh model on it.
pub fn run(model_cfg: &crate::config::ModelConfig, cfg: &TrainConfig, seed: u64) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut dataset = make_dataset(seed, cfg.dataset_size, cfg.frames, model_cfg)?;
    if cfg.constant_frames {
        dataset = dataset.iter().map(SynthSample::blank).collect();
    }
    let model = Model::new(model_cfg.clone())?;
    train(model, &cfg.stages(), &dataset)
}

/// Best cross-entropy reachable by a predictor that ignores both the video
/// and the text prefix: a single learned logit vector fitted by Adam.
pub fn constant_prediction_loss(dataset: &[SynthSample], vocab: usize, steps: usize) -> Result<f64> {
    if dataset.is_empty() {
        return Err(contract("empty dataset"));
    }
    let targets: Vec<usize> = dataset.iter().flat_map(|s| s.targets().iter().copied()).collect();
    if let Some(&t) = targets.iter().find(|&&t| t >= vocab) {
        return Err(contract(format!("target {t} outside vocab {vocab}")));
    }
    let mut logits = crate::tensor::Tensor::zeros(&[1, vocab]);
    let mut m = vec![0.0; vocab];
    let mut v = vec![0.0; vocab];
    let (lr, b1, b2, eps) = (0.05, 0.9, 0.999, 1e-12);
    let mut loss_value = f64::NAN;
    for step in 1..=steps.max(1) {
        let mut tape = Tape::new();
        let w = tape.param(logits.clone());
        let ones = tape.constant(crate::tensor::Tensor::full(&[targets.len(), 1], 1.0));
        let rows = tape.matmul(ones, w)?;
        let loss = tape.cross_entropy(rows, &targets)?;
        loss_value = tape.value(loss).item();
        let g = tape.backward(loss)?.get(w);
        for j in 0..vocab {
            let gj = g.data()[j];
            m[j] = b1 * m[j] + (1.0 - b1) * gj;
            v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
            let mh = m[j] / (1.0 - b1.powi(step as i32));
            let vh = v[j] / (1.0 - b2.powi(step as i32));
            logits.data_mut()[j] -= lr * mh / (vh.sqrt() + eps);
        }
    }
    Ok(loss_value)
}
