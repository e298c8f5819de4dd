//! Adam with decoupled weight decay and per-group freezing.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::params::{ParamGroup, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default)]
    pub weight_decay: f64,
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_eps() -> f64 {
    1e-8
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OptimState {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl OptimState {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        let zeros = || {
            params
                .entries()
                .iter()
                .map(|e| Tensor::zeros(e.value.shape()))
                .collect::<Vec<_>>()
        };
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// One Adam update. Parameters in `frozen` groups, and any parameter whose
/// gradient is `None`, are left bitwise untouched. Gates of updated groups
/// are clamped to `[-1, 1]` afterwards.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &[Option<Tensor>],
    state: &mut OptimState,
    frozen: &BTreeSet<ParamGroup>,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(contract(format!(
            "optimizer expects {} gradients, got {}",
            params.len(),
            grads.len()
        )));
    }
    state.step += 1;
    let c = state.config;
    let bc1 = 1.0 - c.beta1.powi(state.step as i32);
    let bc2 = 1.0 - c.beta2.powi(state.step as i32);
    for (i, entry) in params.entries_mut().iter_mut().enumerate() {
        if frozen.contains(&entry.group) {
            continue;
        }
        let Some(g) = &grads[i] else { continue };
        if g.shape() != entry.value.shape() {
            return Err(contract(format!("gradient shape mismatch for {}", entry.name)));
        }
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (j, p) in entry.value.data_mut().iter_mut().enumerate() {
            let gj = g.data()[j];
            m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
            v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
            let update = (m[j] / bc1) / ((v[j] / bc2).sqrt() + c.eps);
            *p -= c.lr * (update + c.weight_decay * *p);
        }
        if entry.is_gate() {
            for p in entry.value.data_mut() {
                *p = p.clamp(-1.0, 1.0);
            }
        }
    }
    Ok(())
}
