//! Toy-scale invariant suite covering every module.
//!
//! Each check is deterministic and its detail string carries no timings, so
//! two runs produce identical output.

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{read_params, restore, write_params};
use crate::config::{GateMode, ModelConfig};
use crate::costmodel::{flops_forward, forward_macs, param_count, sweep, CostConfig, Variant};
use crate::error::Result;
use crate::gradcheck::{gradcheck, GradcheckConfig};
use crate::model::{argmax, ForwardOptions, Model};
use crate::params::ParamGroup;
use crate::tensor::{Tape, Tensor};
use crate::training::data::make_dataset;
use crate::training::{adam_step, train, AdamConfig, OptimState, TrainStage};
use crate::vision::{pool_merge, OriginalVisualTokens, VideoFrames};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub module: String,
    pub check: String,
    pub passed: bool,
    pub detail: String,
}

type Check = fn() -> Result<(bool, String)>;

const CHECKS: &[(&str, &str, Check)] = &[
    ("tensor", "matmul_triple_loop", tensor_matmul),
    ("tensor", "softmax_rows_sum_to_one", tensor_softmax),
    ("tensor", "gradient_vs_finite_difference", tensor_gradient),
    ("tensor", "mac_counter", tensor_macs),
    ("vision", "pool_window_one_is_identity", vision_pool_identity),
    ("vision", "pool_exact_on_constants", vision_pool_constant),
    ("vision", "pool_commutes_with_linear_map", vision_pool_linear),
    ("model", "residual_zero_gate_identity", model_residual_identity),
    ("model", "disabled_branches_equal_plain", model_disabled_branches),
    ("model", "sequence_length_formula", model_sequence_length),
    ("model", "attention_rows_are_distributions", model_attention_rows),
    ("model", "incremental_decode_matches_reforward", model_decode),
    ("model", "checkpoint_round_trip", model_checkpoint),
    ("training", "adam_first_step", training_adam),
    ("training", "stage1_freeze_contract", training_freeze),
    ("training", "dataset_determinism", training_dataset),
    ("costmodel", "flops_equal_mac_counter", cost_macs),
    ("costmodel", "identity_configuration", cost_identity),
    ("costmodel", "param_count_matches_allocation", cost_params),
    ("gradcheck", "toy_gradients", gradcheck_toy),
];

pub fn run_all() -> Vec<CheckResult> {
    CHECKS
        .iter()
        .map(|(module, check, f)| {
            let (passed, detail) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
            CheckResult {
                module: module.to_string(),
                check: check.to_string(),
                passed,
                detail,
            }
        })
        .collect()
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn within(err: f64, tol: f64) -> (bool, String) {
    (err <= tol, format!("max error {err:.3e} (tolerance {tol:.0e})"))
}

fn random_video(cfg: &ModelConfig, frames: usize, seed: u64) -> Result<VideoFrames> {
    let side = cfg.image_side();
    VideoFrames::new(Tensor::uniform(&[frames, 3, side, side], 0.0, 1.0, &mut rng(seed)))
}

fn tensor_matmul() -> Result<(bool, String)> {
    let a = Tensor::uniform(&[3, 5], -1.0, 1.0, &mut rng(1));
    let b = Tensor::uniform(&[5, 4], -1.0, 1.0, &mut rng(2));
    let mut tape = Tape::new();
    let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let c = tape.matmul(va, vb)?;
    let mut err = 0.0f64;
    for i in 0..3 {
        for j in 0..4 {
            let s: f64 = (0..5).map(|k| a.at(i, k) * b.at(k, j)).sum();
            err = err.max((s - tape.value(c).at(i, j)).abs());
        }
    }
    Ok(within(err, 1e-14))
}

fn tensor_softmax() -> Result<(bool, String)> {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::uniform(&[6, 7], -30.0, 30.0, &mut rng(3)));
    let y = tape.softmax_rows(x)?;
    let t = tape.value(y);
    let err = (0..6)
        .map(|r| (t.row(r).iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max);
    Ok(within(err, 1e-12))
}

fn tensor_gradient() -> Result<(bool, String)> {
    let x0 = Tensor::uniform(&[3, 4], -1.0, 1.0, &mut rng(4));
    let g0 = Tensor::uniform(&[4], 0.5, 1.5, &mut rng(5));
    let loss = |x: &Tensor| -> Result<(f64, Tensor)> {
        let mut tape = Tape::new();
        let vx = tape.param(x.clone());
        let g = tape.constant(g0.clone());
        let b = tape.constant(Tensor::zeros(&[4]));
        let y = tape.layer_norm(vx, g, b, 1e-5)?;
        let y = tape.gelu(y)?;
        let y = tape.softmax_rows(y)?;
        let w = tape.constant(Tensor::uniform(&[3, 4], -1.0, 1.0, &mut rng(6)));
        let y = tape.mul(y, w)?;
        let s = tape.sum(y)?;
        let grad = tape.backward(s)?.get(vx);
        Ok((tape.value(s).item(), grad))
    };
    let (_, analytic) = loss(&x0)?;
    let mut worst = 0.0f64;
    for i in 0..x0.numel() {
        let (mut up, mut down) = (x0.clone(), x0.clone());
        up.data_mut()[i] += 1e-5;
        down.data_mut()[i] -= 1e-5;
        let numeric = (loss(&up)?.0 - loss(&down)?.0) / 2e-5;
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6));
    }
    Ok(within(worst, 1e-5))
}

fn tensor_macs() -> Result<(bool, String)> {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[3, 4]));
    let b = tape.constant(Tensor::zeros(&[4, 2]));
    let c = tape.matmul(a, b)?;
    let ct = tape.transpose(c)?;
    tape.matmul(c, ct)?;
    let expected = 3 * 4 * 2 + 3 * 2 * 3;
    Ok((tape.macs() == expected, format!("{} MACs (expected {expected})", tape.macs())))
}

fn pooled(tokens: &Tensor, frames: usize, grid: usize, p: usize) -> Result<Tensor> {
    let mut tape = Tape::new();
    let orig = OriginalVisualTokens {
        tokens: tape.constant(tokens.clone()),
        frames,
        grid,
    };
    let out = pool_merge(&mut tape, &orig, p)?;
    Ok(tape.value(out.tokens).clone())
}

fn vision_pool_identity() -> Result<(bool, String)> {
    let x = Tensor::uniform(&[2 * 16, 5], -1.0, 1.0, &mut rng(7));
    let y = pooled(&x, 2, 4, 1)?;
    Ok((y == x, "p=1 output compared bitwise".into()))
}

fn vision_pool_constant() -> Result<(bool, String)> {
    let x = Tensor::full(&[2 * 36, 3], 0.375);
    let y = pooled(&x, 2, 6, 3)?;
    let ok = y.shape() == [8, 3] && y.data().iter().all(|&v| v == 0.375);
    Ok((ok, format!("pooled shape {:?}", y.shape())))
}

fn vision_pool_linear() -> Result<(bool, String)> {
    let x = Tensor::uniform(&[16, 5], -1.0, 1.0, &mut rng(8));
    let l = Tensor::uniform(&[5, 3], -1.0, 1.0, &mut rng(9));
    let mut tape = Tape::new();
    let (vx, vl) = (tape.constant(x.clone()), tape.constant(l.clone()));
    let mapped = tape.matmul(vx, vl)?;
    let a = pooled(tape.value(mapped), 1, 4, 2)?;
    let px = tape.constant(pooled(&x, 1, 4, 2)?);
    let b = tape.matmul(px, vl)?;
    Ok(within(a.max_abs_diff(tape.value(b)), 1e-12))
}

fn model_residual_identity() -> Result<(bool, String)> {
    let mut model = Model::new(ModelConfig {
        gate_mode: GateMode::Residual,
        ..ModelConfig::toy()
    })?;
    for e in model.params.entries_mut().iter_mut().filter(|e| e.is_gate()) {
        e.value = Tensor::scalar(0.0);
    }
    let plain = model.with_shared_weights(ModelConfig {
        k_insert: None,
        ..model.config.clone()
    })?;
    let v = random_video(&model.config, 2, 10)?;
    let err = model.forward(&v, &[0, 1, 2])?.max_abs_diff(&plain.forward(&v, &[0, 1, 2])?);
    Ok(within(err, 1e-12))
}

fn model_disabled_branches() -> Result<(bool, String)> {
    let model = Model::new(ModelConfig::toy())?;
    let off = model.with_shared_weights(ModelConfig {
        v2v_enabled: false,
        t2v_enabled: false,
        ..model.config.clone()
    })?;
    let plain = model.with_shared_weights(ModelConfig {
        k_insert: None,
        ..model.config.clone()
    })?;
    let v = random_video(&model.config, 2, 11)?;
    let same = off.forward(&v, &[0, 3])? == plain.forward(&v, &[0, 3])?;
    Ok((same, "logits compared bitwise".into()))
}

fn model_sequence_length() -> Result<(bool, String)> {
    let mut seen = Vec::new();
    for (pool, frames) in [(9, 2), (27, 3), (3, 1)] {
        let cfg = ModelConfig {
            grid: 27,
            patch_size: 1,
            pool_window: pool,
            max_seq: 1024,
            ..ModelConfig::toy()
        };
        let model = Model::new(cfg.clone())?;
        let v = random_video(&cfg, frames, 12)?;
        let mut tape = Tape::new();
        let b = model.bind(&mut tape, &BTreeSet::new());
        let trace = model.forward_on(&mut tape, &b, &v, &[0, 1, 2, 3], ForwardOptions::default())?;
        let expected = frames * (27 / pool).pow(2) + 4;
        seen.push((cfg.tokens_per_frame(), trace.sequence_len(), expected));
    }
    let ok = seen.iter().all(|&(_, got, want)| got == want) && seen[0].0 == 9 && seen[1].0 == 1;
    let detail = seen
        .iter()
        .map(|(m, got, want)| format!("{m}/frame: {got} rows (expected {want})"))
        .collect::<Vec<_>>()
        .join(", ");
    Ok((ok, detail))
}

fn model_attention_rows() -> Result<(bool, String)> {
    let model = Model::new(ModelConfig::toy())?;
    let v = random_video(&model.config, 2, 13)?;
    let mut tape = Tape::new();
    let b = model.bind(&mut tape, &BTreeSet::new());
    let trace = model.forward_on(&mut tape, &b, &v, &[0, 4, 2], ForwardOptions::default())?;
    let mut err = 0.0f64;
    for &p in &trace.attention_probs {
        let t = tape.value(p);
        for r in 0..t.rows() {
            err = err.max((t.row(r).iter().sum::<f64>() - 1.0).abs());
        }
    }
    let (ok, detail) = within(err, 1e-12);
    Ok((ok, format!("{} attention maps, {detail}", trace.attention_probs.len())))
}

fn model_decode() -> Result<(bool, String)> {
    let model = Model::new(ModelConfig::toy())?;
    let v = random_video(&model.config, 2, 14)?;
    let fast = model.greedy_decode(&v, &[0], 5)?;
    let mut slow = vec![0];
    for _ in 0..5 {
        let logits = model.forward(&v, &slow)?;
        slow.push(argmax(logits.row(logits.rows() - 1)));
    }
    Ok((fast == slow, format!("decoded {fast:?}")))
}

fn model_checkpoint() -> Result<(bool, String)> {
    let model = Model::new(ModelConfig::toy())?;
    let mut buf = Vec::new();
    write_params(&model.params, &mut buf)?;
    let back = restore(model.config.clone(), read_params(&mut buf.as_slice())?)?;
    let mut again = Vec::new();
    write_params(&back.params, &mut again)?;
    Ok((buf == again && back.params == model.params, format!("{} bytes", buf.len())))
}

fn training_adam() -> Result<(bool, String)> {
    let mut model = Model::new(ModelConfig::toy())?;
    let before = model.params.clone();
    let grads: Vec<_> = before
        .entries()
        .iter()
        .map(|e| Some(Tensor::full(e.value.shape(), 1.0)))
        .collect();
    let lr = 1e-3;
    let mut state = OptimState::new(AdamConfig::with_lr(lr), &model.params);
    adam_step(&mut model.params, &grads, &mut state, &BTreeSet::new())?;
    let mut err = 0.0f64;
    for (a, b) in before.entries().iter().zip(model.params.entries()) {
        if a.is_gate() {
            continue;
        }
        for (x, y) in a.value.data().iter().zip(b.value.data()) {
            err = err.max(((x - y) - lr / (1.0 + 1e-8)).abs());
        }
    }
    Ok(within(err, 1e-15))
}

fn training_freeze() -> Result<(bool, String)> {
    let cfg = ModelConfig::toy();
    let data = make_dataset(3, 4, 2, &cfg)?;
    let before = Model::new(cfg)?;
    let after = train(before.clone(), &[TrainStage::stage1(8, AdamConfig::with_lr(1e-2))], &data)?.model;
    let mut frozen_ok = true;
    let mut trained = 0;
    for (a, b) in before.params.entries().iter().zip(after.params.entries()) {
        match a.group {
            ParamGroup::Encoder | ParamGroup::Llm | ParamGroup::T2v => frozen_ok &= a == b,
            ParamGroup::Projector | ParamGroup::V2v => trained += usize::from(a != b),
        }
    }
    Ok((
        frozen_ok && trained > 0,
        format!("frozen groups unchanged: {frozen_ok}, trained tensors changed: {trained}"),
    ))
}

fn training_dataset() -> Result<(bool, String)> {
    let cfg = ModelConfig::toy();
    let a = make_dataset(21, 6, 2, &cfg)?;
    let b = make_dataset(21, 6, 2, &cfg)?;
    Ok((a == b, "two builds compared".into()))
}

fn toy_cost_grid() -> Vec<(ModelConfig, usize, usize)> {
    let toy = |p, k| ModelConfig {
        pool_window: p,
        k_insert: k,
        max_seq: 256,
        ..ModelConfig::toy()
    };
    vec![
        (toy(2, Some(2)), 2, 3),
        (toy(1, None), 1, 3),
        (toy(2, Some(1)), 4, 3),
        (toy(1, Some(1)), 2, 5),
        (toy(2, None), 4, 1),
    ]
}

fn cost_macs() -> Result<(bool, String)> {
    let mut ok = true;
    for (arch, frames, lt) in toy_cost_grid() {
        let model = Model::new(arch.clone())?;
        let v = random_video(&arch, frames, 15)?;
        let text: Vec<usize> = (0..lt).collect();
        let mut tape = Tape::new();
        let b = model.bind(&mut tape, &BTreeSet::new());
        model.forward_on(&mut tape, &b, &v, &text, ForwardOptions::default())?;
        let cost = CostConfig::new(arch.clone(), 8, 1.0)?;
        ok &= flops_forward(&cost, Variant::Crosslmm, frames, lt) == 2 * tape.macs();
        ok &= forward_macs(&arch, frames, lt, true) == tape.macs();
    }
    Ok((ok, "5 configurations, exact equality".into()))
}

fn cost_identity() -> Result<(bool, String)> {
    let cfg = CostConfig::new(
        ModelConfig {
            pool_window: 1,
            k_insert: None,
            ..ModelConfig::toy()
        },
        2,
        1e12,
    )?;
    let rows = sweep(&cfg, &[1, 2, 4], 3)?;
    let ok = rows
        .iter()
        .all(|r| r.flops_reduction_pct == 0.0 && r.kv_reduction_pct == 0.0 && r.baseline.flops == r.crosslmm.flops);
    Ok((ok, "p=1 without cross-attention vs baseline".into()))
}

fn cost_params() -> Result<(bool, String)> {
    let model = Model::new(ModelConfig::toy())?;
    let n = param_count(&model.config);
    Ok((n == model.params.scalar_count() as u64, format!("{n} parameters")))
}

fn gradcheck_toy() -> Result<(bool, String)> {
    let report = gradcheck(&ModelConfig::toy(), &GradcheckConfig::default())?;
    let worst = report.groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max);
    Ok((report.passed(), format!("{} groups, worst relative error {worst:.3e}", report.groups.len())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_check_passes_and_is_reproducible() {
        let a = run_all();
        for r in &a {
            assert!(r.passed, "{}/{}: {}", r.module, r.check, r.detail);
        }
        let modules: BTreeSet<&str> = a.iter().map(|r| r.module.as_str()).collect();
        assert_eq!(modules.len(), 6);
        assert_eq!(a, run_all());
    }
}
