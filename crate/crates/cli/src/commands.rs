//! The four subcommands. Each writes its reports before summarising.

use std::io::Write;
use std::path::Path;

use crosslmm::checkpoint;
use crosslmm::costmodel::{param_count, scaling_ratio, sweep, Variant};
use crosslmm::gradcheck::gradcheck as run_gradcheck;
use crosslmm::selfcheck;
use crosslmm::training;

use crate::config::RunConfig;
use crate::report::{write_jsonl, CostRecord, Reduction, Scaling, TrainRecord};
use crate::CliError;

/// Training runs on the CPU in f64; anything larger is a cost-model preset.
pub const TRAIN_MAX_PARAMS: u64 = 20_000_000;

fn say(out: &mut dyn Write, line: std::fmt::Arguments) -> Result<(), CliError> {
    writeln!(out, "{line}").map_err(|source| CliError::Io {
        context: "writing to stdout".into(),
        source,
    })
}

pub fn train(cfg: &RunConfig, out: &mut dyn Write) -> Result<bool, CliError> {
    let tc = cfg
        .train
        .as_ref()
        .ok_or_else(|| CliError::Config("missing key `train`: this config has no training section".into()))?;
    let n = param_count(&cfg.model);
    if n > TRAIN_MAX_PARAMS {
        return Err(CliError::Config(format!(
            "{n} parameters is too large to train here (limit {TRAIN_MAX_PARAMS}); use a toy preset"
        )));
    }
    let outcome = training::run(&cfg.model, tc, cfg.seed)?;
    let dir = &cfg.output_dir;
    let metrics = write_jsonl(dir, "metrics.jsonl", &outcome.metrics)?;
    let mut summary: Vec<TrainRecord> = outcome
        .stages
        .iter()
        .map(|s| TrainRecord::Stage {
            stage: s.id,
            start_loss: s.start_loss,
            end_loss: s.end_loss,
        })
        .collect();
    summary.push(TrainRecord::Final {
        initial_loss: outcome.initial_loss,
        final_loss: outcome.final_loss,
        steps: outcome.metrics.len(),
    });
    write_jsonl(dir, "train_summary.jsonl", &summary)?;
    let ckpt = dir.join("checkpoint.bin");
    checkpoint::save(&outcome.model, &ckpt)?;

    for s in &outcome.stages {
        say(out, format_args!("{:?}: loss {:.4} -> {:.4}", s.id, s.start_loss, s.end_loss))?;
    }
    say(
        out,
        format_args!(
            "loss {:.4} -> {:.4} ({:.1}% of initial) over {} steps",
            outcome.initial_loss,
            outcome.final_loss,
            100.0 * outcome.final_loss / outcome.initial_loss,
            outcome.metrics.len()
        ),
    )?;
    say(out, format_args!("wrote {} and {}", metrics.display(), ckpt.display()))?;
    Ok(true)
}

pub fn gradcheck(cfg: &RunConfig, out: &mut dyn Write) -> Result<bool, CliError> {
    let report = run_gradcheck(&cfg.model, &cfg.gradcheck)?;
    let path = write_jsonl(&cfg.output_dir, "gradcheck.jsonl", &report.groups)?;
    say(out, format_args!("{} parameters, tolerance {:e}", report.param_count, cfg.gradcheck.tolerance))?;
    for g in &report.groups {
        say(
            out,
            format_args!(
                "{:<4} {:<9} {:>3} coords  max rel error {:.3e}",
                if g.passed { "PASS" } else { "FAIL" },
                g.group.name(),
                g.coords,
                g.max_rel_error
            ),
        )?;
    }
    say(out, format_args!("wrote {}", path.display()))?;
    Ok(report.passed())
}

pub fn costmodel(cfg: &RunConfig, out: &mut dyn Write) -> Result<bool, CliError> {
    let cost = cfg.cost_config()?;
    let lt = cfg.cost.text_len;
    let rows = sweep(&cost, &cfg.cost.frames, lt)?;
    let mut records = Vec::new();
    for r in &rows {
        records.push(CostRecord::Report(r.baseline.clone()));
        records.push(CostRecord::Report(r.crosslmm.clone()));
        records.push(CostRecord::Reduction(Reduction {
            frames: r.frames,
            flops_pct: r.flops_reduction_pct,
            kv_pct: r.kv_reduction_pct,
            act_pct: r.act_reduction_pct,
            prefill_pct: r.prefill_reduction_pct,
        }));
    }
    let from = *cfg.cost.frames.iter().min().expect("validated non-empty");
    let to = *cfg.cost.frames.iter().max().expect("validated non-empty");
    let scalings: Vec<Scaling> = if from < to {
        [Variant::Baseline, Variant::Crosslmm]
            .into_iter()
            .map(|v| Scaling {
                variant: v,
                from_frames: from,
                to_frames: to,
                ratio: scaling_ratio(&cost, v, from, to, lt),
                reference: (v == Variant::Crosslmm).then_some(cfg.cost.reference_scaling_ratio).flatten(),
            })
            .collect()
    } else {
        Vec::new()
    };
    records.extend(scalings.iter().cloned().map(CostRecord::Scaling));
    let path = write_jsonl(&cfg.output_dir, "costmodel.jsonl", &records)?;

    say(
        out,
        format_args!(
            "{:>6} {:>12} {:>12} {:>7} {:>11} {:>11} {:>7} {:>11}",
            "frames", "base TFLOPs", "xlmm TFLOPs", "saved", "base KV MB", "xlmm KV MB", "saved", "xlmm ms"
        ),
    )?;
    for r in &rows {
        say(
            out,
            format_args!(
                "{:>6} {:>12.2} {:>12.2} {:>6.1}% {:>11.1} {:>11.1} {:>6.1}% {:>11.2}",
                r.frames,
                r.baseline.flops as f64 / 1e12,
                r.crosslmm.flops as f64 / 1e12,
                r.flops_reduction_pct,
                r.baseline.kv_bytes as f64 / 1e6,
                r.crosslmm.kv_bytes as f64 / 1e6,
                r.kv_reduction_pct,
                r.crosslmm.prefill_s * 1e3
            ),
        )?;
    }
    for s in &scalings {
        let reference = s.reference.map(|x| format!(" (reference {x:.2}x)")).unwrap_or_default();
        say(
            out,
            format_args!(
                "{} FLOPs {} -> {} frames: {:.2}x{reference}",
                s.variant.name(),
                s.from_frames,
                s.to_frames,
                s.ratio
            ),
        )?;
    }
    say(out, format_args!("wrote {}", path.display()))?;
    Ok(true)
}

pub fn selfcheck(dir: &Path, out: &mut dyn Write) -> Result<bool, CliError> {
    let results = selfcheck::run_all();
    let path = write_jsonl(dir, "selfcheck.jsonl", &results)?;
    let mut modules: Vec<&str> = Vec::new();
    for r in &results {
        if !modules.contains(&r.module.as_str()) {
            modules.push(&r.module);
        }
    }
    for m in &modules {
        let mine: Vec<_> = results.iter().filter(|r| r.module == *m).collect();
        let passed = mine.iter().filter(|r| r.passed).count();
        say(out, format_args!("{m:<10} {passed}/{}", mine.len()))?;
        for r in mine {
            say(
                out,
                format_args!(
                    "  {} {:<38} {}",
                    if r.passed { "PASS" } else { "FAIL" },
                    r.check,
                    r.detail
                ),
            )?;
        }
    }
    let ok = results.iter().all(|r| r.passed);
    say(out, format_args!("{} ({})", if ok { "all checks passed" } else { "some checks FAILED" }, path.display()))?;
    Ok(ok)
}
