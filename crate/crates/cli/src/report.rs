//! JSON-lines report files.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crosslmm::costmodel::{CostReport, Variant};
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Writes one JSON object per line to `dir/name`, replacing any earlier
/// file of that name.
pub fn write_jsonl<T: Serialize>(dir: &Path, name: &str, records: &[T]) -> Result<PathBuf, CliError> {
    let path = dir.join(name);
    let io = |source| CliError::Io {
        context: format!("writing {}", path.display()),
        source,
    };
    fs::create_dir_all(dir).map_err(io)?;
    let mut w = BufWriter::new(File::create(&path).map_err(io)?);
    for r in records {
        let line = serde_json::to_string(r).expect("report records serialise");
        writeln!(w, "{line}").map_err(io)?;
    }
    w.flush().map_err(io)?;
    Ok(path)
}

/// Lines of `costmodel.jsonl`, distinguished by their `record` field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum CostRecord {
    Report(CostReport),
    Reduction(Reduction),
    Scaling(Scaling),
}

/// Percent saved by the cross-attention variant at one frame count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reduction {
    pub frames: usize,
    pub flops_pct: f64,
    pub kv_pct: f64,
    pub act_pct: f64,
    pub prefill_pct: f64,
}

/// FLOPs growth from the smallest to the largest swept frame count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaling {
    pub variant: Variant,
    pub from_frames: usize,
    pub to_frames: usize,
    pub ratio: f64,
    pub reference: Option<f64>,
}

/// Lines of `train_summary.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum TrainRecord {
    Stage {
        stage: crosslmm::training::StageId,
        start_loss: f64,
        end_loss: f64,
    },
    Final {
        initial_loss: f64,
        final_loss: f64,
        steps: usize,
    },
}
