//! Run configuration: one TOML file per run, or a named preset.

use std::path::{Path, PathBuf};

use crosslmm::costmodel::CostConfig;
use crosslmm::gradcheck::GradcheckConfig;
use crosslmm::training::TrainConfig;
use crosslmm::ModelConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Built-in presets, identical to the files under `configs/`.
pub const PRESETS: &[(&str, &str)] = &[
    ("toy", include_str!("../../../configs/toy.toml")),
    ("toy-overfit", include_str!("../../../configs/toy-overfit.toml")),
    ("2b-like", include_str!("../../../configs/2b-like.toml")),
    ("7b-like", include_str!("../../../configs/7b-like.toml")),
    ("7b-like-flat", include_str!("../../../configs/7b-like-flat.toml")),
];

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum ReportFormat {
    #[default]
    #[serde(rename = "json-lines")]
    JsonLines,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostSection {
    #[serde(default = "default_bytes")]
    pub bytes_per_value: u64,
    /// Effective FLOP/s for the prefill-time estimate.
    #[serde(default = "default_throughput")]
    pub device_throughput: f64,
    #[serde(default = "default_text_len")]
    pub text_len: usize,
    #[serde(default = "default_frames")]
    pub frames: Vec<usize>,
    /// Published frames scaling ratio, echoed next to the modelled one.
    #[serde(default)]
    pub reference_scaling_ratio: Option<f64>,
}

fn default_bytes() -> u64 {
    2
}

fn default_throughput() -> f64 {
    1e14
}

fn default_text_len() -> usize {
    64
}

fn default_frames() -> Vec<usize> {
    vec![32, 64, 128, 256]
}

impl Default for CostSection {
    fn default() -> Self {
        Self {
            bytes_per_value: default_bytes(),
            device_throughput: default_throughput(),
            text_len: default_text_len(),
            frames: default_frames(),
            reference_scaling_ratio: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds model initialisation and the synthetic data.
    pub seed: u64,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub report_format: ReportFormat,
    pub model: ModelConfig,
    #[serde(default)]
    pub cost: CostSection,
    /// Required by `train` only.
    #[serde(default)]
    pub train: Option<TrainConfig>,
    #[serde(default)]
    pub gradcheck: GradcheckConfig,
}

impl RunConfig {
    /// Checks every section so that no command starts on a bad config.
    pub fn validate(&self) -> Result<(), CliError> {
        self.model.validate()?;
        if self.model.seed != self.seed {
            return Err(CliError::Config(
                "model.seed differs from seed; set only the top-level seed".into(),
            ));
        }
        self.cost_config()?;
        if self.cost.text_len == 0 {
            return Err(CliError::Config("cost.text_len must be positive".into()));
        }
        validate_frames(&self.cost.frames)?;
        if let Some(t) = &self.train {
            t.validate()?;
        }
        self.gradcheck.validate()?;
        Ok(())
    }

    pub fn cost_config(&self) -> Result<CostConfig, CliError> {
        Ok(CostConfig::new(
            self.model.clone(),
            self.cost.bytes_per_value,
            self.cost.device_throughput,
        )?)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.model.seed = seed;
        self
    }
}

pub fn validate_frames(frames: &[usize]) -> Result<(), CliError> {
    if frames.is_empty() || frames.contains(&0) {
        return Err(CliError::Config("cost.frames must list positive frame counts".into()));
    }
    Ok(())
}

pub fn preset(name: &str) -> Option<&'static str> {
    PRESETS.iter().find(|(n, _)| *n == name).map(|(_, text)| *text)
}

/// Resolves `name` as a preset name, then as a file path.
pub fn load(name: &str) -> Result<RunConfig, CliError> {
    if let Some(text) = preset(name) {
        return parse(text, name);
    }
    let path = Path::new(name);
    if !path.exists() {
        let names: Vec<&str> = PRESETS.iter().map(|(n, _)| *n).collect();
        return Err(CliError::Config(format!(
            "`{name}` is neither a config file nor a preset ({})",
            names.join(", ")
        )));
    }
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    parse(&text, &path.display().to_string())
}

/// Parses TOML text; errors name the offending key path.
pub fn parse(text: &str, origin: &str) -> Result<RunConfig, CliError> {
    let de = toml::Deserializer::new(text);
    let mut cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        let msg = inner.message();
        if path == "." {
            CliError::Config(format!("{origin}: {msg}"))
        } else {
            CliError::Config(format!("{origin}: at `{path}`: {msg}"))
        }
    })?;
    // the model section may omit its seed; it follows the run seed
    if cfg.model.seed == 0 {
        cfg.model.seed = cfg.seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use crosslmm::costmodel::{like_2b, like_7b};
    use crosslmm::training::TrainConfig;

    use super::*;

    #[test]
    fn presets_match_library_constructors() {
        let toy = load("toy").unwrap();
        assert_eq!(toy.model, ModelConfig::toy());
        assert_eq!(toy.train, Some(TrainConfig::toy()));
        assert_eq!(toy.gradcheck, GradcheckConfig::default());
        let overfit = load("toy-overfit").unwrap();
        assert_eq!(overfit.model, ModelConfig::toy_overfit());
        assert_eq!(overfit.train, Some(TrainConfig::overfit()));
        assert_eq!(load("7b-like").unwrap().model, like_7b());
        assert_eq!(load("2b-like").unwrap().model, like_2b());
        let flat = load("7b-like-flat").unwrap().model;
        assert_eq!((flat.pool_window, flat.k_insert), (1, None));
    }

    #[test]
    fn missing_key_is_named() {
        let text = preset("toy").unwrap().replace("llm_dim = 16\n", "");
        let err = parse(&text, "t").unwrap_err().to_string();
        assert!(err.contains("llm_dim") && err.contains("model"), "{err}");
    }

    #[test]
    fn unknown_key_is_rejected() {
        let text = preset("toy").unwrap().replace("[cost]\n", "[cost]\nfps = 2\n");
        let err = parse(&text, "t").unwrap_err().to_string();
        assert!(err.contains("fps"), "{err}");
    }

    #[test]
    fn unknown_preset_lists_choices() {
        let err = load("no-such-thing").unwrap_err().to_string();
        assert!(err.contains("7b-like"), "{err}");
    }

    #[test]
    fn conflicting_seeds_are_rejected() {
        let text = preset("toy").unwrap().replace("[model]\n", "[model]\nseed = 5\n");
        assert!(matches!(parse(&text, "t"), Err(CliError::Config(_))));
    }
}
