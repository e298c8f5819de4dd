//! Dual cross-attention video-language model at desk scale.
//!
//! Pooled visual tokens enter a decoder-only language model while the full
//! set of per-frame tokens stays outside the sequence and is reached through
//! visual-to-visual and text-to-visual cross-attention every `k_insert`
//! layers. An analytic cost model compares this against feeding every visual
//! token into the decoder.

pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod costmodel;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod params;
pub mod selfcheck;
pub mod tensor;
pub mod training;
pub mod vision;

pub use config::{GateMode, ModelConfig};
pub use error::{Error, Result};
pub use model::{ForwardOptions, Model, SequenceState};
pub use params::{ParamGroup, ParamStore};
pub use tensor::{Gradients, Tape, Tensor, Var};
pub use vision::VideoFrames;
