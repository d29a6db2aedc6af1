//! Parameter-efficient multi-task fine-tuning of a frozen hierarchical
//! transformer with task prompts, task-prompt-conditional feature adaptation
//! and dynamic task filters.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense tensors and a reverse-mode tape, generic over `f32`/`f64`
//! - [`backbone`]: frozen encoder blocks, patch embedding and merging
//! - [`peft`]: low-rank modules, prompts, the TPC operator, dynamic filters,
//!   gating and tuning modes
//! - [`model`]: the assembled network
//! - [`mtl`]: task heads, losses, the Δm metric, synthetic data and training
//! - [`cli`]: configuration, checkpoints and the `tadformer` commands

pub mod backbone;
pub mod cli;
pub mod error;
pub mod model;
pub mod mtl;
pub mod params;
pub mod peft;
pub mod tensor;

pub use error::{Error, Result};
pub use model::{ForwardOutput, ModelConfig, Tadformer};
pub use params::{ParamGroup, ParamId, ParamStore};
pub use peft::TuningMode;
pub use tensor::{Real, Tape, Tensor, Var};
