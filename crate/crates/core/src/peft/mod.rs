//! Trainable adaptation machinery on top of the frozen backbone.
//!
//! - [`lora`]: task-shared low-rank modules and weight merging
//! - [`prompt`]: task prompts, the task attention map, the TPC operator and
//!   the stage-wise gate
//! - [`dtf`]: dynamic task filters and task-adapted modules
//!
//! [`TuningMode`] selects which of these are active and which parameter
//! groups receive gradients.

pub mod dtf;
pub mod lora;
pub mod prompt;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use dtf::{ta_apply, ta_forward, DtfGenerator, Filters, TaModule};
pub use lora::{lora_merge, ts_apply, ts_forward, Host, LoraPair, TsModule};
pub use prompt::{extract_task_attention_map, gated_output, prepend_task_prompts, prompt_upsample, tpc_adapt};

use crate::error::{Error, Result};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::tensor::Real;

/// Which parts of the model are trained, and how the task path is routed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TuningMode {
    /// Every tensor trainable, full routing.
    FullFinetune,
    /// Only the task heads.
    DecodersOnly,
    /// Task-shared low-rank modules in every block; no task path.
    SharedLoraOnly,
    /// Prompts and the TPC operator; task-adapted modules without filters.
    TpcOnly,
    /// Dynamic filters on the block features; no prompts, no gate.
    DtfOnly,
    /// Prompts and filters, but `f_i = f_qkv` (task attention map bypassed).
    TpDtfNoTam,
    /// Everything.
    Tadformer,
}

impl TuningMode {
    pub const ALL: [TuningMode; 7] = [
        TuningMode::FullFinetune,
        TuningMode::DecodersOnly,
        TuningMode::SharedLoraOnly,
        TuningMode::TpcOnly,
        TuningMode::DtfOnly,
        TuningMode::TpDtfNoTam,
        TuningMode::Tadformer,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TuningMode::FullFinetune => "full-finetune",
            TuningMode::DecodersOnly => "decoders-only",
            TuningMode::SharedLoraOnly => "shared-lora-only",
            TuningMode::TpcOnly => "tpc-only",
            TuningMode::DtfOnly => "dtf-only",
            TuningMode::TpDtfNoTam => "tp-dtf-no-tam",
            TuningMode::Tadformer => "tadformer",
        }
    }

    /// Whether the last block of each stage runs a separate task path.
    pub fn has_task_path(self) -> bool {
        !matches!(self, TuningMode::DecodersOnly | TuningMode::SharedLoraOnly)
    }

    pub fn uses_prompts(self) -> bool {
        matches!(
            self,
            TuningMode::FullFinetune | TuningMode::TpcOnly | TuningMode::TpDtfNoTam | TuningMode::Tadformer
        )
    }

    pub fn uses_tam(self) -> bool {
        matches!(self, TuningMode::FullFinetune | TuningMode::TpcOnly | TuningMode::Tadformer)
    }

    pub fn uses_dtf(self) -> bool {
        matches!(
            self,
            TuningMode::FullFinetune | TuningMode::DtfOnly | TuningMode::TpDtfNoTam | TuningMode::Tadformer
        )
    }

    pub fn uses_gate(self) -> bool {
        self.uses_prompts()
    }

    /// Whether low-rank deltas are added to the frozen linears.
    pub fn uses_lora(self) -> bool {
        self != TuningMode::DecodersOnly
    }

    /// Parameter groups that receive gradients.
    pub fn trainable_groups(self) -> Vec<ParamGroup> {
        use ParamGroup::*;
        let shared = [TsLora, Norm, PosBias, Head];
        let mut groups: Vec<ParamGroup> = match self {
            TuningMode::FullFinetune => ParamGroup::ALL.to_vec(),
            TuningMode::DecodersOnly => vec![Head],
            TuningMode::SharedLoraOnly => shared.to_vec(),
            TuningMode::TpcOnly => [&shared[..], &[TaLora, Prompts, Upsampler, Gate]].concat(),
            TuningMode::DtfOnly => [&shared[..], &[TaLora, Dtf]].concat(),
            TuningMode::TpDtfNoTam | TuningMode::Tadformer => {
                [&shared[..], &[TaLora, Dtf, Prompts, Upsampler, Gate]].concat()
            }
        };
        groups.sort();
        groups
    }

    pub fn is_trainable(self, group: ParamGroup) -> bool {
        self.trainable_groups().contains(&group)
    }
}

impl fmt::Display for TuningMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TuningMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| {
            let names: Vec<_> = Self::ALL.iter().map(|m| m.name()).collect();
            Error::config(format!("mode: unknown tuning mode `{s}` (expected one of {})", names.join(", ")))
        })
    }
}

/// Trainable tensors of `store` under `mode`, sorted by name.
pub fn configure_trainable_set<T: Real>(mode: TuningMode, store: &ParamStore<T>) -> Vec<(String, ParamId)> {
    let groups = mode.trainable_groups();
    let mut out: Vec<(String, ParamId)> = store
        .iter()
        .filter(|(_, p)| groups.contains(&p.group))
        .map(|(id, p)| (p.name.clone(), id))
        .collect();
    out.sort();
    out
}

/// Per-parameter trainable flags in store order, for [`ParamStore::bind`].
pub fn trainable_mask<T: Real>(mode: TuningMode, store: &ParamStore<T>) -> Vec<bool> {
    let groups = mode.trainable_groups();
    store.iter().map(|(_, p)| groups.contains(&p.group)).collect()
}
