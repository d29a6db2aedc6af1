//! Task definitions, losses, metrics and the multi-task training loop.

mod data;
mod metrics;
mod train;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use data::{synth_generate, synth_sample, Batch, SynthSample, SynthSpec, Target};
pub use metrics::{compute_delta_m, mean_iou, rmse, task_metric};
pub use train::{
    count_trainable_params, eval_sample, eval_set, evaluate, train, train_step, Adam, AdamConfig, EvalRecord, ParamCount, StepRecord,
    TrainConfig, TrainOutcome,
};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    /// Per-pixel classification, cross-entropy loss, mIoU metric.
    ClassSeg,
    /// Per-pixel real target, L1 loss, RMSE metric.
    Regression,
    /// Per-pixel 0/1 target, balanced cross-entropy, mIoU metric.
    BinarySaliency,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::ClassSeg => "class-seg",
            TaskKind::Regression => "regression",
            TaskKind::BinarySaliency => "binary-saliency",
        }
    }
}

fn default_weight() -> f64 {
    1.0
}

fn is_zero(v: &usize) -> bool {
    *v == 0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub kind: TaskKind,
    /// Class count, class-seg only.
    #[serde(default, skip_serializing_if = "is_zero")]
    pub classes: usize,
    #[serde(default = "default_weight")]
    pub weight: f64,
}

impl TaskSpec {
    pub fn class_seg(classes: usize) -> Self {
        Self { kind: TaskKind::ClassSeg, classes, weight: 1.0 }
    }

    pub fn regression() -> Self {
        Self { kind: TaskKind::Regression, classes: 0, weight: 1.0 }
    }

    pub fn saliency() -> Self {
        Self { kind: TaskKind::BinarySaliency, classes: 0, weight: 1.0 }
    }

    /// The default three correlated tasks.
    pub fn default_set() -> Vec<Self> {
        vec![Self::class_seg(4), Self::regression(), Self::saliency()]
    }

    /// Head output channels.
    pub fn outputs(&self) -> usize {
        match self.kind {
            TaskKind::ClassSeg => self.classes,
            _ => 1,
        }
    }

    pub fn lower_is_better(&self) -> bool {
        self.kind == TaskKind::Regression
    }

    pub fn validate(&self, index: usize) -> Result<()> {
        if !(self.weight > 0.0) || !self.weight.is_finite() {
            return Err(Error::config(format!("tasks[{index}].weight: must be positive, got {}", self.weight)));
        }
        match self.kind {
            TaskKind::ClassSeg if self.classes < 2 => Err(Error::config(format!(
                "tasks[{index}].classes: class-seg needs at least 2 classes, got {}",
                self.classes
            ))),
            TaskKind::ClassSeg => Ok(()),
            _ if self.classes != 0 => Err(Error::config(format!(
                "tasks[{index}].classes: only class-seg tasks take a class count"
            ))),
            _ => Ok(()),
        }
    }
}

/// Per-task loss of `pred[B×N×out]` against a batch target.
pub fn task_loss<T: Real>(tape: &mut Tape<T>, spec: &TaskSpec, pred: Var, target: &Target) -> Result<Var> {
    match (spec.kind, target) {
        (TaskKind::ClassSeg, Target::Labels(labels)) => tape.cross_entropy(pred, Arc::new(labels.clone())),
        (TaskKind::Regression, Target::Values(v)) => {
            let t = Tensor::new(tape.shape(pred), v.iter().map(|&x| T::of(x as f64)).collect())?;
            tape.l1_loss(pred, &t)
        }
        (TaskKind::BinarySaliency, Target::Values(v)) => {
            let t = Tensor::new(tape.shape(pred), v.iter().map(|&x| T::of(x as f64)).collect())?;
            tape.balanced_bce(pred, &t)
        }
        (kind, _) => Err(Error::Data(format!("target type does not match task kind {}", kind.name()))),
    }
}

/// `Σ wᵢ·Lᵢ`
pub fn multitask_loss<T: Real>(tape: &mut Tape<T>, losses: &[Var], weights: &[f64]) -> Result<Var> {
    if losses.len() != weights.len() || losses.is_empty() {
        return Err(Error::config(format!(
            "multitask loss: {} losses but {} weights",
            losses.len(),
            weights.len()
        )));
    }
    let mut total = tape.scale(losses[0], weights[0])?;
    for (&l, &w) in losses[1..].iter().zip(&weights[1..]) {
        let term = tape.scale(l, w)?;
        total = tape.add(total, term)?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weighted_sum_arithmetic() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::scalar(1.0));
        let b = tape.constant(Tensor::scalar(3.0));
        let l = multitask_loss(&mut tape, &[a, b], &[2.0, 1.0]).unwrap();
        assert_eq!(tape.value(l).data(), &[5.0]);
        let single = multitask_loss(&mut tape, &[b], &[1.0]).unwrap();
        assert_eq!(tape.value(single).data(), &[3.0]);
        assert!(matches!(multitask_loss(&mut tape, &[a], &[1.0, 1.0]), Err(Error::Config(_))));
    }

    #[test]
    fn spec_validation() {
        assert!(TaskSpec::class_seg(1).validate(0).is_err());
        assert!(TaskSpec { classes: 3, ..TaskSpec::regression() }.validate(2).unwrap_err().to_string().contains("tasks[2]"));
        assert!(TaskSpec { weight: 0.0, ..TaskSpec::saliency() }.validate(0).is_err());
        assert!(TaskSpec::regression().lower_is_better());
        assert!(!TaskSpec::saliency().lower_is_better());
    }
}
