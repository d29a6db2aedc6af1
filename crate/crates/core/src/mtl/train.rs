use serde::{Deserialize, Serialize};

use super::{multitask_loss, synth_generate, synth_sample, task_loss, task_metric, Batch, SynthSample, SynthSpec, TaskSpec};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Tadformer};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::peft::{configure_trainable_set, trainable_mask, TuningMode};
use crate::tensor::{Tape, Tensor};

/// Dataset index where the held-out evaluation samples start.
const EVAL_OFFSET: u64 = 1 << 40;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay, `p -= lr·wd·p`.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// Adam with bias-corrected moments, kept in 64-bit.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    t: i32,
    moments: Vec<Option<(Vec<f64>, Vec<f64>)>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, t: 0, moments: Vec::new() }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    pub fn step(&mut self, store: &mut ParamStore<f32>, grads: &[(ParamId, Tensor<f32>)]) {
        let AdamConfig { lr, beta1, beta2, eps, weight_decay } = self.config;
        self.t += 1;
        let c1 = 1.0 - beta1.powi(self.t);
        let c2 = 1.0 - beta2.powi(self.t);
        if self.moments.len() < store.len() {
            self.moments.resize(store.len(), None);
        }
        for (id, grad) in grads {
            let (m, v) = self.moments[id.index()].get_or_insert_with(|| (vec![0.0; grad.numel()], vec![0.0; grad.numel()]));
            let p = store.tensor_mut(*id).data_mut();
            for i in 0..p.len() {
                let g = grad.data()[i] as f64;
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let update = (m[i] / c1) / ((v[i] / c2).sqrt() + eps) + weight_decay * p[i] as f64;
                p[i] = (p[i] as f64 - lr * update) as f32;
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub losses: Vec<f64>,
    /// Metric of each task on the training batch.
    pub metrics: Vec<f64>,
    pub weighted: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRecord {
    pub losses: Vec<f64>,
    pub metrics: Vec<f64>,
    pub weighted: f64,
}

fn weights(tasks: &[TaskSpec]) -> Vec<f64> {
    tasks.iter().map(|t| t.weight).collect()
}

/// Forward, weighted loss, backward and one optimizer update.
pub fn train_step(
    model: &Tadformer,
    store: &mut ParamStore<f32>,
    opt: &mut Adam,
    batch: &Batch,
    mode: TuningMode,
    tasks: &[TaskSpec],
) -> Result<StepRecord> {
    let mask = trainable_mask(mode, store);
    let mut tape = Tape::new();
    let vars = store.bind(&mut tape, &mask);
    let images = tape.constant(batch.images.clone());
    let out = model.forward(&mut tape, &vars, images, mode)?;
    let mut losses = Vec::with_capacity(tasks.len());
    for ((spec, &pred), target) in tasks.iter().zip(&out.preds).zip(&batch.targets) {
        losses.push(task_loss(&mut tape, spec, pred, target)?);
    }
    let total = multitask_loss(&mut tape, &losses, &weights(tasks))?;
    let weighted = tape.value(total).data()[0] as f64;
    if !weighted.is_finite() {
        return Err(Error::Numerical(format!("non-finite weighted loss {weighted} at step {}", opt.steps() + 1)));
    }
    let mut metrics = Vec::with_capacity(tasks.len());
    for ((spec, &pred), target) in tasks.iter().zip(&out.preds).zip(&batch.targets) {
        metrics.push(task_metric(spec, &tape.value(pred).to_f64_vec(), target)?);
    }
    let losses: Vec<f64> = losses.iter().map(|&l| tape.value(l).data()[0] as f64).collect();

    tape.backward(total)?;
    let grads: Vec<(ParamId, Tensor<f32>)> = store
        .ids()
        .filter(|id| mask[id.index()])
        .map(|id| {
            let g = tape.grad(vars[id]).unwrap_or_else(|| Tensor::zeros(store.tensor(id).shape()));
            (id, g)
        })
        .collect();
    opt.step(store, &grads);
    Ok(StepRecord { step: opt.steps() as usize, losses, metrics, weighted })
}

/// Mean losses over `samples` (in batches) and metrics over all pixels.
pub fn evaluate(
    model: &Tadformer,
    store: &ParamStore<f32>,
    mode: TuningMode,
    tasks: &[TaskSpec],
    samples: &[SynthSample],
    batch_size: usize,
) -> Result<EvalRecord> {
    let mut loss_sum = vec![0.0; tasks.len()];
    let mut preds: Vec<Vec<f64>> = vec![Vec::new(); tasks.len()];
    let mut count = 0usize;
    for chunk in samples.chunks(batch_size.max(1)) {
        let batch = Batch::collate(chunk);
        let mut tape = Tape::new();
        let vars = store.bind(&mut tape, &vec![false; store.len()]);
        let images = tape.constant(batch.images.clone());
        let out = model.forward(&mut tape, &vars, images, mode)?;
        for (i, ((spec, &pred), target)) in tasks.iter().zip(&out.preds).zip(&batch.targets).enumerate() {
            let l = task_loss(&mut tape, spec, pred, target)?;
            loss_sum[i] += tape.value(l).data()[0] as f64 * chunk.len() as f64;
            preds[i].extend(tape.value(pred).to_f64_vec());
        }
        count += chunk.len();
    }
    let all = Batch::collate(samples);
    let losses: Vec<f64> = loss_sum.iter().map(|l| l / count as f64).collect();
    let metrics = tasks
        .iter()
        .zip(&preds)
        .zip(&all.targets)
        .map(|((spec, p), t)| task_metric(spec, p, t))
        .collect::<Result<Vec<_>>>()?;
    let weighted = losses.iter().zip(weights(tasks)).map(|(l, w)| l * w).sum();
    Ok(EvalRecord { losses, metrics, weighted })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub eval_samples: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    /// Threads for data generation; results do not depend on it.
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { steps: 300, batch_size: 4, eval_samples: 16, seed: 0, adam: AdamConfig::default(), workers: 1 }
    }
}

pub struct TrainOutcome {
    pub model: Tadformer,
    pub store: ParamStore<f32>,
    pub eval: EvalRecord,
}

/// Initializes a model from `cfg.seed` and trains it on fresh synthetic
/// batches, then evaluates on the held-out set.
pub fn train(
    model_config: &ModelConfig,
    tasks: &[TaskSpec],
    mode: TuningMode,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<TrainOutcome> {
    let (model, mut store) = Tadformer::new::<f32>(model_config.clone(), cfg.seed)?;
    let spec = SynthSpec::new(&model_config.backbone, tasks);
    let mut opt = Adam::new(cfg.adam);
    for step in 0..cfg.steps {
        let start = (step * cfg.batch_size) as u64;
        let samples = synth_generate(cfg.seed, start, cfg.batch_size, &spec, cfg.workers);
        let record = train_step(&model, &mut store, &mut opt, &Batch::collate(&samples), mode, tasks)?;
        on_step(&record);
    }
    let eval_set = synth_generate(cfg.seed, EVAL_OFFSET, cfg.eval_samples, &spec, cfg.workers);
    let eval = evaluate(&model, &store, mode, tasks, &eval_set, cfg.batch_size)?;
    Ok(TrainOutcome { model, store, eval })
}

/// The held-out evaluation samples used by [`train`].
pub fn eval_set(seed: u64, count: usize, spec: &SynthSpec, workers: usize) -> Vec<SynthSample> {
    synth_generate(seed, EVAL_OFFSET, count, spec, workers)
}

/// Sample `index` of [`eval_set`].
pub fn eval_sample(seed: u64, index: u64, spec: &SynthSpec) -> SynthSample {
    synth_sample(seed, EVAL_OFFSET + index, spec)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamCount {
    pub mode: TuningMode,
    pub total: usize,
    /// Trainable scalars per group, every group listed in a fixed order.
    pub groups: Vec<(ParamGroup, usize)>,
}

impl ParamCount {
    pub fn group(&self, group: ParamGroup) -> usize {
        self.groups.iter().find(|(g, _)| *g == group).map_or(0, |(_, n)| *n)
    }
}

pub fn count_trainable_params<T: crate::tensor::Real>(store: &ParamStore<T>, mode: TuningMode) -> ParamCount {
    let mut groups: Vec<(ParamGroup, usize)> = ParamGroup::ALL.iter().map(|&g| (g, 0)).collect();
    let mut total = 0;
    for (_, id) in configure_trainable_set(mode, store) {
        let p = store.get(id);
        let n = p.tensor.numel();
        total += n;
        groups.iter_mut().find(|(g, _)| *g == p.group).expect("known group").1 += n;
    }
    ParamCount { mode, total, groups }
}
