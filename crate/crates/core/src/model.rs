//! The assembled network: frozen backbone, adapters, prompts and task heads.
//!
//! Within each stage every block but the last runs with task-shared low-rank
//! modules on all four linears. The last (task-adapting) block computes
//! attention once; from there
//!
//! - the shared stream (prompts and patches) finishes the block through the
//!   same task-shared modules and continues to the next stage, and
//! - each task takes the patch part of the attention features, adapts it
//!   with the TPC operator, finishes the block through task-adapted modules
//!   and is gated into the task feature `F_i` fed to the heads.
//!
//! At a stage boundary patches go through the frozen merge and prompts
//! through the trainable upsampler.

use std::cell::RefCell;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{self, BackboneConfig, BackboneWeights, BlockWeights, LinearHooks, LinearWeights, Site};
use crate::error::{Error, Result};
use crate::params::{uniform_tensor, Bindings, ParamGroup, ParamId, ParamStore};
use crate::peft::{self, DtfGenerator, Filters, LoraPair, TaModule, TuningMode};
use crate::tensor::{Real, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub rank: usize,
    pub kernel_size: usize,
    #[serde(default = "default_filter_norm_eps")]
    pub filter_norm_eps: f64,
    /// Output channels of each task head; its length is the task count.
    pub head_outputs: Vec<usize>,
}

fn default_filter_norm_eps() -> f64 {
    1e-5
}

impl ModelConfig {
    pub fn tasks(&self) -> usize {
        self.head_outputs.len()
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.rank == 0 || self.rank >= self.backbone.embed_dim {
            return Err(Error::config(format!(
                "rank: must satisfy 0 < r < {} (the first-stage width), got {}",
                self.backbone.embed_dim, self.rank
            )));
        }
        if self.kernel_size == 0 || self.kernel_size % 2 == 0 {
            return Err(Error::config(format!("kernel_size: must be odd, got {}", self.kernel_size)));
        }
        if !(self.filter_norm_eps > 0.0) {
            return Err(Error::config("filter_norm_eps: must be positive"));
        }
        if self.head_outputs.iter().any(|&o| o == 0) {
            return Err(Error::config("tasks: every head needs at least one output"));
        }
        Ok(())
    }

    /// Width of the channel-concatenated multi-scale feature read by heads.
    pub fn head_fan_in(&self) -> usize {
        (0..self.backbone.num_stages()).map(|s| self.backbone.stage_dim(s)).sum()
    }
}

/// Adapter weights of one stage.
#[derive(Clone, Debug)]
pub struct StagePeft {
    /// Task-shared pairs per block, indexed like [`Site::ALL`].
    pub ts: Vec<[LoraPair; 4]>,
    /// Task-adapted modules of the last block at proj, fc1, fc2.
    pub ta: [TaModule; 3],
    /// Prompt upsampler `C → 2C` into the next stage.
    pub upsample: Option<ParamId>,
    pub gate: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct HeadWeights {
    pub weight: ParamId,
    pub bias: ParamId,
}

/// Parameter layout of the whole model. Values live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Tadformer {
    pub config: ModelConfig,
    pub backbone: BackboneWeights,
    /// `[T×C]`, absent when there are no tasks.
    pub prompts: Option<ParamId>,
    pub stages: Vec<StagePeft>,
    pub heads: Vec<HeadWeights>,
}

/// Per-task intermediates at one stage.
#[derive(Clone, Debug)]
pub struct TaskTrace {
    /// Task-adapted attention features `f_i` (patch tokens).
    pub f: Var,
    /// Output of the last block for this task, `f̂_i`.
    pub f_hat: Var,
    /// Gated feature `F_i` handed to the head.
    pub out: Var,
    /// Filters generated at proj, fc1, fc2, when the mode uses them.
    pub thetas: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct StageTrace {
    /// Full token sequence leaving the stage on the shared stream.
    pub shared: Var,
    /// Attention of the last block, `[B×H×L×L]`.
    pub attn: Var,
    /// Task attention map `[B×H×T×N]` when the mode uses it.
    pub tam: Option<Var>,
    /// Number of prompt tokens at the front of the sequence.
    pub prompts: usize,
    pub grid: (usize, usize),
    pub tasks: Vec<TaskTrace>,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// Per-task predictions `[B×N₀×out_i]` on the first-stage grid.
    pub preds: Vec<Var>,
    pub stages: Vec<StageTrace>,
}

const SITE_PROJ: usize = 1;

fn site_index(site: Site) -> usize {
    Site::ALL.iter().position(|&s| s == site).unwrap()
}

struct SharedHooks<'a> {
    pairs: &'a [LoraPair; 4],
    enabled: bool,
}

impl<T: Real> LinearHooks<T> for SharedHooks<'_> {
    fn adapt(&self, tape: &mut Tape<T>, vars: &Bindings, site: Site, input: Var, frozen: Var) -> Result<Var> {
        if !self.enabled {
            return Ok(frozen);
        }
        peft::ts_apply(tape, vars, &self.pairs[site_index(site)], input, frozen)
    }
}

struct AdaptedHooks<'a> {
    modules: &'a [TaModule; 3],
    grid: (usize, usize),
    use_dtf: bool,
    thetas: RefCell<Vec<Var>>,
}

impl<T: Real> LinearHooks<T> for AdaptedHooks<'_> {
    fn adapt(&self, tape: &mut Tape<T>, vars: &Bindings, site: Site, input: Var, frozen: Var) -> Result<Var> {
        let idx = site_index(site);
        if idx < SITE_PROJ {
            return Ok(frozen);
        }
        let filters = if self.use_dtf { Filters::Generated } else { Filters::Skip };
        let (out, theta) = peft::ta_apply(tape, vars, &self.modules[idx - SITE_PROJ], input, frozen, self.grid, filters)?;
        self.thetas.borrow_mut().extend(theta);
        Ok(out)
    }
}

impl Tadformer {
    /// Builds the layout and a seeded store. The backbone and the adapters
    /// draw from separate streams, so the frozen weights depend only on the
    /// seed and the backbone shape.
    pub fn new<T: Real>(config: ModelConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let backbone = BackboneWeights::init(&config.backbone, &mut store, &mut rng);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);

        let bc = &config.backbone;
        let (r, k, eps) = (config.rank, config.kernel_size, config.filter_norm_eps);
        let tasks = config.tasks();
        let prompts = (tasks > 0).then(|| {
            store.push("peft/prompts", ParamGroup::Prompts, uniform_tensor(&mut rng, &[tasks, bc.embed_dim], 1.0))
        });
        let mut stages = Vec::new();
        for s in 0..bc.num_stages() {
            let (c, hidden) = (bc.stage_dim(s), bc.mlp_hidden(s));
            let io = |site: Site| match site {
                Site::Qkv => (c, 3 * c),
                Site::Proj => (c, c),
                Site::Fc1 => (c, hidden),
                Site::Fc2 => (hidden, c),
            };
            let mut ts = Vec::new();
            for b in 0..bc.depths[s] {
                let pairs = Site::ALL.map(|site| {
                    let (i, o) = io(site);
                    let name = format!("peft/s{s}/b{b}/ts/{}", site.name());
                    LoraPair::init(&mut store, &mut rng, &name, i, o, r, ParamGroup::TsLora)
                });
                ts.push(pairs);
            }
            let last = backbone.stages[s].blocks.last().expect("validated depth");
            let ta = [Site::Proj, Site::Fc1, Site::Fc2].map(|site| {
                let (i, o) = io(site);
                let prefix = format!("peft/s{s}/ta/{}", site.name());
                let pair = LoraPair::init(&mut store, &mut rng, &prefix, i, o, r, ParamGroup::TaLora);
                let dtf = DtfGenerator::init(&mut store, &mut rng, &format!("{prefix}/dtf"), r, k, eps);
                TaModule { host: *last.linear(site), pair, dtf }
            });
            let upsample = (s + 1 < bc.num_stages() && tasks > 0).then(|| {
                store.push(
                    format!("peft/s{s}/upsample"),
                    ParamGroup::Upsampler,
                    uniform_tensor(&mut rng, &[c, 2 * c], 1.0 / (c as f64).sqrt()),
                )
            });
            let gate = store.push(format!("peft/s{s}/gate"), ParamGroup::Gate, Tensor::zeros(&[1]));
            stages.push(StagePeft { ts, ta, upsample, gate });
        }
        let fan_in = config.head_fan_in();
        let heads = config
            .head_outputs
            .iter()
            .enumerate()
            .map(|(i, &out)| HeadWeights {
                weight: store.push(
                    format!("peft/heads/task{i}/weight"),
                    ParamGroup::Head,
                    uniform_tensor(&mut rng, &[fan_in, out], 1.0 / (fan_in as f64).sqrt()),
                ),
                bias: store.push(format!("peft/heads/task{i}/bias"), ParamGroup::Head, Tensor::zeros(&[out])),
            })
            .collect();
        Ok((Self { config, backbone, prompts, stages, heads }, store))
    }

    pub fn num_ta_modules(&self) -> usize {
        3 * self.stages.len()
    }

    /// Runs `images[B×Cin×H×W]` through the model as routed by `mode`.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, vars: &Bindings, images: Var, mode: TuningMode) -> Result<ForwardOutput> {
        let bc = &self.config.backbone;
        let (ih, iw) = bc.image_size();
        let si = tape.shape(images).to_vec();
        if si.len() != 4 || si[1] != bc.in_channels || si[2] != ih || si[3] != iw {
            return Err(Error::shape("forward", &si, &[bc.in_channels, ih, iw]));
        }
        let tokens = backbone::patch_embed(tape, vars, &self.backbone.embed, bc.patch_size, images)?;
        let prompts = self.prompts.filter(|_| mode.uses_prompts()).map(|id| vars[id]);
        let mut x = peft::prepend_task_prompts(tape, tokens, prompts)?;
        let mut p = if prompts.is_some() { self.config.tasks() } else { 0 };

        let mut traces = Vec::with_capacity(self.stages.len());
        for s in 0..self.stages.len() {
            let trace = self.stage_forward(tape, vars, s, x, p, mode)?;
            if let Some(merge) = self.backbone.stages[s].merge {
                x = self.stage_boundary(tape, vars, s, trace.shared, p, merge)?;
            }
            traces.push(trace);
            if s + 1 < self.stages.len() && self.stages[s].upsample.is_none() {
                p = 0;
            }
        }

        let mut preds = Vec::with_capacity(self.heads.len());
        for (i, head) in self.heads.iter().enumerate() {
            let mut scales = Vec::with_capacity(traces.len());
            for (s, trace) in traces.iter().enumerate() {
                let (h, w) = trace.grid;
                scales.push(tape.upsample_tokens(trace.tasks[i].out, h, w, 1 << s)?);
            }
            let fused = tape.concat(&scales, 2)?;
            let y = tape.linear(fused, vars[head.weight])?;
            preds.push(tape.add_bias(y, vars[head.bias])?);
        }
        Ok(ForwardOutput { preds, stages: traces })
    }

    /// One stage over `x[B×(P+N)×C]` whose first `p` tokens are prompts.
    pub fn stage_forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        vars: &Bindings,
        s: usize,
        mut x: Var,
        p: usize,
        mode: TuningMode,
    ) -> Result<StageTrace> {
        let blocks = &self.backbone.stages[s].blocks;
        let peft = &self.stages[s];
        let lora = mode.uses_lora();
        let depth = blocks.len();
        for (block, pairs) in blocks[..depth - 1].iter().zip(&peft.ts) {
            x = block.forward(tape, vars, x, p, &SharedHooks { pairs, enabled: lora })?;
        }
        let block: &BlockWeights = &blocks[depth - 1];
        let shared_hooks = SharedHooks { pairs: &peft.ts[depth - 1], enabled: lora };
        let att = block.attention_forward(tape, vars, x, p, &shared_hooks)?;
        let shared = block.finish(tape, vars, x, att.features, &shared_hooks)?;

        let grid = block.grid;
        let n = grid.0 * grid.1;
        let tasks = self.config.tasks();
        let mut trace = StageTrace { shared, attn: att.attn, tam: None, prompts: p, grid, tasks: Vec::new() };
        if tasks == 0 {
            return Ok(trace);
        }
        if !mode.has_task_path() {
            let patches = tape.slice(shared, 1, p, n)?;
            trace.tasks = vec![TaskTrace { f: patches, f_hat: patches, out: patches, thetas: Vec::new() }; tasks];
            return Ok(trace);
        }

        let f_qkv = tape.slice(att.features, 1, p, n)?;
        let x_patch = tape.slice(x, 1, p, n)?;
        let features = if mode.uses_tam() && p > 0 {
            let tam = peft::extract_task_attention_map(tape, att.attn, p)?;
            trace.tam = Some(tam);
            peft::tpc_adapt(tape, f_qkv, tam)?
        } else {
            vec![f_qkv]
        };
        let gate = mode.uses_gate().then(|| vars[peft.gate]);
        let mut distinct = Vec::with_capacity(features.len());
        for f in features {
            let hooks = AdaptedHooks { modules: &peft.ta, grid, use_dtf: mode.uses_dtf(), thetas: RefCell::new(Vec::new()) };
            let f_hat = block.finish(tape, vars, x_patch, f, &hooks)?;
            let out = match gate {
                Some(g) => peft::gated_output(tape, f, f_hat, g)?,
                None => f_hat,
            };
            distinct.push(TaskTrace { f, f_hat, out, thetas: hooks.thetas.into_inner() });
        }
        trace.tasks = if distinct.len() == tasks {
            distinct
        } else {
            vec![distinct.swap_remove(0); tasks]
        };
        Ok(trace)
    }

    /// Merges patch tokens and upsamples prompt tokens into the next stage.
    fn stage_boundary<T: Real>(
        &self,
        tape: &mut Tape<T>,
        vars: &Bindings,
        s: usize,
        shared: Var,
        p: usize,
        merge: ParamId,
    ) -> Result<Var> {
        let grid = self.config.backbone.stage_grid(s);
        let n = grid.0 * grid.1;
        let patches = if p > 0 { tape.slice(shared, 1, p, n)? } else { shared };
        let merged = backbone::patch_merge(tape, patches, vars[merge], grid)?;
        match self.stages[s].upsample.filter(|_| p > 0) {
            Some(u) => {
                let prompts = tape.slice(shared, 1, 0, p)?;
                let up = peft::prompt_upsample(tape, prompts, vars[u])?;
                tape.concat(&[up, merged], 1)
            }
            None => Ok(merged),
        }
    }

    /// Host layer and pair of every task-shared module, for weight merging.
    pub fn ts_modules(&self) -> Vec<peft::TsModule> {
        let mut out = Vec::new();
        for (stage, peft_stage) in self.backbone.stages.iter().zip(&self.stages) {
            for (block, pairs) in stage.blocks.iter().zip(&peft_stage.ts) {
                for (site, pair) in Site::ALL.iter().zip(pairs) {
                    out.push(peft::TsModule { host: peft::Host::Linear(*block.linear(*site)), pair: *pair });
                }
            }
        }
        out
    }

    pub fn head(&self, task: usize) -> &HeadWeights {
        &self.heads[task]
    }

    pub fn embed(&self) -> &LinearWeights {
        &self.backbone.embed
    }
}
