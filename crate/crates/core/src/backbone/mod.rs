//! Simplified hierarchical vision transformer.
//!
//! Each stage runs global multi-head attention over its whole token grid
//! (plus any prepended prompt tokens), then patch merging halves the grid
//! and doubles the width. The attention layer hands back both the raw
//! attention map and the head-concatenated value aggregate taken *before*
//! the output projection, which is what task-prompt conditioning consumes.
//!
//! Every linear layer goes through a [`LinearHooks`] implementation so the
//! adapter code can wrap frozen layers without the backbone knowing about it.

mod config;

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

pub use config::BackboneConfig;

use crate::error::{Error, Result};
use crate::params::{uniform_tensor, Bindings, ParamGroup, ParamId, ParamStore};
use crate::tensor::{Real, Tape, Tensor, Var};

/// The four linear layers of a transformer block that adapters attach to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Site {
    Qkv,
    Proj,
    Fc1,
    Fc2,
}

impl Site {
    pub const ALL: [Site; 4] = [Site::Qkv, Site::Proj, Site::Fc1, Site::Fc2];

    pub fn name(self) -> &'static str {
        match self {
            Site::Qkv => "qkv",
            Site::Proj => "proj",
            Site::Fc1 => "fc1",
            Site::Fc2 => "fc2",
        }
    }
}

/// Wraps the output of a frozen linear layer.
pub trait LinearHooks<T: Real> {
    fn adapt(&self, tape: &mut Tape<T>, vars: &Bindings, site: Site, input: Var, frozen: Var) -> Result<Var>;
}

/// No adapters: the plain frozen backbone.
pub struct Frozen;

impl<T: Real> LinearHooks<T> for Frozen {
    fn adapt(&self, _: &mut Tape<T>, _: &Bindings, _: Site, _: Var, frozen: Var) -> Result<Var> {
        Ok(frozen)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LinearWeights {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl LinearWeights {
    fn init<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        group: ParamGroup,
    ) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = store.push(format!("{prefix}/weight"), group, uniform_tensor(rng, &[fan_in, fan_out], bound));
        let bias = bias.then(|| store.push(format!("{prefix}/bias"), group, uniform_tensor(rng, &[fan_out], 0.02)));
        Self { weight, bias, fan_in, fan_out }
    }

    /// `x · W + b`
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, vars: &Bindings, x: Var) -> Result<Var> {
        let y = tape.linear(x, vars[self.weight])?;
        match self.bias {
            Some(b) => tape.add_bias(y, vars[b]),
            None => Ok(y),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct NormWeights {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl NormWeights {
    fn init<T: Real>(store: &mut ParamStore<T>, prefix: &str, dim: usize) -> Self {
        Self {
            gamma: store.push(format!("{prefix}/gamma"), ParamGroup::Norm, Tensor::ones(&[dim])),
            beta: store.push(format!("{prefix}/beta"), ParamGroup::Norm, Tensor::zeros(&[dim])),
        }
    }
}

/// Frozen weights of one transformer block.
#[derive(Clone, Debug)]
pub struct BlockWeights {
    pub dim: usize,
    pub heads: usize,
    pub grid: (usize, usize),
    pub ln_eps: f64,
    pub ln1: NormWeights,
    pub qkv: LinearWeights,
    /// Per-head table over relative patch offsets, `H × (2h-1)(2w-1)`.
    pub pos_bias: ParamId,
    pub proj: LinearWeights,
    pub ln2: NormWeights,
    pub fc1: LinearWeights,
    pub fc2: LinearWeights,
}

/// Attention map and pre-projection features of one attention layer.
#[derive(Clone, Copy, Debug)]
pub struct AttentionOutput {
    /// Head-concatenated `A·V`, `[B×L×C]`, before the projection layer.
    pub features: Var,
    /// Softmax attention, `[B×H×L×L]`.
    pub attn: Var,
}

impl BlockWeights {
    pub fn linear(&self, site: Site) -> &LinearWeights {
        match site {
            Site::Qkv => &self.qkv,
            Site::Proj => &self.proj,
            Site::Fc1 => &self.fc1,
            Site::Fc2 => &self.fc2,
        }
    }

    /// Frozen linear at `site` followed by the adapter hook.
    pub fn apply_linear<T: Real>(
        &self,
        tape: &mut Tape<T>,
        vars: &Bindings,
        site: Site,
        x: Var,
        hooks: &dyn LinearHooks<T>,
    ) -> Result<Var> {
        let frozen = self.linear(site).forward(tape, vars, x)?;
        hooks.adapt(tape, vars, site, x, frozen)
    }

    /// Pre-norm multi-head attention over `x[B×L×C]`, of which the first
    /// `prompts` tokens are prompts and the rest lie on the block's grid.
    pub fn attention_forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        vars: &Bindings,
        x: Var,
        prompts: usize,
        hooks: &dyn LinearHooks<T>,
    ) -> Result<AttentionOutput> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 3 || shape[2] != self.dim {
            return Err(Error::shape("attention_forward", &shape, &[self.dim]));
        }
        let (b, l, c) = (shape[0], shape[1], shape[2]);
        let (h, d) = (self.heads, self.dim / self.heads);
        let normed = tape.layer_norm(x, vars[self.ln1.gamma], vars[self.ln1.beta], self.ln_eps)?;
        let qkv = self.apply_linear(tape, vars, Site::Qkv, normed, hooks)?;
        let qkv = tape.reshape(qkv, &[b, l, 3, h, d])?;
        let qkv = tape.permute(qkv, &[2, 0, 3, 1, 4])?;
        let mut parts = [x; 3];
        for (i, part) in parts.iter_mut().enumerate() {
            let s = tape.slice(qkv, 0, i, 1)?;
            *part = tape.reshape(s, &[b, h, l, d])?;
        }
        let [q, k, v] = parts;
        let scores = tape.bmm(q, k, true)?;
        let scores = tape.scale(scores, 1.0 / (d as f64).sqrt())?;
        let index = relative_position_index(self.grid, prompts);
        if index.len() != l * l {
            return Err(Error::shape("attention_forward", &shape, &[prompts + self.grid.0 * self.grid.1]));
        }
        let scores = tape.add_position_bias(scores, vars[self.pos_bias], index)?;
        let attn = tape.softmax_lastdim(scores)?;
        let out = tape.bmm(attn, v, false)?;
        let out = tape.permute(out, &[0, 2, 1, 3])?;
        let features = tape.reshape(out, &[b, l, c])?;
        Ok(AttentionOutput { features, attn })
    }

    /// `fc2(GELU(fc1(x)))`, each linear passing through the hooks.
    pub fn mlp_forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        vars: &Bindings,
        x: Var,
        hooks: &dyn LinearHooks<T>,
    ) -> Result<Var> {
        let h = self.apply_linear(tape, vars, Site::Fc1, x, hooks)?;
        let h = tape.gelu(h)?;
        self.apply_linear(tape, vars, Site::Fc2, h, hooks)
    }

    /// Residual second half of a block: `y = x + proj(f)`, `y + mlp(LN(y))`.
    pub fn finish<T: Real>(
        &self,
        tape: &mut Tape<T>,
        vars: &Bindings,
        x: Var,
        features: Var,
        hooks: &dyn LinearHooks<T>,
    ) -> Result<Var> {
        let proj = self.apply_linear(tape, vars, Site::Proj, features, hooks)?;
        let y = tape.add(x, proj)?;
        let n = tape.layer_norm(y, vars[self.ln2.gamma], vars[self.ln2.beta], self.ln_eps)?;
        let m = self.mlp_forward(tape, vars, n, hooks)?;
        tape.add(y, m)
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        vars: &Bindings,
        x: Var,
        prompts: usize,
        hooks: &dyn LinearHooks<T>,
    ) -> Result<Var> {
        let att = self.attention_forward(tape, vars, x, prompts, hooks)?;
        self.finish(tape, vars, x, att.features, hooks)
    }
}

#[derive(Clone, Debug)]
pub struct StageWeights {
    pub blocks: Vec<BlockWeights>,
    /// Frozen `4C × 2C` merge into the next stage, absent on the last stage.
    pub merge: Option<ParamId>,
}

#[derive(Clone, Debug)]
pub struct BackboneWeights {
    pub embed: LinearWeights,
    pub stages: Vec<StageWeights>,
}

impl BackboneWeights {
    /// Seeded stand-in for pretrained weights.
    pub fn init<T: Real>(cfg: &BackboneConfig, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) -> Self {
        let patch_dim = cfg.in_channels * cfg.patch_size * cfg.patch_size;
        let embed = LinearWeights::init(
            store,
            rng,
            "backbone/embed",
            patch_dim,
            cfg.embed_dim,
            true,
            ParamGroup::PatchEmbed,
        );
        let mut stages = Vec::new();
        for s in 0..cfg.num_stages() {
            let dim = cfg.stage_dim(s);
            let hidden = cfg.mlp_hidden(s);
            let grid = cfg.stage_grid(s);
            let rel = (2 * grid.0 - 1) * (2 * grid.1 - 1);
            let mut blocks = Vec::new();
            for b in 0..cfg.depths[s] {
                let p = format!("backbone/s{s}/b{b}");
                let lin = ParamGroup::Linear;
                let ln1 = NormWeights::init(store, &format!("{p}/ln1"), dim);
                let qkv = LinearWeights::init(store, rng, &format!("{p}/qkv"), dim, 3 * dim, true, lin);
                let pos_bias = store.push(
                    format!("{p}/pos_bias"),
                    ParamGroup::PosBias,
                    uniform_tensor(rng, &[cfg.heads[s], rel], 0.02),
                );
                let proj = LinearWeights::init(store, rng, &format!("{p}/proj"), dim, dim, true, lin);
                let ln2 = NormWeights::init(store, &format!("{p}/ln2"), dim);
                let fc1 = LinearWeights::init(store, rng, &format!("{p}/fc1"), dim, hidden, true, lin);
                let fc2 = LinearWeights::init(store, rng, &format!("{p}/fc2"), hidden, dim, true, lin);
                blocks.push(BlockWeights {
                    dim,
                    heads: cfg.heads[s],
                    grid,
                    ln_eps: cfg.ln_eps,
                    ln1,
                    qkv,
                    pos_bias,
                    proj,
                    ln2,
                    fc1,
                    fc2,
                });
            }
            let merge = (s + 1 < cfg.num_stages()).then(|| {
                store.push(
                    format!("backbone/s{s}/merge/weight"),
                    ParamGroup::PatchMerge,
                    uniform_tensor(rng, &[4 * dim, 2 * dim], 1.0 / ((4 * dim) as f64).sqrt()),
                )
            });
            stages.push(StageWeights { blocks, merge });
        }
        Self { embed, stages }
    }
}

/// Linear embedding of non-overlapping `p×p` patches: `[B×Cin×H×W]` to
/// `[B×N×C]`.
pub fn patch_embed<T: Real>(
    tape: &mut Tape<T>,
    vars: &Bindings,
    embed: &LinearWeights,
    patch_size: usize,
    image: Var,
) -> Result<Var> {
    let patches = tape.unfold_patches(image, patch_size)?;
    embed.forward(tape, vars, patches)
}

/// Concatenates 2×2 token neighbourhoods (`4C`) and projects them to `2C`.
pub fn patch_merge<T: Real>(tape: &mut Tape<T>, tokens: Var, merge_weight: Var, grid: (usize, usize)) -> Result<Var> {
    let gathered = tape.merge_gather(tokens, grid.0, grid.1)?;
    tape.linear(gathered, merge_weight)
}

/// Position-bias table index for a sequence of `prompts` prompt tokens
/// followed by a row-major `grid`. Pairs involving a prompt get `-1`.
pub fn relative_position_index(grid: (usize, usize), prompts: usize) -> Arc<Vec<i32>> {
    let (h, w) = grid;
    let n = h * w;
    let l = prompts + n;
    let mut index = vec![-1i32; l * l];
    for a in 0..n {
        let (ya, xa) = (a / w, a % w);
        for bb in 0..n {
            let (yb, xb) = (bb / w, bb % w);
            let dy = ya + h - 1 - yb;
            let dx = xa + w - 1 - xb;
            index[(prompts + a) * l + prompts + bb] = (dy * (2 * w - 1) + dx) as i32;
        }
    }
    Arc::new(index)
}
