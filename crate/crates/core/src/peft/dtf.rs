use rand_chacha::ChaCha8Rng;

use super::lora::LoraPair;
use crate::backbone::LinearWeights;
use crate::error::{Error, Result};
use crate::params::{uniform_tensor, Bindings, ParamGroup, ParamId, ParamStore};
use crate::tensor::{Real, Tape, Tensor, Var};

/// Produces per-sample depthwise filters from the down-projected feature.
#[derive(Clone, Copy, Debug)]
pub struct DtfGenerator {
    /// `[r × r·k²]`, no bias.
    pub weight: ParamId,
    /// FilterNorm scale per channel, `[r]`, initialised to 1.
    pub scale: ParamId,
    pub rank: usize,
    pub kernel: usize,
    pub eps: f64,
}

impl DtfGenerator {
    pub fn init<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        rank: usize,
        kernel: usize,
        eps: f64,
    ) -> Self {
        let kk = kernel * kernel;
        let weight = store.push(
            format!("{prefix}/weight"),
            ParamGroup::Dtf,
            uniform_tensor(rng, &[rank, rank * kk], 1.0 / (rank as f64).sqrt()),
        );
        let scale = store.push(format!("{prefix}/scale"), ParamGroup::Dtf, Tensor::ones(&[rank]));
        Self { weight, scale, rank, kernel, eps }
    }

    /// Trainable scalars: `r²k²` generator weights plus `r` scales.
    pub fn param_count(&self) -> usize {
        self.rank * self.rank * self.kernel * self.kernel + self.rank
    }

    /// `z[B×N×r]` on a row-major `grid` to filters `θ[B×r×k×k]`:
    /// GAP, linear `r → r·k²`, then FilterNorm unless `bypass_norm`.
    pub fn generate<T: Real>(
        &self,
        tape: &mut Tape<T>,
        vars: &Bindings,
        z: Var,
        grid: (usize, usize),
        bypass_norm: bool,
    ) -> Result<Var> {
        let sz = tape.shape(z).to_vec();
        if sz.len() != 3 || sz[1] != grid.0 * grid.1 || sz[2] != self.rank {
            return Err(Error::shape("dtf_generate", &sz, &[grid.0 * grid.1, self.rank]));
        }
        let (b, r, k) = (sz[0], self.rank, self.kernel);
        let maps = tokens_to_maps(tape, z, grid)?;
        let pooled = tape.global_avg_pool(maps)?;
        let raw = tape.linear(pooled, vars[self.weight])?;
        let raw = tape.reshape(raw, &[b, r, k * k])?;
        let theta = if bypass_norm { raw } else { tape.filter_norm(raw, vars[self.scale], self.eps)? };
        tape.reshape(theta, &[b, r, k, k])
    }
}

/// `[B×N×C]` tokens on a row-major grid to `[B×C×h×w]` maps.
pub fn tokens_to_maps<T: Real>(tape: &mut Tape<T>, x: Var, grid: (usize, usize)) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let t = tape.permute(x, &[0, 2, 1])?;
    tape.reshape(t, &[s[0], s[2], grid.0, grid.1])
}

/// Inverse of [`tokens_to_maps`].
pub fn maps_to_tokens<T: Real>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let t = tape.reshape(x, &[s[0], s[1], s[2] * s[3]])?;
    tape.permute(t, &[0, 2, 1])
}

/// Task-adapted module: `F̃ = Φ(f) + (θ ⊙ (f W_down)) W_up` where `⊙` is the
/// depthwise convolution with filters generated from `f W_down` itself.
#[derive(Clone, Copy, Debug)]
pub struct TaModule {
    pub host: LinearWeights,
    pub pair: LoraPair,
    pub dtf: DtfGenerator,
}

/// How the filters of a TA-module are obtained.
#[derive(Clone, Copy, Debug, Default)]
pub enum Filters {
    /// Generated and FilterNorm-ed.
    #[default]
    Generated,
    /// Generated without FilterNorm.
    Unnormalized,
    /// No convolution at all: the module is a plain low-rank pair.
    Skip,
    /// Caller-supplied `θ[B×r×k×k]`.
    Fixed(Var),
}

/// Low-rank path of a TA-module added to an already computed `frozen = Φ(f)`.
/// Returns the output and the filters used, if any.
pub fn ta_apply<T: Real>(
    tape: &mut Tape<T>,
    vars: &Bindings,
    ta: &TaModule,
    f: Var,
    frozen: Var,
    grid: (usize, usize),
    filters: Filters,
) -> Result<(Var, Option<Var>)> {
    let z = tape.linear(f, vars[ta.pair.down])?;
    let (z, theta) = match filters {
        Filters::Skip => (z, None),
        other => {
            let theta = match other {
                Filters::Fixed(t) => t,
                Filters::Unnormalized => ta.dtf.generate(tape, vars, z, grid, true)?,
                _ => ta.dtf.generate(tape, vars, z, grid, false)?,
            };
            let maps = tokens_to_maps(tape, z, grid)?;
            let conv = tape.depthwise_conv2d(maps, theta)?;
            (maps_to_tokens(tape, conv)?, Some(theta))
        }
    };
    let delta = tape.linear(z, vars[ta.pair.up])?;
    Ok((tape.add(frozen, delta)?, theta))
}

pub fn ta_forward<T: Real>(
    tape: &mut Tape<T>,
    vars: &Bindings,
    ta: &TaModule,
    f: Var,
    grid: (usize, usize),
    filters: Filters,
) -> Result<(Var, Option<Var>)> {
    let frozen = ta.host.forward(tape, vars, f)?;
    ta_apply(tape, vars, ta, f, frozen, grid, filters)
}
