use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Var};

/// Broadcasts `prompts[T×C]` over the batch and places them before the patch
/// tokens `[B×N×C]`. With `T = 0` the patch tokens are returned as is.
pub fn prepend_task_prompts<T: Real>(tape: &mut Tape<T>, patches: Var, prompts: Option<Var>) -> Result<Var> {
    let Some(prompts) = prompts else { return Ok(patches) };
    let (sp, sq) = (tape.shape(patches).to_vec(), tape.shape(prompts).to_vec());
    if sp.len() != 3 || sq.len() != 2 || sq[1] != sp[2] {
        return Err(Error::shape("prepend_task_prompts", &sp, &sq));
    }
    if sq[0] == 0 {
        return Ok(patches);
    }
    let batched = tape.broadcast_batch(prompts, sp[0])?;
    tape.concat(&[batched, patches], 1)
}

/// Carries prompt tokens `[B×T×C]` across a stage boundary with `U[C×2C]`.
pub fn prompt_upsample<T: Real>(tape: &mut Tape<T>, prompts: Var, weight: Var) -> Result<Var> {
    let (sp, sw) = (tape.shape(prompts).to_vec(), tape.shape(weight).to_vec());
    if sw.len() != 2 || sp.last() != Some(&sw[0]) || sw[1] != 2 * sw[0] {
        return Err(Error::shape("prompt_upsample", &sp, &sw));
    }
    tape.linear(prompts, weight)
}

/// Rows of the attention map from the first `tasks` (prompt) tokens to the
/// remaining patch tokens: `A[:, :, ..T, T..]`, not renormalized.
pub fn extract_task_attention_map<T: Real>(tape: &mut Tape<T>, attn: Var, tasks: usize) -> Result<Var> {
    let sa = tape.shape(attn).to_vec();
    if sa.len() != 4 || sa[2] != sa[3] || tasks == 0 || tasks >= sa[2] {
        return Err(Error::shape("extract_task_attention_map", &sa, &[tasks]));
    }
    let rows = tape.slice(attn, 2, 0, tasks)?;
    tape.slice(rows, 3, tasks, sa[3] - tasks)
}

/// Task-adapted features `f_i = f_qkv + S⁻¹(a_i ⊗ S(f_qkv))` for every task.
///
/// `f_qkv` is `[B×N×C]` (patch tokens only), `tam` is `[B×H×T×N]`; head `h`
/// owns channels `h·C/H .. (h+1)·C/H`.
pub fn tpc_adapt<T: Real>(tape: &mut Tape<T>, f_qkv: Var, tam: Var) -> Result<Vec<Var>> {
    let (sf, st) = (tape.shape(f_qkv).to_vec(), tape.shape(tam).to_vec());
    if sf.len() != 3 || st.len() != 4 || st[0] != sf[0] || st[3] != sf[1] {
        return Err(Error::shape("tpc_adapt", &sf, &st));
    }
    let (b, heads, tasks, n) = (st[0], st[1], st[2], st[3]);
    if heads == 0 || sf[2] % heads != 0 {
        return Err(Error::config(format!(
            "tpc: width {} is not divisible by {heads} heads",
            sf[2]
        )));
    }
    let mut out = Vec::with_capacity(tasks);
    for i in 0..tasks {
        let a = tape.slice(tam, 2, i, 1)?;
        let a = tape.reshape(a, &[b, heads, n])?;
        let scaled = tape.head_scale(f_qkv, a)?;
        out.push(tape.add(f_qkv, scaled)?);
    }
    Ok(out)
}

/// `F = σ(g)·f + (1−σ(g))·f̂`, evaluated as `f̂ + σ(g)·(f − f̂)`.
pub fn gated_output<T: Real>(tape: &mut Tape<T>, f: Var, f_hat: Var, gate: Var) -> Result<Var> {
    if tape.shape(f) != tape.shape(f_hat) {
        return Err(Error::shape("gated_output", tape.shape(f), tape.shape(f_hat)));
    }
    let s = tape.sigmoid(gate)?;
    let diff = tape.sub(f, f_hat)?;
    let mixed = tape.scale_by(diff, s)?;
    tape.add(f_hat, mixed)
}
