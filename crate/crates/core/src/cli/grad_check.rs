use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::RunConfig;
use crate::error::{Error, Result};
use crate::model::Tadformer;
use crate::mtl::{synth_generate, Batch, SynthSpec};
use crate::params::{uniform_tensor, Bindings, ParamGroup, ParamStore};
use crate::peft::configure_trainable_set;
use crate::tensor::gradcheck::{self, STEP};
use crate::tensor::{Tape, Tensor, Var};

/// Largest model, counted over all tensors, the audit accepts.
pub const MAX_PARAMS: usize = 20_000;
/// Pass threshold on the per-group maximum relative error.
pub const TOLERANCE: f64 = 1e-4;
/// The relative-error denominator of an element is at least this fraction
/// of the largest gradient magnitude in its tensor. Entries that are exactly
/// zero analytically otherwise get judged on pure roundoff.
pub const FLOOR_FRACTION: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct GroupAudit {
    pub group: ParamGroup,
    pub tensors: usize,
    pub elements: usize,
    pub max_rel_error: f64,
}

impl GroupAudit {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= TOLERANCE
    }
}

/// One row per trainable group, in [`ParamGroup::ALL`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub groups: Vec<GroupAudit>,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(GroupAudit::passed)
    }

    pub fn failing(&self) -> Vec<ParamGroup> {
        self.groups.iter().filter(|g| !g.passed()).map(|g| g.group).collect()
    }
}

/// Model in 64-bit with every zero-initialized up-projection and gate
/// replaced by small random values, so no gradient is trivially zero.
pub fn audit_model(cfg: &RunConfig) -> Result<(Tadformer, ParamStore<f64>)> {
    let (model, mut store) = Tadformer::new::<f64>(cfg.model_config(), cfg.seed)?;
    let total: usize = store.iter().map(|(_, p)| p.tensor.numel()).sum();
    if total > MAX_PARAMS {
        return Err(Error::config(format!(
            "backbone: grad-check runs on toy models only ({total} parameters, limit {MAX_PARAMS}); shrink embed_dim, depths or grid"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(2);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let p = store.get(id);
        if p.name.ends_with("/up") || p.group == ParamGroup::Gate {
            let t = uniform_tensor(&mut rng, p.tensor.shape(), 0.5);
            *store.tensor_mut(id) = t;
        }
    }
    Ok((model, store))
}

/// Finite-difference audit of every trainable tensor under `cfg.mode`.
///
/// The scalar is a fixed random projection of all head outputs on a batch
/// of two samples. `corrupt` scales the analytic gradient of one group, as a
/// negative control.
pub fn grad_check(cfg: &RunConfig, corrupt: Option<ParamGroup>) -> Result<GradReport> {
    let (model, store) = audit_model(cfg)?;
    let mode = cfg.mode;
    let spec = SynthSpec::new(&cfg.backbone, &cfg.tasks);
    let batch = Batch::collate(&synth_generate(cfg.seed, 0, 2, &spec, 1));
    let images: Tensor<f64> = batch.images.cast();

    let trainable = configure_trainable_set(mode, &store);
    let slot: Vec<Option<usize>> = {
        let mut slot = vec![None; store.len()];
        for (k, (_, id)) in trainable.iter().enumerate() {
            slot[id.index()] = Some(k);
        }
        slot
    };
    let inputs: Vec<Tensor<f64>> = trainable.iter().map(|(_, id)| store.tensor(*id).clone()).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(3);
    let n_pix = batch.len() * cfg.backbone.grid[0] * cfg.backbone.grid[1];
    let probes: Vec<Tensor<f64>> = cfg
        .tasks
        .iter()
        .map(|t| uniform_tensor(&mut rng, &[batch.len(), n_pix / batch.len(), t.outputs()], 1.0))
        .collect();

    let build = |tape: &mut Tape<f64>, xs: &[Var]| -> Result<Var> {
        let vars: Vec<Var> = store
            .iter()
            .map(|(id, p)| match slot[id.index()] {
                Some(k) => xs[k],
                None => tape.constant(p.tensor.clone()),
            })
            .collect();
        let vars = Bindings::from_vars(vars);
        let img = tape.constant(images.clone());
        let out = model.forward(tape, &vars, img, mode)?;
        let mut total: Option<Var> = None;
        for (pred, r) in out.preds.iter().zip(&probes) {
            let r = tape.constant(r.clone());
            let term = tape.mul(*pred, r)?;
            let term = tape.mean(term)?;
            total = Some(match total {
                Some(t) => tape.add(t, term)?,
                None => term,
            });
        }
        total.ok_or_else(|| Error::config("tasks: at least one task is required"))
    };
    let audit = gradcheck::audit(&inputs, gradcheck::Scheme::Richardson, STEP, 0.0, build)?;

    let mut groups: Vec<GroupAudit> = Vec::new();
    for (k, (_, id)) in trainable.iter().enumerate() {
        let group = store.get(*id).group;
        let analytic: Vec<f64> = if corrupt == Some(group) {
            audit.analytic[k].iter().map(|&a| 1.5 * a + 1e-3).collect()
        } else {
            audit.analytic[k].clone()
        };
        let numeric = &audit.numeric[k];
        let scale = analytic.iter().chain(numeric).fold(0.0f64, |m, v| m.max(v.abs()));
        let err = analytic
            .iter()
            .zip(numeric)
            .map(|(&a, &n)| gradcheck::relative_error(a, n, FLOOR_FRACTION * scale))
            .fold(0.0, f64::max);
        let row = match groups.iter_mut().find(|g| g.group == group) {
            Some(row) => row,
            None => {
                groups.push(GroupAudit { group, tensors: 0, elements: 0, max_rel_error: 0.0 });
                groups.last_mut().unwrap()
            }
        };
        row.tensors += 1;
        row.elements += inputs[k].numel();
        row.max_rel_error = row.max_rel_error.max(err);
    }
    groups.sort_by_key(|g| g.group);
    Ok(GradReport { groups })
}
