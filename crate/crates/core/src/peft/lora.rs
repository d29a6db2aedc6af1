use rand_chacha::ChaCha8Rng;

use crate::backbone::LinearWeights;
use crate::error::{Error, Result};
use crate::params::{uniform_tensor, Bindings, ParamGroup, ParamId, ParamStore};
use crate::tensor::{Real, Tape, Tensor, Var};

/// Trainable low-rank pair `W_down[in×r]`, `W_up[r×out]`.
#[derive(Clone, Copy, Debug)]
pub struct LoraPair {
    pub down: ParamId,
    pub up: ParamId,
    pub rank: usize,
}

impl LoraPair {
    /// `W_down ~ U(±1/√in)`, `W_up = 0`.
    pub fn init<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        fan_in: usize,
        fan_out: usize,
        rank: usize,
        group: ParamGroup,
    ) -> Self {
        let down = store.push(
            format!("{prefix}/down"),
            group,
            uniform_tensor(rng, &[fan_in, rank], 1.0 / (fan_in as f64).sqrt()),
        );
        let up = store.push(format!("{prefix}/up"), group, Tensor::zeros(&[rank, fan_out]));
        Self { down, up, rank }
    }

    /// `(x · W_down) · W_up`
    pub fn delta<T: Real>(&self, tape: &mut Tape<T>, vars: &Bindings, x: Var) -> Result<Var> {
        let z = tape.linear(x, vars[self.down])?;
        tape.linear(z, vars[self.up])
    }
}

/// Layer that a low-rank pair is attached to.
#[derive(Clone, Copy, Debug)]
pub enum Host {
    /// A frozen affine layer; the pair can be folded into its weight.
    Linear(LinearWeights),
    /// A layer whose low-rank path carries an input-dependent filter, so no
    /// fixed dense weight reproduces it.
    Dynamic(LinearWeights),
}

impl Host {
    pub fn weights(&self) -> &LinearWeights {
        match self {
            Host::Linear(w) | Host::Dynamic(w) => w,
        }
    }
}

/// Task-shared module: `X_out = Φ(X_in) + (X_in W_down) W_up`.
#[derive(Clone, Copy, Debug)]
pub struct TsModule {
    pub host: Host,
    pub pair: LoraPair,
}

/// `frozen + (x W_down) W_up` where `frozen = Φ(x)` was already computed.
pub fn ts_apply<T: Real>(tape: &mut Tape<T>, vars: &Bindings, pair: &LoraPair, x: Var, frozen: Var) -> Result<Var> {
    let delta = pair.delta(tape, vars, x)?;
    tape.add(frozen, delta)
}

pub fn ts_forward<T: Real>(tape: &mut Tape<T>, vars: &Bindings, ts: &TsModule, x: Var) -> Result<Var> {
    let frozen = ts.host.weights().forward(tape, vars, x)?;
    ts_apply(tape, vars, &ts.pair, x, frozen)
}

/// Dense weight `Φ_weight + W_down · W_up` equivalent to [`ts_forward`].
pub fn lora_merge<T: Real>(store: &ParamStore<T>, ts: &TsModule) -> Result<Tensor<T>> {
    let host = match ts.host {
        Host::Linear(w) => w,
        Host::Dynamic(_) => {
            return Err(Error::UnsupportedHost(
                "the low-rank path has an input-dependent filter between its projections".into(),
            ))
        }
    };
    let weight = store.tensor(host.weight);
    let (down, up) = (store.tensor(ts.pair.down), store.tensor(ts.pair.up));
    let (fan_in, fan_out, r) = (host.fan_in, host.fan_out, ts.pair.rank);
    if down.shape() != [fan_in, r] || up.shape() != [r, fan_out] {
        return Err(Error::shape("lora_merge", down.shape(), up.shape()));
    }
    let mut merged = weight.data().to_vec();
    T::gemm(fan_in, r, fan_out, down.data(), false, up.data(), false, &mut merged, true);
    Tensor::new(weight.shape(), merged)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamGroup;

    fn scalar_module(phi: f64, down: f64, up: f64) -> (ParamStore<f64>, TsModule) {
        let mut store = ParamStore::new();
        let weight = store.push("w", ParamGroup::Linear, Tensor::full(&[1, 1], phi));
        let d = store.push("d", ParamGroup::TsLora, Tensor::full(&[1, 1], down));
        let u = store.push("u", ParamGroup::TsLora, Tensor::full(&[1, 1], up));
        let host = LinearWeights { weight, bias: None, fan_in: 1, fan_out: 1 };
        (store, TsModule { host: Host::Linear(host), pair: LoraPair { down: d, up: u, rank: 1 } })
    }

    #[test]
    fn scalar_case() {
        // Φ(x) = 2x, W_down = 1, W_up = 3, x = 1
        let (store, ts) = scalar_module(2.0, 1.0, 3.0);
        let mut tape = Tape::new();
        let vars = store.bind(&mut tape, &[false; 3]);
        let x = tape.constant(Tensor::full(&[1, 1], 1.0));
        let y = ts_forward(&mut tape, &vars, &ts, x).unwrap();
        assert_eq!(tape.value(y).data(), &[5.0]);
        assert_eq!(lora_merge(&store, &ts).unwrap().data(), &[5.0]);
    }

    #[test]
    fn dynamic_host_cannot_merge() {
        let (store, mut ts) = scalar_module(2.0, 1.0, 3.0);
        ts.host = Host::Dynamic(*ts.host.weights());
        assert!(matches!(lora_merge(&store, &ts), Err(Error::UnsupportedHost(_))));
    }
}
