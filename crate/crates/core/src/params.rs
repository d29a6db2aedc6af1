//! Named parameter storage shared by the backbone, adapters and heads.

use std::fmt;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Real, Tape, Tensor, Var};

/// Role of a parameter tensor, used for trainable-set selection and counts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    PatchEmbed,
    /// qkv/projection/MLP weights and biases of the frozen blocks
    Linear,
    PatchMerge,
    Norm,
    PosBias,
    TsLora,
    TaLora,
    Dtf,
    Prompts,
    Upsampler,
    Gate,
    Head,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 12] = [
        ParamGroup::PatchEmbed,
        ParamGroup::Linear,
        ParamGroup::PatchMerge,
        ParamGroup::Norm,
        ParamGroup::PosBias,
        ParamGroup::TsLora,
        ParamGroup::TaLora,
        ParamGroup::Dtf,
        ParamGroup::Prompts,
        ParamGroup::Upsampler,
        ParamGroup::Gate,
        ParamGroup::Head,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::PatchEmbed => "patch-embed",
            ParamGroup::Linear => "linear",
            ParamGroup::PatchMerge => "patch-merge",
            ParamGroup::Norm => "norms",
            ParamGroup::PosBias => "pos-bias",
            ParamGroup::TsLora => "ts-lora",
            ParamGroup::TaLora => "ta-lora",
            ParamGroup::Dtf => "dtf",
            ParamGroup::Prompts => "prompts",
            ParamGroup::Upsampler => "upsamplers",
            ParamGroup::Gate => "gates",
            ParamGroup::Head => "heads",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|g| g.name() == name)
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param<T: Real> {
    pub name: String,
    pub group: ParamGroup,
    pub tensor: Tensor<T>,
}

/// Ordered collection of named tensors. Insertion order is the
/// serialization order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Real = f32> {
    params: Vec<Param<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, group: ParamGroup, tensor: Tensor<T>) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.params.push(Param { name, group, tensor });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].tensor
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].tensor
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Total scalar count over the given ids.
    pub fn count(&self, ids: &[ParamId]) -> usize {
        ids.iter().map(|&id| self.tensor(id).numel()).sum()
    }

    /// Puts every parameter on the tape; `trainable[id]` decides requires_grad.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: &[bool]) -> Bindings {
        assert_eq!(trainable.len(), self.params.len());
        Bindings(
            self.params
                .iter()
                .zip(trainable)
                .map(|(p, &t)| tape.leaf(p.tensor.clone(), t))
                .collect(),
        )
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    group: p.group,
                    tensor: p.tensor.cast(),
                })
                .collect(),
        }
    }
}

/// Tape variables for every parameter of a store, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bindings(Vec<Var>);

impl Bindings {
    /// One variable per store entry, in store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self(vars)
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }
}

impl std::ops::Index<ParamId> for Bindings {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

/// Uniform draw in `[-bound, bound)` from 24 random bits, stable across
/// platforms and `rand` versions.
pub(crate) fn uniform(rng: &mut ChaCha8Rng, bound: f64) -> f64 {
    let unit = (rng.gen::<u32>() >> 8) as f64 / (1u32 << 24) as f64;
    (2.0 * unit - 1.0) * bound
}

pub(crate) fn uniform_tensor<T: Real>(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::of(uniform(rng, bound)))
}
