use std::collections::HashMap;
use std::ops::Index;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// `uniform(-1/sqrt(fan_in), 1/sqrt(fan_in))`
    FanIn(usize),
    Const(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Named, ordered parameter collection.
///
/// Layers first *declare* their tensors (name, shape, init); values are
/// only allocated by [`ParamStore::materialize`], so layouts can be
/// enumerated for profiling without touching memory.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    specs: Vec<ParamSpec>,
    values: Vec<Arc<Tensor>>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn declare(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::config(format!("duplicate parameter name `{name}`")));
        }
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::config(format!("parameter `{name}` has invalid shape {shape:?}")));
        }
        if !self.values.is_empty() {
            return Err(Error::contract("cannot declare parameters after materialize"));
        }
        let id = ParamId(self.specs.len());
        self.index.insert(name.clone(), id);
        self.specs.push(ParamSpec {
            name,
            shape: shape.to_vec(),
            init,
        });
        Ok(id)
    }

    /// Allocates and initializes every declared tensor, in declaration
    /// order, from a single seeded stream.
    pub fn materialize(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.values = self
            .specs
            .iter()
            .map(|spec| {
                Arc::new(match spec.init {
                    Init::FanIn(fan_in) => {
                        Tensor::uniform(&spec.shape, 1.0 / (fan_in as f64).sqrt(), &mut rng)
                    }
                    Init::Const(c) => Tensor::full(&spec.shape, c),
                })
            })
            .collect();
    }

    pub fn is_materialized(&self) -> bool {
        !self.specs.is_empty() && self.values.len() == self.specs.len()
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.specs.iter().map(ParamSpec::numel).sum()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn spec(&self, id: ParamId) -> &ParamSpec {
        &self.specs[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn shared(&self, id: ParamId) -> Arc<Tensor> {
        Arc::clone(&self.values[id.0])
    }

    pub fn values(&self) -> impl Iterator<Item = &Tensor> {
        self.values.iter().map(|v| &**v)
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let spec = &self.specs[id.0];
        if value.shape() != spec.shape.as_slice() {
            return Err(Error::shape(format!(
                "parameter `{}` expects {:?}, got {:?}",
                spec.name,
                spec.shape,
                value.shape()
            )));
        }
        if self.values.len() != self.specs.len() {
            return Err(Error::contract("set before materialize"));
        }
        self.values[id.0] = Arc::new(value);
        Ok(())
    }

    /// Registers every parameter as a tape leaf.
    pub fn bind<'t>(&self, tape: &'t Tape, requires_grad: bool) -> Bound<'t> {
        assert!(self.is_materialized(), "bind before materialize");
        Bound {
            vars: self
                .values
                .iter()
                .map(|v| tape.leaf_shared(Arc::clone(v), requires_grad))
                .collect(),
        }
    }
}

/// Tape leaves for every parameter of a [`ParamStore`], indexed by [`ParamId`].
pub struct Bound<'t> {
    vars: Vec<Var<'t>>,
}

impl<'t> Bound<'t> {
    pub fn vars(&self) -> &[Var<'t>] {
        &self.vars
    }

    /// Routes parameter `id` through `var` instead of its bound leaf.
    pub fn substitute(&mut self, id: ParamId, var: Var<'t>) {
        self.vars[id.0] = var;
    }
}

impl<'t> Index<ParamId> for Bound<'t> {
    type Output = Var<'t>;

    fn index(&self, id: ParamId) -> &Var<'t> {
        &self.vars[id.0]
    }
}
