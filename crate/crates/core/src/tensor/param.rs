use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::graph::{Graph, Var};
use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform in ±sqrt(6 / fan_in).
    FanIn(usize),
    Normal(f64),
    Constant(f64),
}

/// Named parameters in insertion order. Names are unique.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, mut tensor: Tensor) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        tensor.set_requires_grad(true);
        let id = ParamId(self.params.len());
        self.params.push(Parameter {
            name: name.to_owned(),
            tensor,
        });
        self.index.insert(name.to_owned(), id);
        Ok(id)
    }

    pub fn init<R: Rng>(&mut self, name: &str, shape: &[usize], init: Init, rng: &mut R) -> Result<ParamId> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match init {
            Init::FanIn(fan_in) => {
                let bound = (6.0 / fan_in as f64).sqrt();
                (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
            }
            Init::Normal(std) => {
                let dist = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
                (0..n).map(|_| dist.sample(rng)).collect()
            }
            Init::Constant(v) => vec![v; n],
        };
        self.add(name, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.zero_grad());
    }

    /// Ids whose names start with `prefix`.
    pub fn with_prefix(&self, prefix: &str) -> Vec<ParamId> {
        self.ids().filter(|&id| self.get(id).name.starts_with(prefix)).collect()
    }
}

/// Affine layer `x · W + b` with `W: [in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, bias: bool, rng: &mut R) -> Result<Self> {
        let weight = store.init(&format!("{name}.weight"), &[in_dim, out_dim], Init::FanIn(in_dim), rng)?;
        let bias = if bias {
            Some(store.init(&format!("{name}.bias"), &[out_dim], Init::Constant(0.0), rng)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    /// `x: [n, in] -> [n, out]`.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(b);
                g.add_bias(y, b)
            }
            None => Ok(y),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        std::iter::once(self.weight).chain(self.bias).collect()
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, dim: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            gain: store.init(&format!("{name}.gain"), &[dim], Init::Constant(1.0), rng)?,
            bias: store.init(&format!("{name}.bias"), &[dim], Init::Constant(0.0), rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (gain, bias) = (g.param(self.gain), g.param(self.bias));
        g.layer_norm(x, gain, bias)
    }
}
