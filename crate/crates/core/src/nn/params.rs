use indexmap::IndexMap;

use crate::autodiff::{Bindings, Gradients, Tensor};
use crate::data::rng::Stream;

use super::NnError;

/// A trainable tensor with its Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    pub first_moment: Tensor,
    pub second_moment: Tensor,
}

impl Parameter {
    pub fn new(name: &str, tensor: Tensor) -> Self {
        let shape = tensor.shape().to_vec();
        Self {
            name: name.to_string(),
            tensor,
            first_moment: Tensor::zeros(&shape),
            second_moment: Tensor::zeros(&shape),
        }
    }
}

/// Weight initialisation schemes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// `U(−√(6/fan_in), √(6/fan_in))`.
    KaimingUniform { fan_in: usize },
    Normal { std: f64 },
}

impl Init {
    /// Deterministic in `(seed, name)` only.
    pub fn sample(self, shape: &[usize], seed: u64, name: &str) -> Tensor {
        let n: usize = shape.iter().product();
        let mut s = Stream::new(seed, &format!("init/{name}"));
        let data = match self {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::KaimingUniform { fan_in } => {
                let bound = (6.0 / fan_in.max(1) as f64).sqrt();
                (0..n).map(|_| s.uniform_range(-bound, bound)).collect()
            }
            Init::Normal { std } => (0..n).map(|_| std * s.normal()).collect(),
        };
        Tensor::from_vec(shape, data)
    }
}

/// Ordered collection of named parameters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: IndexMap<String, Parameter>,
    seed: u64,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self {
            params: IndexMap::new(),
            seed,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Registers `name` if absent, initialised from `(seed, name)`.
    pub fn register(&mut self, name: &str, shape: &[usize], init: Init) {
        if self.params.contains_key(name) {
            return;
        }
        let t = init.sample(shape, self.seed, name);
        self.params.insert(name.to_string(), Parameter::new(name, t));
    }

    /// Inserts or replaces a parameter value (moments reset).
    pub fn insert(&mut self, name: &str, tensor: Tensor) {
        self.params
            .insert(name.to_string(), Parameter::new(name, tensor));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).map(|p| &p.tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name).map(|p| &mut p.tensor)
    }

    pub fn parameter(&self, name: &str) -> Option<&Parameter> {
        self.params.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.values()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.values_mut()
    }

    pub fn names(&self) -> Vec<String> {
        self.params.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.tensor.len()).sum()
    }

    /// Copies every parameter whose name starts with `prefix` from `other`.
    pub fn copy_prefix_from(&mut self, other: &ParamStore, prefix: &str) -> Result<(), NnError> {
        for p in other.iter().filter(|p| p.name.starts_with(prefix)) {
            match self.params.get_mut(&p.name) {
                Some(dst) if dst.tensor.shape() == p.tensor.shape() => {
                    dst.tensor = p.tensor.clone();
                }
                Some(dst) => {
                    return Err(NnError::ShapeMismatch(format!(
                        "parameter {} has shape {:?}, source has {:?}",
                        p.name,
                        dst.tensor.shape(),
                        p.tensor.shape()
                    )))
                }
                None => return Err(NnError::UnknownParameter(p.name.clone())),
            }
        }
        Ok(())
    }

    /// Keeps only gradients for parameters held here.
    pub fn check_gradients(&self, grads: &Gradients) -> Result<(), NnError> {
        for (name, g) in grads.iter() {
            if let Some(p) = self.params.get(name) {
                if p.tensor.shape() != g.shape() {
                    return Err(NnError::ShapeMismatch(format!(
                        "gradient for {name} has shape {:?}, parameter {:?}",
                        g.shape(),
                        p.tensor.shape()
                    )));
                }
                if !g.is_finite() {
                    return Err(NnError::NonFiniteGradient(name.clone()));
                }
            }
        }
        Ok(())
    }
}

impl Bindings for ParamStore {
    fn lookup(&self, name: &str) -> Option<&Tensor> {
        self.get(name)
    }
}
