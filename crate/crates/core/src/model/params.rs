use crate::autodiff::{Graph, Var};
use crate::tensor::Tensor;
use indexmap::IndexMap;
use rand::Rng;

/// Named trainable tensors in a fixed insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Params {
    entries: IndexMap<String, Tensor>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.entries.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    /// Records every tensor on `g` as a gradient-receiving leaf.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        self.bind_with(g, |_| true)
    }

    /// Records tensors as leaves; those for which `trainable` is false become constants.
    pub fn bind_with(&self, g: &mut Graph, trainable: impl Fn(&str) -> bool) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|(k, v)| {
                let var = if trainable(k) {
                    g.param(v.clone())
                } else {
                    g.constant(v.clone())
                };
                (k.clone(), var)
            })
            .collect();
        Bound { vars }
    }

    /// Xavier-uniform weight.
    pub(crate) fn xavier<R: Rng + ?Sized>(&mut self, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        self.insert(name, Tensor::uniform([fan_in, fan_out], bound, rng));
    }

    pub(crate) fn linear<R: Rng + ?Sized>(&mut self, prefix: &str, fan_in: usize, fan_out: usize, rng: &mut R) {
        self.xavier(&format!("{prefix}.w"), fan_in, fan_out, rng);
        self.insert(format!("{prefix}.b"), Tensor::zeros([fan_out]));
    }

    pub(crate) fn layer_norm(&mut self, prefix: &str, dim: usize) {
        self.insert(format!("{prefix}.gain"), Tensor::ones([dim]));
        self.insert(format!("{prefix}.bias"), Tensor::zeros([dim]));
    }
}

/// Graph handles for a [`Params`] set, looked up by name.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: IndexMap<String, Var>,
}

impl Bound {
    /// Panics if `name` was not bound; parameter names are fixed by the model layout.
    pub fn get(&self, name: &str) -> Var {
        match self.vars.get(name) {
            Some(&v) => v,
            None => panic!("parameter {name:?} is not bound"),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }

    /// Gradients of every bound tensor after `g.backward`.
    pub fn grads(&self, g: &Graph) -> Params {
        let mut out = Params::new();
        for (k, &v) in &self.vars {
            out.insert(k.clone(), g.grad(v));
        }
        out
    }
}
