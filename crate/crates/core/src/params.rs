//! Named parameter tensors and their initialization.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Var;
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    TruncNormal { std: f64 },
    Zeros,
    Ones,
}

impl Init {
    pub const DEFAULT: Init = Init::TruncNormal { std: 0.02 };
}

pub fn init_params<T: Scalar>(rng: &mut Rng, shape: &[usize], scheme: Init) -> Tensor<T> {
    match scheme {
        Init::Zeros => Tensor::zeros(shape),
        Init::Ones => Tensor::ones(shape),
        Init::TruncNormal { std } => {
            let n = shape.iter().product();
            let data = (0..n).map(|_| T::c(rng.trunc_normal(std))).collect();
            Tensor::new(shape, data).expect("length matches shape")
        }
    }
}

/// Ordered collection of named parameters. A parameter's position is the
/// [`Var`] it is bound to in every [`crate::graph::Graph`] built from the store.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor<T>) -> Result<Var> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter {name}")));
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(t);
        Ok(Var(self.tensors.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, v: Var) -> &Tensor<T> {
        &self.tensors[v.0]
    }

    pub fn get_mut(&mut self, v: Var) -> &mut Tensor<T> {
        &mut self.tensors[v.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn var(&self, name: &str) -> Option<Var> {
        self.index.get(name).map(|&i| Var(i))
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Parameters whose name starts with `prefix`.
    pub fn vars_with_prefix(&self, prefix: &str) -> Vec<Var> {
        self.names
            .iter()
            .enumerate()
            .filter(|(_, n)| n.starts_with(prefix))
            .map(|(i, _)| Var(i))
            .collect()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    /// Replaces every tensor, keeping names; shapes must match.
    pub fn load_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        for (i, name) in self.names.iter().enumerate() {
            let src = other
                .by_name(name)
                .ok_or_else(|| Error::Config(format!("missing parameter {name}")))?;
            if src.shape() != self.tensors[i].shape() {
                return Err(Error::Dimension(format!(
                    "parameter {name}: shape {:?} vs {:?}",
                    src.shape(),
                    self.tensors[i].shape()
                )));
            }
            self.tensors[i] = src.clone();
        }
        Ok(())
    }
}

/// Registers parameters under a dotted name prefix while drawing initial
/// values from one seeded stream.
pub struct ParamBuilder<'a, T> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut Rng,
    prefix: String,
}

impl<'a, T: Scalar> ParamBuilder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut Rng) -> Self {
        ParamBuilder {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Var {
        let t = init_params(self.rng, shape, init);
        let full = format!("{}{name}", self.prefix);
        self.store
            .push(full, t)
            .expect("parameter names are unique by construction")
    }

    /// Runs `f` with `name.` appended to the prefix.
    pub fn scope<R>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> R) -> R {
        let saved = self.prefix.len();
        self.prefix.push_str(name);
        self.prefix.push('.');
        let out = f(self);
        self.prefix.truncate(saved);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zeros_scheme() {
        let t: Tensor<f64> = init_params(&mut Rng::new(1), &[3, 4], Init::Zeros);
        assert!(t.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn same_seed_same_tensor() {
        let a: Tensor<f64> = init_params(&mut Rng::new(9), &[5, 5], Init::DEFAULT);
        let b: Tensor<f64> = init_params(&mut Rng::new(9), &[5, 5], Init::DEFAULT);
        assert_eq!(a, b);
    }

    #[test]
    fn different_seeds_differ() {
        let a: Tensor<f64> = init_params(&mut Rng::new(1), &[16], Init::DEFAULT);
        let b: Tensor<f64> = init_params(&mut Rng::new(2), &[16], Init::DEFAULT);
        assert_ne!(a, b);
    }

    #[test]
    fn trunc_normal_is_bounded() {
        let t: Tensor<f64> = init_params(&mut Rng::new(3), &[1000], Init::DEFAULT);
        assert!(t.max_abs() <= 0.04);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::<f32>::new();
        s.push("a", Tensor::zeros(&[1])).unwrap();
        assert!(s.push("a", Tensor::zeros(&[1])).is_err());
    }
}
