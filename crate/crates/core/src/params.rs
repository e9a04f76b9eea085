//! Named learnable parameters and their gradient buffers.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{Element, Graph, Tensor, Var};

/// One learnable tensor with its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Parameter<T: Element> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

/// Ordered collection of uniquely named parameters. The registration order
/// is stable and defines the checkpoint payload layout.
#[derive(Clone, Debug, Default)]
pub struct ParamSet<T: Element> {
    entries: Vec<Parameter<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Element> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<usize> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::InvalidArg(format!(
                "duplicate parameter name {name:?}"
            )));
        }
        let idx = self.entries.len();
        self.by_name.insert(name.clone(), idx);
        let grad = Tensor::zeros(value.shape());
        self.entries.push(Parameter { name, value, grad });
        Ok(idx)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, idx: usize) -> &Parameter<T> {
        &self.entries[idx]
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut Parameter<T> {
        &mut self.entries[idx]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.entries.iter_mut()
    }

    /// Total number of scalar parameters.
    pub fn total_scalars(&self) -> usize {
        self.entries.iter().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.entries {
            p.grad.fill(T::zero());
        }
    }

    /// Create differentiable graph leaves for every parameter, in index
    /// order, and register the bindings for gradient routing.
    pub fn bind_all(&self, g: &mut Graph<T>) -> Vec<Var> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, p)| g.param(p.value.clone(), i))
            .collect()
    }

    /// Add the gradients computed by `backward` into each bound
    /// parameter's `grad` buffer.
    pub fn accumulate_from_graph(&mut self, g: &Graph<T>) {
        for &(var, idx) in g.bindings() {
            if let Some(grad) = g.grad(var) {
                self.entries[idx].grad.add_assign(grad);
            }
        }
    }

    /// Element-type conversion preserving names and order.
    pub fn cast<U: Element>(&self) -> ParamSet<U> {
        let mut out = ParamSet::new();
        for p in &self.entries {
            out.add(p.name.clone(), p.value.cast::<U>())
                .expect("names already unique");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut ps = ParamSet::<f64>::new();
        ps.add("w", Tensor::zeros(&[2])).unwrap();
        assert!(ps.add("w", Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn gradients_route_through_bindings() {
        let mut ps = ParamSet::<f64>::new();
        ps.add("w", Tensor::from_vec(&[2], vec![3.0, -1.0]).unwrap())
            .unwrap();
        let mut g = Graph::new();
        let vars = ps.bind_all(&mut g);
        let sq = g.mul(vars[0], vars[0]).unwrap();
        let loss = g.sum(sq);
        g.backward(loss).unwrap();
        ps.accumulate_from_graph(&g);
        assert_eq!(ps.get(0).grad.data(), &[6.0, -2.0]);

        // accumulation is additive until reset
        ps.accumulate_from_graph(&g);
        assert_eq!(ps.get(0).grad.data(), &[12.0, -4.0]);
        ps.zero_grads();
        assert_eq!(ps.get(0).grad.data(), &[0.0, 0.0]);
    }
}
