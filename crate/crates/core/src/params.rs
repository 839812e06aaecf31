//! Named storage for trainable parameters and non-trainable buffers.

use crate::error::{shape_err, Result};
use crate::graph::Graph;
use crate::nn::norm::StatUpdate;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Trainable,
    /// Updated by forward passes only (batch-norm running statistics).
    Buffer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry<T> {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor<T>) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.entries.push(ParamEntry { name, kind, value, grad: None });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(|id| self.entries[id.0].kind == ParamKind::Trainable)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Total element count, optionally restricted to one kind.
    pub fn element_count(&self, kind: Option<ParamKind>) -> usize {
        self.entries.iter().filter(|e| kind.is_none_or(|k| e.kind == k)).map(|e| e.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad = None;
        }
    }

    pub fn grad(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.entries[id.0].grad.as_ref()
    }

    /// Adds the parameter gradients held by `graph` after its backward pass.
    pub fn accumulate_grads(&mut self, graph: &Graph<T>) -> Result<()> {
        self.accumulate_scaled_grads(graph, T::one())
    }

    /// Adds `weight ×` the parameter gradients held by `graph`.
    pub fn accumulate_scaled_grads(&mut self, graph: &Graph<T>, weight: T) -> Result<()> {
        for (id, g) in graph.param_grads() {
            let entry = &mut self.entries[id.0];
            if g.shape() != entry.value.shape() {
                return shape_err(format!("gradient for {} has shape {:?}", entry.name, g.shape()));
            }
            match &mut entry.grad {
                Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, &b)| *a += weight * b),
                slot => *slot = Some(if weight == T::one() { g.clone() } else { g.map(|v| weight * v) }),
            }
        }
        Ok(())
    }

    /// `running ← momentum·running + (1 − momentum)·batch` for each update.
    pub fn apply_stat_updates(&mut self, updates: &[StatUpdate<T>]) {
        for u in updates {
            let m = u.momentum;
            for (id, batch) in [(u.running_mean, &u.batch_mean), (u.running_var, &u.batch_var)] {
                let run = self.entries[id.0].value.data_mut();
                for (r, &b) in run.iter_mut().zip(batch) {
                    *r = m * *r + (T::one() - m) * b;
                }
            }
        }
    }

    /// Copies values (not gradients) from a store with the same layout.
    pub fn copy_values_from(&mut self, other: &ParamStore<T>) {
        debug_assert_eq!(self.entries.len(), other.entries.len());
        for (dst, src) in self.entries.iter_mut().zip(&other.entries) {
            dst.value = src.value.clone();
        }
    }
}
