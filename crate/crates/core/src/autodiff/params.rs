use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{numel, Graph, ParamKey, TensorId};
use super::real::Real;
use crate::error::{shape_err, Result};

/// How a parameter group changes between steps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateRule {
    Backprop,
    Ema,
    Frozen,
}

impl UpdateRule {
    pub fn tag(self) -> u8 {
        match self {
            UpdateRule::Backprop => 0,
            UpdateRule::Ema => 1,
            UpdateRule::Frozen => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(UpdateRule::Backprop),
            1 => Some(UpdateRule::Ema),
            2 => Some(UpdateRule::Frozen),
            _ => None,
        }
    }
}

/// A named, shaped buffer with a gradient slot of the same length.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamTensor<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    pub grad: Vec<T>,
}

impl<T: Real> ParamTensor<T> {
    pub fn new(name: impl Into<String>, shape: &[usize], value: Vec<T>) -> Self {
        assert_eq!(numel(shape), value.len(), "parameter shape/value mismatch");
        let grad = vec![T::zero(); value.len()];
        ParamTensor {
            name: name.into(),
            shape: shape.to_vec(),
            value,
            grad,
        }
    }

    pub fn filled(name: impl Into<String>, shape: &[usize], fill: T) -> Self {
        Self::new(name, shape, vec![fill; numel(shape)])
    }

    /// Uniform in `±1/sqrt(fan_in)`.
    pub fn fan_in_uniform(name: impl Into<String>, shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let value = (0..numel(shape))
            .map(|_| T::of(rng.gen_range(-bound..=bound)))
            .collect();
        Self::new(name, shape, value)
    }
}

/// Parameters that are updated together under one rule, plus non-learned
/// buffers (batch-norm running statistics) that travel with them.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGroup<T> {
    pub name: String,
    pub update_rule: UpdateRule,
    pub tensors: Vec<ParamTensor<T>>,
    pub buffers: Vec<ParamTensor<T>>,
}

impl<T: Real> ParamGroup<T> {
    pub fn new(name: impl Into<String>, update_rule: UpdateRule) -> Self {
        ParamGroup {
            name: name.into(),
            update_rule,
            tensors: Vec::new(),
            buffers: Vec::new(),
        }
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.tensors.iter().position(|t| t.name == name)
    }

    pub fn tensor(&self, name: &str) -> Option<&ParamTensor<T>> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut ParamTensor<T>> {
        self.tensors.iter_mut().find(|t| t.name == name)
    }

    pub fn buffer(&self, name: &str) -> Option<&ParamTensor<T>> {
        self.buffers.iter().find(|t| t.name == name)
    }

    pub fn buffer_mut(&mut self, name: &str) -> Option<&mut ParamTensor<T>> {
        self.buffers.iter_mut().find(|t| t.name == name)
    }

    pub fn zero_grad(&mut self) {
        for t in &mut self.tensors {
            t.grad.iter_mut().for_each(|g| *g = T::zero());
        }
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(|t| t.value.len()).sum()
    }

    /// Flat copy of every parameter value, in tensor order.
    pub fn flatten(&self) -> Vec<T> {
        self.tensors.iter().flat_map(|t| t.value.iter().copied()).collect()
    }

    /// Flat copy of every gradient, in tensor order.
    pub fn flatten_grad(&self) -> Vec<T> {
        self.tensors.iter().flat_map(|t| t.grad.iter().copied()).collect()
    }

    /// Overwrite every parameter from a flat buffer laid out like [`ParamGroup::flatten`].
    pub fn assign_flat(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() != self.num_values() {
            return shape_err(format!(
                "group {} holds {} values, got {}",
                self.name,
                self.num_values(),
                flat.len()
            ));
        }
        let mut offset = 0;
        for t in &mut self.tensors {
            let n = t.value.len();
            t.value.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// True when both groups hold the same tensor names and shapes in the same order.
    pub fn same_layout(&self, other: &ParamGroup<T>) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.name == b.name && a.shape == b.shape)
    }
}

/// Graph leaves for one group, registered once per graph so every use site
/// reads the same storage.
#[derive(Clone, Debug)]
pub struct BoundGroup {
    pub group: usize,
    names: Vec<String>,
    ids: Vec<TensorId>,
}

impl BoundGroup {
    pub fn bind<T: Real>(g: &mut Graph<T>, group_index: usize, group: &ParamGroup<T>) -> Result<Self> {
        let mut ids = Vec::with_capacity(group.tensors.len());
        for (ti, t) in group.tensors.iter().enumerate() {
            let key = ParamKey {
                group: group_index,
                tensor: ti,
            };
            ids.push(g.param(key, &t.shape, t.value.clone())?);
        }
        Ok(BoundGroup {
            group: group_index,
            names: group.tensors.iter().map(|t| t.name.clone()).collect(),
            ids,
        })
    }

    pub fn get(&self, name: &str) -> TensorId {
        let i = self
            .names
            .iter()
            .position(|n| n == name)
            .unwrap_or_else(|| panic!("parameter {name} is not bound"));
        self.ids[i]
    }

    pub fn ids(&self) -> &[TensorId] {
        &self.ids
    }
}

/// Add every parameter gradient found in `g` into the matching group tensors.
pub fn accumulate_grads<T: Real>(g: &Graph<T>, groups: &mut [&mut ParamGroup<T>]) {
    for (key, grad) in g.param_grads() {
        if let Some(group) = groups.get_mut(key.group) {
            let t = &mut group.tensors[key.tensor];
            t.grad.iter_mut().zip(grad).for_each(|(d, &v)| *d = *d + v);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flatten_and_assign_round_trip() {
        let mut group = ParamGroup::<f64>::new("g", UpdateRule::Backprop);
        group.tensors.push(ParamTensor::new("a", &[2], vec![1.0, 2.0]));
        group.tensors.push(ParamTensor::new("b", &[1, 2], vec![3.0, 4.0]));
        let flat = group.flatten();
        assert_eq!(flat, vec![1.0, 2.0, 3.0, 4.0]);
        group.assign_flat(&[4.0, 3.0, 2.0, 1.0]).unwrap();
        assert_eq!(group.tensor("b").unwrap().value, vec![2.0, 1.0]);
        assert!(group.assign_flat(&[1.0]).is_err());
    }

    #[test]
    fn bound_group_gradients_land_in_group() {
        let mut group = ParamGroup::<f64>::new("g", UpdateRule::Backprop);
        group.tensors.push(ParamTensor::new("w", &[2], vec![3.0, -1.0]));
        let mut g = Graph::new();
        let bound = BoundGroup::bind(&mut g, 0, &group).unwrap();
        let w = bound.get("w");
        let sq = g.mul(w, w).unwrap();
        let loss = g.sum(sq);
        g.backward(loss).unwrap();
        accumulate_grads(&g, &mut [&mut group]);
        assert_eq!(group.tensors[0].grad, vec![6.0, -2.0]);
    }
}
