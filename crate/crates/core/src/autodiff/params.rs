use std::collections::BTreeMap;
use std::hash::{Hash, Hasher};

use super::graph::Graph;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// A trainable tensor plus its optimizer state.
///
/// The momentum buffer exists exactly while the parameter is trainable.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<T> {
    pub value: Tensor<T>,
    frozen: bool,
    momentum: Option<Vec<T>>,
    grad: Option<Vec<T>>,
}

impl<T: Scalar> Parameter<T> {
    pub fn new(value: Tensor<T>) -> Self {
        let momentum = Some(vec![T::zero(); value.len()]);
        Self {
            value,
            frozen: false,
            momentum,
            grad: None,
        }
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn momentum(&self) -> Option<&[T]> {
        self.momentum.as_deref()
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
        self.momentum = if frozen {
            None
        } else {
            Some(self.momentum.take().unwrap_or_else(|| vec![T::zero(); self.value.len()]))
        };
    }
}

/// Named parameters in canonical (lexicographic) order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterSet<T> {
    params: BTreeMap<String, Parameter<T>>,
}

impl<T: Scalar> ParameterSet<T> {
    pub fn new() -> Self {
        Self {
            params: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.params.insert(name.into(), Parameter::new(value));
    }

    pub fn get(&self, name: &str) -> Option<&Parameter<T>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Parameter<T>> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Parameter<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    /// Freezes every parameter whose name starts with `prefix`.
    pub fn freeze_prefix(&mut self, prefix: &str, frozen: bool) {
        for (name, p) in &mut self.params {
            if name.starts_with(prefix) {
                p.set_frozen(frozen);
            }
        }
    }

    pub fn unfreeze_all(&mut self) {
        self.params.values_mut().for_each(|p| p.set_frozen(false));
    }

    pub fn reset_momentum(&mut self) {
        for p in self.params.values_mut() {
            if let Some(m) = &mut p.momentum {
                m.iter_mut().for_each(|x| *x = T::zero());
            }
        }
    }

    pub fn zero_grads(&mut self) {
        self.params.values_mut().for_each(|p| p.grad = None);
    }

    /// Copies gradients of all bound, trainable parameters out of `graph`,
    /// adding to anything already accumulated.
    pub fn accumulate_grads(&mut self, graph: &Graph<T>) {
        for (name, g) in graph.param_grads() {
            let Some(p) = self.params.get_mut(name) else {
                continue;
            };
            if p.frozen {
                continue;
            }
            match &mut p.grad {
                Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
                slot @ None => *slot = Some(g.to_vec()),
            }
        }
    }

    /// Heavy-ball SGD: `v <- momentum * v + grad; p <- p - lr * v` for every
    /// trainable parameter. Frozen parameters are not touched.
    pub fn sgd_momentum_step(&mut self, lr: T, momentum: T) -> Result<()> {
        if let Some((name, _)) = self.params.iter().find(|(_, p)| !p.frozen && p.grad.is_none()) {
            return Err(Error::InvalidArgument(format!(
                "trainable parameter `{name}` has no gradient"
            )));
        }
        for p in self.params.values_mut().filter(|p| !p.frozen) {
            let grad = p.grad.as_ref().expect("checked above");
            let v = p.momentum.as_mut().expect("trainable parameters carry momentum");
            for ((x, vi), &gi) in p.value.data_mut().iter_mut().zip(v.iter_mut()).zip(grad) {
                *vi = momentum * *vi + gi;
                *x -= lr * *vi;
            }
        }
        Ok(())
    }

    /// Order-sensitive digest of parameter values selected by `filter`,
    /// used to assert that frozen weights stay bit-identical.
    pub fn digest(&self, filter: impl Fn(&str) -> bool) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for (name, p) in self.params.iter().filter(|(n, _)| filter(n)) {
            name.hash(&mut h);
            let mut bytes = Vec::with_capacity(p.value.len() * 8);
            p.value.data().iter().for_each(|x| x.write_le(&mut bytes));
            bytes.hash(&mut h);
        }
        h.finish()
    }

    /// Copies values (not optimizer state) from another set.
    pub fn load_values(&mut self, other: &ParameterSet<T>, filter: impl Fn(&str) -> bool) -> Result<usize> {
        let mut n = 0;
        for (name, src) in other.iter().filter(|(n, _)| filter(n)) {
            let dst = self
                .params
                .get_mut(name)
                .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter `{name}`")))?;
            if dst.value.shape() != src.value.shape() {
                return Err(Error::shape(
                    "load_values",
                    format!("`{name}`: {:?} vs {:?}", dst.value.shape(), src.value.shape()),
                ));
            }
            dst.value = src.value.clone();
            n += 1;
        }
        Ok(n)
    }

    pub fn values_snapshot(&self) -> BTreeMap<String, Tensor<T>> {
        self.params.iter().map(|(k, p)| (k.clone(), p.value.clone())).collect()
    }

    pub fn restore_snapshot(&mut self, snap: &BTreeMap<String, Tensor<T>>) {
        for (k, v) in snap {
            if let Some(p) = self.params.get_mut(k) {
                p.value = v.clone();
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.params.values().all(|p| p.value.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_set(x: f64) -> ParameterSet<f64> {
        let mut ps = ParameterSet::new();
        ps.insert("w", Tensor::scalar(x));
        ps
    }

    fn set_grad(ps: &mut ParameterSet<f64>, g: f64) {
        ps.get_mut("w").unwrap().grad = Some(vec![g]);
    }

    #[test]
    fn plain_sgd_step() {
        let mut ps = scalar_set(5.0);
        set_grad(&mut ps, 1.0);
        ps.sgd_momentum_step(0.1, 0.0).unwrap();
        assert!((ps.get("w").unwrap().value.data()[0] - 4.9).abs() < 1e-15);
    }

    #[test]
    fn momentum_recursion() {
        let mut ps = scalar_set(0.0);
        let mut updates = Vec::new();
        for _ in 0..2 {
            let before = ps.get("w").unwrap().value.data()[0];
            set_grad(&mut ps, 1.0);
            ps.sgd_momentum_step(1.0, 0.9).unwrap();
            updates.push(before - ps.get("w").unwrap().value.data()[0]);
        }
        assert!((updates[0] - 1.0).abs() < 1e-15);
        assert!((updates[1] - 1.9).abs() < 1e-15);
    }

    #[test]
    fn frozen_parameter_is_untouched() {
        let mut ps = scalar_set(3.0);
        ps.get_mut("w").unwrap().set_frozen(true);
        ps.get_mut("w").unwrap().grad = Some(vec![7.0]);
        let before = ps.digest(|_| true);
        ps.sgd_momentum_step(0.5, 0.9).unwrap();
        assert_eq!(before, ps.digest(|_| true));
        assert!(ps.get("w").unwrap().momentum().is_none());
    }

    #[test]
    fn missing_gradient_is_rejected() {
        let mut ps = scalar_set(1.0);
        assert!(ps.sgd_momentum_step(0.1, 0.9).is_err());
    }

    #[test]
    fn unfreeze_recreates_zero_momentum() {
        let mut ps = scalar_set(1.0);
        ps.freeze_prefix("w", true);
        ps.unfreeze_all();
        assert_eq!(ps.get("w").unwrap().momentum(), Some(&[0.0][..]));
    }
}
