//! Minimal reverse-mode automatic differentiation for the fusion network.

mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use gradcheck::finite_diff_check;
pub use graph::{softmax, Graph, OpKind, Var};
pub use params::{Parameter, ParameterSet};
pub use tensor::Tensor;

/// Class weights and class count for the weighted cross-entropy loss.
#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig<T> {
    class_weights: Vec<T>,
}

impl<T: crate::Scalar> LossConfig<T> {
    pub fn new(class_weights: Vec<T>) -> crate::Result<Self> {
        if class_weights.len() < 2 {
            return Err(crate::Error::InvalidArgument(format!(
                "need at least two classes, got {}",
                class_weights.len()
            )));
        }
        if class_weights.iter().any(|&a| !(a > T::zero()) || !a.is_finite()) {
            return Err(crate::Error::InvalidArgument("class weights must be positive and finite".into()));
        }
        Ok(Self { class_weights })
    }

    pub fn uniform(num_classes: usize) -> crate::Result<Self> {
        Self::new(vec![T::one(); num_classes])
    }

    pub fn num_classes(&self) -> usize {
        self.class_weights.len()
    }

    pub fn weight(&self, class: usize) -> T {
        self.class_weights[class]
    }

    pub fn weights(&self) -> &[T] {
        &self.class_weights
    }
}
