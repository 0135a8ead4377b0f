//! Minimal reverse-mode automatic differentiation over dense f64 tensors.
//!
//! The [`Tape`] records every forward operation of one computation graph and
//! replays it in reverse to accumulate gradients. Graphs are rebuilt per
//! forward pass; distinct tapes share nothing, so batch samples can be
//! differentiated on independent tapes in parallel.
//!
//! Everything is f64: the gradient checks in this crate compare analytic
//! gradients against central finite differences at tolerances that f32
//! cannot hold.

mod gradcheck;
mod tape;

pub use gradcheck::{grad_check, grad_check_param};
pub use tape::{Tape, Var};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

/// Dense tensor of rank 1 or 2, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub requires_grad: bool,
    /// Same-shape gradient accumulator; present iff `requires_grad`.
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Self {
        assert!(
            shape.iter().all(|&e| e > 0),
            "tensor extents must be positive, got {shape:?}"
        );
        assert_eq!(
            values.len(),
            shape.iter().product::<usize>(),
            "value count {} does not match shape {shape:?}",
            values.len()
        );
        Tensor { shape, values, requires_grad: false, grad: None }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor::new(shape, vec![0.0; n])
    }

    pub fn scalar(x: f64) -> Self {
        Tensor::new(vec![1], vec![x])
    }

    /// Marks the tensor as a trainable leaf and allocates its gradient buffer.
    pub fn with_grad(mut self) -> Self {
        self.grad = Some(vec![0.0; self.values.len()]);
        self.requires_grad = true;
        self
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = &mut self.grad {
            g.iter_mut().for_each(|x| *x = 0.0);
        }
    }
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// Ordered collection of named trainable tensors.
///
/// Iteration order is lexicographic in the name, which makes gradient
/// reduction and serialization deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    map: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a parameter; the tensor is forced to `requires_grad`.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        let name = name.into();
        assert!(!self.map.contains_key(&name), "duplicate parameter name {name:?}");
        self.map.insert(name, tensor.with_grad());
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name:?}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        self.map
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name:?}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.map.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.map.values().map(Tensor::numel).sum()
    }

    pub fn zero_grads(&mut self) {
        self.map.values_mut().for_each(Tensor::zero_grad);
    }

    /// Serializes as one JSON document with sorted keys:
    /// `{"name": {"shape": [..], "data": [..]}, ..}`.
    ///
    /// serde_json emits shortest-round-trip floats, so `from_json(to_json(p))`
    /// restores every value bit-exactly.
    pub fn to_json(&self) -> String {
        let doc: BTreeMap<&String, TensorEntry> = self
            .map
            .iter()
            .map(|(k, t)| (k, TensorEntry { shape: t.shape.clone(), data: t.values.clone() }))
            .collect();
        serde_json::to_string(&doc).expect("paramset serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        let doc: BTreeMap<String, TensorEntry> = serde_json::from_str(text)?;
        let mut out = ParamSet::new();
        for (name, entry) in doc {
            out.insert(name, Tensor::new(entry.shape, entry.data));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_shape_mismatch_panics() {
        let err = std::panic::catch_unwind(|| Tensor::new(vec![2, 3], vec![0.0; 5]));
        assert!(err.is_err());
    }

    #[test]
    fn paramset_orders_names_lexicographically() {
        let mut ps = ParamSet::new();
        ps.insert("b", Tensor::zeros(vec![2]));
        ps.insert("a", Tensor::zeros(vec![3]));
        ps.insert("a.b", Tensor::zeros(vec![1]));
        let names: Vec<_> = ps.names().cloned().collect();
        assert_eq!(names, ["a", "a.b", "b"]);
    }

    #[test]
    fn paramset_json_round_trip_is_bit_exact() {
        let mut ps = ParamSet::new();
        ps.insert("w", Tensor::new(vec![2, 2], vec![0.1, -1.5e-17, 3.0f64.sqrt(), 2.0 / 3.0]));
        ps.insert("b", Tensor::new(vec![2], vec![f64::MIN_POSITIVE, 1.0 + f64::EPSILON]));
        let restored = ParamSet::from_json(&ps.to_json()).unwrap();
        for ((an, at), (bn, bt)) in ps.iter().zip(restored.iter()) {
            assert_eq!(an, bn);
            assert_eq!(at.shape, bt.shape);
            assert!(at.values.iter().zip(&bt.values).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }
}
