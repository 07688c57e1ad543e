use std::collections::BTreeMap;

use super::{Gradients, NumericError, Tape, Tensor, Var};

/// Named trainable tensors, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Option<Tensor> {
        self.tensors.insert(name.into(), value)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar entries.
    pub fn num_values(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// A store with the same names and shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
                .collect(),
        }
    }

    /// Every value multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.map(|x| x * factor)))
                .collect(),
        }
    }

    /// Records every tensor as a leaf of `tape`.
    pub fn bind(&self, tape: &Tape) -> BoundParams {
        BoundParams {
            vars: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), tape.leaf(v.clone())))
                .collect(),
        }
    }

    /// Sum of squares over all entries, square-rooted.
    pub fn global_norm(&self) -> f64 {
        self.tensors
            .values()
            .flat_map(|t| t.data().iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Elementwise `self += other`, names must match.
    pub fn accumulate(&mut self, other: &ParamStore) -> Result<(), NumericError> {
        for (name, t) in self.tensors.iter_mut() {
            let o = other
                .get(name)
                .ok_or_else(|| NumericError::MissingParam(name.clone()))?;
            if o.shape() != t.shape() {
                return Err(NumericError::ShapeMismatch {
                    op: "accumulate",
                    left: t.shape().to_vec(),
                    right: o.shape().to_vec(),
                });
            }
            let sum = t.data().iter().zip(o.data()).map(|(a, b)| a + b).collect();
            *t = Tensor::from_parts(t.shape().to_vec(), sum);
        }
        Ok(())
    }
}

/// Parameters recorded on a tape, addressable by name.
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Result<Var, NumericError> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| NumericError::MissingParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Collects the gradient of every bound parameter into a store.
    pub fn gradients(&self, grads: &Gradients) -> Result<ParamStore, NumericError> {
        let mut out = ParamStore::new();
        for (name, &v) in &self.vars {
            let g = grads.get(v).ok_or(NumericError::ForeignVar)?;
            out.insert(name.clone(), g.clone());
        }
        Ok(out)
    }
}
