use std::collections::BTreeMap;

use super::{all_finite, Real};
use crate::error::{Error, Result};

/// Identifies a parameter within its owning model. Gradient sets are keyed
/// by it, so keys must be unique across everything one tape can touch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamKey(pub usize);

/// A learnable array plus its accumulated adjoint.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamArray<T> {
    pub name: String,
    pub key: ParamKey,
    pub values: Vec<T>,
    pub grads: Vec<T>,
    pub shape: Vec<usize>,
}

impl<T: Real> ParamArray<T> {
    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            name: name.into(),
            key: ParamKey(usize::MAX),
            values: vec![T::zero(); n],
            grads: vec![T::zero(); n],
            shape: shape.to_vec(),
        }
    }

    pub fn from_values(name: impl Into<String>, shape: &[usize], values: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if values.len() != n {
            return Err(Error::Shape(format!("{} values for shape {:?}", values.len(), shape)));
        }
        let mut p = Self::zeros(name, shape);
        p.values = values;
        p.check_finite()?;
        Ok(p)
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    /// Rows and columns of the 2-D view (1-D arrays are a single row).
    pub fn dims(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [] => (1, 1),
            [n] => (1, *n),
            [rows, rest @ ..] => (*rows, rest.iter().product()),
        }
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = T::zero());
    }

    pub fn check_finite(&self) -> Result<()> {
        if !all_finite(&self.values) {
            return Err(Error::Numeric(format!("non-finite value in {}", self.name)));
        }
        if !all_finite(&self.grads) {
            return Err(Error::Numeric(format!("non-finite gradient in {}", self.name)));
        }
        Ok(())
    }
}

/// Parameter adjoints produced by one backward pass, keyed by [`ParamKey`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients<T> {
    grads: BTreeMap<ParamKey, Vec<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn new() -> Self {
        Self { grads: BTreeMap::new() }
    }

    pub fn get(&self, key: ParamKey) -> Option<&[T]> {
        self.grads.get(&key).map(Vec::as_slice)
    }

    pub fn keys(&self) -> impl Iterator<Item = ParamKey> + '_ {
        self.grads.keys().copied()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub(crate) fn accumulate(&mut self, key: ParamKey, grad: &[T]) {
        match self.grads.get_mut(&key) {
            Some(acc) => acc.iter_mut().zip(grad).for_each(|(a, g)| *a += *g),
            None => {
                self.grads.insert(key, grad.to_vec());
            }
        }
    }

    /// Adds another set into this one.
    pub fn merge(&mut self, other: &Gradients<T>) {
        for (key, g) in &other.grads {
            self.accumulate(*key, g);
        }
    }

    /// Merges gradient sets in slice order; the result does not depend on
    /// how the sets were produced (thread count, scheduling).
    pub fn merge_ordered(sets: impl IntoIterator<Item = Gradients<T>>) -> Gradients<T> {
        let mut out = Gradients::new();
        for set in sets {
            if out.is_empty() {
                out = set;
            } else {
                out.merge(&set);
            }
        }
        out
    }

    pub fn scale(&mut self, factor: T) {
        for g in self.grads.values_mut() {
            g.iter_mut().for_each(|v| *v *= factor);
        }
    }

    /// Adds the stored adjoints into each matching parameter's `grads`.
    pub fn apply_to<'a>(&self, params: impl IntoIterator<Item = &'a mut ParamArray<T>>) {
        for p in params {
            if let Some(g) = self.grads.get(&p.key) {
                p.grads.iter_mut().zip(g).for_each(|(a, b)| *a += *b);
            }
        }
    }
}
