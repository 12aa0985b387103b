use super::{Scalar, Tensor};
use crate::error::{shape_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Ordered collection of named parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T> Default for ParamStore<T> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.names.contains(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(ParamId(self.tensors.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    /// Total scalar count across all tensors.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// True when both stores hold the same names with the same shapes.
    pub fn same_layout(&self, other: &ParamStore<T>) -> bool {
        self.names == other.names
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.shape() == b.shape())
    }

    /// Element-wise arithmetic mean of several stores with identical layout.
    pub fn average(stores: &[ParamStore<T>]) -> Result<ParamStore<T>> {
        let first = stores
            .first()
            .ok_or_else(|| Error::Input("nothing to average".into()))?;
        for s in &stores[1..] {
            if !first.same_layout(s) {
                return Err(shape_err!("parameter layouts differ between checkpoints"));
            }
        }
        if stores.len() == 1 {
            return Ok(first.clone());
        }
        // f64 sums of f32 values are exact for any realistic k, so the mean of
        // identical inputs reproduces them bitwise.
        let k = stores.len() as f64;
        let mut out = first.clone();
        for (i, t) in out.tensors.iter_mut().enumerate() {
            let mut acc: Vec<f64> = t.data().iter().map(|&v| v.as_f64()).collect();
            for s in &stores[1..] {
                for (a, &b) in acc.iter_mut().zip(s.tensors[i].data()) {
                    *a += b.as_f64();
                }
            }
            for (dst, a) in t.data_mut().iter_mut().zip(acc) {
                *dst = T::of(a / k);
            }
        }
        Ok(out)
    }
}
