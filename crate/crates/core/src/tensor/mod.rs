//! Dense f32 tensors, a tape-based reverse-mode differentiation engine and
//! the Adam optimizer.
//!
//! Every reduction runs in ascending index order so that two runs over the
//! same inputs produce bitwise-identical results.

mod graph;
pub mod kernels;
mod optim;
mod params;

pub use graph::{Gradients, Graph, Var};
pub use optim::{lr_inverse_sqrt, Adam, AdamConfig};
pub use params::{ParamId, ParamStore};

use crate::error::{shape_err, Error, Result};

/// Floating-point element type of tensors.
///
/// Training runs in `f32`; `f64` exists so numerical gradient checks can
/// evaluate the same code with negligible roundoff.
pub trait Scalar:
    num_traits::Float
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::ops::DivAssign
    + Default
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn of(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn of(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// Row-major array with an explicit shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(shape_err!("dimensions must be positive, got {shape:?}"));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err!("shape {shape:?} needs {n} values, got {}", data.len()));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// One-dimensional tensor holding `data`.
    pub fn vector(data: Vec<T>) -> Self {
        Self {
            shape: vec![data.len().max(1)],
            data: if data.is_empty() { vec![T::zero()] } else { data },
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(shape_err!("cannot reshape {:?} into {shape:?}", self.shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(i) => Err(Error::Numeric(format!(
                "{what}: non-finite value {} at flat index {i}",
                self.data[i]
            ))),
            None => Ok(()),
        }
    }

    /// Splits the shape around `axis` into (outer, axis length, inner) strides.
    pub(crate) fn axis_split(&self, axis: usize) -> Result<(usize, usize, usize)> {
        if axis >= self.shape.len() {
            return Err(shape_err!("axis {axis} out of range for shape {:?}", self.shape));
        }
        let outer = self.shape[..axis].iter().product();
        let inner = self.shape[axis + 1..].iter().product();
        Ok((outer, self.shape[axis], inner))
    }
}

/// Softmax along `axis` using max subtraction.
pub fn softmax<T: Scalar>(logits: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let (outer, n, inner) = logits.axis_split(axis)?;
    logits.ensure_finite("softmax input")?;
    let mut out = vec![T::zero(); logits.len()];
    kernels::softmax_strided(logits.data(), &mut out, outer, n, inner);
    Tensor::new(logits.shape().to_vec(), out)
}

/// Log-softmax along `axis`, computed directly in log space.
pub fn log_softmax<T: Scalar>(logits: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let (outer, n, inner) = logits.axis_split(axis)?;
    logits.ensure_finite("log_softmax input")?;
    let mut out = vec![T::zero(); logits.len()];
    kernels::log_softmax_strided(logits.data(), &mut out, outer, n, inner);
    Tensor::new(logits.shape().to_vec(), out)
}

/// Label-smoothed negative log-likelihood of one target under a
/// log-distribution over the vocabulary.
///
/// The target keeps `1 - eps` of the mass and every other entry gets
/// `eps / (V - 1)`. With `eps == 0` this is exactly `-log_probs[target]`.
pub fn label_smoothed_nll<T: Scalar>(log_probs: &[T], target: usize, eps: T) -> Result<T> {
    let v = log_probs.len();
    if target >= v {
        return Err(Error::Index(format!("target {target} outside vocabulary of size {v}")));
    }
    if !(eps >= T::zero() && eps < T::one()) {
        return Err(Error::Config(format!("label smoothing must be in [0, 1), got {eps}")));
    }
    Ok(kernels::smoothed_nll_row(log_probs, target, eps))
}

/// `KL(p || q)` with `q` given as log-probabilities, treating `0 ln 0` as 0.
pub fn kl_divergence<T: Scalar>(p: &Tensor<T>, log_q: &Tensor<T>) -> Result<T> {
    if p.shape() != log_q.shape() {
        return Err(shape_err!(
            "kl_divergence shapes differ: {:?} vs {:?}",
            p.shape(),
            log_q.shape()
        ));
    }
    Ok(kernels::kl_row(p.data(), log_q.data()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f32, b: f32, tol: f32) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn softmax_examples() {
        let s = softmax(&Tensor::vector(vec![0.0, 0.0]), 0).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);

        let s = softmax(&Tensor::vector(vec![0.0, 3f32.ln()]), 0).unwrap();
        assert!(close(s.data()[0], 0.25, 1e-6));
        assert!(close(s.data()[1], 0.75, 1e-6));

        for c in [-50.0f32, -3.5, 0.0, 7.25, 80.0] {
            let s = softmax(&Tensor::vector(vec![c, c + 3f32.ln()]), 0).unwrap();
            assert!(close(s.data()[0], 0.25, 1e-5), "shift {c}");
            assert!(close(s.data()[1], 0.75, 1e-5), "shift {c}");
        }
    }

    #[test]
    fn softmax_along_inner_axis() {
        let t = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 1.0, 1.0, 1.0]).unwrap();
        let s = softmax(&t, 0).unwrap();
        for j in 0..3 {
            let col = s.data()[j] + s.data()[3 + j];
            assert!(close(col, 1.0, 1e-6));
        }
        assert!(close(s.data()[2], 1.0 / (1.0 + (-2f32).exp()), 1e-6));
    }

    #[test]
    fn softmax_rejects_bad_axis() {
        let err = softmax(&Tensor::vector(vec![1.0]), 1).unwrap_err();
        assert_eq!(err.code(), "E_SHAPE");
    }

    #[test]
    fn smoothed_nll_examples() {
        let lp = [0.5f32.ln(), 0.5f32.ln()];
        assert!(close(
            label_smoothed_nll(&lp, 0, 0.0).unwrap(),
            std::f32::consts::LN_2,
            1e-4
        ));

        let uniform = [0.25f32.ln(); 4];
        for t in 0..4 {
            assert!(close(label_smoothed_nll(&uniform, t, 0.1).unwrap(), 1.3863, 1e-4));
        }

        let lp = [0.9f32.ln(), 0.1f32.ln()];
        assert!(close(label_smoothed_nll(&lp, 0, 0.1).unwrap(), 0.3251, 1e-4));
    }

    #[test]
    fn smoothed_nll_zero_eps_is_plain_nll_bitwise() {
        let lp = [-0.3f32, -1.7, -2.9, -4.1];
        for t in 0..4 {
            assert_eq!(label_smoothed_nll(&lp, t, 0.0).unwrap(), -lp[t]);
        }
    }

    #[test]
    fn smoothed_nll_rejects_bad_target() {
        let err = label_smoothed_nll(&[0.0], 1, 0.0).unwrap_err();
        assert_eq!(err.code(), "E_INDEX");
    }

    #[test]
    fn kl_examples() {
        let p = Tensor::vector(vec![1.0, 0.0]);
        let lq = Tensor::vector(vec![0.5f32.ln(), 0.5f32.ln()]);
        assert!(close(kl_divergence(&p, &lq).unwrap(), std::f32::consts::LN_2, 1e-4));

        let p = Tensor::vector(vec![0.5, 0.5]);
        let lq = Tensor::vector(vec![0.25f32.ln(), 0.75f32.ln()]);
        assert!(close(kl_divergence(&p, &lq).unwrap(), 0.1438, 1e-4));

        let p = Tensor::vector(vec![0.2f32, 0.3, 0.5]);
        let lq = Tensor::vector(p.data().iter().map(|v| v.ln()).collect());
        assert_eq!(kl_divergence(&p, &lq).unwrap(), 0.0);
    }

    #[test]
    fn kl_shape_mismatch() {
        let err = kl_divergence(&Tensor::vector(vec![1.0]), &Tensor::vector(vec![0.0, 0.0])).unwrap_err();
        assert_eq!(err.code(), "E_SHAPE");
    }

    #[test]
    fn tensor_shape_invariant() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::<f32>::new(vec![0], vec![]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }
}
