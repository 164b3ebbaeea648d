use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::Scalar;
use crate::error::{Error, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Debug)]
struct Inner<T> {
    id: u64,
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
}

/// Immutable dense n-dimensional array, row-major, with channel-major image
/// layout `(batch, channel, row, column)`. Cloning a tensor clones a handle,
/// not the storage.
#[derive(Debug, Clone)]
pub struct Tensor<T> {
    inner: Arc<Inner<T>>,
}

impl<T: Scalar> Tensor<T> {
    fn build(shape: Vec<usize>, data: Vec<T>, requires_grad: bool) -> Result<Self> {
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::ShapeMismatch {
                op: "tensor",
                detail: format!("zero extent in shape {shape:?}"),
            });
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeMismatch {
                op: "tensor",
                detail: format!(
                    "shape {shape:?} implies {numel} elements, data has {}",
                    data.len()
                ),
            });
        }
        Ok(Tensor {
            inner: Arc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data,
                requires_grad,
            }),
        })
    }

    /// New constant tensor (not differentiated through).
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        Self::build(shape.to_vec(), data, false)
    }

    /// New leaf tensor that accumulates a gradient during backward.
    pub fn with_grad(shape: &[usize], data: Vec<T>) -> Result<Self> {
        Self::build(shape.to_vec(), data, true)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self::build(shape.to_vec(), vec![T::zero(); numel], false).expect("consistent shape")
    }

    pub fn scalar(v: T) -> Self {
        Self::build(vec![1], vec![v], false).expect("consistent shape")
    }

    pub(crate) fn from_op(shape: Vec<usize>, data: Vec<T>, requires_grad: bool) -> Self {
        Self::build(shape, data, requires_grad).expect("op produced consistent shape")
    }

    /// Unique identity of this tensor's storage; stable across handle clones.
    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn data(&self) -> &[T] {
        &self.inner.data
    }

    pub fn numel(&self) -> usize {
        self.inner.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> T {
        assert!(self.is_scalar(), "item() on tensor of shape {:?}", self.shape());
        self.inner.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.inner.data.iter().all(|v| v.is_finite())
    }

    /// Same storage, viewed under a different shape with equal element count.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() || shape.iter().any(|&e| e == 0) {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                detail: format!("cannot view {:?} as {shape:?}", self.shape()),
            });
        }
        Self::build(shape.to_vec(), self.inner.data.clone(), self.inner.requires_grad)
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.inner.data.iter().map(|v| v.as_f64()).collect()
    }
}

/// Named trainable tensor. Names are unique within a model and parameters
/// must stay finite at all times; a NaN/Inf update is a hard error.
#[derive(Debug, Clone)]
pub struct Parameter<T> {
    name: String,
    value: Tensor<T>,
}

impl<T: Scalar> Parameter<T> {
    pub fn new(name: impl Into<String>, shape: &[usize], data: Vec<T>) -> Result<Self> {
        let name = name.into();
        let value = Tensor::with_grad(shape, data)?;
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("parameter {name}")));
        }
        Ok(Parameter { name, value })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    /// Replace the value (optimizer step). The new tensor must match the old
    /// shape and be finite everywhere.
    pub fn assign(&mut self, data: Vec<T>) -> Result<()> {
        if data.len() != self.value.numel() {
            return Err(Error::ShapeMismatch {
                op: "parameter assign",
                detail: format!(
                    "{}: expected {} elements, got {}",
                    self.name,
                    self.value.numel(),
                    data.len()
                ),
            });
        }
        let next = Tensor::with_grad(self.value.shape(), data)?;
        if !next.is_finite() {
            return Err(Error::NonFinite(format!("parameter {}", self.name)));
        }
        self.value = next;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_data_consistency_enforced() {
        assert!(Tensor::<f32>::new(&[2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::<f32>::new(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::new(&[2, 0], vec![]).is_err());
    }

    #[test]
    fn ids_are_unique_and_stable_across_clones() {
        let a = Tensor::<f32>::zeros(&[2]);
        let b = Tensor::<f32>::zeros(&[2]);
        assert_ne!(a.id(), b.id());
        assert_eq!(a.id(), a.clone().id());
    }

    #[test]
    fn parameter_rejects_non_finite() {
        assert!(Parameter::new("w", &[2], vec![1.0f32, f32::NAN]).is_err());
        let mut p = Parameter::new("w", &[2], vec![1.0f32, 2.0]).unwrap();
        assert!(p.assign(vec![f32::INFINITY, 0.0]).is_err());
        assert!(p.assign(vec![3.0, 4.0]).is_ok());
        assert_eq!(p.value().data(), &[3.0, 4.0]);
    }
}
