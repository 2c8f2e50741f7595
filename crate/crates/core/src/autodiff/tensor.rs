use std::fmt;
use std::sync::{Mutex, MutexGuard};

use super::TensorError;

/// Dense row-major array of `f64` with an optional gradient buffer.
///
/// The data is only mutated through `&mut self` (optimizer updates); the
/// gradient buffer sits behind a lock so that a recorded computation can
/// accumulate into it while holding only shared references to parameters.
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<f64>>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::DataLength { shape, len: data.len() });
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: Mutex::new(None),
        })
    }

    /// A trainable tensor: gradients flow into it during `backward`.
    pub fn param(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let mut t = Self::new(shape, data)?;
        t.requires_grad = true;
        Ok(t)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![0.0; n]).expect("shape product matches")
    }

    pub fn scalar(value: f64) -> Self {
        Self::new(Vec::new(), vec![value]).expect("scalar")
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// Copy of the accumulated gradient, or `None` if nothing was accumulated
    /// since the last `zero_grad`.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.lock_grad().clone()
    }

    /// Gradient with missing entries read as zero.
    pub fn grad_or_zeros(&self) -> Vec<f64> {
        self.grad().unwrap_or_else(|| vec![0.0; self.data.len()])
    }

    pub fn zero_grad(&self) {
        *self.lock_grad() = None;
    }

    /// Squared L2 norm of the accumulated gradient (0 if none).
    pub fn grad_sum_sq(&self) -> f64 {
        self.lock_grad().as_ref().map_or(0.0, |g| g.iter().map(|v| v * v).sum())
    }

    /// Multiplies the accumulated gradient in place.
    pub fn scale_grad(&self, factor: f64) {
        if let Some(g) = self.lock_grad().as_mut() {
            g.iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub(crate) fn lock_grad(&self) -> MutexGuard<'_, Option<Vec<f64>>> {
        // A panic while holding the lock leaves a partially written gradient;
        // the buffer itself is still structurally valid.
        self.grad.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Visits `(data, grad)` pairs with a mutable view of the data, used by
    /// optimizers. A missing gradient is presented as zeros.
    pub fn update_with<F>(&mut self, mut f: F)
    where
        F: FnMut(&mut [f64], &[f64]),
    {
        let grad = self.grad.get_mut().unwrap_or_else(|e| e.into_inner());
        match grad {
            Some(g) => f(&mut self.data, g),
            None => {
                let zeros = vec![0.0; self.data.len()];
                f(&mut self.data, &zeros)
            }
        }
    }
}

impl Clone for Tensor {
    fn clone(&self) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.clone(),
            requires_grad: self.requires_grad,
            grad: Mutex::new(self.grad()),
        }
    }
}

impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("requires_grad", &self.requires_grad)
            .field("len", &self.data.len())
            .finish()
    }
}
