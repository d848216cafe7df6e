use super::Scalar;
use crate::error::{Error, Result};

/// Dense row-major tensor of up to four dimensions, usually `(N, C, H, W)`.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorF<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> TensorF<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![T::ZERO; len],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if shape.len() > 4 {
            return Err(Error::shape("tensor", format!("{} dims (max 4)", shape.len())));
        }
        if len != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {:?} needs {} values, got {}", shape, len, data.len()),
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
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

    /// Element type conversion (f32 <-> f64).
    pub fn cast<U: Scalar>(&self) -> TensorF<U> {
        TensorF {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }

    /// Contiguous slice of sample `n` for an `(N, ...)` tensor.
    pub fn sample(&self, n: usize) -> &[T] {
        let per = self.data.len() / self.shape[0].max(1);
        &self.data[n * per..(n + 1) * per]
    }

    /// Stack equally shaped `(C, H, W)` tensors into `(N, C, H, W)`.
    pub fn stack(items: &[&TensorF<T>]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::shape("stack", "no tensors"))?;
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(Error::shape(
                    "stack",
                    format!("{:?} vs {:?}", t.shape, first.shape),
                ));
            }
            data.extend_from_slice(&t.data);
        }
        Self::from_vec(&shape, data)
    }
}
