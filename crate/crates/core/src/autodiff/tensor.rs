use super::{AutodiffError, Scalar};

/// Dense row-major array with a fixed shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T: Scalar = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self, AutodiffError> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(AutodiffError::InvalidShape { shape, len: data.len() });
        }
        if shape.iter().product::<usize>() != data.len() {
            return Err(AutodiffError::InvalidShape { shape, len: data.len() });
        }
        Ok(Self { shape, data, requires_grad: false })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self, AutodiffError> {
        let len = shape.iter().product();
        Self::new(shape.to_vec(), vec![T::zero(); len])
    }

    pub fn full(shape: &[usize], value: T) -> Result<Self, AutodiffError> {
        let len = shape.iter().product();
        Self::new(shape.to_vec(), vec![value; len])
    }

    /// Rank-1 tensor over `values`.
    pub fn vector(values: &[T]) -> Result<Self, AutodiffError> {
        Self::new(vec![values.len()], values.to_vec())
    }

    pub fn scalar(value: T) -> Self {
        Self { shape: vec![1], data: vec![value], requires_grad: false }
    }

    /// Builder toggle for gradient tracking.
    pub fn with_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn set_requires_grad(&mut self, requires_grad: bool) {
        self.requires_grad = requires_grad;
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
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

    /// Same data under a new shape with the same element count.
    pub fn reshape(self, shape: Vec<usize>) -> Result<Self, AutodiffError> {
        let requires_grad = self.requires_grad;
        Ok(Self::new(shape, self.data)?.with_grad(requires_grad))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Element-wise conversion to another precision.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
            requires_grad: self.requires_grad,
        }
    }
}
