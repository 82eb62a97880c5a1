use rustfft::num_complex::Complex;

use crate::error::DiffError;
use crate::scalar::Scalar;

/// Dense row-major array. Complex tensors store interleaved `(re, im)` pairs,
/// so `data.len() == 2 * numel()` when `complex` is set.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    complex: bool,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); shape.iter().product()],
            complex: false,
        }
    }

    pub fn complex_zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); 2 * shape.iter().product::<usize>()],
            complex: true,
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self, DiffError> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(DiffError::DataLength {
                shape: shape.to_vec(),
                len: data.len(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
            complex: false,
        })
    }

    /// Builds a complex tensor from interleaved `(re, im)` data.
    pub fn from_interleaved(shape: &[usize], data: Vec<T>) -> Result<Self, DiffError> {
        let numel: usize = shape.iter().product();
        if data.len() != 2 * numel {
            return Err(DiffError::DataLength {
                shape: shape.to_vec(),
                len: data.len(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
            complex: true,
        })
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
            complex: false,
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
            complex: false,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    /// Logical element count (complex elements count once).
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_complex(&self) -> bool {
        self.complex
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

    pub fn as_complex(&self) -> &[Complex<T>] {
        assert!(self.complex, "as_complex on a real tensor");
        // SAFETY: Complex<T> is #[repr(C)] { re: T, im: T }, so an even-length
        // slice of T reinterprets as half as many Complex<T> values.
        unsafe {
            std::slice::from_raw_parts(self.data.as_ptr() as *const Complex<T>, self.data.len() / 2)
        }
    }

    pub fn as_complex_mut(&mut self) -> &mut [Complex<T>] {
        assert!(self.complex, "as_complex_mut on a real tensor");
        // SAFETY: see `as_complex`.
        unsafe {
            std::slice::from_raw_parts_mut(
                self.data.as_mut_ptr() as *mut Complex<T>,
                self.data.len() / 2,
            )
        }
    }

    /// Value of a one-element real tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on a tensor with {} values", self.data.len());
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self, DiffError> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(DiffError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape,
                rhs: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn same_layout(&self, other: &Self) -> bool {
        self.shape == other.shape && self.complex == other.complex
    }

    pub(crate) fn zeros_like(&self) -> Self {
        Self {
            shape: self.shape.clone(),
            data: vec![T::zero(); self.data.len()],
            complex: self.complex,
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            complex: self.complex,
        }
    }

    /// `self += alpha * other`, element by element.
    pub fn axpy(&mut self, alpha: T, other: &Self) {
        assert!(self.same_layout(other), "axpy layout {:?} vs {:?}", self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + alpha * b;
        }
    }

    pub fn fill_zero(&mut self) {
        self.data.iter_mut().for_each(|v| *v = T::zero());
    }

    pub fn sum_sq(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v * v)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::from_f64(v.to_f64().unwrap_or(f64::NAN)).unwrap_or(U::nan()))
                .collect(),
            complex: self.complex,
        }
    }
}
