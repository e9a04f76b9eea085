//! Dense N-D tensors and reverse-mode automatic differentiation.
//!
//! The canonical network layout is 5-D `[batch, channels, depth, height,
//! width]`. Training runs at `f32`; gradient checking runs the same code at
//! `f64`, so everything here is generic over [`Element`].

mod gradcheck;
mod graph;
mod kernels;

pub use gradcheck::{
    analytic_gradients, grad_check, max_relative_error, numeric_gradients, relative_error,
    GradCheckReport, ScalarFn,
};
pub use graph::{Graph, Var};

use num_traits::Float;

use crate::error::{Error, Result};

/// Output shape of a 3-D convolution with the given stride and padding.
pub fn conv3d_output_shape(
    input: &[usize],
    weight: &[usize],
    stride: [usize; 3],
    padding: [usize; 3],
) -> Result<[usize; 5]> {
    kernels::conv3d_out_shape(input, weight, &kernels::Conv3dSpec { stride, padding })
}

/// Scalar element of a tensor: `f32` or `f64`.
pub trait Element:
    Float + std::fmt::Debug + std::fmt::Display + std::iter::Sum + Send + Sync + 'static
{
    /// Dtype tag used in checkpoint manifests.
    const DTYPE: &'static str;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Element for f32 {
    const DTYPE: &'static str = "float32";

    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Element for f64 {
    const DTYPE: &'static str = "float64";

    fn from_f64(v: f64) -> Self {
        v
    }

    fn to_f64(self) -> f64 {
        self
    }
}

/// A dense row-major N-D array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Element> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if data.len() != expect {
            return Err(Error::Shape(format!(
                "data length {} does not match shape {:?} (expected {})",
                data.len(),
                shape,
                expect
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.data.len() != 1 {
            return Err(Error::Shape(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn fill(&mut self, value: T) {
        self.data.fill(value);
    }

    /// Element-wise accumulate: `self += other`. Shapes must match.
    pub fn add_assign(&mut self, other: &Tensor<T>) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a = *a + *b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Lossy element-type conversion (used to mirror `f32` parameters into
    /// an `f64` twin for gradient checking).
    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|&x| U::from_f64(Element::to_f64(x)))
                .collect(),
        }
    }
}

/// Unpack a 5-D `[N, C, D, H, W]` shape.
pub(crate) fn dims5(shape: &[usize]) -> Result<[usize; 5]> {
    if shape.len() != 5 {
        return Err(Error::Shape(format!(
            "expected a 5-D [N,C,D,H,W] tensor, got shape {shape:?}"
        )));
    }
    Ok([shape[0], shape[1], shape[2], shape[3], shape[4]])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_bad_length() {
        assert!(Tensor::<f64>::from_vec(&[2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn item_requires_single_element() {
        assert!(Tensor::<f64>::zeros(&[2]).item().is_err());
        assert_eq!(Tensor::<f64>::scalar(4.0).item().unwrap(), 4.0);
    }

    #[test]
    fn cast_roundtrip_small_values() {
        let t = Tensor::<f32>::from_vec(&[3], vec![0.5, -1.25, 2.0]).unwrap();
        let d: Tensor<f64> = t.cast();
        assert_eq!(d.data(), &[0.5, -1.25, 2.0]);
    }
}
