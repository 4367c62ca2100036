//! Dense row-major n-dimensional array.

use ndarray::{ArrayView2, ArrayView3, ArrayView4, ArrayViewMut2, ArrayViewMut3, ArrayViewMut4};

use super::{NnError, Scalar};

/// Row-major dense tensor. The invariant `product(shape) == data.len()`
/// is enforced at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Scalar> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self, NnError> {
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(NnError::BadTensor {
                shape,
                len: data.len(),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape,
            data: vec![F::zero(); len],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    /// Reinterpret with a new shape of the same total size.
    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self, NnError> {
        let expect: usize = shape.iter().product();
        if expect != self.data.len() {
            return Err(NnError::BadTensor {
                shape,
                len: self.data.len(),
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn view2(&self) -> ArrayView2<'_, F> {
        ArrayView2::from_shape((self.shape[0], self.shape[1]), &self.data).unwrap()
    }

    pub fn view3(&self) -> ArrayView3<'_, F> {
        ArrayView3::from_shape((self.shape[0], self.shape[1], self.shape[2]), &self.data).unwrap()
    }

    pub fn view4(&self) -> ArrayView4<'_, F> {
        ArrayView4::from_shape(
            (self.shape[0], self.shape[1], self.shape[2], self.shape[3]),
            &self.data,
        )
        .unwrap()
    }

    pub fn view2_mut(&mut self) -> ArrayViewMut2<'_, F> {
        ArrayViewMut2::from_shape((self.shape[0], self.shape[1]), &mut self.data).unwrap()
    }

    pub fn view3_mut(&mut self) -> ArrayViewMut3<'_, F> {
        ArrayViewMut3::from_shape((self.shape[0], self.shape[1], self.shape[2]), &mut self.data)
            .unwrap()
    }

    pub fn view4_mut(&mut self) -> ArrayViewMut4<'_, F> {
        let (a, b, c, d) = (self.shape[0], self.shape[1], self.shape[2], self.shape[3]);
        ArrayViewMut4::from_shape((a, b, c, d), &mut self.data).unwrap()
    }

    /// Convert element type (f32 <-> f64).
    pub fn cast<G: Scalar>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|&v| G::from(v).expect("float-to-float cast"))
                .collect(),
        }
    }
}
