//! Layer parameter types and the per-sample compute kernels.
//!
//! Convolution is implemented as valid cross-correlation via im2col plus
//! a matrix product; pooling is strided non-overlapping max with the
//! remainder truncated.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, Array3, ArrayView3, ArrayViewMut3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{NnError, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ActivationKind {
    Identity,
    Relu,
    Softmax,
}

impl ActivationKind {
    pub(crate) fn code(self) -> u8 {
        match self {
            ActivationKind::Identity => 0,
            ActivationKind::Relu => 1,
            ActivationKind::Softmax => 2,
        }
    }

    pub(crate) fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(ActivationKind::Identity),
            1 => Some(ActivationKind::Relu),
            2 => Some(ActivationKind::Softmax),
            _ => None,
        }
    }
}

/// Convolutional layer: weights (out_channels, in_channels, k0, k1),
/// optional non-overlapping max-pool, then activation.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer<F> {
    pub weights: Tensor<F>,
    pub bias: Vec<F>,
    pub activation: ActivationKind,
    pub pool: Option<(usize, usize)>,
    pub l2: F,
}

impl<F: Scalar> ConvLayer<F> {
    pub fn out_channels(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn kernel(&self) -> (usize, usize) {
        (self.weights.shape()[2], self.weights.shape()[3])
    }

    /// (channels, time, freq) in -> out, after convolution, pooling and
    /// activation.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>, NnError> {
        if input.len() != 3 {
            return Err(NnError::ShapeMismatch(format!(
                "conv expects rank-3 input, got {input:?}"
            )));
        }
        let (m0, m1) = self.kernel();
        if input[0] != self.in_channels() {
            return Err(NnError::ShapeMismatch(format!(
                "conv expects {} input channels, got {}",
                self.in_channels(),
                input[0]
            )));
        }
        if m0 > input[1] || m1 > input[2] {
            return Err(NnError::ShapeMismatch(format!(
                "kernel ({m0},{m1}) larger than input ({},{})",
                input[1], input[2]
            )));
        }
        let mut d0 = input[1] - m0 + 1;
        let mut d1 = input[2] - m1 + 1;
        if let Some((p0, p1)) = self.pool {
            d0 /= p0;
            d1 /= p1;
            if d0 == 0 || d1 == 0 {
                return Err(NnError::ShapeMismatch(format!(
                    "pool ({p0},{p1}) collapses output ({},{})",
                    input[1] - m0 + 1,
                    input[2] - m1 + 1
                )));
            }
        }
        Ok(vec![self.out_channels(), d0, d1])
    }
}

/// Dense layer: weights (n_in, n_out). `input_dropout` is the inverted
/// dropout rate applied to this layer's input during training.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer<F> {
    pub weights: Tensor<F>,
    pub bias: Vec<F>,
    pub activation: ActivationKind,
    pub input_dropout: f64,
    pub l2: F,
}

impl<F: Scalar> DenseLayer<F> {
    pub fn n_in(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn n_out(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>, NnError> {
        let flat: usize = input.iter().product();
        if flat != self.n_in() {
            return Err(NnError::ShapeMismatch(format!(
                "dense expects {} inputs, got {input:?} (= {flat})",
                self.n_in()
            )));
        }
        Ok(vec![self.n_out()])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer<F> {
    Conv(ConvLayer<F>),
    Dense(DenseLayer<F>),
}

impl<F: Scalar> Layer<F> {
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>, NnError> {
        match self {
            Layer::Conv(c) => c.output_shape(input),
            Layer::Dense(d) => d.output_shape(input),
        }
    }

    pub fn activation(&self) -> ActivationKind {
        match self {
            Layer::Conv(c) => c.activation,
            Layer::Dense(d) => d.activation,
        }
    }

    pub fn parameter_count(&self) -> usize {
        match self {
            Layer::Conv(c) => c.weights.len() + c.bias.len(),
            Layer::Dense(d) => d.weights.len() + d.bias.len(),
        }
    }
}

/// Uniform Glorot initialization for a conv layer; biases zero.
pub fn glorot_conv<F: Scalar>(
    out_channels: usize,
    in_channels: usize,
    kernel: (usize, usize),
    activation: ActivationKind,
    pool: Option<(usize, usize)>,
    l2: F,
    rng: &mut ChaCha8Rng,
) -> ConvLayer<F> {
    let fan_in = in_channels * kernel.0 * kernel.1;
    let fan_out = out_channels * kernel.0 * kernel.1;
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let len = out_channels * in_channels * kernel.0 * kernel.1;
    let data = (0..len)
        .map(|_| F::from(rng.gen_range(-bound..=bound)).unwrap())
        .collect();
    ConvLayer {
        weights: Tensor::new(vec![out_channels, in_channels, kernel.0, kernel.1], data).unwrap(),
        bias: vec![F::zero(); out_channels],
        activation,
        pool,
        l2,
    }
}

/// Uniform Glorot initialization for a dense layer; biases zero.
pub fn glorot_dense<F: Scalar>(
    n_in: usize,
    n_out: usize,
    activation: ActivationKind,
    input_dropout: f64,
    l2: F,
    rng: &mut ChaCha8Rng,
) -> DenseLayer<F> {
    let bound = (6.0 / (n_in + n_out) as f64).sqrt();
    let data = (0..n_in * n_out)
        .map(|_| F::from(rng.gen_range(-bound..=bound)).unwrap())
        .collect();
    DenseLayer {
        weights: Tensor::new(vec![n_in, n_out], data).unwrap(),
        bias: vec![F::zero(); n_out],
        activation,
        input_dropout,
        l2,
    }
}

pub(crate) fn relu_inplace<F: Scalar>(data: &mut [F]) {
    for v in data {
        if *v < F::zero() {
            *v = F::zero();
        }
    }
}

/// Row-wise softmax with max subtraction.
pub(crate) fn softmax_rows<F: Scalar>(mat: &mut Array2<F>) {
    for mut row in mat.rows_mut() {
        let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
        let mut sum = F::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum = sum + *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
}

/// Fill `cols` (in_channels * k0 * k1, o0 * o1) with the image patches of
/// one sample; row order matches the row-major weight layout.
pub(crate) fn im2col<F: Scalar>(x: ArrayView3<'_, F>, k: (usize, usize), cols: &mut Array2<F>) {
    let (n, _d0, d1) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (k0, k1) = k;
    let o0 = x.shape()[1] - k0 + 1;
    let o1 = d1 - k1 + 1;
    debug_assert_eq!(cols.shape(), [n * k0 * k1, o0 * o1]);
    let xs = x.as_slice().expect("contiguous input");
    for c in 0..n {
        for di in 0..k0 {
            for dj in 0..k1 {
                let row = (c * k0 + di) * k1 + dj;
                let mut out_idx = row * (o0 * o1);
                let cols_slice = cols.as_slice_mut().expect("contiguous cols");
                for i in 0..o0 {
                    let base = (c * x.shape()[1] + i + di) * d1 + dj;
                    cols_slice[out_idx..out_idx + o1].copy_from_slice(&xs[base..base + o1]);
                    out_idx += o1;
                }
            }
        }
    }
}

/// Scatter-add the column gradient back onto the input image.
pub(crate) fn col2im_add<F: Scalar>(
    dcols: &Array2<F>,
    k: (usize, usize),
    mut dx: ArrayViewMut3<'_, F>,
) {
    let (n, d0, d1) = (dx.shape()[0], dx.shape()[1], dx.shape()[2]);
    let (k0, k1) = k;
    let o0 = d0 - k0 + 1;
    let o1 = d1 - k1 + 1;
    let dc = dcols.as_slice().expect("contiguous dcols");
    let dxs = dx.as_slice_mut().expect("contiguous dx");
    for c in 0..n {
        for di in 0..k0 {
            for dj in 0..k1 {
                let row = (c * k0 + di) * k1 + dj;
                let mut src = row * (o0 * o1);
                for i in 0..o0 {
                    let base = (c * d0 + i + di) * d1 + dj;
                    for j in 0..o1 {
                        dxs[base + j] = dxs[base + j] + dc[src + j];
                    }
                    src += o1;
                }
            }
        }
    }
}

/// One sample of valid cross-correlation plus bias: output (M, o0, o1),
/// no pooling or activation.
pub(crate) fn conv_sample_pre<F: Scalar>(
    x: ArrayView3<'_, F>,
    weights: &Tensor<F>,
    bias: &[F],
    cols: &mut Array2<F>,
) -> Array3<F> {
    let m = weights.shape()[0];
    let k = (weights.shape()[2], weights.shape()[3]);
    let o0 = x.shape()[1] - k.0 + 1;
    let o1 = x.shape()[2] - k.1 + 1;
    im2col(x, k, cols);
    let w2 = ndarray::ArrayView2::from_shape((m, weights.len() / m), weights.data()).unwrap();
    let mut pre = Array2::zeros((m, o0 * o1));
    general_mat_mul(F::one(), &w2, cols, F::zero(), &mut pre);
    for (mi, mut row) in pre.rows_mut().into_iter().enumerate() {
        let b = bias[mi];
        row.mapv_inplace(|v| v + b);
    }
    pre.into_shape_with_order((m, o0, o1)).unwrap()
}

/// Strided max-pool of one sample, stride equal to the window. Returns
/// the pooled map and, per pooled cell, the flat within-channel index of
/// the winning element. Trailing rows/columns that do not fill a window
/// are dropped.
pub(crate) fn maxpool_sample<F: Scalar>(
    pre: &Array3<F>,
    p: (usize, usize),
) -> (Array3<F>, Vec<u32>) {
    let (m, o0, o1) = (pre.shape()[0], pre.shape()[1], pre.shape()[2]);
    let (p0, p1) = p;
    let (q0, q1) = (o0 / p0, o1 / p1);
    let mut out = Array3::zeros((m, q0, q1));
    let mut argmax = vec![0u32; m * q0 * q1];
    for c in 0..m {
        for i in 0..q0 {
            for j in 0..q1 {
                let mut best = F::neg_infinity();
                let mut best_idx = 0u32;
                for a in i * p0..(i + 1) * p0 {
                    for b in j * p1..(j + 1) * p1 {
                        let v = pre[(c, a, b)];
                        if v > best {
                            best = v;
                            best_idx = (a * o1 + b) as u32;
                        }
                    }
                }
                out[(c, i, j)] = best;
                argmax[(c * q0 + i) * q1 + j] = best_idx;
            }
        }
    }
    (out, argmax)
}

/// Apply one convolutional layer (convolution, optional pooling, then
/// activation) to a single (channels, time, freq) tensor.
pub fn conv_forward<F: Scalar>(input: &Tensor<F>, layer: &ConvLayer<F>) -> Result<Tensor<F>, NnError> {
    let out_shape = layer.output_shape(input.shape())?;
    if layer.activation == ActivationKind::Softmax {
        return Err(NnError::SoftmaxPlacement);
    }
    let k = layer.kernel();
    let o0 = input.shape()[1] - k.0 + 1;
    let o1 = input.shape()[2] - k.1 + 1;
    let mut cols = Array2::zeros((layer.in_channels() * k.0 * k.1, o0 * o1));
    let pre = conv_sample_pre(input.view3(), &layer.weights, &layer.bias, &mut cols);
    let mut mapped = match layer.pool {
        Some(p) => maxpool_sample(&pre, p).0,
        None => pre,
    };
    if layer.activation == ActivationKind::Relu {
        relu_inplace(mapped.as_slice_mut().unwrap());
    }
    let data = mapped.into_raw_vec_and_offset().0;
    Tensor::new(out_shape, data)
}

/// Strided max-pool over the last two axes of a rank-2 or rank-3 tensor.
pub fn maxpool<F: Scalar>(input: &Tensor<F>, p_t: usize, p_f: usize) -> Result<Tensor<F>, NnError> {
    if p_t == 0 || p_f == 0 {
        return Err(NnError::ShapeMismatch("pool dims must be >= 1".into()));
    }
    let (arr, rank2) = match input.rank() {
        2 => {
            let s = input.shape();
            (
                input.view2().to_owned().into_shape_with_order((1, s[0], s[1])).unwrap(),
                true,
            )
        }
        3 => (input.view3().to_owned(), false),
        r => {
            return Err(NnError::ShapeMismatch(format!(
                "maxpool expects rank 2 or 3, got {r}"
            )))
        }
    };
    let (out, _) = maxpool_sample(&arr, (p_t, p_f));
    let shape = if rank2 {
        vec![out.shape()[1], out.shape()[2]]
    } else {
        out.shape().to_vec()
    };
    let data = out.into_raw_vec_and_offset().0;
    Tensor::new(shape, data)
}

/// Apply a dense layer to a single flattened input (inference path: no
/// dropout).
pub fn dense_forward<F: Scalar>(input: &Tensor<F>, layer: &DenseLayer<F>) -> Result<Tensor<F>, NnError> {
    layer.output_shape(input.shape())?;
    let n_out = layer.n_out();
    let x = ndarray::ArrayView2::from_shape((1, layer.n_in()), input.data()).unwrap();
    let mut z = Array2::zeros((1, n_out));
    general_mat_mul(F::one(), &x, &layer.weights.view2(), F::zero(), &mut z);
    for (j, v) in z.row_mut(0).iter_mut().enumerate() {
        *v = *v + layer.bias[j];
    }
    match layer.activation {
        ActivationKind::Identity => {}
        ActivationKind::Relu => relu_inplace(z.as_slice_mut().unwrap()),
        ActivationKind::Softmax => softmax_rows(&mut z),
    }
    Tensor::new(vec![n_out], z.into_raw_vec_and_offset().0)
}
