//! Model composition, batched forward/backward and SGD.
//!
//! Batches are tensors whose leading axis is the sample index. Conv
//! layers fan work out over fixed-size sample chunks; gradient
//! contributions are reduced in chunk order so results are identical for
//! any thread count.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView2, ArrayView3, ArrayViewMut3};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::layers::{
    col2im_add, conv_sample_pre, im2col, maxpool_sample, relu_inplace, softmax_rows,
};
use super::{ActivationKind, ConvLayer, DenseLayer, Layer, NnError, Scalar, Tensor, PAR_CHUNK, PROB_FLOOR};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Ordered layer parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<F> {
    pub layers: Vec<Layer<F>>,
}

/// Per-layer gradient with the same shapes as the parameters.
#[derive(Debug, Clone)]
pub struct LayerGrad<F> {
    pub dw: Tensor<F>,
    pub db: Vec<F>,
}

#[derive(Debug, Clone)]
pub struct Gradients<F> {
    pub layers: Vec<LayerGrad<F>>,
}

enum LayerCache<F> {
    Conv {
        input: Tensor<F>,
        argmax: Option<Vec<u32>>,
        output: Tensor<F>,
    },
    Dense {
        /// Layer input after dropout, flattened to (batch, n_in).
        x: Array2<F>,
        mask: Option<Vec<F>>,
        output: Array2<F>,
        input_shape: Vec<usize>,
    },
}

/// Everything the backward pass needs from a forward pass.
pub struct Trace<F> {
    caches: Vec<LayerCache<F>>,
    /// Final layer output, shape (batch, n_out).
    pub output: Tensor<F>,
}

impl<F: Scalar> Model<F> {
    pub fn new(layers: Vec<Layer<F>>) -> Result<Self, NnError> {
        let model = Model { layers };
        model.validate()?;
        Ok(model)
    }

    /// Structural checks: non-empty, softmax only on the final layer.
    pub fn validate(&self) -> Result<(), NnError> {
        if self.layers.is_empty() {
            return Err(NnError::EmptyModel);
        }
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.activation() == ActivationKind::Softmax && i + 1 != self.layers.len() {
                return Err(NnError::SoftmaxPlacement);
            }
        }
        Ok(())
    }

    /// Static shape propagation for a single sample of `input_shape`.
    pub fn output_shape(&self, input_shape: &[usize]) -> Result<Vec<usize>, NnError> {
        let mut shape = input_shape.to_vec();
        for layer in &self.layers {
            shape = layer.output_shape(&shape)?;
        }
        Ok(shape)
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.parameter_count()).sum()
    }

    /// Run a batch through the network. `rng` is required in training
    /// mode when any layer has input dropout; masks sampled here are the
    /// ones the backward pass reuses.
    pub fn forward(
        &self,
        batch: &Tensor<F>,
        mode: Mode,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Tensor<F>, Trace<F>), NnError> {
        self.validate()?;
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut current = batch.clone();
        for layer in &self.layers {
            current = match layer {
                Layer::Conv(conv) => {
                    let (out, argmax) = conv_forward_batch(conv, &current)?;
                    caches.push(LayerCache::Conv {
                        input: std::mem::replace(&mut current, Tensor::zeros(vec![0])),
                        argmax,
                        output: out.clone(),
                    });
                    out
                }
                Layer::Dense(dense) => {
                    let (out, x, mask, input_shape) =
                        dense_forward_batch(dense, &current, mode, rng.as_deref_mut())?;
                    let out_tensor = Tensor::new(
                        vec![out.nrows(), out.ncols()],
                        out.clone().into_raw_vec_and_offset().0,
                    )?;
                    caches.push(LayerCache::Dense {
                        x,
                        mask,
                        output: out,
                        input_shape,
                    });
                    out_tensor
                }
            };
        }
        Ok((
            current.clone(),
            Trace {
                caches,
                output: current,
            },
        ))
    }

    /// Inference without dropout.
    pub fn predict(&self, batch: &Tensor<F>) -> Result<Tensor<F>, NnError> {
        Ok(self.forward(batch, Mode::Eval, None)?.0)
    }

    /// Mean cross-entropy of a batch plus the model's L2 penalty,
    /// evaluated without dropout.
    pub fn batch_loss(&self, batch: &Tensor<F>, targets: &[usize]) -> Result<F, NnError> {
        let probs = self.predict(batch)?;
        let ce = mean_cross_entropy(&probs.view2(), targets)?;
        Ok(ce + l2_penalty(self))
    }

    /// Exact analytic gradients of (mean batch cross-entropy + L2) with
    /// respect to every weight and bias. Returns the loss alongside.
    /// Requires the final layer activation to be softmax.
    pub fn backward(&self, trace: &Trace<F>, targets: &[usize]) -> Result<(F, Gradients<F>), NnError> {
        let last = self.layers.last().ok_or(NnError::EmptyModel)?;
        if last.activation() != ActivationKind::Softmax {
            return Err(NnError::SoftmaxPlacement);
        }
        let probs = trace.output.view2();
        let batch = probs.nrows();
        if targets.len() != batch {
            return Err(NnError::ShapeMismatch(format!(
                "{} targets for a batch of {batch}",
                targets.len()
            )));
        }
        let loss = mean_cross_entropy(&probs, targets)? + l2_penalty(self);

        // Combined softmax + cross-entropy gradient, averaged over the batch.
        let inv_b = F::from(1.0 / batch as f64).unwrap();
        let mut dz = probs.to_owned();
        for (i, &t) in targets.iter().enumerate() {
            if t >= probs.ncols() {
                return Err(NnError::TargetOutOfRange {
                    target: t,
                    n_classes: probs.ncols(),
                });
            }
            dz[(i, t)] = dz[(i, t)] - F::one();
        }
        dz.mapv_inplace(|v| v * inv_b);

        let mut grads: Vec<Option<LayerGrad<F>>> = (0..self.layers.len()).map(|_| None).collect();
        // Gradient flowing into the current layer's output, shaped like it.
        let mut da: Option<Tensor<F>> = None;

        for (l, layer) in self.layers.iter().enumerate().rev() {
            let is_last = l == self.layers.len() - 1;
            match (layer, &trace.caches[l]) {
                (Layer::Dense(dense), LayerCache::Dense { x, mask, output, input_shape }) => {
                    let dz_l: Array2<F> = if is_last {
                        dz.clone()
                    } else {
                        let da_t = da.take().expect("upstream gradient");
                        let mut g = ArrayView2::from_shape(
                            (output.nrows(), output.ncols()),
                            da_t.data(),
                        )
                        .unwrap()
                        .to_owned();
                        apply_activation_derivative(dense.activation, output, &mut g)?;
                        g
                    };
                    let (grad, da_prev) =
                        dense_backward(dense, x, mask.as_deref(), &dz_l, l > 0)?;
                    grads[l] = Some(grad);
                    if let Some(prev) = da_prev {
                        let mut shape = vec![x.nrows()];
                        shape.extend_from_slice(input_shape);
                        da = Some(Tensor::new(shape, prev.into_raw_vec_and_offset().0)?);
                    }
                }
                (Layer::Conv(conv), LayerCache::Conv { input, argmax, output }) => {
                    let da_t = da.take().expect("conv cannot be the softmax output layer");
                    let (grad, dx) =
                        conv_backward_batch(conv, input, argmax.as_deref(), output, &da_t, l > 0)?;
                    grads[l] = Some(grad);
                    da = dx;
                }
                _ => unreachable!("trace caches align with layers"),
            }
        }

        Ok((
            loss,
            Gradients {
                layers: grads.into_iter().map(|g| g.unwrap()).collect(),
            },
        ))
    }
}

/// `-ln(p[target])` with the probability floored at [`PROB_FLOOR`].
/// The input must already be a probability vector (sum within 1e-4 of 1).
pub fn cross_entropy<F: Scalar>(predicted: &[F], target: usize) -> Result<F, NnError> {
    if target >= predicted.len() {
        return Err(NnError::TargetOutOfRange {
            target,
            n_classes: predicted.len(),
        });
    }
    let sum: f64 = predicted.iter().map(|&p| p.to_f64().unwrap()).sum();
    if (sum - 1.0).abs() > 1e-4 {
        return Err(NnError::NotAProbability(sum));
    }
    let floor = F::from(PROB_FLOOR).unwrap();
    Ok(-(predicted[target].max(floor)).ln())
}

fn mean_cross_entropy<F: Scalar>(probs: &ArrayView2<'_, F>, targets: &[usize]) -> Result<F, NnError> {
    let floor = F::from(PROB_FLOOR).unwrap();
    let mut acc = F::zero();
    for (row, &t) in probs.rows().into_iter().zip(targets) {
        if t >= row.len() {
            return Err(NnError::TargetOutOfRange {
                target: t,
                n_classes: row.len(),
            });
        }
        acc = acc - row[t].max(floor).ln();
    }
    Ok(acc / F::from(targets.len() as f64).unwrap())
}

/// Sum of `l2 * w^2` over all layers (weights only, never biases).
pub fn l2_penalty<F: Scalar>(model: &Model<F>) -> F {
    model
        .layers
        .iter()
        .map(|layer| {
            let (w, l2) = match layer {
                Layer::Conv(c) => (&c.weights, c.l2),
                Layer::Dense(d) => (&d.weights, d.l2),
            };
            if l2 == F::zero() {
                F::zero()
            } else {
                l2 * w.data().iter().map(|&v| v * v).fold(F::zero(), |a, b| a + b)
            }
        })
        .fold(F::zero(), |a, b| a + b)
}

/// Plain SGD: `p <- p - lr * g` for every parameter.
pub fn sgd_step<F: Scalar>(model: &mut Model<F>, grads: &Gradients<F>, learning_rate: F) {
    for (layer, grad) in model.layers.iter_mut().zip(&grads.layers) {
        let (w, b) = match layer {
            Layer::Conv(c) => (&mut c.weights, &mut c.bias),
            Layer::Dense(d) => (&mut d.weights, &mut d.bias),
        };
        for (p, &g) in w.data_mut().iter_mut().zip(grad.dw.data()) {
            *p = *p - learning_rate * g;
        }
        for (p, &g) in b.iter_mut().zip(&grad.db) {
            *p = *p - learning_rate * g;
        }
    }
}

/// One SGD update on a batch; returns the (pre-update) batch loss.
pub fn train_step<F: Scalar>(
    model: &mut Model<F>,
    batch: &Tensor<F>,
    targets: &[usize],
    learning_rate: F,
    rng: &mut ChaCha8Rng,
) -> Result<F, NnError> {
    let (_, trace) = model.forward(batch, Mode::Train, Some(rng))?;
    let (loss, grads) = model.backward(&trace, targets)?;
    sgd_step(model, &grads, learning_rate);
    Ok(loss)
}

fn apply_activation_derivative<F: Scalar>(
    activation: ActivationKind,
    output: &Array2<F>,
    grad: &mut Array2<F>,
) -> Result<(), NnError> {
    match activation {
        ActivationKind::Identity => Ok(()),
        ActivationKind::Relu => {
            for (g, &o) in grad.iter_mut().zip(output.iter()) {
                if o <= F::zero() {
                    *g = F::zero();
                }
            }
            Ok(())
        }
        ActivationKind::Softmax => Err(NnError::SoftmaxPlacement),
    }
}

fn conv_forward_batch<F: Scalar>(
    layer: &ConvLayer<F>,
    input: &Tensor<F>,
) -> Result<(Tensor<F>, Option<Vec<u32>>), NnError> {
    if input.rank() != 4 {
        return Err(NnError::ShapeMismatch(format!(
            "conv batch expects rank-4 input, got {:?}",
            input.shape()
        )));
    }
    let b = input.shape()[0];
    let sample_in: Vec<usize> = input.shape()[1..].to_vec();
    let sample_out = layer.output_shape(&sample_in)?;
    let in_len: usize = sample_in.iter().product();
    let out_len: usize = sample_out.iter().product();
    let k = layer.kernel();
    let (d0, d1) = (sample_in[1], sample_in[2]);
    let (o0, o1) = (d0 - k.0 + 1, d1 - k.1 + 1);

    let mut out = Tensor::zeros(vec![b, sample_out[0], sample_out[1], sample_out[2]]);
    let mut argmax = layer.pool.map(|_| vec![0u32; b * out_len]);

    let in_data = input.data();
    let out_data = out.data_mut();
    let cols_shape = (layer.in_channels() * k.0 * k.1, o0 * o1);

    let run_sample = |x: &[F], o: &mut [F], a: Option<&mut [u32]>, cols: &mut Array2<F>| {
        let xv = ArrayView3::from_shape((sample_in[0], d0, d1), x).unwrap();
        let pre = conv_sample_pre(xv, &layer.weights, &layer.bias, cols);
        let mut mapped = match layer.pool {
            Some(p) => {
                let (pooled, idx) = maxpool_sample(&pre, p);
                a.expect("argmax buffer when pooling").copy_from_slice(&idx);
                pooled
            }
            None => pre,
        };
        if layer.activation == ActivationKind::Relu {
            relu_inplace(mapped.as_slice_mut().unwrap());
        }
        o.copy_from_slice(mapped.as_slice().unwrap());
    };

    match argmax.as_mut() {
        Some(arg) => {
            out_data
                .par_chunks_mut(PAR_CHUNK * out_len)
                .zip(in_data.par_chunks(PAR_CHUNK * in_len))
                .zip(arg.par_chunks_mut(PAR_CHUNK * out_len))
                .for_each(|((oc, ic), ac)| {
                    let mut cols = Array2::zeros(cols_shape);
                    for ((o, x), a) in oc
                        .chunks_mut(out_len)
                        .zip(ic.chunks(in_len))
                        .zip(ac.chunks_mut(out_len))
                    {
                        run_sample(x, o, Some(a), &mut cols);
                    }
                });
        }
        None => {
            out_data
                .par_chunks_mut(PAR_CHUNK * out_len)
                .zip(in_data.par_chunks(PAR_CHUNK * in_len))
                .for_each(|(oc, ic)| {
                    let mut cols = Array2::zeros(cols_shape);
                    for (o, x) in oc.chunks_mut(out_len).zip(ic.chunks(in_len)) {
                        run_sample(x, o, None, &mut cols);
                    }
                });
        }
    }
    Ok((out, argmax))
}

fn dense_forward_batch<F: Scalar>(
    layer: &DenseLayer<F>,
    input: &Tensor<F>,
    mode: Mode,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<(Array2<F>, Array2<F>, Option<Vec<F>>, Vec<usize>), NnError> {
    let b = input.shape()[0];
    let input_shape: Vec<usize> = input.shape()[1..].to_vec();
    layer.output_shape(&input_shape)?;
    let flat = layer.n_in();

    let mut x = ArrayView2::from_shape((b, flat), input.data()).unwrap().to_owned();
    let mask = if mode == Mode::Train && layer.input_dropout > 0.0 {
        let rng = rng.ok_or_else(|| {
            NnError::ShapeMismatch("training forward through dropout requires an rng".into())
        })?;
        let mask: Vec<F> = super::dropout_mask(b * flat, layer.input_dropout, rng)?;
        for (v, &m) in x.iter_mut().zip(&mask) {
            *v = *v * m;
        }
        Some(mask)
    } else {
        None
    };

    let mut z = Array2::zeros((b, layer.n_out()));
    general_mat_mul(F::one(), &x.view(), &layer.weights.view2(), F::zero(), &mut z);
    for mut row in z.rows_mut() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = *v + layer.bias[j];
        }
    }
    match layer.activation {
        ActivationKind::Identity => {}
        ActivationKind::Relu => relu_inplace(z.as_slice_mut().unwrap()),
        ActivationKind::Softmax => softmax_rows(&mut z),
    }
    Ok((z, x, mask, input_shape))
}

fn dense_backward<F: Scalar>(
    layer: &DenseLayer<F>,
    x: &Array2<F>,
    mask: Option<&[F]>,
    dz: &Array2<F>,
    want_dx: bool,
) -> Result<(LayerGrad<F>, Option<Array2<F>>), NnError> {
    let mut dw = Array2::zeros((layer.n_in(), layer.n_out()));
    general_mat_mul(F::one(), &x.t(), &dz.view(), F::zero(), &mut dw);
    if layer.l2 != F::zero() {
        let two_l2 = layer.l2 + layer.l2;
        for (g, &w) in dw.iter_mut().zip(layer.weights.data()) {
            *g = *g + two_l2 * w;
        }
    }
    let db: Vec<F> = (0..layer.n_out())
        .map(|j| dz.column(j).iter().fold(F::zero(), |a, &b| a + b))
        .collect();

    let dx = if want_dx {
        let mut dx = Array2::zeros((x.nrows(), layer.n_in()));
        general_mat_mul(F::one(), &dz.view(), &layer.weights.view2().t(), F::zero(), &mut dx);
        if let Some(mask) = mask {
            for (v, &m) in dx.iter_mut().zip(mask) {
                *v = *v * m;
            }
        }
        Some(dx)
    } else {
        None
    };

    let dw_tensor = Tensor::new(
        vec![layer.n_in(), layer.n_out()],
        dw.into_raw_vec_and_offset().0,
    )?;
    Ok((LayerGrad { dw: dw_tensor, db }, dx))
}

fn conv_backward_batch<F: Scalar>(
    layer: &ConvLayer<F>,
    input: &Tensor<F>,
    argmax: Option<&[u32]>,
    output: &Tensor<F>,
    da: &Tensor<F>,
    want_dx: bool,
) -> Result<(LayerGrad<F>, Option<Tensor<F>>), NnError> {
    let b = input.shape()[0];
    let sample_in: Vec<usize> = input.shape()[1..].to_vec();
    let in_len: usize = sample_in.iter().product();
    let k = layer.kernel();
    let m = layer.out_channels();
    let (d0, d1) = (sample_in[1], sample_in[2]);
    let (o0, o1) = (d0 - k.0 + 1, d1 - k.1 + 1);
    let out_len = output.len() / b;

    if da.shape() != output.shape() {
        return Err(NnError::ShapeMismatch(format!(
            "conv backward: upstream gradient {:?} vs output {:?}",
            da.shape(),
            output.shape()
        )));
    }

    // Activation derivative, then route pooled gradients back to the
    // winning pre-pool positions. Sequential: cheap elementwise work.
    let mut dpre = vec![F::zero(); b * m * o0 * o1];
    {
        let (q0, q1) = (output.shape()[2], output.shape()[3]);
        let out_data = output.data();
        let da_data = da.data();
        for s in 0..b {
            for c in 0..m {
                for i in 0..q0 {
                    for j in 0..q1 {
                        let oi = ((s * m + c) * q0 + i) * q1 + j;
                        let mut g = da_data[oi];
                        if layer.activation == ActivationKind::Relu && out_data[oi] <= F::zero() {
                            g = F::zero();
                        }
                        if g == F::zero() {
                            continue;
                        }
                        let flat = match argmax {
                            Some(idx) => idx[oi] as usize,
                            None => i * o1 + j,
                        };
                        dpre[(s * m + c) * (o0 * o1) + flat] = dpre[(s * m + c) * (o0 * o1) + flat] + g;
                    }
                }
            }
        }
    }

    let kdim = layer.in_channels() * k.0 * k.1;
    let cols_shape = (kdim, o0 * o1);
    let w2 = ArrayView2::from_shape((m, kdim), layer.weights.data()).unwrap();
    let in_data = input.data();

    // Per chunk: local dW/db plus the input gradient written in place.
    let process = |ic: &[F], pc: &[F], mut xc: Option<&mut [F]>| -> (Array2<F>, Vec<F>) {
        let mut cols = Array2::zeros(cols_shape);
        let mut dcols = Array2::zeros(cols_shape);
        let mut dw_local = Array2::zeros((m, kdim));
        let mut db_local = vec![F::zero(); m];
        for (si, (x, dp)) in ic.chunks(in_len).zip(pc.chunks(m * o0 * o1)).enumerate() {
            let xv = ArrayView3::from_shape((sample_in[0], d0, d1), x).unwrap();
            im2col(xv, k, &mut cols);
            let dp_mat = ArrayView2::from_shape((m, o0 * o1), dp).unwrap();
            general_mat_mul(F::one(), &dp_mat, &cols.t(), F::one(), &mut dw_local);
            for (c, dbv) in db_local.iter_mut().enumerate() {
                *dbv = dp_mat.row(c).iter().fold(*dbv, |a, &g| a + g);
            }
            if let Some(xg) = xc.as_deref_mut() {
                general_mat_mul(F::one(), &w2.t(), &dp_mat, F::zero(), &mut dcols);
                let dx_slice = &mut xg[si * in_len..(si + 1) * in_len];
                let dxv = ArrayViewMut3::from_shape((sample_in[0], d0, d1), dx_slice).unwrap();
                col2im_add(&dcols, k, dxv);
            }
        }
        (dw_local, db_local)
    };

    let locals: Vec<(Array2<F>, Vec<F>)>;
    let mut dx = want_dx.then(|| Tensor::zeros(input.shape().to_vec()));
    if let Some(dx_t) = dx.as_mut() {
        locals = in_data
            .par_chunks(PAR_CHUNK * in_len)
            .zip(dpre.par_chunks(PAR_CHUNK * m * o0 * o1))
            .zip(dx_t.data_mut().par_chunks_mut(PAR_CHUNK * in_len))
            .map(|((ic, pc), xc)| process(ic, pc, Some(xc)))
            .collect();
    } else {
        locals = in_data
            .par_chunks(PAR_CHUNK * in_len)
            .zip(dpre.par_chunks(PAR_CHUNK * m * o0 * o1))
            .map(|(ic, pc)| process(ic, pc, None))
            .collect();
    }

    // Reduce in chunk order.
    let mut dw = Array2::<F>::zeros((m, kdim));
    let mut db = vec![F::zero(); m];
    for (dw_local, db_local) in locals {
        dw.zip_mut_with(&dw_local, |a, &b| *a = *a + b);
        for (a, &v) in db.iter_mut().zip(&db_local) {
            *a = *a + v;
        }
    }
    if layer.l2 != F::zero() {
        let two_l2 = layer.l2 + layer.l2;
        for (g, &w) in dw.iter_mut().zip(layer.weights.data()) {
            *g = *g + two_l2 * w;
        }
    }

    let dw_tensor = Tensor::new(
        layer.weights.shape().to_vec(),
        dw.into_raw_vec_and_offset().0,
    )?;
    let _ = out_len;
    Ok((LayerGrad { dw: dw_tensor, db }, dx))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{glorot_conv, glorot_dense};
    use rand::SeedableRng;

    fn softmax_dense_model(n_in: usize, n_out: usize, seed: u64) -> Model<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Model::new(vec![Layer::Dense(glorot_dense(
            n_in,
            n_out,
            ActivationKind::Softmax,
            0.0,
            0.0,
            &mut rng,
        ))])
        .unwrap()
    }

    #[test]
    fn cross_entropy_analytic_values() {
        let mut p = vec![0.0f64; 10];
        p[3] = 1.0;
        assert_eq!(cross_entropy(&p, 3).unwrap(), 0.0);

        let uniform = vec![0.1f64; 10];
        let loss = cross_entropy(&uniform, 7).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-12);

        let mut zeroed = vec![0.0f64; 10];
        zeroed[0] = 1.0;
        let loss = cross_entropy(&zeroed, 5).unwrap();
        assert!((loss - (-PROB_FLOOR.ln())).abs() < 1e-9);
        assert!(loss.is_finite());
    }

    #[test]
    fn cross_entropy_checks_inputs() {
        let p = vec![0.5f64, 0.4];
        assert!(matches!(
            cross_entropy(&p, 0),
            Err(NnError::NotAProbability(_))
        ));
        let q = vec![0.5f64, 0.5];
        assert!(matches!(
            cross_entropy(&q, 2),
            Err(NnError::TargetOutOfRange { .. })
        ));
    }

    #[test]
    fn zero_weight_softmax_bias_gradient_is_softmax_minus_onehot() {
        let mut model = softmax_dense_model(4, 3, 0);
        if let Layer::Dense(d) = &mut model.layers[0] {
            d.weights.data_mut().fill(0.0);
        }
        let batch = Tensor::new(vec![1, 4], vec![0.3, -0.7, 1.1, 0.2]).unwrap();
        let (_, trace) = model.forward(&batch, Mode::Eval, None).unwrap();
        let (_, grads) = model.backward(&trace, &[2]).unwrap();
        // softmax(0) is uniform over 3 classes.
        let expect = [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0 - 1.0];
        for (g, e) in grads.layers[0].db.iter().zip(expect) {
            assert!((g - e).abs() < 1e-12);
        }
    }

    #[test]
    fn gradients_are_finite_on_random_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let model = Model::new(vec![
            Layer::Conv(glorot_conv(3, 1, (3, 3), ActivationKind::Relu, Some((2, 2)), 0.0, &mut rng)),
            Layer::Dense(glorot_dense(27, 5, ActivationKind::Softmax, 0.0, 1e-3, &mut rng)),
        ])
        .unwrap();
        use rand::Rng;
        let data: Vec<f64> = (0..2 * 64).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let batch = Tensor::new(vec![2, 1, 8, 8], data).unwrap();
        let (_, trace) = model.forward(&batch, Mode::Eval, None).unwrap();
        let (loss, grads) = model.backward(&trace, &[0, 4]).unwrap();
        assert!(loss.is_finite());
        for g in &grads.layers {
            assert!(g.dw.data().iter().all(|v| v.is_finite()));
            assert!(g.db.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn sgd_arithmetic() {
        let mut model = softmax_dense_model(1, 2, 1);
        if let Layer::Dense(d) = &mut model.layers[0] {
            d.weights.data_mut()[0] = 1.0;
            d.weights.data_mut()[1] = 1.0;
        }
        let grads = Gradients {
            layers: vec![LayerGrad {
                dw: Tensor::new(vec![1, 2], vec![0.5, 0.0]).unwrap(),
                db: vec![0.0, 0.0],
            }],
        };
        sgd_step(&mut model, &grads, 0.01);
        if let Layer::Dense(d) = &model.layers[0] {
            assert!((d.weights.data()[0] - 0.995).abs() < 1e-12);
            assert_eq!(d.weights.data()[1], 1.0);
        }
    }

    #[test]
    fn zero_gradients_leave_parameters_unchanged() {
        let mut model = softmax_dense_model(3, 2, 2);
        let before = model.clone();
        let grads = Gradients {
            layers: vec![LayerGrad {
                dw: Tensor::zeros(vec![3, 2]),
                db: vec![0.0; 2],
            }],
        };
        sgd_step(&mut model, &grads, 0.01);
        assert_eq!(model, before);
    }

    #[test]
    fn identical_seeds_give_identical_steps() {
        let run = || {
            let mut model = softmax_dense_model(6, 3, 7);
            let mut rng = ChaCha8Rng::seed_from_u64(55);
            let batch = Tensor::new(vec![2, 6], (0..12).map(|i| (i as f64).sin()).collect()).unwrap();
            let mut losses = Vec::new();
            for _ in 0..5 {
                losses.push(train_step(&mut model, &batch, &[0, 2], 0.01, &mut rng).unwrap());
            }
            (model, losses)
        };
        let (m1, l1) = run();
        let (m2, l2) = run();
        assert_eq!(m1, m2);
        assert_eq!(l1, l2);
    }

    #[test]
    fn l2_penalty_arithmetic() {
        let mut model = softmax_dense_model(1, 1, 3);
        if let Layer::Dense(d) = &mut model.layers[0] {
            d.weights.data_mut()[0] = 2.0;
            d.l2 = 0.001;
        }
        let penalty = l2_penalty(&model);
        assert!((penalty - 0.004).abs() < 1e-12);
        // Gradient contribution: 2 * factor * w = 0.004 on top of the CE part.
        let batch = Tensor::new(vec![1, 1], vec![0.0]).unwrap();
        let (_, trace) = model.forward(&batch, Mode::Eval, None).unwrap();
        let (_, grads) = model.backward(&trace, &[0]).unwrap();
        // CE part is zero here: single class, p = 1, input 0.
        assert!((grads.layers[0].dw.data()[0] - 0.004).abs() < 1e-12);
    }

    #[test]
    fn zero_l2_for_undesignated_layers() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let model: Model<f64> = Model::new(vec![
            Layer::Conv(glorot_conv(2, 1, (2, 2), ActivationKind::Relu, None, 0.0, &mut rng)),
            Layer::Dense(glorot_dense(18, 2, ActivationKind::Softmax, 0.0, 0.0, &mut rng)),
        ])
        .unwrap();
        assert_eq!(l2_penalty(&model), 0.0);
    }

    #[test]
    fn softmax_must_be_last() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let bad = Model::new(vec![
            Layer::Dense(glorot_dense::<f32>(4, 4, ActivationKind::Softmax, 0.0, 0.0, &mut rng)),
            Layer::Dense(glorot_dense::<f32>(4, 2, ActivationKind::Softmax, 0.0, 0.0, &mut rng)),
        ]);
        assert!(matches!(bad, Err(NnError::SoftmaxPlacement)));
    }

    #[test]
    fn static_shapes_match_runtime_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let model: Model<f32> = Model::new(vec![
            Layer::Conv(glorot_conv(4, 2, (3, 3), ActivationKind::Relu, Some((2, 2)), 0.0, &mut rng)),
            Layer::Conv(glorot_conv(6, 4, (2, 2), ActivationKind::Relu, None, 0.0, &mut rng)),
            Layer::Dense(glorot_dense(6 * 4 * 4, 10, ActivationKind::Relu, 0.0, 0.0, &mut rng)),
            Layer::Dense(glorot_dense(10, 3, ActivationKind::Softmax, 0.0, 0.0, &mut rng)),
        ])
        .unwrap();
        let static_shape = model.output_shape(&[2, 12, 12]).unwrap();
        let batch = Tensor::<f32>::zeros(vec![3, 2, 12, 12]);
        let out = model.predict(&batch).unwrap();
        assert_eq!(out.shape()[0], 3);
        assert_eq!(&out.shape()[1..], static_shape.as_slice());
    }

    #[test]
    fn dropout_masks_are_reused_in_backward() {
        // With heavy dropout, x entries zeroed in forward must produce
        // exactly zero weight gradients in the corresponding rows.
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let model = Model::new(vec![Layer::Dense(glorot_dense::<f64>(
            8,
            3,
            ActivationKind::Softmax,
            0.5,
            0.0,
            &mut rng,
        ))])
        .unwrap();
        let batch = Tensor::new(vec![1, 8], vec![1.0; 8]).unwrap();
        let mut train_rng = ChaCha8Rng::seed_from_u64(99);
        let (_, trace) = model.forward(&batch, Mode::Train, Some(&mut train_rng)).unwrap();
        let (_, grads) = model.backward(&trace, &[1]).unwrap();
        let dropped: Vec<usize> = match &trace.caches[0] {
            LayerCache::Dense { mask, .. } => mask
                .as_ref()
                .unwrap()
                .iter()
                .enumerate()
                .filter(|(_, &m)| m == 0.0)
                .map(|(i, _)| i)
                .collect(),
            _ => unreachable!(),
        };
        assert!(!dropped.is_empty());
        let dw = grads.layers[0].dw.view2();
        for &i in &dropped {
            for j in 0..3 {
                assert_eq!(dw[(i, j)], 0.0, "dropped input {i} leaked into dw");
            }
        }
    }
}
