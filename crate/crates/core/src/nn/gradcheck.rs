//! Central-difference gradient checking (double precision).

use super::{Gradients, Layer, Mode, Model, NnError, Tensor};

/// Default perturbation for central differences.
pub const DEFAULT_EPSILON: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub n_params: usize,
    /// (layer index, "w"/"b", parameter index) of the worst disagreement.
    pub worst: Option<(usize, &'static str, usize)>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

fn param_mut<'m>(model: &'m mut Model<f64>, layer: usize, which: &str, idx: usize) -> &'m mut f64 {
    match (&mut model.layers[layer], which) {
        (Layer::Conv(c), "w") => &mut c.weights.data_mut()[idx],
        (Layer::Conv(c), "b") => &mut c.bias[idx],
        (Layer::Dense(d), "w") => &mut d.weights.data_mut()[idx],
        (Layer::Dense(d), "b") => &mut d.bias[idx],
        _ => unreachable!(),
    }
}

/// Central-difference gradients of the eval-mode batch loss with respect
/// to every parameter.
pub fn numeric_gradients(
    model: &Model<f64>,
    batch: &Tensor<f64>,
    targets: &[usize],
    epsilon: f64,
) -> Result<Gradients<f64>, NnError> {
    let mut probe = model.clone();
    let mut layers = Vec::with_capacity(model.layers.len());
    for l in 0..model.layers.len() {
        let (w_shape, w_len, b_len) = match &model.layers[l] {
            Layer::Conv(c) => (c.weights.shape().to_vec(), c.weights.len(), c.bias.len()),
            Layer::Dense(d) => (d.weights.shape().to_vec(), d.weights.len(), d.bias.len()),
        };
        let mut dw = vec![0.0f64; w_len];
        let mut db = vec![0.0f64; b_len];
        for (which, grad) in [("w", &mut dw), ("b", &mut db)] {
            for (i, g) in grad.iter_mut().enumerate() {
                *param_mut(&mut probe, l, which, i) += epsilon;
                let plus = probe.batch_loss(batch, targets)?;
                *param_mut(&mut probe, l, which, i) -= 2.0 * epsilon;
                let minus = probe.batch_loss(batch, targets)?;
                *param_mut(&mut probe, l, which, i) += epsilon;
                *g = (plus - minus) / (2.0 * epsilon);
            }
        }
        layers.push(super::LayerGrad {
            dw: Tensor::new(w_shape, dw)?,
            db,
        });
    }
    Ok(Gradients { layers })
}

/// Worst relative disagreement between two gradient sets. The
/// denominator is floored at 1e-6 so near-zero pairs do not blow up the
/// ratio.
pub fn max_rel_error(
    a: &Gradients<f64>,
    b: &Gradients<f64>,
) -> (f64, Option<(usize, &'static str, usize)>) {
    let mut worst = 0.0f64;
    let mut at = None;
    for (l, (ga, gb)) in a.layers.iter().zip(&b.layers).enumerate() {
        for (which, xs, ys) in [
            ("w", ga.dw.data(), gb.dw.data()),
            ("b", ga.db.as_slice(), gb.db.as_slice()),
        ] {
            for (i, (&x, &y)) in xs.iter().zip(ys).enumerate() {
                let rel = (x - y).abs() / (x.abs() + y.abs()).max(1e-6);
                if rel > worst {
                    worst = rel;
                    at = Some((l, which, i));
                }
            }
        }
    }
    (worst, at)
}

/// Compare analytic backpropagation against central differences over
/// every parameter of the model.
pub fn grad_check(
    model: &Model<f64>,
    batch: &Tensor<f64>,
    targets: &[usize],
    tolerance: f64,
) -> Result<GradCheckReport, NnError> {
    let (_, trace) = model.forward(batch, Mode::Eval, None)?;
    let (_, analytic) = model.backward(&trace, targets)?;
    let numeric = numeric_gradients(model, batch, targets, DEFAULT_EPSILON)?;
    let (max_rel_error, worst) = max_rel_error(&analytic, &numeric);
    Ok(GradCheckReport {
        max_rel_error,
        tolerance,
        n_params: model.parameter_count(),
        worst,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{glorot_conv, glorot_dense, ActivationKind};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_batch(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
        let len = shape.iter().product();
        Tensor::new(shape, (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Small model with the pipeline's layer pattern: conv/pool stacks
    /// into dense layers with dropout fields (inactive at eval) and L2.
    fn tiny_conv_model(seed: u64) -> Model<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Model::new(vec![
            crate::nn::Layer::Conv(glorot_conv(2, 1, (3, 3), ActivationKind::Relu, Some((2, 2)), 0.0, &mut rng)),
            crate::nn::Layer::Conv(glorot_conv(3, 2, (3, 3), ActivationKind::Relu, None, 0.0, &mut rng)),
            crate::nn::Layer::Dense(glorot_dense(3 * 5 * 5, 8, ActivationKind::Relu, 0.5, 1e-3, &mut rng)),
            crate::nn::Layer::Dense(glorot_dense(8, 4, ActivationKind::Softmax, 0.5, 1e-3, &mut rng)),
        ])
        .unwrap()
    }

    #[test]
    fn tiny_conv_model_matches_finite_differences() {
        let model = tiny_conv_model(17);
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let batch = random_batch(&mut rng, vec![3, 1, 16, 16]);
        let report = grad_check(&model, &batch, &[0, 2, 3], 1e-4).unwrap();
        assert!(
            report.passed(),
            "max rel error {} at {:?}",
            report.max_rel_error,
            report.worst
        );
    }

    #[test]
    fn linear_softmax_model_is_accurate_to_1e7() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = Model::new(vec![crate::nn::Layer::Dense(glorot_dense(
            6,
            4,
            ActivationKind::Softmax,
            0.0,
            0.0,
            &mut rng,
        ))])
        .unwrap();
        // Inputs bounded away from zero keep every gradient well scaled.
        let data: Vec<f64> = (0..12)
            .map(|_| {
                let v: f64 = rng.gen_range(0.2..1.0);
                if rng.gen::<bool>() {
                    v
                } else {
                    -v
                }
            })
            .collect();
        let batch = Tensor::new(vec![2, 6], data).unwrap();
        let report = grad_check(&model, &batch, &[1, 3], 1e-7).unwrap();
        assert!(report.passed(), "max rel error {}", report.max_rel_error);
    }

    #[test]
    fn corrupted_gradient_is_detected() {
        let model = tiny_conv_model(23);
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let batch = random_batch(&mut rng, vec![2, 1, 16, 16]);
        let targets = [1usize, 2];
        let (_, trace) = model.forward(&batch, Mode::Eval, None).unwrap();
        let (_, mut analytic) = model.backward(&trace, &targets).unwrap();
        analytic.layers[0].dw.data_mut()[0] += 1.0;
        let numeric = numeric_gradients(&model, &batch, &targets, DEFAULT_EPSILON).unwrap();
        let (err, _) = max_rel_error(&analytic, &numeric);
        assert!(err > 1e-4, "corruption went unnoticed: {err}");
    }
}
