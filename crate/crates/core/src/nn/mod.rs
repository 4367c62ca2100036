//! Minimal dense-tensor neural network engine.
//!
//! Just enough machinery for the pipeline's architecture: valid
//! cross-correlation and dense layers, strided max-pooling, ReLU/softmax,
//! cross-entropy, exact backpropagation, plain SGD, inverted dropout, L2
//! on designated layers, and a central-difference gradient checker.
//!
//! Training runs in single precision; the gradient checker runs the same
//! generic code in double precision.

mod checkpoint;
mod gradcheck;
mod layers;
mod model;
mod tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use gradcheck::{grad_check, max_rel_error, numeric_gradients, GradCheckReport};
pub use layers::{
    conv_forward, dense_forward, glorot_conv, glorot_dense, maxpool, ActivationKind, ConvLayer,
    DenseLayer, Layer,
};
pub use model::{
    cross_entropy, l2_penalty, sgd_step, train_step, Gradients, LayerGrad, Mode, Model, Trace,
};
pub use tensor::Tensor;

use thiserror::Error;

/// Floating point scalar the engine is generic over (f32 or f64).
pub trait Scalar: ndarray::NdFloat + num_traits::FromPrimitive {}
impl Scalar for f32 {}
impl Scalar for f64 {}

/// Samples per work unit when layer math fans out across threads. Fixed
/// so results do not depend on the thread count.
pub(crate) const PAR_CHUNK: usize = 8;

/// Probability floor inside the cross-entropy loss.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("tensor data length {len} does not match shape {shape:?}")]
    BadTensor { shape: Vec<usize>, len: usize },
    #[error("target class {target} out of range for {n_classes} outputs")]
    TargetOutOfRange { target: usize, n_classes: usize },
    #[error("input does not sum to 1 (sum {0})")]
    NotAProbability(f64),
    #[error("softmax is only valid on the final layer")]
    SoftmaxPlacement,
    #[error("dropout rate {0} outside [0, 1)")]
    BadDropoutRate(f64),
    #[error("model has no layers")]
    EmptyModel,
    #[error("checkpoint i/o: {0}")]
    CheckpointIo(#[from] std::io::Error),
    #[error("malformed checkpoint: {0}")]
    BadCheckpoint(String),
}

/// Inverted dropout mask: entries are 0 with probability `rate`,
/// otherwise `1 / (1 - rate)`. Applied in training only; inference uses
/// no mask and no scaling.
pub fn dropout_mask<F: Scalar>(
    len: usize,
    rate: f64,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<Vec<F>, NnError> {
    use rand::Rng;
    if !(0.0..1.0).contains(&rate) {
        return Err(NnError::BadDropoutRate(rate));
    }
    let keep = F::from(1.0 / (1.0 - rate)).unwrap();
    Ok((0..len)
        .map(|_| {
            if rng.gen::<f64>() < rate {
                F::zero()
            } else {
                keep
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn zero_rate_is_all_ones() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mask: Vec<f32> = dropout_mask(1000, 0.0, &mut rng).unwrap();
        assert!(mask.iter().all(|&m| m == 1.0));
    }

    #[test]
    fn survivors_are_scaled_by_two_at_half_rate() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let mask: Vec<f32> = dropout_mask(1000, 0.5, &mut rng).unwrap();
        assert!(mask.iter().all(|&m| m == 0.0 || m == 2.0));
    }

    #[test]
    fn survival_fraction_matches_rate() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mask: Vec<f64> = dropout_mask(100_000, 0.5, &mut rng).unwrap();
        let survived = mask.iter().filter(|&&m| m > 0.0).count();
        let fraction = survived as f64 / mask.len() as f64;
        assert!((fraction - 0.5).abs() <= 0.01, "{fraction}");
    }

    #[test]
    fn invalid_rate_is_rejected() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        assert!(dropout_mask::<f32>(8, 1.0, &mut rng).is_err());
        assert!(dropout_mask::<f32>(8, -0.1, &mut rng).is_err());
    }
}
