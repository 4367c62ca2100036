//! The 5-layer convolutional architecture and clip-level prediction.
//!
//! Three conv layers (24/48/48 filters of 5x5, strided (4,2) max-pool
//! after the first two) feed two dense layers (64 hidden units, then the
//! class posteriors under softmax). Dropout 0.5 on the input of both
//! dense layers, L2 1e-3 on their weights.
//!
//! Patches are standardized (zero mean, unit variance per patch) before
//! entering the network; the same transform is applied at training and
//! prediction time.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::features::{all_patches, MelSpectrogram, TFPatch, N_BANDS, PATCH_FRAMES};
use crate::nn::{glorot_conv, glorot_dense, ActivationKind, Layer, Model, NnError, Tensor};

/// Patches per forward batch during clip prediction; bounds memory for
/// long clips.
const PREDICT_BATCH: usize = 64;

/// Floor on the per-patch standard deviation (constant patches map to
/// all zeros).
pub const STD_FLOOR: f32 = 1e-6;

#[derive(Debug, Error)]
pub enum SbcnnError {
    #[error("patch shape {0:?} is not ({PATCH_FRAMES}, {N_BANDS})")]
    BadPatchShape(Vec<usize>),
    #[error("model input shape mismatch: {0}")]
    Incompatible(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Architecture constants. `n_classes` is configurable for synthetic
/// datasets; everything else mirrors the fixed layer table.
#[derive(Debug, Clone, PartialEq)]
pub struct SbcnnConfig {
    pub n_classes: usize,
    pub input_shape: (usize, usize, usize),
    pub dropout: f64,
    pub l2: f32,
}

impl Default for SbcnnConfig {
    fn default() -> Self {
        SbcnnConfig {
            n_classes: 10,
            input_shape: (1, PATCH_FRAMES, N_BANDS),
            dropout: 0.5,
            l2: 1e-3,
        }
    }
}

/// Build the 5-layer model with Glorot-initialized weights. Panics if
/// the composed shape chain deviates from the architecture's contract;
/// with the default config that chain is
/// (1,128,128) -> (24,31,62) -> (48,6,29) -> (48,2,25) -> 2400 -> 64 -> n.
pub fn build(config: &SbcnnConfig, seed: u64) -> Model<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (in_ch, d0, d1) = config.input_shape;

    let conv1 = glorot_conv(24, in_ch, (5, 5), ActivationKind::Relu, Some((4, 2)), 0.0, &mut rng);
    let conv2 = glorot_conv(48, 24, (5, 5), ActivationKind::Relu, Some((4, 2)), 0.0, &mut rng);
    let conv3 = glorot_conv(48, 48, (5, 5), ActivationKind::Relu, None, 0.0, &mut rng);

    let mut shape = vec![in_ch, d0, d1];
    for conv in [&conv1, &conv2, &conv3] {
        shape = conv.output_shape(&shape).expect("conv chain composes");
    }
    let flat: usize = shape.iter().product();

    let dense4 = glorot_dense(flat, 64, ActivationKind::Relu, config.dropout, config.l2, &mut rng);
    let dense5 = glorot_dense(
        64,
        config.n_classes,
        ActivationKind::Softmax,
        config.dropout,
        config.l2,
        &mut rng,
    );

    let model = Model::new(vec![
        Layer::Conv(conv1),
        Layer::Conv(conv2),
        Layer::Conv(conv3),
        Layer::Dense(dense4),
        Layer::Dense(dense5),
    ])
    .expect("architecture is structurally valid");

    if config.input_shape == SbcnnConfig::default().input_shape {
        let expected: [&[usize]; 5] = [
            &[24, 1, 5, 5],
            &[48, 24, 5, 5],
            &[48, 48, 5, 5],
            &[2400, 64],
            &[64, config.n_classes],
        ];
        for (layer, want) in model.layers.iter().zip(expected) {
            let got = match layer {
                Layer::Conv(c) => c.weights.shape(),
                Layer::Dense(d) => d.weights.shape(),
            };
            assert_eq!(got, want, "weight shape deviates from the layer table");
        }
        assert_eq!(
            model.output_shape(&[in_ch, d0, d1]).expect("forward chain composes"),
            vec![config.n_classes]
        );
    }
    model
}

/// Zero-mean, unit-variance scaling of one patch. This is the network's
/// input conditioning; keep it identical between training and inference.
pub fn standardize_patch(values: &mut [f32]) {
    let n = values.len() as f64;
    let mean = values.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = values.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let std = (var.sqrt() as f32).max(STD_FLOOR);
    let mean = mean as f32;
    for v in values {
        *v = (*v - mean) / std;
    }
}

fn patch_batch(model: &Model<f32>, patches: &[&TFPatch]) -> Result<Tensor<f32>, SbcnnError> {
    let (in_ch, d0, d1) = (1usize, PATCH_FRAMES, N_BANDS);
    let mut data = Vec::with_capacity(patches.len() * d0 * d1);
    for patch in patches {
        if patch.values.shape() != [d0, d1] {
            return Err(SbcnnError::BadPatchShape(patch.values.shape().to_vec()));
        }
        let mut values: Vec<f32> = patch.values.iter().copied().collect();
        standardize_patch(&mut values);
        data.extend_from_slice(&values);
    }
    let batch = Tensor::new(vec![patches.len(), in_ch, d0, d1], data)?;
    model
        .output_shape(&[in_ch, d0, d1])
        .map_err(|e| SbcnnError::Incompatible(e.to_string()))?;
    Ok(batch)
}

/// Softmax posterior for a single patch (inference mode, no dropout).
pub fn predict_patch(model: &Model<f32>, patch: &TFPatch) -> Result<Vec<f32>, SbcnnError> {
    let batch = patch_batch(model, &[patch])?;
    let out = model.predict(&batch)?;
    Ok(out.data().to_vec())
}

/// Clip-level prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipPrediction {
    /// Argmax of the mean activation; ties break toward the lowest index.
    pub class: usize,
    /// Mean softmax posterior over all 1-frame-hop patches.
    pub mean_activation: Vec<f32>,
}

/// Average the patch posteriors over every 1-frame-hop patch of the
/// spectrogram and pick the class with the highest mean activation.
pub fn predict_clip(model: &Model<f32>, spec: &MelSpectrogram) -> Result<ClipPrediction, SbcnnError> {
    let patches = all_patches(spec);

    let mut mean: Option<Vec<f64>> = None;
    for chunk in patches.chunks(PREDICT_BATCH) {
        let refs: Vec<&TFPatch> = chunk.iter().collect();
        let batch = patch_batch(model, &refs)?;
        let out = model.predict(&batch)?;
        let view = out.view2();
        let mean = mean.get_or_insert_with(|| vec![0.0f64; view.ncols()]);
        for row in view.rows() {
            for (m, &p) in mean.iter_mut().zip(row.iter()) {
                *m += p as f64;
            }
        }
    }
    let mean = mean.expect("at least one padded patch");
    let n = patches.len() as f64;
    let mean_activation: Vec<f32> = mean.iter().map(|&m| (m / n) as f32).collect();

    let mut class = 0usize;
    for (i, &p) in mean_activation.iter().enumerate() {
        if p > mean_activation[class] {
            class = i;
        }
    }
    Ok(ClipPrediction {
        class,
        mean_activation,
    })
}
