//! Versioned binary model checkpoints.
//!
//! Layout: magic `SBNN`, u16 version, one endianness byte (`L`; payloads
//! are little-endian), u32 layer count, per-layer descriptors (kind,
//! activation, shapes, pool dims, L2 and dropout constants), then the
//! row-major float32 parameter payloads in layer order, weights before
//! bias. Byte-stable: identical models serialize to identical bytes.

use std::io::{Read, Write};
use std::path::Path;

use super::{ActivationKind, ConvLayer, DenseLayer, Layer, Model, NnError, Tensor};

const MAGIC: &[u8; 4] = b"SBNN";
const VERSION: u16 = 1;

pub fn save_checkpoint(model: &Model<f32>, path: &Path) -> Result<(), NnError> {
    model.validate()?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.push(b'L');
    buf.extend_from_slice(&(model.layers.len() as u32).to_le_bytes());
    for layer in &model.layers {
        match layer {
            Layer::Conv(c) => {
                buf.push(0u8);
                buf.push(c.activation.code());
                for &d in c.weights.shape() {
                    buf.extend_from_slice(&(d as u32).to_le_bytes());
                }
                let (p0, p1) = c.pool.unwrap_or((0, 0));
                buf.extend_from_slice(&(p0 as u32).to_le_bytes());
                buf.extend_from_slice(&(p1 as u32).to_le_bytes());
                buf.extend_from_slice(&c.l2.to_le_bytes());
            }
            Layer::Dense(d) => {
                buf.push(1u8);
                buf.push(d.activation.code());
                for &s in d.weights.shape() {
                    buf.extend_from_slice(&(s as u32).to_le_bytes());
                }
                buf.extend_from_slice(&d.l2.to_le_bytes());
                buf.extend_from_slice(&(d.input_dropout as f32).to_le_bytes());
            }
        }
    }
    for layer in &model.layers {
        let (w, b) = match layer {
            Layer::Conv(c) => (c.weights.data(), c.bias.as_slice()),
            Layer::Dense(d) => (d.weights.data(), d.bias.as_slice()),
        };
        for &v in w.iter().chain(b) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Model<f32>, NnError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut at = 0usize;
    let mut take = |n: usize| -> Result<&[u8], NnError> {
        if at + n > bytes.len() {
            return Err(NnError::BadCheckpoint("truncated".into()));
        }
        let s = &bytes[at..at + n];
        at += n;
        Ok(s)
    };
    let u32_at = |s: &[u8]| u32::from_le_bytes(s.try_into().unwrap()) as usize;
    let f32_at = |s: &[u8]| f32::from_le_bytes(s.try_into().unwrap());

    if take(4)? != MAGIC {
        return Err(NnError::BadCheckpoint("bad magic".into()));
    }
    let version = u16::from_le_bytes(take(2)?.try_into().unwrap());
    if version != VERSION {
        return Err(NnError::BadCheckpoint(format!("unsupported version {version}")));
    }
    if take(1)?[0] != b'L' {
        return Err(NnError::BadCheckpoint("unsupported endianness".into()));
    }
    let n_layers = u32_at(take(4)?);

    enum Desc {
        Conv { shape: [usize; 4], pool: Option<(usize, usize)>, act: ActivationKind, l2: f32 },
        Dense { shape: [usize; 2], act: ActivationKind, l2: f32, dropout: f32 },
    }
    let mut descs = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let kind = take(1)?[0];
        let act = ActivationKind::from_code(take(1)?[0])
            .ok_or_else(|| NnError::BadCheckpoint("unknown activation".into()))?;
        match kind {
            0 => {
                let shape = [
                    u32_at(take(4)?),
                    u32_at(take(4)?),
                    u32_at(take(4)?),
                    u32_at(take(4)?),
                ];
                let p0 = u32_at(take(4)?);
                let p1 = u32_at(take(4)?);
                let l2 = f32_at(take(4)?);
                let pool = if p0 == 0 || p1 == 0 { None } else { Some((p0, p1)) };
                descs.push(Desc::Conv { shape, pool, act, l2 });
            }
            1 => {
                let shape = [u32_at(take(4)?), u32_at(take(4)?)];
                let l2 = f32_at(take(4)?);
                let dropout = f32_at(take(4)?);
                descs.push(Desc::Dense { shape, act, l2, dropout });
            }
            other => return Err(NnError::BadCheckpoint(format!("unknown layer kind {other}"))),
        }
    }

    let mut layers = Vec::with_capacity(n_layers);
    for desc in &descs {
        match desc {
            Desc::Conv { shape, pool, act, l2 } => {
                let w_len: usize = shape.iter().product();
                let w = take(w_len * 4)?
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect::<Vec<_>>();
                let b = take(shape[0] * 4)?
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect::<Vec<_>>();
                layers.push(Layer::Conv(ConvLayer {
                    weights: Tensor::new(shape.to_vec(), w)?,
                    bias: b,
                    activation: *act,
                    pool: *pool,
                    l2: *l2,
                }));
            }
            Desc::Dense { shape, act, l2, dropout } => {
                let w_len = shape[0] * shape[1];
                let w = take(w_len * 4)?
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect::<Vec<_>>();
                let b = take(shape[1] * 4)?
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect::<Vec<_>>();
                layers.push(Layer::Dense(DenseLayer {
                    weights: Tensor::new(shape.to_vec(), w)?,
                    bias: b,
                    activation: *act,
                    input_dropout: *dropout as f64,
                    l2: *l2,
                }));
            }
        }
    }
    if at != bytes.len() {
        return Err(NnError::BadCheckpoint("trailing bytes".into()));
    }
    Model::new(layers)
}
