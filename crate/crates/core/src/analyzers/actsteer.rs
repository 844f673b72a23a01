// SPDX-License-Identifier: MIT OR Apache-2.0

//! Steering vectors from contrastive prompt sets, and the `STV1` file.
//!
//! `STV1` layout, little-endian: magic `STV1`, layer (u32), d_model (u32),
//! then d_model raw f32 values.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::runtime::{HookTap, KvCache, ModelHandle};

pub const STEERING_MAGIC: &[u8; 4] = b"STV1";

/// How a prompt's hidden states are pooled into one vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Pooling {
    #[default]
    LastToken,
    MeanOverPositions,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SteeringVector {
    pub layer: usize,
    pub vector: Vec<f32>,
    /// (positive, negative) prompt counts; `None` for vectors read from disk.
    pub provenance: Option<(usize, usize)>,
}

impl SteeringVector {
    pub fn norm(&self) -> f64 {
        self.vector
            .iter()
            .map(|v| f64::from(*v) * f64::from(*v))
            .sum::<f64>()
            .sqrt()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(12 + 4 * self.vector.len());
        buf.extend_from_slice(STEERING_MAGIC);
        buf.extend_from_slice(&(self.layer as u32).to_le_bytes());
        buf.extend_from_slice(&(self.vector.len() as u32).to_le_bytes());
        for v in &self.vector {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..4] != STEERING_MAGIC {
            return Err(Error::Steering("not an STV1 steering-vector file".into()));
        }
        let layer = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let d_model = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        if bytes.len() != 12 + 4 * d_model {
            return Err(Error::Steering(format!(
                "file holds {} payload bytes, header says d_model {d_model}",
                bytes.len() - 12
            )));
        }
        let vector = bytes[12..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self {
            layer,
            vector,
            provenance: None,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Residual-stream output of `layer` for every prompt position, `[n, d_model]`.
pub fn residual_at(model: &ModelHandle, prompt: &[u32], layer: usize) -> Result<Vec<f32>> {
    let spec = model.spec();
    if layer >= spec.n_layers {
        return Err(Error::UnknownLayer {
            layer,
            n_layers: spec.n_layers,
        });
    }
    let mut captured = Vec::new();
    {
        let mut tap = HookTap::none().on_residual(|site, hidden| {
            if site.layer == layer {
                captured = hidden.to_vec();
            }
        });
        model.forward(prompt, &mut KvCache::new(spec), &mut tap)?;
    }
    Ok(captured)
}

fn pooled_mean(
    model: &ModelHandle,
    prompts: &[Vec<u32>],
    layer: usize,
    pooling: Pooling,
) -> Result<Vec<f64>> {
    let d = model.spec().d_model;
    let mut acc = vec![0.0f64; d];
    for prompt in prompts {
        if prompt.is_empty() {
            return Err(Error::EmptyPrompt);
        }
        let hidden = residual_at(model, prompt, layer)?;
        let n = hidden.len() / d;
        let rows: Vec<&[f32]> = match pooling {
            Pooling::LastToken => vec![&hidden[(n - 1) * d..]],
            Pooling::MeanOverPositions => hidden.chunks_exact(d).collect(),
        };
        for row in &rows {
            for (a, v) in acc.iter_mut().zip(*row) {
                *a += f64::from(*v) / rows.len() as f64;
            }
        }
    }
    for a in &mut acc {
        *a /= prompts.len() as f64;
    }
    Ok(acc)
}

/// Mean last-position hidden state of `positive` minus that of `negative`,
/// read at the output of `layer`.
pub fn build_steering_vector(
    model: &ModelHandle,
    positive: &[Vec<u32>],
    negative: &[Vec<u32>],
    layer: usize,
) -> Result<SteeringVector> {
    build_steering_vector_pooled(model, positive, negative, layer, Pooling::LastToken)
}

pub fn build_steering_vector_pooled(
    model: &ModelHandle,
    positive: &[Vec<u32>],
    negative: &[Vec<u32>],
    layer: usize,
    pooling: Pooling,
) -> Result<SteeringVector> {
    if positive.is_empty() || negative.is_empty() {
        return Err(Error::InvalidInput(
            "steering vectors need at least one positive and one negative prompt".into(),
        ));
    }
    let pos = pooled_mean(model, positive, layer, pooling)?;
    let neg = pooled_mean(model, negative, layer, pooling)?;
    Ok(SteeringVector {
        layer,
        vector: pos.iter().zip(&neg).map(|(p, n)| (p - n) as f32).collect(),
        provenance: Some((positive.len(), negative.len())),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::runtime::{tokenize, ModelSpec};

    fn toy() -> ModelHandle {
        ModelHandle::seeded(ModelSpec::toy(), 7).unwrap()
    }

    #[test]
    fn identical_sets_give_zero() {
        let m = toy();
        let p = vec![tokenize("Answer in French."), tokenize("Be brief.")];
        let v = build_steering_vector(&m, &p, &p, 1).unwrap();
        assert!(v.vector.iter().all(|x| *x == 0.0));
        assert_eq!(v.provenance, Some((2, 2)));
    }

    #[test]
    fn swap_negates() {
        let m = toy();
        let p = vec![tokenize("Use bullet points. Hi")];
        let n = vec![tokenize("Hi"), tokenize("Hello")];
        let a = build_steering_vector(&m, &p, &n, 0).unwrap();
        let b = build_steering_vector(&m, &n, &p, 0).unwrap();
        assert!(a.vector.iter().zip(&b.vector).all(|(x, y)| *x == -*y));
        assert!(a.norm() > 0.0);
        let mean = build_steering_vector_pooled(&m, &p, &n, 0, Pooling::MeanOverPositions).unwrap();
        assert_ne!(mean.vector, a.vector);
    }

    #[test]
    fn errors() {
        let m = toy();
        let p = vec![tokenize("x")];
        assert!(build_steering_vector(&m, &[], &p, 0).is_err());
        assert!(build_steering_vector(&m, &p, &p, 2).is_err());
    }

    #[test]
    fn file_round_trip() {
        let v = SteeringVector {
            layer: 1,
            vector: vec![0.5, -1.25, 3.0],
            provenance: Some((1, 1)),
        };
        let back = SteeringVector::from_bytes(&v.to_bytes()).unwrap();
        assert_eq!(back.layer, 1);
        assert_eq!(back.vector, v.vector);
        assert!(SteeringVector::from_bytes(b"STV1\0\0\0\0\x05\0\0\0").is_err());
    }
}
