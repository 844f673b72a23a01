// SPDX-License-Identifier: MIT OR Apache-2.0

//! Parameter storage, seeded initialization and the `HKRT` weight file.
//!
//! # `HKRT` layout (all integers and floats little-endian)
//!
//! | offset | size | field                               |
//! |--------|------|-------------------------------------|
//! | 0      | 4    | magic `HKRT`                        |
//! | 4      | 4    | version (u32, currently 1)          |
//! | 8      | 24   | n_layers, n_heads, d_model, d_head, vocab_size, max_seq_len (u32 each) |
//! | 32     | 4    | rope_theta (f32)                    |
//! | 36     | ...  | parameter blocks, raw f32           |
//!
//! Parameter blocks follow [`ModelWeights::blocks`] order: token embedding
//! `[vocab, d_model]`; then per layer `attn_norm [d_model]`, `wq`, `wk`, `wv`,
//! `wo` (each `[d_model, d_model]`, row-major `[out, in]`), `mlp_norm [d_model]`,
//! `w_gate [ffn, d_model]`, `w_up [ffn, d_model]`, `w_down [d_model, ffn]`;
//! then `final_norm [d_model]` and `lm_head [vocab, d_model]`.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use super::spec::ModelSpec;
use crate::error::{Error, Result};

pub const WEIGHT_MAGIC: &[u8; 4] = b"HKRT";
pub const WEIGHT_VERSION: u32 = 1;
const HEADER_LEN: usize = 36;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub attn_norm: Vec<f32>,
    pub wq: Vec<f32>,
    pub wk: Vec<f32>,
    pub wv: Vec<f32>,
    pub wo: Vec<f32>,
    pub mlp_norm: Vec<f32>,
    pub w_gate: Vec<f32>,
    pub w_up: Vec<f32>,
    pub w_down: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub token_embedding: Vec<f32>,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Vec<f32>,
    pub lm_head: Vec<f32>,
}

impl ModelWeights {
    /// Seeded Gaussian initialization. Same seed and spec give bit-identical weights.
    pub fn seeded(spec: &ModelSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = spec.d_model;
        let ffn = spec.ffn_dim();
        let mut gaussian = |len: usize, std: f32| -> Vec<f32> {
            let dist = Normal::new(0.0f32, std).expect("positive std");
            (0..len).map(|_| dist.sample(&mut rng)).collect()
        };
        let inv_sqrt = |n: usize| 1.0 / (n as f32).sqrt();

        let token_embedding = gaussian(spec.vocab_size * d, 1.0);
        let layers = (0..spec.n_layers)
            .map(|_| LayerWeights {
                attn_norm: vec![1.0; d],
                wq: gaussian(d * d, inv_sqrt(d)),
                wk: gaussian(d * d, inv_sqrt(d)),
                wv: gaussian(d * d, inv_sqrt(d)),
                wo: gaussian(d * d, inv_sqrt(d)),
                mlp_norm: vec![1.0; d],
                w_gate: gaussian(ffn * d, inv_sqrt(d)),
                w_up: gaussian(ffn * d, inv_sqrt(d)),
                w_down: gaussian(d * ffn, inv_sqrt(ffn)),
            })
            .collect();
        let final_norm = vec![1.0; d];
        let lm_head = gaussian(spec.vocab_size * d, inv_sqrt(d));
        Self {
            token_embedding,
            layers,
            final_norm,
            lm_head,
        }
    }

    /// Parameter blocks in file order, with their names.
    pub fn blocks(&self) -> Vec<(String, &[f32])> {
        let mut out: Vec<(String, &[f32])> = vec![("token_embedding".into(), &self.token_embedding)];
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layers.{i}.attn_norm"), &l.attn_norm));
            out.push((format!("layers.{i}.wq"), &l.wq));
            out.push((format!("layers.{i}.wk"), &l.wk));
            out.push((format!("layers.{i}.wv"), &l.wv));
            out.push((format!("layers.{i}.wo"), &l.wo));
            out.push((format!("layers.{i}.mlp_norm"), &l.mlp_norm));
            out.push((format!("layers.{i}.w_gate"), &l.w_gate));
            out.push((format!("layers.{i}.w_up"), &l.w_up));
            out.push((format!("layers.{i}.w_down"), &l.w_down));
        }
        out.push(("final_norm".into(), &self.final_norm));
        out.push(("lm_head".into(), &self.lm_head));
        out
    }

    fn blocks_mut(&mut self) -> Vec<&mut Vec<f32>> {
        let mut out = vec![&mut self.token_embedding];
        for l in &mut self.layers {
            out.extend([
                &mut l.attn_norm,
                &mut l.wq,
                &mut l.wk,
                &mut l.wv,
                &mut l.wo,
                &mut l.mlp_norm,
                &mut l.w_gate,
                &mut l.w_up,
                &mut l.w_down,
            ]);
        }
        out.push(&mut self.final_norm);
        out.push(&mut self.lm_head);
        out
    }

    /// Expected element count of each block for `spec`, in file order.
    fn block_sizes(spec: &ModelSpec) -> Vec<usize> {
        let d = spec.d_model;
        let ffn = spec.ffn_dim();
        let mut sizes = vec![spec.vocab_size * d];
        for _ in 0..spec.n_layers {
            sizes.extend([d, d * d, d * d, d * d, d * d, d, ffn * d, ffn * d, d * ffn]);
        }
        sizes.push(d);
        sizes.push(spec.vocab_size * d);
        sizes
    }

    pub fn check_shapes(&self, spec: &ModelSpec) -> Result<()> {
        if self.layers.len() != spec.n_layers {
            return Err(Error::ShapeMismatch(format!(
                "{} layer blocks for a {}-layer spec",
                self.layers.len(),
                spec.n_layers
            )));
        }
        for ((name, block), want) in self.blocks().into_iter().zip(Self::block_sizes(spec)) {
            if block.len() != want {
                return Err(Error::ShapeMismatch(format!(
                    "{name}: {} elements, expected {want}",
                    block.len()
                )));
            }
        }
        Ok(())
    }

    /// SHA-256 over every parameter's bit pattern, hex encoded.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for (_, block) in self.blocks() {
            for v in block {
                hasher.update(v.to_le_bytes());
            }
        }
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn to_bytes(&self, spec: &ModelSpec) -> Vec<u8> {
        let mut buf = Vec::with_capacity(HEADER_LEN + 4 * Self::block_sizes(spec).iter().sum::<usize>());
        buf.extend_from_slice(WEIGHT_MAGIC);
        buf.extend_from_slice(&WEIGHT_VERSION.to_le_bytes());
        for v in [
            spec.n_layers,
            spec.n_heads,
            spec.d_model,
            spec.d_head,
            spec.vocab_size,
            spec.max_seq_len,
        ] {
            buf.extend_from_slice(&(v as u32).to_le_bytes());
        }
        buf.extend_from_slice(&spec.rope_theta.to_le_bytes());
        for (_, block) in self.blocks() {
            for v in block {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        buf
    }

    /// Parses an `HKRT` file, returning the spec stored in its header.
    pub fn from_bytes(bytes: &[u8]) -> Result<(ModelSpec, Self)> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::WeightFormat(format!(
                "file is {} bytes, shorter than the {HEADER_LEN}-byte header",
                bytes.len()
            )));
        }
        if &bytes[..4] != WEIGHT_MAGIC {
            return Err(Error::WeightFormat("bad magic, expected HKRT".into()));
        }
        let u32_at = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
        let version = u32_at(4);
        if version != WEIGHT_VERSION {
            return Err(Error::WeightFormat(format!("unsupported version {version}")));
        }
        let fields: Vec<usize> = (0..6).map(|i| u32_at(8 + 4 * i) as usize).collect();
        let spec = ModelSpec {
            n_layers: fields[0],
            n_heads: fields[1],
            d_model: fields[2],
            d_head: fields[3],
            vocab_size: fields[4],
            max_seq_len: fields[5],
            rope_theta: f32::from_le_bytes(bytes[32..36].try_into().unwrap()),
        };
        spec.validate()?;

        let sizes = Self::block_sizes(&spec);
        let expected = HEADER_LEN + 4 * sizes.iter().sum::<usize>();
        if bytes.len() != expected {
            return Err(Error::ShapeMismatch(format!(
                "payload is {} bytes, header implies {expected}",
                bytes.len()
            )));
        }
        let mut weights = Self {
            token_embedding: Vec::new(),
            layers: vec![
                LayerWeights {
                    attn_norm: Vec::new(),
                    wq: Vec::new(),
                    wk: Vec::new(),
                    wv: Vec::new(),
                    wo: Vec::new(),
                    mlp_norm: Vec::new(),
                    w_gate: Vec::new(),
                    w_up: Vec::new(),
                    w_down: Vec::new(),
                };
                spec.n_layers
            ],
            final_norm: Vec::new(),
            lm_head: Vec::new(),
        };
        let mut floats = bytes[HEADER_LEN..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()));
        for (block, size) in weights.blocks_mut().into_iter().zip(sizes) {
            block.extend(floats.by_ref().take(size));
        }
        Ok((spec, weights))
    }

    pub fn save(&self, spec: &ModelSpec, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes(spec)).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<(ModelSpec, Self)> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeded_init_is_reproducible() {
        let spec = ModelSpec::toy();
        let a = ModelWeights::seeded(&spec, 7);
        let b = ModelWeights::seeded(&spec, 7);
        assert_eq!(a.checksum(), b.checksum());
        assert_ne!(a.checksum(), ModelWeights::seeded(&spec, 8).checksum());
        a.check_shapes(&spec).unwrap();
    }

    #[test]
    fn bytes_round_trip() {
        let spec = ModelSpec::toy();
        let w = ModelWeights::seeded(&spec, 3);
        let (spec2, w2) = ModelWeights::from_bytes(&w.to_bytes(&spec)).unwrap();
        assert_eq!(spec, spec2);
        assert_eq!(w.checksum(), w2.checksum());
    }

    #[test]
    fn truncated_file_is_shape_mismatch() {
        let spec = ModelSpec::toy();
        let mut bytes = ModelWeights::seeded(&spec, 3).to_bytes(&spec);
        bytes.truncate(bytes.len() - 4);
        assert!(matches!(
            ModelWeights::from_bytes(&bytes),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn bad_magic() {
        let bytes = vec![0u8; 64];
        assert!(matches!(
            ModelWeights::from_bytes(&bytes),
            Err(Error::WeightFormat(_))
        ));
    }
}
