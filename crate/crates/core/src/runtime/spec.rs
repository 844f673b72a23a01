// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture hyperparameters of a model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSpec")]
pub struct ModelSpec {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub rope_theta: f32,
}

// `d_head` may be omitted in JSON and is then derived from d_model / n_heads.
#[derive(Deserialize)]
struct RawSpec {
    n_layers: usize,
    n_heads: usize,
    d_model: usize,
    #[serde(default)]
    d_head: Option<usize>,
    vocab_size: usize,
    max_seq_len: usize,
    #[serde(default = "default_rope_theta")]
    rope_theta: f32,
}

fn default_rope_theta() -> f32 {
    10_000.0
}

impl TryFrom<RawSpec> for ModelSpec {
    type Error = Error;

    fn try_from(raw: RawSpec) -> Result<Self> {
        let d_head = match raw.d_head {
            Some(d) => d,
            None if raw.n_heads > 0 => raw.d_model / raw.n_heads,
            None => 0,
        };
        let spec = ModelSpec {
            n_layers: raw.n_layers,
            n_heads: raw.n_heads,
            d_model: raw.d_model,
            d_head,
            vocab_size: raw.vocab_size,
            max_seq_len: raw.max_seq_len,
            rope_theta: raw.rope_theta,
        };
        spec.validate()?;
        Ok(spec)
    }
}

impl ModelSpec {
    pub fn new(
        n_layers: usize,
        n_heads: usize,
        d_model: usize,
        vocab_size: usize,
        max_seq_len: usize,
    ) -> Result<Self> {
        if n_heads == 0 {
            return Err(Error::InvalidSpec("n_heads must be >= 1".into()));
        }
        let spec = Self {
            n_layers,
            n_heads,
            d_model,
            d_head: d_model / n_heads,
            vocab_size,
            max_seq_len,
            rope_theta: default_rope_theta(),
        };
        spec.validate()?;
        Ok(spec)
    }

    /// The 2-layer, 4-head, d_model 32, vocab 260 model used by tests and demos.
    pub fn toy() -> Self {
        Self::new(2, 4, 32, 260, 128).expect("toy spec is valid")
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("d_head", self.d_head),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, value) in counts {
            if value == 0 {
                return Err(Error::InvalidSpec(format!("{name} must be >= 1")));
            }
        }
        if self.n_heads * self.d_head != self.d_model {
            return Err(Error::InvalidSpec(format!(
                "n_heads ({}) x d_head ({}) != d_model ({})",
                self.n_heads, self.d_head, self.d_model
            )));
        }
        if !self.d_head.is_multiple_of(2) {
            return Err(Error::InvalidSpec(format!(
                "d_head ({}) must be even for rotary positions",
                self.d_head
            )));
        }
        if self.max_seq_len < 2 {
            return Err(Error::InvalidSpec("max_seq_len must be >= 2".into()));
        }
        if self.vocab_size < 258 {
            return Err(Error::InvalidSpec(format!(
                "vocab_size ({}) must cover 256 byte tokens plus BOS/EOS",
                self.vocab_size
            )));
        }
        if !(self.rope_theta.is_finite() && self.rope_theta > 0.0) {
            return Err(Error::InvalidSpec("rope_theta must be positive".into()));
        }
        Ok(())
    }

    /// Hidden width of the SwiGLU MLP.
    pub fn ffn_dim(&self) -> usize {
        2 * self.d_model
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::InvalidSpec(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derives_d_head() {
        let spec = ModelSpec::from_json(
            r#"{"n_layers":2,"n_heads":4,"d_model":32,"vocab_size":260,"max_seq_len":64}"#,
        )
        .unwrap();
        assert_eq!(spec.d_head, 8);
        assert_eq!(spec.rope_theta, 10_000.0);
    }

    #[test]
    fn rejects_inconsistent_heads() {
        let err = ModelSpec::from_json(
            r#"{"n_layers":2,"n_heads":4,"d_model":32,"d_head":6,"vocab_size":260,"max_seq_len":64}"#,
        )
        .unwrap_err();
        assert!(err.to_string().contains("d_model"), "{err}");
    }

    #[test]
    fn rejects_small_vocab_and_seq() {
        assert!(ModelSpec::new(1, 1, 8, 100, 16).is_err());
        assert!(ModelSpec::new(1, 1, 8, 260, 1).is_err());
        assert!(ModelSpec::new(0, 1, 8, 260, 16).is_err());
    }
}
