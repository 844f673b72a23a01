// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::PathBuf;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),

    #[error("weight file shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("weight file format error: {0}")]
    WeightFormat(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("sequence overflow: {len} positions exceed max_seq_len {max}")]
    SequenceOverflow { len: usize, max: usize },

    #[error("prompt is empty")]
    EmptyPrompt,

    #[error("token id {id} out of range for vocab of {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("layer-heads string error: {0}")]
    LayerHeads(String),

    #[error("environment error: {0}")]
    Env(String),

    #[error("layer {layer} does not exist (model has {n_layers} layers)")]
    UnknownLayer { layer: usize, n_layers: usize },

    #[error("probes are already installed on this worker")]
    ProbesInstalled,

    #[error("nothing captured")]
    NothingCaptured,

    #[error("Q/K cache file not found: {}", path.display())]
    CacheNotFound { path: PathBuf },

    #[error("cache format error: {0}")]
    CacheFormat(String),

    #[error("head {head} out of range (captured tensors have {n_heads} heads)")]
    HeadOutOfRange { head: usize, n_heads: usize },

    #[error("layer {layer} not captured; captured layers: {captured:?}")]
    LayerNotCaptured { layer: usize, captured: Vec<usize> },

    #[error("span error: {0}")]
    Span(String),

    #[error("unknown attn_func '{0}' (known: sum_normalize)")]
    UnknownAttnFunc(String),

    #[error("unknown {kind} '{name}'; available: {available:?}")]
    UnknownName {
        kind: &'static str,
        name: String,
        available: Vec<String>,
    },

    #[error("{kind} '{name}' is already registered")]
    DuplicateName { kind: &'static str, name: String },

    #[error("invalid mode/plan combination: {0}")]
    Mode(String),

    #[error("steering error: {0}")]
    Steering(String),

    #[error("attention over an empty key set")]
    EmptyAttention,

    #[error("invalid input: {0}")]
    InvalidInput(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}
