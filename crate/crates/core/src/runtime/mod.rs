// SPDX-License-Identifier: MIT OR Apache-2.0

//! Decoder-only transformer runtime: pre-norm blocks with RMSNorm, RoPE and a
//! SwiGLU MLP, plus greedy decoding and hook taps.

mod attention;
mod generate;
mod model;
mod spec;
mod tokenizer;
mod weights;

pub use attention::attention_reference;
pub use generate::{generate_greedy, GenerationResult};
pub use model::{
    attn_module_name, residual_module_name, AttnEvent, HookTap, KvCache, ModelHandle, QkEvent,
    ResidualSite,
};
pub use spec::ModelSpec;
pub use tokenizer::{detokenize, detokenize_bytes, tokenize, BOS_TOKEN, EOS_TOKEN};
pub use weights::{LayerWeights, ModelWeights, WEIGHT_MAGIC, WEIGHT_VERSION};
