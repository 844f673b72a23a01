// SPDX-License-Identifier: MIT OR Apache-2.0

//! Post-hoc analysis over captured states.
//!
//! Everything here reads `.qkc` files (or a model, for steering vectors) and
//! never touches a running generation.

mod actsteer;
mod attntracker;
mod corer;
mod selective;

pub use actsteer::{
    build_steering_vector, build_steering_vector_pooled, residual_at, Pooling, SteeringVector,
    STEERING_MAGIC,
};
pub use attntracker::{
    analyze_injection, attn2score, focus_results, AnalyzerSpec, AttnFunc, FocusResult, FocusScore,
    SpanPair, Verdict,
};
pub(crate) use attntracker::per_head_json as attntracker_per_head_json;
pub use corer::{rerank, rerank_capture, rerank_prompt, RelevanceResult};
pub use selective::{compute_attention_from_qk, selective_attention, HeadRows, SelectiveAttention};

pub use crate::worker::load_qk_cache;
