// SPDX-License-Identifier: MIT OR Apache-2.0

//! Programmable internal-state hooks for a small decoder-only transformer.
//!
//! The crate is split along the lifecycle of a hooked model:
//!
//! - [`runtime`]: the transformer itself (weights, forward pass, greedy decoding)
//!   with named tap points on every attention module and residual stream.
//! - [`config`]: the JSON hook config and the `VLLM_HOOK_*` environment protocol.
//! - [`worker`]: installs passive Q/K probes and active steering on a model,
//!   gates capture on a flag file and persists `qk_<run_id>.qkc` caches.
//! - [`analyzers`]: rebuilds selective attention from caches and turns it into
//!   focus scores, document relevance, or steering vectors.
//! - [`orchestrator`]: the [`HookLlm`](orchestrator::HookLlm) facade and the
//!   worker/analyzer registry.

pub mod analyzers;
pub mod config;
pub mod error;
pub mod orchestrator;
pub mod runtime;
pub mod tensor;
pub mod worker;

pub use error::{Error, Result};
