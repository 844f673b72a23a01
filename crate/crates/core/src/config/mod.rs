// SPDX-License-Identifier: MIT OR Apache-2.0

//! Hook configuration: the JSON config file and the `VLLM_HOOK_*` environment
//! variables that decide where to hook and what to capture.

mod env;
mod file;
mod layer_heads;

pub use env::{
    EnvSettings, ENV_HOOKQ_MODE, ENV_HOOK_DIR, ENV_HOOK_FLAG, ENV_LAYER_HEADS, ENV_RUN_ID,
};
pub use file::{parse_config, ConfigViolation, HeadRef, HookConfig, HookqMode};
pub use layer_heads::{heads_to_layer_map, parse_layer_heads, serialize_layer_heads, LayerHeads};
