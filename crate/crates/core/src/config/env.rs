// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::file::{heads_from_map, HookConfig, HookqMode};
use super::layer_heads::{heads_to_layer_map, parse_layer_heads, LayerHeads};
use crate::error::{Error, Result};

pub const ENV_HOOK_FLAG: &str = "VLLM_HOOK_FLAG";
pub const ENV_HOOK_DIR: &str = "VLLM_HOOK_DIR";
pub const ENV_RUN_ID: &str = "VLLM_RUN_ID";
pub const ENV_HOOKQ_MODE: &str = "VLLM_HOOKQ_MODE";
pub const ENV_LAYER_HEADS: &str = "VLLM_HOOK_LAYER_HEADS";

/// Runtime settings carried by the `VLLM_HOOK_*` variables.
///
/// `hookq_mode` and `layer_heads` are optional here; when set they override
/// the config file.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvSettings {
    /// Capture is enabled while this file exists.
    pub hook_flag_path: PathBuf,
    /// Directory receiving `qk_<run_id>.qkc` files.
    pub hook_dir: PathBuf,
    /// File holding the id of the latest run.
    pub run_id_file: PathBuf,
    pub hookq_mode: Option<HookqMode>,
    pub layer_heads: Option<LayerHeads>,
}

impl EnvSettings {
    /// Settings rooted at `hook_dir` with `hook.flag` and `run_id` inside it.
    pub fn in_dir(hook_dir: impl Into<PathBuf>) -> Self {
        let hook_dir = hook_dir.into();
        Self {
            hook_flag_path: hook_dir.join("hook.flag"),
            run_id_file: hook_dir.join("run_id"),
            hook_dir,
            hookq_mode: None,
            layer_heads: None,
        }
    }

    pub fn from_env() -> Result<Self> {
        Self::from_lookup(|k| std::env::var(k).ok())
    }

    /// Builds settings from any variable source. `VLLM_HOOK_DIR` is required;
    /// the flag and run-id paths default to files inside it.
    pub fn from_lookup(lookup: impl Fn(&str) -> Option<String>) -> Result<Self> {
        let get = |k: &str| lookup(k).filter(|v| !v.trim().is_empty());
        let hook_dir = get(ENV_HOOK_DIR)
            .ok_or_else(|| Error::Env(format!("{ENV_HOOK_DIR} is not set")))?;
        let mut env = Self::in_dir(hook_dir);
        if let Some(p) = get(ENV_HOOK_FLAG) {
            env.hook_flag_path = p.into();
        }
        if let Some(p) = get(ENV_RUN_ID) {
            env.run_id_file = p.into();
        }
        env.hookq_mode = get(ENV_HOOKQ_MODE)
            .map(|m| HookqMode::from_str(m.trim()))
            .transpose()?;
        env.layer_heads = get(ENV_LAYER_HEADS)
            .map(|s| parse_layer_heads(&s))
            .transpose()?;
        Ok(env)
    }

    /// Overlays any variables present in the process environment.
    pub fn overlay_env(mut self) -> Result<Self> {
        self.overlay(|k| std::env::var(k).ok())?;
        Ok(self)
    }

    fn overlay(&mut self, lookup: impl Fn(&str) -> Option<String>) -> Result<()> {
        let get = |k: &str| lookup(k).filter(|v| !v.trim().is_empty());
        if let Some(d) = get(ENV_HOOK_DIR) {
            self.hook_dir = d.into();
        }
        if let Some(p) = get(ENV_HOOK_FLAG) {
            self.hook_flag_path = p.into();
        }
        if let Some(p) = get(ENV_RUN_ID) {
            self.run_id_file = p.into();
        }
        if let Some(m) = get(ENV_HOOKQ_MODE) {
            self.hookq_mode = Some(HookqMode::from_str(m.trim())?);
        }
        if let Some(s) = get(ENV_LAYER_HEADS) {
            self.layer_heads = Some(parse_layer_heads(&s)?);
        }
        Ok(())
    }

    /// Fails unless `hook_dir` is an existing, writable directory.
    pub fn check_hook_dir(&self) -> Result<()> {
        check_writable_dir(&self.hook_dir)
    }

    pub fn flag_active(&self) -> bool {
        self.hook_flag_path.exists()
    }

    /// Env value if set, else the config's.
    pub fn effective_hookq_mode(&self, config: &HookConfig) -> HookqMode {
        self.hookq_mode.unwrap_or(config.hookq_mode)
    }

    /// Env value if set, else the config's important heads grouped by layer.
    pub fn effective_layer_heads(&self, config: &HookConfig) -> LayerHeads {
        self.layer_heads
            .clone()
            .unwrap_or_else(|| heads_to_layer_map(&config.important_heads))
    }

    /// The head profile implied by [`Self::effective_layer_heads`].
    pub fn effective_heads(&self, config: &HookConfig) -> Vec<super::HeadRef> {
        match &self.layer_heads {
            Some(map) => heads_from_map(map),
            None => config.important_heads.clone(),
        }
    }
}

pub(crate) fn check_writable_dir(dir: &Path) -> Result<()> {
    if !dir.is_dir() {
        return Err(Error::Env(format!(
            "hook dir {} does not exist or is not a directory",
            dir.display()
        )));
    }
    tempfile::tempfile_in(dir)
        .map(drop)
        .map_err(|e| Error::Env(format!("hook dir {} is not writable: {e}", dir.display())))
}
