// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::runtime::ModelSpec;

/// One attention head, addressed as `[layer, head]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct HeadRef {
    pub layer: usize,
    pub head: usize,
}

impl HeadRef {
    pub fn new(layer: usize, head: usize) -> Self {
        Self { layer, head }
    }
}

impl fmt::Display for HeadRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.layer, self.head)
    }
}

/// Which query rows a probe keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HookqMode {
    /// Only the final prompt position.
    LastToken,
    /// Every prompt position.
    #[default]
    AllTokens,
}

impl FromStr for HookqMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "last_token" => Ok(Self::LastToken),
            "all_tokens" => Ok(Self::AllTokens),
            other => Err(Error::Config(format!(
                "unknown hookq_mode '{other}' (expected last_token or all_tokens)"
            ))),
        }
    }
}

impl fmt::Display for HookqMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::LastToken => "last_token",
            Self::AllTokens => "all_tokens",
        })
    }
}

/// Parsed hook config file.
#[derive(Debug, Clone, PartialEq)]
pub struct HookConfig {
    pub model_name: String,
    pub model_id: String,
    pub important_heads: Vec<HeadRef>,
    pub hookq_mode: HookqMode,
    /// Extend Q capture past the prefill pass to every decode step.
    pub capture_decode_steps: bool,
    /// Top-level keys this crate does not interpret, kept verbatim.
    pub extra: BTreeMap<String, Value>,
}

#[derive(Deserialize)]
struct RawConfig {
    model_info: RawModelInfo,
    #[serde(default)]
    params: Option<RawParams>,
    #[serde(default)]
    hookq: Option<RawHookq>,
    #[serde(flatten)]
    extra: BTreeMap<String, Value>,
}

#[derive(Deserialize)]
struct RawModelInfo {
    name: String,
    model_id: String,
}

#[derive(Deserialize)]
struct RawParams {
    #[serde(default)]
    important_heads: Vec<Value>,
}

#[derive(Deserialize)]
struct RawHookq {
    #[serde(default)]
    hookq_mode: Option<String>,
    #[serde(default)]
    capture_decode_steps: bool,
}

fn parse_head(entry: &Value) -> Result<HeadRef> {
    let bad = || {
        Error::Config(format!(
            "important_heads entry {entry} is not a [layer, head] pair of non-negative integers"
        ))
    };
    let pair = entry.as_array().ok_or_else(bad)?;
    if pair.len() != 2 {
        return Err(bad());
    }
    let layer = pair[0].as_u64().ok_or_else(bad)?;
    let head = pair[1].as_u64().ok_or_else(bad)?;
    Ok(HeadRef::new(layer as usize, head as usize))
}

/// Parses a hook config document.
///
/// Missing `hookq` means `all_tokens`. Duplicate heads are dropped with a
/// warning, keeping first occurrences in order.
pub fn parse_config(text: &str) -> Result<HookConfig> {
    let raw: RawConfig =
        serde_json::from_str(text).map_err(|e| Error::Config(format!("malformed config: {e}")))?;

    let mut seen = HashSet::new();
    let mut important_heads = Vec::new();
    for entry in raw.params.map(|p| p.important_heads).unwrap_or_default() {
        let head = parse_head(&entry)?;
        if seen.insert(head) {
            important_heads.push(head);
        } else {
            tracing::warn!(%head, "duplicate important head dropped");
        }
    }

    let (hookq_mode, capture_decode_steps) = match raw.hookq {
        Some(h) => (
            h.hookq_mode
                .as_deref()
                .map(HookqMode::from_str)
                .transpose()?
                .unwrap_or_default(),
            h.capture_decode_steps,
        ),
        None => (HookqMode::AllTokens, false),
    };

    Ok(HookConfig {
        model_name: raw.model_info.name,
        model_id: raw.model_info.model_id,
        important_heads,
        hookq_mode,
        capture_decode_steps,
        extra: raw.extra,
    })
}

/// Flattens a layer map into head refs, layer-major.
pub(crate) fn heads_from_map(map: &super::LayerHeads) -> Vec<HeadRef> {
    map.iter()
        .flat_map(|(&layer, heads)| heads.iter().map(move |&h| HeadRef::new(layer, h)))
        .collect()
}

/// A head that does not exist in the model it is checked against.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ConfigViolation {
    LayerOutOfRange { head: HeadRef, n_layers: usize },
    HeadOutOfRange { head: HeadRef, n_heads: usize },
}

impl fmt::Display for ConfigViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::LayerOutOfRange { head, n_layers } => write!(
                f,
                "[{}, {}]: layer {} out of range (model has {n_layers} layers)",
                head.layer, head.head, head.layer
            ),
            Self::HeadOutOfRange { head, n_heads } => write!(
                f,
                "[{}, {}]: head {} out of range (model has {n_heads} heads)",
                head.layer, head.head, head.head
            ),
        }
    }
}

impl HookConfig {
    /// Every important head checked against `spec`; an empty list means valid.
    pub fn validate(&self, spec: &ModelSpec) -> Vec<ConfigViolation> {
        let mut out = Vec::new();
        for &head in &self.important_heads {
            if head.layer >= spec.n_layers {
                out.push(ConfigViolation::LayerOutOfRange {
                    head,
                    n_layers: spec.n_layers,
                });
            }
            if head.head >= spec.n_heads {
                out.push(ConfigViolation::HeadOutOfRange {
                    head,
                    n_heads: spec.n_heads,
                });
            }
        }
        out
    }

    /// Minimal config for programmatic use.
    pub fn new(name: &str, important_heads: Vec<HeadRef>, hookq_mode: HookqMode) -> Self {
        Self {
            model_name: name.to_string(),
            model_id: name.to_string(),
            important_heads,
            hookq_mode,
            capture_decode_steps: false,
            extra: BTreeMap::new(),
        }
    }
}
