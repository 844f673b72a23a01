// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fmt;
use std::fs;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::qkc::cache_path;
use crate::config::EnvSettings;
use crate::error::{Error, Result};

/// Identifier linking one generate call to its capture file.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RunId(String);

impl RunId {
    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }

    /// `<unix millis>-<8 random hex digits>`.
    pub fn fresh() -> Self {
        let millis = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis())
            .unwrap_or(0);
        let suffix: u32 = rand::thread_rng().gen();
        Self(format!("{millis}-{suffix:08x}"))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for RunId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Starts a run: picks an id unused in `hook_dir` and replaces the contents
/// of the run-id file with `<id>\n`.
pub fn begin_run(env: &EnvSettings) -> Result<RunId> {
    env.check_hook_dir()?;
    let id = loop {
        let id = RunId::fresh();
        if !cache_path(&env.hook_dir, &id).exists() {
            break id;
        }
    };
    fs::write(&env.run_id_file, format!("{id}\n")).map_err(|e| Error::io(&env.run_id_file, e))?;
    Ok(id)
}

/// Reads a run-id file, stripping surrounding whitespace.
pub fn read_run_id(path: &Path) -> Result<RunId> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let id = text.trim();
    if id.is_empty() {
        return Err(Error::InvalidInput(format!(
            "run-id file {} is empty",
            path.display()
        )));
    }
    Ok(RunId::new(id))
}
