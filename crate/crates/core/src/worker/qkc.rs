// SPDX-License-Identifier: MIT OR Apache-2.0

//! The `.qkc` capture container.
//!
//! ```text
//! magic        4 bytes   "QKC1"
//! run_id       u32 len + UTF-8 bytes
//! n_records    u32
//! n_records x:
//!   name       u32 len + UTF-8 bytes   e.g. "model.layers.3.self_attn.attn"
//!   layer_num  u32
//!   q_shape    3 x u32                 [rows, n_heads, d_head]
//!   q_data     rows*n_heads*d_head x f32
//!   k_shape    3 x u32                 [t, n_heads, d_head]
//!   k_data     t*n_heads*d_head x f32
//! ```
//!
//! Integers and floats are little-endian. A run over several prompts stores
//! one record per (prompt, hooked module), prompt-major; the n-th record
//! carrying a given module name belongs to prompt n. Query rows are the last
//! `rows` positions of the `t` covered by `k_all`.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::run_id::RunId;
use crate::config::EnvSettings;
use crate::error::{Error, Result};
use crate::tensor::Tensor3;

pub const QKC_MAGIC: &[u8; 4] = b"QKC1";

/// Captured queries and keys of one attention module for one prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct QkEntry {
    pub module_name: String,
    pub layer_num: usize,
    /// `[n_selected_q_tokens, n_heads, d_head]`, post-RoPE.
    pub q: Tensor3,
    /// `[t, n_heads, d_head]`, post-RoPE.
    pub k_all: Tensor3,
}

impl QkEntry {
    /// Absolute position of query row `row`.
    pub fn query_position(&self, row: usize) -> usize {
        self.k_all.rows() - self.q.rows() + row
    }

    pub fn n_heads(&self) -> usize {
        self.q.shape[1]
    }

    pub fn d_head(&self) -> usize {
        self.q.shape[2]
    }
}

/// Everything captured during one run.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct QkCapture {
    pub run_id: String,
    pub entries: Vec<QkEntry>,
}

impl QkCapture {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of prompts in the run.
    pub fn batch_count(&self) -> usize {
        let Some(first) = self.entries.first() else {
            return 0;
        };
        self.entries
            .iter()
            .filter(|e| e.module_name == first.module_name)
            .count()
    }

    /// Entries belonging to prompt `batch`, in stored order.
    pub fn batch(&self, batch: usize) -> Vec<&QkEntry> {
        let mut seen = std::collections::HashMap::<&str, usize>::new();
        self.entries
            .iter()
            .filter(|e| {
                let n = seen.entry(e.module_name.as_str()).or_insert(0);
                *n += 1;
                *n - 1 == batch
            })
            .collect()
    }

    pub fn captured_layers(&self) -> Vec<usize> {
        self.entries
            .iter()
            .map(|e| e.layer_num)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    /// Bit-level equality of every tensor.
    pub fn bit_eq(&self, other: &QkCapture) -> bool {
        self.run_id == other.run_id
            && self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|(a, b)| {
                a.module_name == b.module_name
                    && a.layer_num == b.layer_num
                    && a.q.bit_eq(&b.q)
                    && a.k_all.bit_eq(&b.k_all)
            })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(QKC_MAGIC);
        put_str(&mut buf, &self.run_id);
        put_u32(&mut buf, self.entries.len());
        for e in &self.entries {
            put_str(&mut buf, &e.module_name);
            put_u32(&mut buf, e.layer_num);
            put_tensor(&mut buf, &e.q);
            put_tensor(&mut buf, &e.k_all);
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != QKC_MAGIC {
            return Err(Error::CacheFormat("bad magic, expected QKC1".into()));
        }
        let run_id = r.string()?;
        let n = r.u32()?;
        let mut entries = Vec::new();
        for _ in 0..n {
            let module_name = r.string()?;
            let layer_num = r.u32()?;
            let q = r.tensor()?;
            let k_all = r.tensor()?;
            if q.shape[1..] != k_all.shape[1..] {
                return Err(Error::CacheFormat(format!(
                    "{module_name}: q shape {:?} and k_all shape {:?} disagree",
                    q.shape, k_all.shape
                )));
            }
            if q.rows() > k_all.rows() {
                return Err(Error::CacheFormat(format!(
                    "{module_name}: {} query rows but only {} key rows",
                    q.rows(),
                    k_all.rows()
                )));
            }
            entries.push(QkEntry {
                module_name,
                layer_num,
                q,
                k_all,
            });
        }
        if r.pos != bytes.len() {
            return Err(Error::CacheFormat(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(Self { run_id, entries })
    }
}

fn put_u32(buf: &mut Vec<u8>, v: usize) {
    buf.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    put_u32(buf, s.len());
    buf.extend_from_slice(s.as_bytes());
}

fn put_tensor(buf: &mut Vec<u8>, t: &Tensor3) {
    for d in t.shape {
        put_u32(buf, d);
    }
    for v in &t.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::CacheFormat(format!("truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::CacheFormat("string is not UTF-8".into()))
    }

    fn tensor(&mut self) -> Result<Tensor3> {
        let shape = [self.u32()?, self.u32()?, self.u32()?];
        let len = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::CacheFormat(format!("tensor shape {shape:?} overflows")))?;
        let data = self
            .take(len)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Tensor3::new(shape, data))
    }
}

/// `<hook_dir>/qk_<run_id>.qkc`
pub fn cache_path(hook_dir: &Path, run_id: &RunId) -> PathBuf {
    hook_dir.join(format!("qk_{run_id}.qkc"))
}

/// Atomically writes `capture` to its cache path (temp file, then rename).
pub fn flush_capture(capture: &QkCapture, run_id: &RunId, env: &EnvSettings) -> Result<PathBuf> {
    if capture.is_empty() {
        return Err(Error::NothingCaptured);
    }
    let path = cache_path(&env.hook_dir, run_id);
    let io = |e: std::io::Error| Error::io(&path, e);
    let mut tmp = tempfile::NamedTempFile::new_in(&env.hook_dir).map_err(io)?;
    tmp.write_all(&capture.to_bytes()).map_err(io)?;
    tmp.as_file().sync_all().map_err(io)?;
    tmp.persist(&path).map_err(|e| io(e.error))?;
    Ok(path)
}

/// Loads `<hook_dir>/qk_<run_id>.qkc`.
pub fn load_qk_cache(run_id: &RunId, hook_dir: &Path) -> Result<QkCapture> {
    let path = cache_path(hook_dir, run_id);
    if !path.exists() {
        return Err(Error::CacheNotFound { path });
    }
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    QkCapture::from_bytes(&bytes)
}
