// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::Path;

use super::spec::ModelSpec;
use super::weights::ModelWeights;
use crate::error::{Error, Result};
use crate::tensor::{dot, matvec, rms_norm, silu, softmax_in_place};

const NORM_EPS: f32 = 1e-5;

/// Hook-point name of layer `layer`'s attention module.
pub fn attn_module_name(layer: usize) -> String {
    format!("model.layers.{layer}.self_attn.attn")
}

/// Hook-point name of layer `layer`'s residual-stream output.
pub fn residual_module_name(layer: usize) -> String {
    format!("model.layers.{layer}")
}

/// An immutable, loaded model. Safe to share across threads.
#[derive(Debug, Clone)]
pub struct ModelHandle {
    spec: ModelSpec,
    weights: ModelWeights,
    module_names: Vec<String>,
    inv_freq: Vec<f32>,
}

impl ModelHandle {
    pub fn from_weights(spec: ModelSpec, weights: ModelWeights) -> Result<Self> {
        spec.validate()?;
        weights.check_shapes(&spec)?;
        let module_names = (0..spec.n_layers)
            .flat_map(|l| [attn_module_name(l), residual_module_name(l)])
            .collect();
        let half = spec.d_head / 2;
        let inv_freq = (0..half)
            .map(|i| spec.rope_theta.powf(-((2 * i) as f32) / spec.d_head as f32))
            .collect();
        Ok(Self {
            spec,
            weights,
            module_names,
            inv_freq,
        })
    }

    pub fn seeded(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        Self::from_weights(spec, ModelWeights::seeded(&spec, seed))
    }

    /// Loads an `HKRT` file and checks that its header matches `spec`.
    pub fn from_file(spec: ModelSpec, path: &Path) -> Result<Self> {
        let (file_spec, weights) = ModelWeights::load(path)?;
        if file_spec != spec {
            return Err(Error::ShapeMismatch(format!(
                "weight file header {file_spec:?} does not match requested spec {spec:?}"
            )));
        }
        Self::from_weights(spec, weights)
    }

    /// Loads an `HKRT` file, taking the spec from its header.
    pub fn load(path: &Path) -> Result<Self> {
        let (spec, weights) = ModelWeights::load(path)?;
        Self::from_weights(spec, weights)
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn weights(&self) -> &ModelWeights {
        &self.weights
    }

    /// All hook-point names: `model.layers.<i>.self_attn.attn` and `model.layers.<i>`.
    pub fn module_names(&self) -> &[String] {
        &self.module_names
    }

    pub fn checksum(&self) -> String {
        self.weights.checksum()
    }

    /// Runs `new_tokens` through the model, extending `cache`.
    ///
    /// Returns row-major logits `[new_tokens.len(), vocab_size]`.
    pub fn forward(
        &self,
        new_tokens: &[u32],
        cache: &mut KvCache,
        tap: &mut HookTap<'_>,
    ) -> Result<Vec<f32>> {
        let spec = &self.spec;
        let (d, n_heads, d_head) = (spec.d_model, spec.n_heads, spec.d_head);
        let n_new = new_tokens.len();
        if n_new == 0 {
            return Err(Error::InvalidInput("forward called with no tokens".into()));
        }
        if cache.layers.len() != spec.n_layers {
            return Err(Error::InvalidInput("KV cache built for another model".into()));
        }
        let start = cache.len();
        let total = start + n_new;
        if total > spec.max_seq_len {
            return Err(Error::SequenceOverflow {
                len: total,
                max: spec.max_seq_len,
            });
        }
        if let Some(&id) = new_tokens.iter().find(|&&t| t as usize >= spec.vocab_size) {
            return Err(Error::TokenOutOfRange {
                id,
                vocab: spec.vocab_size,
            });
        }

        let mut x: Vec<f32> = Vec::with_capacity(n_new * d);
        for &t in new_tokens {
            let t = t as usize;
            x.extend_from_slice(&self.weights.token_embedding[t * d..(t + 1) * d]);
        }

        let ffn = spec.ffn_dim();
        let scale = 1.0 / (d_head as f32).sqrt();
        let mut normed = vec![0.0f32; d];
        let mut q = vec![0.0f32; n_new * d];
        let mut k_new = vec![0.0f32; n_new * d];
        let mut v_new = vec![0.0f32; n_new * d];
        let mut gate = vec![0.0f32; ffn];
        let mut up = vec![0.0f32; ffn];
        let mut proj = vec![0.0f32; d];

        for (layer, lw) in self.weights.layers.iter().enumerate() {
            for i in 0..n_new {
                let row = &x[i * d..(i + 1) * d];
                rms_norm(row, &lw.attn_norm, NORM_EPS, &mut normed);
                matvec(&lw.wq, &normed, &mut q[i * d..(i + 1) * d]);
                matvec(&lw.wk, &normed, &mut k_new[i * d..(i + 1) * d]);
                matvec(&lw.wv, &normed, &mut v_new[i * d..(i + 1) * d]);
                let pos = start + i;
                for h in 0..n_heads {
                    let span = i * d + h * d_head..i * d + (h + 1) * d_head;
                    self.apply_rope(&mut q[span.clone()], pos);
                    self.apply_rope(&mut k_new[span], pos);
                }
            }

            let kv = &mut cache.layers[layer];
            kv.keys.extend_from_slice(&k_new);
            kv.values.extend_from_slice(&v_new);

            if !tap.qk_observers.is_empty() {
                let name = attn_module_name(layer);
                let event = QkEvent {
                    module_name: &name,
                    layer,
                    start_pos: start,
                    n_heads,
                    d_head,
                    q: &q,
                    k_all: &kv.keys,
                };
                for obs in tap.qk_observers.iter_mut() {
                    obs(&event);
                }
            }

            // probs: [n_heads, n_new, total], zero above the causal diagonal
            let mut probs = vec![0.0f32; n_heads * n_new * total];
            let mut attn_out = vec![0.0f32; n_new * d];
            for h in 0..n_heads {
                for i in 0..n_new {
                    let visible = start + i + 1;
                    let qv = &q[i * d + h * d_head..i * d + (h + 1) * d_head];
                    let row_off = (h * n_new + i) * total;
                    let row = &mut probs[row_off..row_off + visible];
                    for (j, p) in row.iter_mut().enumerate() {
                        let kv_off = j * d + h * d_head;
                        *p = dot(qv, &kv.keys[kv_off..kv_off + d_head]) * scale;
                    }
                    softmax_in_place(row);
                    let out = &mut attn_out[i * d + h * d_head..i * d + (h + 1) * d_head];
                    for (j, &p) in row.iter().enumerate() {
                        let kv_off = j * d + h * d_head;
                        for (o, v) in out.iter_mut().zip(&kv.values[kv_off..kv_off + d_head]) {
                            *o += p * v;
                        }
                    }
                }
            }
            if !tap.attn_observers.is_empty() {
                let event = AttnEvent {
                    layer,
                    start_pos: start,
                    n_new,
                    n_heads,
                    total,
                    probs: &probs,
                };
                for obs in tap.attn_observers.iter_mut() {
                    obs(&event);
                }
            }

            for i in 0..n_new {
                let row = &mut x[i * d..(i + 1) * d];
                matvec(&lw.wo, &attn_out[i * d..(i + 1) * d], &mut proj);
                for (r, p) in row.iter_mut().zip(&proj) {
                    *r += p;
                }
                rms_norm(row, &lw.mlp_norm, NORM_EPS, &mut normed);
                matvec(&lw.w_gate, &normed, &mut gate);
                matvec(&lw.w_up, &normed, &mut up);
                for (g, u) in gate.iter_mut().zip(&up) {
                    *g = silu(*g) * u;
                }
                matvec(&lw.w_down, &gate, &mut proj);
                for (r, p) in row.iter_mut().zip(&proj) {
                    *r += p;
                }
            }

            if !tap.residual_hooks.is_empty() {
                let site = ResidualSite {
                    layer,
                    start_pos: start,
                    n_new,
                    d_model: d,
                };
                for hook in tap.residual_hooks.iter_mut() {
                    hook(&site, &mut x);
                }
            }
        }

        let mut logits = vec![0.0f32; n_new * spec.vocab_size];
        for i in 0..n_new {
            rms_norm(&x[i * d..(i + 1) * d], &self.weights.final_norm, NORM_EPS, &mut normed);
            matvec(
                &self.weights.lm_head,
                &normed,
                &mut logits[i * spec.vocab_size..(i + 1) * spec.vocab_size],
            );
        }
        Ok(logits)
    }

    // Half-split rotary embedding: pairs (i, i + d_head/2).
    fn apply_rope(&self, v: &mut [f32], pos: usize) {
        let half = v.len() / 2;
        for (i, freq) in self.inv_freq.iter().enumerate() {
            let angle = pos as f32 * freq;
            let (sin, cos) = angle.sin_cos();
            let (a, b) = (v[i], v[i + half]);
            v[i] = a * cos - b * sin;
            v[i + half] = a * sin + b * cos;
        }
    }
}

#[derive(Debug, Clone, Default)]
struct LayerKv {
    keys: Vec<f32>,
    values: Vec<f32>,
}

/// Per-layer cached keys and values, stored position-major as `[t, n_heads, d_head]`.
#[derive(Debug, Clone)]
pub struct KvCache {
    layers: Vec<LayerKv>,
    row_len: usize,
}

impl KvCache {
    pub fn new(spec: &ModelSpec) -> Self {
        Self {
            layers: vec![LayerKv::default(); spec.n_layers],
            row_len: spec.d_model,
        }
    }

    /// Number of positions processed so far (identical across layers).
    pub fn len(&self) -> usize {
        self.layers.first().map_or(0, |l| l.keys.len() / self.row_len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn keys(&self, layer: usize) -> &[f32] {
        &self.layers[layer].keys
    }

    pub fn values(&self, layer: usize) -> &[f32] {
        &self.layers[layer].values
    }
}

/// Post-RoPE queries for the new positions and keys for every position so far.
#[derive(Debug)]
pub struct QkEvent<'a> {
    pub module_name: &'a str,
    pub layer: usize,
    /// Absolute position of the first new token.
    pub start_pos: usize,
    pub n_heads: usize,
    pub d_head: usize,
    /// `[n_new, n_heads, d_head]`
    pub q: &'a [f32],
    /// `[t, n_heads, d_head]`
    pub k_all: &'a [f32],
}

impl QkEvent<'_> {
    pub fn n_new(&self) -> usize {
        self.q.len() / (self.n_heads * self.d_head)
    }

    pub fn total(&self) -> usize {
        self.k_all.len() / (self.n_heads * self.d_head)
    }
}

/// Post-softmax attention computed inside the forward pass.
#[derive(Debug)]
pub struct AttnEvent<'a> {
    pub layer: usize,
    pub start_pos: usize,
    pub n_new: usize,
    pub n_heads: usize,
    pub total: usize,
    /// `[n_heads, n_new, total]`, exactly zero for keys after the query position.
    pub probs: &'a [f32],
}

impl AttnEvent<'_> {
    pub fn row(&self, head: usize, new_index: usize) -> &[f32] {
        let off = (head * self.n_new + new_index) * self.total;
        &self.probs[off..off + self.total]
    }
}

/// Location passed to residual hooks; the hidden slice is `[n_new, d_model]`.
#[derive(Debug, Clone, Copy)]
pub struct ResidualSite {
    pub layer: usize,
    pub start_pos: usize,
    pub n_new: usize,
    pub d_model: usize,
}

type QkObserver<'a> = Box<dyn FnMut(&QkEvent<'_>) + 'a>;
type AttnObserver<'a> = Box<dyn FnMut(&AttnEvent<'_>) + 'a>;
type ResidualHook<'a> = Box<dyn FnMut(&ResidualSite, &mut [f32]) + 'a>;

/// Callbacks invoked synchronously during [`ModelHandle::forward`].
///
/// Observers receive shared borrows and cannot change the computation.
/// Residual hooks may rewrite the layer output in place before it feeds the
/// next layer; they run in registration order.
#[derive(Default)]
pub struct HookTap<'a> {
    qk_observers: Vec<QkObserver<'a>>,
    attn_observers: Vec<AttnObserver<'a>>,
    residual_hooks: Vec<ResidualHook<'a>>,
}

impl<'a> HookTap<'a> {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn on_qk(mut self, f: impl FnMut(&QkEvent<'_>) + 'a) -> Self {
        self.qk_observers.push(Box::new(f));
        self
    }

    pub fn on_attention(mut self, f: impl FnMut(&AttnEvent<'_>) + 'a) -> Self {
        self.attn_observers.push(Box::new(f));
        self
    }

    pub fn on_residual(mut self, f: impl FnMut(&ResidualSite, &mut [f32]) + 'a) -> Self {
        self.residual_hooks.push(Box::new(f));
        self
    }

    pub fn is_empty(&self) -> bool {
        self.qk_observers.is_empty()
            && self.attn_observers.is_empty()
            && self.residual_hooks.is_empty()
    }
}

impl std::fmt::Debug for HookTap<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HookTap")
            .field("qk_observers", &self.qk_observers.len())
            .field("attn_observers", &self.attn_observers.len())
            .field("residual_hooks", &self.residual_hooks.len())
            .finish()
    }
}
