// SPDX-License-Identifier: MIT OR Apache-2.0
#![allow(clippy::needless_range_loop)]

//! Test-only helpers: an f64 reference forward pass written independently of
//! the runtime, the config listing used as a protocol fixture, and prompt
//! generators.

#![allow(dead_code)]

use hookllm::runtime::{ModelHandle, ModelSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const GRANITE_CONFIG: &str = r#"{
    "model_info": {
        "name": "granite3-8b-attn",
        "model_id": "ibm-granite/granite-3.1-8b-instruct"
    },
    "params": {
        "important_heads": [[6, 9], [7, 20], [8, 1], [8, 13], [8, 14], [8, 15], 
        [10, 2], [10, 3], [10, 6], [10, 21], [11, 4], [11, 30], [11, 31], [12, 2], 
        [12, 28], [13, 8], [13, 9], [13, 12], [14, 15], [14, 16], [14, 19], [14, 27], 
        [15, 6], [15, 7], [15, 20], [15, 23], [16, 12], [16, 14], [16, 16], [17, 7], 
        [17, 11], [17, 15], [17, 19], [17, 21], [17, 25], [17, 26], [18, 9], 
        [18, 17], [18, 20], [18, 28], [19, 1]]
    },
    "hookq":{
        "hookq_mode": "last_token"
    }
}"#;

pub fn toy_model(seed: u64) -> ModelHandle {
    ModelHandle::seeded(ModelSpec::toy(), seed).unwrap()
}

/// Random printable prompts with lengths in `min..=max`.
pub fn random_prompts(seed: u64, count: usize, min: usize, max: usize) -> Vec<Vec<u32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let len = rng.gen_range(min..=max);
            (0..len).map(|_| rng.gen_range(32u32..127)).collect()
        })
        .collect()
}

/// Everything the reference forward exposes, all in f64.
pub struct OracleTrace {
    /// `[layer][pos][d_model]` post-RoPE queries and keys.
    pub q: Vec<Vec<Vec<f64>>>,
    pub k: Vec<Vec<Vec<f64>>>,
    /// `[layer][head][query_pos][key_pos]`, full causal matrix.
    pub attn: Vec<Vec<Vec<Vec<f64>>>>,
    /// `[layer][pos][d_model]` residual output of each layer.
    pub hidden: Vec<Vec<Vec<f64>>>,
}

fn mat(w: &[f32], rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
    (0..rows)
        .map(|r| (0..cols).map(|c| w[r * cols + c] as f64 * x[c]).sum())
        .collect()
}

fn rms(x: &[f64], w: &[f32]) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / (ms + 1e-5).sqrt();
    x.iter().zip(w).map(|(v, g)| v * inv * *g as f64).collect()
}

fn rotate(v: &mut [f64], pos: usize, theta: f64) {
    let half = v.len() / 2;
    for i in 0..half {
        let ang = pos as f64 * theta.powf(-(2.0 * i as f64) / v.len() as f64);
        let (a, b) = (v[i], v[i + half]);
        v[i] = a * ang.cos() - b * ang.sin();
        v[i + half] = a * ang.sin() + b * ang.cos();
    }
}

/// Full-sequence recompute from the embedding table, no KV cache.
pub fn oracle_forward(model: &ModelHandle, tokens: &[u32]) -> OracleTrace {
    let spec = *model.spec();
    let w = model.weights();
    let (d, nh, dh, ff) = (spec.d_model, spec.n_heads, spec.d_head, spec.ffn_dim());
    let n = tokens.len();
    let mut x: Vec<Vec<f64>> = tokens
        .iter()
        .map(|&t| {
            w.token_embedding[t as usize * d..(t as usize + 1) * d]
                .iter()
                .map(|v| *v as f64)
                .collect()
        })
        .collect();
    let mut trace = OracleTrace {
        q: vec![],
        k: vec![],
        attn: vec![],
        hidden: vec![],
    };
    for lw in &w.layers {
        let mut qs = vec![];
        let mut ks = vec![];
        let mut vs = vec![];
        for (pos, row) in x.iter().enumerate() {
            let h = rms(row, &lw.attn_norm);
            let mut q = mat(&lw.wq, d, d, &h);
            let mut k = mat(&lw.wk, d, d, &h);
            for head in 0..nh {
                rotate(&mut q[head * dh..(head + 1) * dh], pos, spec.rope_theta as f64);
                rotate(&mut k[head * dh..(head + 1) * dh], pos, spec.rope_theta as f64);
            }
            qs.push(q);
            ks.push(k);
            vs.push(mat(&lw.wv, d, d, &h));
        }
        let mut attn = vec![vec![vec![0.0; n]; n]; nh];
        let mut out = vec![vec![0.0; d]; n];
        for head in 0..nh {
            let sl = head * dh..(head + 1) * dh;
            for i in 0..n {
                let logits: Vec<f64> = (0..=i)
                    .map(|j| {
                        qs[i][sl.clone()]
                            .iter()
                            .zip(&ks[j][sl.clone()])
                            .map(|(a, b)| a * b)
                            .sum::<f64>()
                            / (dh as f64).sqrt()
                    })
                    .collect();
                let m = logits.iter().cloned().fold(f64::MIN, f64::max);
                let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
                let s: f64 = e.iter().sum();
                for j in 0..=i {
                    attn[head][i][j] = e[j] / s;
                    for c in sl.clone() {
                        out[i][c] += attn[head][i][j] * vs[j][c];
                    }
                }
            }
        }
        for i in 0..n {
            let proj = mat(&lw.wo, d, d, &out[i]);
            for c in 0..d {
                x[i][c] += proj[c];
            }
            let h = rms(&x[i], &lw.mlp_norm);
            let gate = mat(&lw.w_gate, ff, d, &h);
            let up = mat(&lw.w_up, ff, d, &h);
            let act: Vec<f64> = gate
                .iter()
                .zip(&up)
                .map(|(g, u)| g / (1.0 + (-g).exp()) * u)
                .collect();
            let down = mat(&lw.w_down, d, ff, &act);
            for c in 0..d {
                x[i][c] += down[c];
            }
        }
        trace.q.push(qs);
        trace.k.push(ks);
        trace.attn.push(attn);
        trace.hidden.push(x.clone());
    }
    trace
}
