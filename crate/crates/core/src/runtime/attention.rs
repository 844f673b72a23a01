// SPDX-License-Identifier: MIT OR Apache-2.0

use crate::error::{Error, Result};

/// Scaled dot-product attention row `softmax(q . k_j / sqrt(d_head))` of one
/// query over `keys`, a row-major `[t, d_head]` slice, evaluated in f64.
///
/// The keys must already be restricted to causally visible positions. This is
/// the reference both for checking the f32 forward pass and for rebuilding
/// attention from captured Q/K in the analyzers.
pub fn attention_reference(q: &[f32], keys: &[f32]) -> Result<Vec<f64>> {
    let d_head = q.len();
    if d_head == 0 || !keys.len().is_multiple_of(d_head) {
        return Err(Error::InvalidInput(format!(
            "key slice of {} elements is not a multiple of d_head {d_head}",
            keys.len()
        )));
    }
    if keys.is_empty() {
        return Err(Error::EmptyAttention);
    }
    let scale = 1.0 / (d_head as f64).sqrt();
    let logits: Vec<f64> = keys
        .chunks_exact(d_head)
        .map(|k| {
            q.iter()
                .zip(k)
                .map(|(a, b)| f64::from(*a) * f64::from(*b))
                .sum::<f64>()
                * scale
        })
        .collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    // Naive softmax without max-shifting, dividing by sqrt inside each term.
    fn naive_softmax(q: &[f32], keys: &[f32]) -> Vec<f64> {
        let d = q.len();
        let e: Vec<f64> = keys
            .chunks_exact(d)
            .map(|k| {
                let mut acc = 0.0f64;
                for i in 0..d {
                    acc += (q[i] as f64 / (d as f64).sqrt()) * k[i] as f64;
                }
                acc.exp()
            })
            .collect();
        let s: f64 = e.iter().sum();
        e.iter().map(|x| x / s).collect()
    }

    #[test]
    fn singleton_is_one() {
        assert_eq!(attention_reference(&[0.3, -1.0], &[2.0, 5.0]).unwrap(), vec![1.0]);
    }

    #[test]
    fn orthogonal_query_is_uniform() {
        let q = [1.0, 0.0, 0.0, 0.0];
        let keys = [0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 3.0, 0.0, 0.0, 0.0, 0.0, -2.0];
        for v in attention_reference(&q, &keys).unwrap() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn empty_keys_error() {
        assert!(matches!(
            attention_reference(&[1.0, 2.0], &[]),
            Err(Error::EmptyAttention)
        ));
    }

    #[test]
    fn matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let q: Vec<f32> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let keys: Vec<f32> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let row = attention_reference(&q, &keys).unwrap();
        let oracle = naive_softmax(&q, &keys);
        for (a, b) in row.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
}
