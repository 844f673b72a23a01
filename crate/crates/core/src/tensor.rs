// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dense f32 helpers. All kernels accumulate sequentially in f32 so repeated
//! calls on identical inputs are bit-identical.

use serde::{Deserialize, Serialize};

/// Row-major rank-3 tensor, used for captured `[rows, n_heads, d_head]` Q/K.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor3 {
    pub shape: [usize; 3],
    pub data: Vec<f32>,
}

impl Tensor3 {
    pub fn new(shape: [usize; 3], data: Vec<f32>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "Tensor3 data length does not match shape {shape:?}"
        );
        Self { shape, data }
    }

    pub fn zeros(shape: [usize; 3]) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Vector at `[row, mid, ..]`.
    pub fn vector(&self, row: usize, mid: usize) -> &[f32] {
        let inner = self.shape[2];
        let start = (row * self.shape[1] + mid) * inner;
        &self.data[start..start + inner]
    }

    /// Appends rows from another tensor with matching trailing dims.
    pub fn append_rows(&mut self, other: &Tensor3) {
        assert_eq!(self.shape[1..], other.shape[1..]);
        self.data.extend_from_slice(&other.data);
        self.shape[0] += other.shape[0];
    }

    /// Bit-level equality, distinguishing `-0.0` from `0.0` and comparing NaN payloads.
    pub fn bit_eq(&self, other: &Tensor3) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// `out[o] = sum_i w[o * x.len() + i] * x[i]` for a row-major `[out, in]` matrix.
pub fn matvec(w: &[f32], x: &[f32], out: &mut [f32]) {
    let n_in = x.len();
    debug_assert_eq!(w.len(), out.len() * n_in);
    for (o, row) in out.iter_mut().zip(w.chunks_exact(n_in)) {
        *o = dot(row, x);
    }
}

pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).fold(0.0f32, |acc, (x, y)| acc + x * y)
}

pub fn rms_norm(x: &[f32], weight: &[f32], eps: f32, out: &mut [f32]) {
    let mean_sq = x.iter().fold(0.0f32, |acc, v| acc + v * v) / x.len() as f32;
    let inv = 1.0 / (mean_sq + eps).sqrt();
    for ((o, v), w) in out.iter_mut().zip(x).zip(weight) {
        *o = v * inv * w;
    }
}

pub fn silu(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}

/// Numerically stable in-place softmax.
pub fn softmax_in_place(xs: &mut [f32]) {
    let max = xs.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in xs.iter_mut() {
        *x /= sum;
    }
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax(xs: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax(&[5.0]), 0);
    }

    #[test]
    fn softmax_sums_to_one() {
        let mut xs = vec![1.0, -2.0, 0.5, 30.0];
        softmax_in_place(&mut xs);
        let s: f32 = xs.iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
    }

    #[test]
    fn tensor_append_rows() {
        let mut a = Tensor3::new([1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = Tensor3::new([1, 2, 2], vec![5.0, 6.0, 7.0, 8.0]);
        a.append_rows(&b);
        assert_eq!(a.shape, [2, 2, 2]);
        assert_eq!(a.vector(1, 1), &[7.0, 8.0]);
    }
}
