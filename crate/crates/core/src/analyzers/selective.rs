// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;

use crate::config::HeadRef;
use crate::error::{Error, Result};
use crate::runtime::attention_reference;
use crate::worker::{QkCapture, QkEntry};

/// Attention rows of one head, one per captured query position.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadRows {
    /// Absolute position of each query row.
    pub positions: Vec<usize>,
    /// Each row spans every captured key position; entries after the query
    /// position are exactly zero.
    pub rows: Vec<Vec<f64>>,
}

impl HeadRows {
    /// Row of the last captured query, the scoring token.
    pub fn last(&self) -> &[f64] {
        self.rows.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

/// Recomputed attention for a set of heads of one prompt.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SelectiveAttention {
    pub heads: BTreeMap<HeadRef, HeadRows>,
}

/// Rebuilds attention for `heads` from the entries of a single prompt.
pub fn selective_attention(entries: &[&QkEntry], heads: &[HeadRef]) -> Result<SelectiveAttention> {
    let mut out = SelectiveAttention::default();
    for &head in heads {
        let entry = entries
            .iter()
            .find(|e| e.layer_num == head.layer)
            .ok_or_else(|| {
                let mut captured: Vec<usize> = entries.iter().map(|e| e.layer_num).collect();
                captured.sort_unstable();
                captured.dedup();
                Error::LayerNotCaptured {
                    layer: head.layer,
                    captured,
                }
            })?;
        let n_heads = entry.n_heads();
        if head.head >= n_heads {
            return Err(Error::HeadOutOfRange {
                head: head.head,
                n_heads,
            });
        }
        let t = entry.k_all.rows();
        let keys: Vec<f32> = (0..t)
            .flat_map(|j| entry.k_all.vector(j, head.head).iter().copied())
            .collect();
        let d_head = entry.d_head();
        let mut rows = HeadRows {
            positions: Vec::with_capacity(entry.q.rows()),
            rows: Vec::with_capacity(entry.q.rows()),
        };
        for r in 0..entry.q.rows() {
            let pos = entry.query_position(r);
            let mut row = attention_reference(entry.q.vector(r, head.head), &keys[..(pos + 1) * d_head])?;
            row.resize(t, 0.0);
            rows.positions.push(pos);
            rows.rows.push(row);
        }
        out.heads.insert(head, rows);
    }
    Ok(out)
}

/// Rebuilds attention for `heads`, one [`SelectiveAttention`] per prompt of the run.
pub fn compute_attention_from_qk(
    capture: &QkCapture,
    heads: &[HeadRef],
) -> Result<Vec<SelectiveAttention>> {
    (0..capture.batch_count())
        .map(|b| selective_attention(&capture.batch(b), heads))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor3;

    fn entry(layer: usize, q_rows: usize, t: usize) -> QkEntry {
        QkEntry {
            module_name: format!("model.layers.{layer}.self_attn.attn"),
            layer_num: layer,
            q: Tensor3::new([q_rows, 2, 2], (0..q_rows * 4).map(|i| (i as f32).sin()).collect()),
            k_all: Tensor3::new([t, 2, 2], (0..t * 4).map(|i| (i as f32).cos()).collect()),
        }
    }

    #[test]
    fn singleton_context() {
        let e = entry(0, 1, 1);
        let a = selective_attention(&[&e], &[HeadRef::new(0, 1)]).unwrap();
        assert_eq!(a.heads[&HeadRef::new(0, 1)].rows, vec![vec![1.0]]);
    }

    #[test]
    fn causal_rows_have_zero_tail() {
        let e = entry(0, 3, 3);
        let a = selective_attention(&[&e], &[HeadRef::new(0, 0)]).unwrap();
        let rows = &a.heads[&HeadRef::new(0, 0)];
        assert_eq!(rows.positions, vec![0, 1, 2]);
        assert_eq!(rows.rows[0][1..], [0.0, 0.0]);
        assert_eq!(rows.rows[1][2], 0.0);
        for r in &rows.rows {
            assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn missing_layer_lists_captured() {
        let e = entry(3, 1, 2);
        let err = selective_attention(&[&e], &[HeadRef::new(1, 0)]).unwrap_err();
        assert!(matches!(err, Error::LayerNotCaptured { layer: 1, ref captured } if captured == &[3]));
    }

    #[test]
    fn head_out_of_range() {
        let e = entry(0, 1, 2);
        assert!(matches!(
            selective_attention(&[&e], &[HeadRef::new(0, 2)]),
            Err(Error::HeadOutOfRange { head: 2, n_heads: 2 })
        ));
    }
}
