// SPDX-License-Identifier: MIT OR Apache-2.0

//! Attention-based document reranking: a document's relevance is the
//! attention mass the last prompt token puts on the document span, averaged
//! over the selected heads.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::selective::{compute_attention_from_qk, SelectiveAttention};
use crate::config::HeadRef;
use crate::error::{Error, Result};
use crate::runtime::tokenize;
use crate::worker::QkCapture;

const DOC_PREFIX: &str = "Document: ";
const QUERY_PREFIX: &str = "\nQuery: ";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelevanceResult {
    pub scores: Vec<f64>,
    /// Document indices by descending score; ties keep input order.
    pub ranking: Vec<usize>,
}

/// Token ids for a (query, document) prompt and the document's token span.
pub fn rerank_prompt(query: &str, document: &str) -> (Vec<u32>, Range<usize>) {
    let text = format!("{DOC_PREFIX}{document}{QUERY_PREFIX}{query}");
    let start = DOC_PREFIX.len();
    (tokenize(text), start..start + document.len())
}

/// Scores each document from its own prompt's attention.
pub fn rerank(attention: &[SelectiveAttention], doc_spans: &[Range<usize>]) -> Result<RelevanceResult> {
    if attention.len() != doc_spans.len() {
        return Err(Error::InvalidInput(format!(
            "{} captures but {} document spans",
            attention.len(),
            doc_spans.len()
        )));
    }
    if attention.is_empty() {
        return Err(Error::InvalidInput("no documents to rerank".into()));
    }
    let mut scores = Vec::with_capacity(attention.len());
    for (attn, span) in attention.iter().zip(doc_spans) {
        if attn.heads.is_empty() {
            return Err(Error::InvalidInput("no heads to score".into()));
        }
        let mut total = 0.0;
        for rows in attn.heads.values() {
            let row = rows.last();
            if span.start >= span.end || span.end > row.len() {
                return Err(Error::Span(format!(
                    "document span {span:?} is empty or exceeds context length {}",
                    row.len()
                )));
            }
            total += row[span.clone()].iter().sum::<f64>();
        }
        scores.push(total / attn.heads.len() as f64);
    }
    let mut ranking: Vec<usize> = (0..scores.len()).collect();
    ranking.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    Ok(RelevanceResult { scores, ranking })
}

/// [`rerank`] over a capture holding one prompt per document.
pub fn rerank_capture(
    capture: &QkCapture,
    doc_spans: &[Range<usize>],
    heads: &[HeadRef],
) -> Result<RelevanceResult> {
    rerank(&compute_attention_from_qk(capture, heads)?, doc_spans)
}

#[cfg(test)]
#[allow(clippy::single_range_in_vec_init)]
mod tests {
    use super::*;
    use crate::analyzers::HeadRows;

    fn attn(rows: &[Vec<f64>]) -> SelectiveAttention {
        let mut a = SelectiveAttention::default();
        for (h, r) in rows.iter().enumerate() {
            a.heads.insert(
                HeadRef::new(0, h),
                HeadRows {
                    positions: vec![r.len() - 1],
                    rows: vec![r.clone()],
                },
            );
        }
        a
    }

    #[test]
    fn prompt_span_covers_document() {
        let (tokens, span) = rerank_prompt("q?", "doc text");
        assert_eq!(&tokens[span], tokenize("doc text").as_slice());
    }

    #[test]
    fn singleton() {
        let r = rerank(&[attn(&[vec![0.4, 0.6]])], &[0..1]).unwrap();
        assert_eq!(r.ranking, vec![0]);
    }

    #[test]
    fn dominant_document_first() {
        let low = attn(&[vec![0.1, 0.9], vec![0.2, 0.8]]);
        let high = attn(&[vec![0.5, 0.5], vec![0.3, 0.7]]);
        let r = rerank(&[low, high], &[0..1, 0..1]).unwrap();
        assert_eq!(r.ranking, vec![1, 0]);
    }

    #[test]
    fn ties_are_stable() {
        let a = attn(&[vec![0.5, 0.5]]);
        let r = rerank(&[a.clone(), a.clone(), a], &[0..1, 0..1, 0..1]).unwrap();
        assert_eq!(r.ranking, vec![0, 1, 2]);
    }

    #[test]
    fn count_mismatch() {
        assert!(rerank(&[attn(&[vec![1.0]])], &[0..1, 0..1]).is_err());
        assert!(rerank(&[attn(&[vec![1.0]])], &[0..2]).is_err());
    }
}
