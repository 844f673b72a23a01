// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::model::{HookTap, KvCache, ModelHandle};
use super::tokenizer::EOS_TOKEN;
use crate::error::{Error, Result};
use crate::tensor::argmax;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationResult {
    pub prompt_tokens: Vec<u32>,
    pub generated_tokens: Vec<u32>,
    /// SHA-256 (hex) of the final-position logits' bit patterns, one per decode step.
    pub per_step_logits_digest: Vec<String>,
}

fn digest(logits: &[f32]) -> String {
    let mut h = Sha256::new();
    for v in logits {
        h.update(v.to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Greedy decoding with an incremental KV cache.
///
/// Stops after `max_new_tokens` or when EOS is selected; EOS itself is not
/// appended to `generated_tokens`.
pub fn generate_greedy(
    model: &ModelHandle,
    prompt: &[u32],
    max_new_tokens: usize,
    tap: &mut HookTap<'_>,
) -> Result<GenerationResult> {
    if prompt.is_empty() {
        return Err(Error::EmptyPrompt);
    }
    let spec = model.spec();
    if prompt.len() + max_new_tokens > spec.max_seq_len {
        return Err(Error::SequenceOverflow {
            len: prompt.len() + max_new_tokens,
            max: spec.max_seq_len,
        });
    }
    let mut result = GenerationResult {
        prompt_tokens: prompt.to_vec(),
        generated_tokens: Vec::new(),
        per_step_logits_digest: Vec::new(),
    };
    if max_new_tokens == 0 {
        return Ok(result);
    }

    let vocab = spec.vocab_size;
    let mut cache = KvCache::new(spec);
    let logits = model.forward(prompt, &mut cache, tap)?;
    let mut last = logits[logits.len() - vocab..].to_vec();
    loop {
        result.per_step_logits_digest.push(digest(&last));
        let next = argmax(&last) as u32;
        if next == EOS_TOKEN {
            break;
        }
        result.generated_tokens.push(next);
        if result.generated_tokens.len() == max_new_tokens {
            break;
        }
        last = model.forward(&[next], &mut cache, tap)?;
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::runtime::{tokenize, ModelSpec};

    fn toy() -> ModelHandle {
        ModelHandle::seeded(ModelSpec::toy(), 7).unwrap()
    }

    #[test]
    fn zero_new_tokens_echoes_prompt() {
        let m = toy();
        let r = generate_greedy(&m, &tokenize("abc"), 0, &mut HookTap::none()).unwrap();
        assert!(r.generated_tokens.is_empty());
        assert_eq!(r.prompt_tokens, tokenize("abc"));
    }

    #[test]
    fn deterministic() {
        let m = toy();
        let a = generate_greedy(&m, &tokenize("abc"), 8, &mut HookTap::none()).unwrap();
        let b = generate_greedy(&m, &tokenize("abc"), 8, &mut HookTap::none()).unwrap();
        assert_eq!(a, b);
        assert!(a.generated_tokens.len() <= 8);
    }

    #[test]
    fn empty_prompt_and_overflow() {
        let m = toy();
        assert!(matches!(
            generate_greedy(&m, &[], 4, &mut HookTap::none()),
            Err(Error::EmptyPrompt)
        ));
        assert!(matches!(
            generate_greedy(&m, &[1, 2, 3], 126, &mut HookTap::none()),
            Err(Error::SequenceOverflow { .. })
        ));
    }
}
