// SPDX-License-Identifier: MIT OR Apache-2.0

//! Byte-level tokenizer: token id = byte value, ids >= 256 are specials.

use crate::error::{Error, Result};

pub const BOS_TOKEN: u32 = 256;
pub const EOS_TOKEN: u32 = 257;

pub fn tokenize(text: impl AsRef<[u8]>) -> Vec<u32> {
    text.as_ref().iter().map(|&b| u32::from(b)).collect()
}

/// Inverse of [`tokenize`]. Special tokens below `vocab_size` are dropped.
pub fn detokenize_bytes(tokens: &[u32], vocab_size: usize) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(tokens.len());
    for &id in tokens {
        if id as usize >= vocab_size {
            return Err(Error::TokenOutOfRange {
                id,
                vocab: vocab_size,
            });
        }
        if let Ok(b) = u8::try_from(id) {
            out.push(b);
        }
    }
    Ok(out)
}

/// Lossy UTF-8 view of [`detokenize_bytes`].
pub fn detokenize(tokens: &[u32], vocab_size: usize) -> Result<String> {
    detokenize_bytes(tokens, vocab_size).map(|b| String::from_utf8_lossy(&b).into_owned())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn bytes_map_to_ids() {
        assert_eq!(tokenize("Hi"), vec![72, 105]);
        assert!(tokenize("").is_empty());
    }

    #[test]
    fn out_of_vocab_rejected() {
        assert!(matches!(
            detokenize(&[72, 300], 260),
            Err(Error::TokenOutOfRange { id: 300, .. })
        ));
    }

    #[test]
    fn specials_dropped() {
        assert_eq!(detokenize(&[BOS_TOKEN, 72, 105, EOS_TOKEN], 260).unwrap(), "Hi");
    }

    proptest! {
        #[test]
        fn round_trip(bytes in proptest::collection::vec(any::<u8>(), 0..256)) {
            let ids = tokenize(&bytes);
            prop_assert_eq!(detokenize_bytes(&ids, 260).unwrap(), bytes);
        }
    }
}
