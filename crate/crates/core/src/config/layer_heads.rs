// SPDX-License-Identifier: MIT OR Apache-2.0

//! The `VLLM_HOOK_LAYER_HEADS` string format: `"0:0,3,6;15:2"`.

use std::collections::BTreeMap;

use super::file::HeadRef;
use crate::error::{Error, Result};

/// Layer index to head indices, ordered by layer.
pub type LayerHeads = BTreeMap<usize, Vec<usize>>;

fn parse_index(token: &str, what: &str) -> Result<usize> {
    let token = token.trim();
    if token.starts_with('-') {
        return Err(Error::LayerHeads(format!("negative {what} index '{token}'")));
    }
    token
        .parse()
        .map_err(|_| Error::LayerHeads(format!("{what} index '{token}' is not an integer")))
}

/// Parses `;`-separated `<layer>:<head>,<head>...` groups.
///
/// Heads are deduplicated keeping first-seen order; a layer listed twice has
/// its groups merged.
pub fn parse_layer_heads(s: &str) -> Result<LayerHeads> {
    let mut out = LayerHeads::new();
    for group in s.split(';').map(str::trim).filter(|g| !g.is_empty()) {
        let (layer, heads) = group
            .split_once(':')
            .ok_or_else(|| Error::LayerHeads(format!("group '{group}' is missing ':'")))?;
        let layer = parse_index(layer, "layer")?;
        let entry = out.entry(layer).or_default();
        for head in heads.split(',') {
            let head = parse_index(head, "head")?;
            if !entry.contains(&head) {
                entry.push(head);
            }
        }
    }
    Ok(out)
}

/// Inverse of [`parse_layer_heads`] for maps whose head lists are duplicate-free.
pub fn serialize_layer_heads(map: &LayerHeads) -> String {
    map.iter()
        .map(|(layer, heads)| {
            let heads: Vec<String> = heads.iter().map(usize::to_string).collect();
            format!("{layer}:{}", heads.join(","))
        })
        .collect::<Vec<_>>()
        .join(";")
}

/// Groups heads by layer in canonical form (heads ascending, deduplicated).
pub fn heads_to_layer_map(heads: &[HeadRef]) -> LayerHeads {
    let mut out = LayerHeads::new();
    for h in heads {
        out.entry(h.layer).or_default().push(h.head);
    }
    for heads in out.values_mut() {
        heads.sort_unstable();
        heads.dedup();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parses_documented_example() {
        let m = parse_layer_heads("0:0,3,6;15:2").unwrap();
        assert_eq!(m, LayerHeads::from([(0, vec![0, 3, 6]), (15, vec![2])]));
    }

    #[test]
    fn empty_and_single() {
        assert!(parse_layer_heads("").unwrap().is_empty());
        assert_eq!(
            parse_layer_heads("6:9;7:20").unwrap(),
            LayerHeads::from([(6, vec![9]), (7, vec![20])])
        );
    }

    #[test]
    fn errors() {
        assert!(parse_layer_heads("0:a").is_err());
        assert!(parse_layer_heads("0;1:2").unwrap_err().to_string().contains("missing ':'"));
        assert!(parse_layer_heads("-1:2").unwrap_err().to_string().contains("negative"));
        assert!(parse_layer_heads("1:-2").is_err());
        assert!(parse_layer_heads("1:").is_err());
    }

    #[test]
    fn dedups_preserving_order() {
        assert_eq!(
            parse_layer_heads("3:5,1,5;3:1,0").unwrap(),
            LayerHeads::from([(3, vec![5, 1, 0])])
        );
    }

    #[test]
    fn heads_serialize() {
        let heads = [HeadRef::new(6, 9), HeadRef::new(7, 20), HeadRef::new(8, 1)];
        assert_eq!(serialize_layer_heads(&heads_to_layer_map(&heads)), "6:9;7:20;8:1");
        assert_eq!(serialize_layer_heads(&heads_to_layer_map(&[])), "");
    }

    fn canonical_map() -> impl Strategy<Value = LayerHeads> {
        proptest::collection::btree_map(
            0usize..64,
            proptest::collection::btree_set(0usize..64, 1..8)
                .prop_map(|s| s.into_iter().collect::<Vec<_>>()),
            0..10,
        )
    }

    proptest! {
        #[test]
        fn parse_inverts_serialize(m in canonical_map()) {
            let s = serialize_layer_heads(&m);
            prop_assert_eq!(parse_layer_heads(&s).unwrap(), m);
        }
    }
}
