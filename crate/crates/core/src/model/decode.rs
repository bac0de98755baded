//! Greedy label decoding with Words-of-Interest masking.

use std::collections::BTreeSet;

use super::vocab::{BOS, EOS};
use crate::error::{contract, Result};

/// Default cap on the decoded sequence length, BOS included.
pub const DEFAULT_MAX_LEN: usize = 8;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Decoded {
    /// Emitted words, without BOS and EOS.
    pub tokens: Vec<usize>,
    /// True when decoding stopped at the length cap instead of EOS.
    pub truncated: bool,
}

/// Sets every logit outside `woi` and EOS to negative infinity.
pub fn mask_woi(logits: &mut [f64], woi: &BTreeSet<usize>) -> Result<()> {
    if woi.is_empty() {
        return contract("empty Words-of-Interest set");
    }
    for (id, l) in logits.iter_mut().enumerate() {
        if id != EOS && !woi.contains(&id) {
            *l = f64::NEG_INFINITY;
        }
    }
    Ok(())
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Iterative argmax decoding from `[BOS]`. `step` maps a prefix to next-token
/// logits; when `woi` is given each step is masked with it first. Decoding
/// stops at EOS or once the prefix holds `max_len` tokens.
pub fn greedy_decode_with(
    mut step: impl FnMut(&[usize]) -> Result<Vec<f64>>,
    woi: Option<&BTreeSet<usize>>,
    max_len: usize,
) -> Result<Decoded> {
    if max_len == 0 {
        return contract("max_len must be at least 1");
    }
    let mut prefix = vec![BOS];
    while prefix.len() < max_len {
        let mut logits = step(&prefix)?;
        if let Some(w) = woi {
            mask_woi(&mut logits, w)?;
        }
        let next = argmax(&logits);
        if next == EOS {
            return Ok(Decoded {
                tokens: prefix[1..].to_vec(),
                truncated: false,
            });
        }
        prefix.push(next);
    }
    Ok(Decoded {
        tokens: prefix[1..].to_vec(),
        truncated: true,
    })
}

/// Exact sequence match against a non-empty ground-truth label.
pub fn classify_decoded(decoded: &Decoded, truth: &[usize]) -> bool {
    !truth.is_empty() && !decoded.truncated && decoded.tokens == truth
}
