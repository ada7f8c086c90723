//! Mapping from a frame-level alignment to decoder-input geometry.
//!
//! A token's end boundary is the frame where its run *starts*; the token's
//! trigger span runs from just after the previous boundary up to and
//! including its own. Frames after the last boundary belong to no token
//! unless `extend_last` is set.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numerics::AttentionMask;

pub const BLANK: usize = 0;

/// Merge adjacent duplicates, then drop blanks.
pub fn collapse(labels: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &l in labels {
        if Some(l) != prev && l != BLANK {
            out.push(l);
        }
        prev = Some(l);
    }
    out
}

/// Length of the decoder input implied by an alignment.
pub fn predicted_length(labels: &[usize]) -> usize {
    collapse(labels).len()
}

/// 0-indexed frame of the first label of every collapsed token's run.
pub fn end_boundaries(labels: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for (i, &l) in labels.iter().enumerate() {
        if Some(l) != prev && l != BLANK {
            out.push(i);
        }
        prev = Some(l);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TriggerMaskSet {
    pub tokens: Vec<usize>,
    pub frame_count: usize,
    /// 0-indexed end boundaries, strictly increasing.
    pub boundaries: Vec<usize>,
    pub masks: Arc<AttentionMask>,
}

impl TriggerMaskSet {
    pub fn token_count(&self) -> usize {
        self.tokens.len()
    }

    /// Frame range (0-indexed, half-open) attended by token `u`.
    pub fn span(&self, u: usize) -> std::ops::Range<usize> {
        let start = if u == 0 { 0 } else { self.boundaries[u - 1] + 1 };
        let end = if self.masks.get(u, self.frame_count - 1) {
            self.frame_count
        } else {
            self.boundaries[u] + 1
        };
        start..end
    }

    /// Boundaries followed by the packed mask bits, little-endian bit order
    /// within each byte, rows concatenated.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&(self.token_count() as u32).to_le_bytes());
        out.extend_from_slice(&(self.frame_count as u32).to_le_bytes());
        for &b in &self.boundaries {
            out.extend_from_slice(&(b as u32).to_le_bytes());
        }
        let mut byte = 0u8;
        for (i, &bit) in self.masks.bits().iter().enumerate() {
            if bit {
                byte |= 1 << (i % 8);
            }
            if i % 8 == 7 {
                out.push(byte);
                byte = 0;
            }
        }
        if self.masks.bits().len() % 8 != 0 {
            out.push(byte);
        }
        out
    }
}

impl fmt::Display for TriggerMaskSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for u in 0..self.token_count() {
            let bits: Vec<&str> = self
                .masks
                .row(u)
                .iter()
                .map(|&b| if b { "1" } else { "0" })
                .collect();
            writeln!(f, "token {} (t={}): [{}]", self.tokens[u], self.boundaries[u] + 1, bits.join(","))?;
        }
        Ok(())
    }
}

/// Build per-token trigger masks from an alignment.
pub fn trigger_masks(labels: &[usize], extend_last: bool) -> Result<TriggerMaskSet> {
    let tokens = collapse(labels);
    if tokens.is_empty() {
        return Err(Error::NoTokens);
    }
    let boundaries = end_boundaries(labels);
    let frames = labels.len();
    let mut bits = vec![false; tokens.len() * frames];
    let mut start = 0;
    for (u, &b) in boundaries.iter().enumerate() {
        let end = if extend_last && u + 1 == tokens.len() { frames } else { b + 1 };
        bits[u * frames + start..u * frames + end].iter_mut().for_each(|x| *x = true);
        start = b + 1;
    }
    let masks = AttentionMask::new(tokens.len(), frames, bits)?;
    Ok(TriggerMaskSet {
        tokens,
        frame_count: frames,
        boundaries,
        masks: Arc::new(masks),
    })
}

/// Render labels with `_` for blank, e.g. `{_, C, C, _, A}`.
pub fn bracket_notation(labels: &[usize], symbol: impl Fn(usize) -> String) -> String {
    let parts: Vec<String> = labels
        .iter()
        .map(|&l| if l == BLANK { "_".to_string() } else { symbol(l) })
        .collect();
    format!("{{{}}}", parts.join(", "))
}
