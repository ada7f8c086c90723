//! Single-step non-autoregressive transduction driven by CTC alignments.
//!
//! The encoder's CTC posteriors yield a frame-level alignment; the alignment
//! fixes how many tokens the decoder emits and which encoder frames each
//! token may look at (its trigger mask). The decoder then produces every
//! output position in one parallel pass.

pub mod alignment_map;
pub mod ctc_lattice;
pub mod decoder_eval;
pub mod error;
pub mod model;
pub mod numerics;
pub mod pipeline;
pub mod synth_data;
pub mod trainer;

pub use error::{Error, Result};

#[cfg(test)]
pub(crate) mod testutil;
