use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Binary attention mask, `true` = attend.
///
/// Construction rejects masks with a fully blocked row, so every query that
/// reaches the attention op has at least one permitted key.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct AttentionMask {
    rows: usize,
    cols: usize,
    bits: Vec<bool>,
}

impl AttentionMask {
    pub fn new(rows: usize, cols: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != rows * cols {
            return Err(Error::Shape(format!(
                "mask {}x{} needs {} bits, got {}",
                rows,
                cols,
                rows * cols,
                bits.len()
            )));
        }
        if let Some(row) = (0..rows).find(|&r| !bits[r * cols..(r + 1) * cols].iter().any(|&b| b)) {
            return Err(Error::FullyMaskedRow { row });
        }
        Ok(Self { rows, cols, bits })
    }

    pub fn full(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            bits: vec![true; rows * cols],
        }
    }

    /// Lower-triangular mask for left-to-right decoding.
    pub fn causal(n: usize) -> Self {
        let bits = (0..n)
            .flat_map(|i| (0..n).map(move |j| j <= i))
            .collect();
        Self {
            rows: n,
            cols: n,
            bits,
        }
    }

    /// Every query may attend every valid key; invalid (padding) keys are blocked.
    pub fn keys_valid(rows: usize, valid: &[bool]) -> Result<Self> {
        let bits = (0..rows).flat_map(|_| valid.iter().copied()).collect();
        Self::new(rows, valid.len(), bits)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.bits[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[bool] {
        &self.bits[r * self.cols..(r + 1) * self.cols]
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn is_full(&self) -> bool {
        self.bits.iter().all(|&b| b)
    }
}

impl fmt::Display for AttentionMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in 0..self.rows {
            let row: Vec<&str> = self.row(r).iter().map(|&b| if b { "1" } else { "0" }).collect();
            writeln!(f, "[{}]", row.join(","))?;
        }
        Ok(())
    }
}

/// How the mask enters the attention weights.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskMode {
    /// Blocked logits are pushed to a large negative value before the softmax,
    /// so each row stays a distribution over permitted keys.
    #[default]
    #[serde(rename = "presoftmax")]
    PreSoftmax,
    /// Softmax over all keys, then elementwise product with the mask.
    /// Rows are not renormalized.
    Literal,
}

impl std::str::FromStr for MaskMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "presoftmax" => Ok(Self::PreSoftmax),
            "literal" => Ok(Self::Literal),
            other => Err(Error::Config(format!("unknown mask_mode `{other}`"))),
        }
    }
}

impl fmt::Display for MaskMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::PreSoftmax => "presoftmax",
            Self::Literal => "literal",
        })
    }
}
