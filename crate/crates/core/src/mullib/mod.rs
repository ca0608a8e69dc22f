//! LUT-defined approximate multipliers.
//!
//! A multiplier is the full input/output table over unsigned operand codes
//! `0..2^a` × `0..2^b`, plus a per-operation energy figure (power-delay
//! product, pJ). Signedness never reaches the table: it lives in the affine
//! quantization offsets.

mod generate;
mod library;

pub use generate::{exact_pdp, gen_exact, gen_perturbed, gen_pruned, gen_truncated, proxy_pdp, MRED_CAP};
pub use library::MultiplierLibrary;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MIN_BITS: u8 = 2;
pub const MAX_BITS: u8 = 8;

pub(crate) fn check_bits(bits: u8) -> Result<()> {
    if (MIN_BITS..=MAX_BITS).contains(&bits) {
        Ok(())
    } else {
        Err(Error::Bitwidth(bits as u32))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Exact,
    Generated,
    Imported,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::Exact => "exact",
            Provenance::Generated => "generated",
            Provenance::Imported => "imported",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "exact" => Some(Provenance::Exact),
            "generated" => Some(Provenance::Generated),
            "imported" => Some(Provenance::Imported),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LutMultiplier {
    name: String,
    bits_a: u8,
    bits_b: u8,
    table: Vec<u32>,
    pdp: f64,
    provenance: Provenance,
}

impl LutMultiplier {
    /// Build a multiplier from a row-major table, validating every invariant.
    pub fn new(
        name: impl Into<String>,
        bits_a: u8,
        bits_b: u8,
        table: Vec<u32>,
        pdp: f64,
        provenance: Provenance,
    ) -> Result<Self> {
        let name = name.into();
        check_bits(bits_a)?;
        check_bits(bits_b)?;
        let invalid = |reason: String| Error::InvalidMultiplier {
            name: name.clone(),
            reason,
        };
        if name.is_empty() || name.chars().any(char::is_whitespace) {
            return Err(invalid("name must be non-empty without whitespace".into()));
        }
        let expected = 1usize << (bits_a + bits_b);
        if table.len() != expected {
            return Err(invalid(format!(
                "table has {} entries, expected {expected}",
                table.len()
            )));
        }
        let max = max_output(bits_a, bits_b);
        if let Some(&v) = table.iter().find(|&&v| v as u64 > max) {
            return Err(invalid(format!("entry {v} exceeds {max}")));
        }
        if !(pdp.is_finite() && pdp > 0.0) {
            return Err(invalid(format!("pdp must be positive, got {pdp}")));
        }
        let m = LutMultiplier {
            name,
            bits_a,
            bits_b,
            table,
            pdp,
            provenance,
        };
        if provenance == Provenance::Exact && !m.is_exact() {
            return Err(Error::InvalidMultiplier {
                name: m.name,
                reason: "provenance `exact` but table is not i*j".into(),
            });
        }
        Ok(m)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn bits_a(&self) -> u8 {
        self.bits_a
    }

    pub fn bits_b(&self) -> u8 {
        self.bits_b
    }

    pub fn bits(&self) -> (u8, u8) {
        (self.bits_a, self.bits_b)
    }

    pub fn rows(&self) -> usize {
        1 << self.bits_a
    }

    pub fn cols(&self) -> usize {
        1 << self.bits_b
    }

    /// Row-major table, `table[i * 2^b + j]`.
    pub fn table(&self) -> &[u32] {
        &self.table
    }

    pub fn get(&self, i: usize, j: usize) -> u32 {
        self.table[(i << self.bits_b) | j]
    }

    pub fn pdp(&self) -> f64 {
        self.pdp
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn is_exact(&self) -> bool {
        let cols = self.cols();
        self.table
            .iter()
            .enumerate()
            .all(|(idx, &v)| v as usize == (idx / cols) * (idx % cols))
    }

    pub fn error_matrix(&self) -> ErrorMatrix {
        error_matrix(self)
    }

    pub fn metrics(&self) -> MulErrorMetrics {
        error_metrics(self)
    }

    pub(crate) fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }
}

pub(crate) fn max_output(bits_a: u8, bits_b: u8) -> u64 {
    (1u64 << (bits_a + bits_b)) - 1
}

/// `E[i][j] = table[i][j] - i*j`, stored flat with `e[i * 2^b + j] = E[i][j]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ErrorMatrix {
    bits_a: u8,
    bits_b: u8,
    entries: Vec<i64>,
}

impl ErrorMatrix {
    pub fn bits(&self) -> (u8, u8) {
        (self.bits_a, self.bits_b)
    }

    pub fn get(&self, i: usize, j: usize) -> i64 {
        self.entries[(i << self.bits_b) | j]
    }

    pub fn flat(&self) -> &[i64] {
        &self.entries
    }

    pub fn flat_f64(&self) -> Vec<f64> {
        self.entries.iter().map(|&v| v as f64).collect()
    }

    pub fn is_zero(&self) -> bool {
        self.entries.iter().all(|&v| v == 0)
    }

    pub fn l2_norm(&self) -> f64 {
        self.entries
            .iter()
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt()
    }
}

pub fn error_matrix(mul: &LutMultiplier) -> ErrorMatrix {
    let cols = mul.cols();
    let entries = mul
        .table
        .iter()
        .enumerate()
        .map(|(idx, &v)| v as i64 - ((idx / cols) * (idx % cols)) as i64)
        .collect();
    ErrorMatrix {
        bits_a: mul.bits_a,
        bits_b: mul.bits_b,
        entries,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MulErrorMetrics {
    /// Mean over all pairs of `|E| / max(i*j, 1)`.
    pub mred: f64,
    /// Mean of `|E|`.
    pub med: f64,
    pub max_abs_error: u64,
    /// Fraction of pairs with a nonzero error.
    pub error_rate: f64,
}

pub fn error_metrics(mul: &LutMultiplier) -> MulErrorMetrics {
    let cols = mul.cols();
    let n = mul.table.len() as f64;
    let mut rel = 0.0;
    let mut abs = 0.0;
    let mut max_abs = 0u64;
    let mut wrong = 0usize;
    for (idx, &v) in mul.table.iter().enumerate() {
        let exact = ((idx / cols) * (idx % cols)) as i64;
        let err = (v as i64 - exact).unsigned_abs();
        if err != 0 {
            wrong += 1;
            rel += err as f64 / exact.max(1) as f64;
            abs += err as f64;
            max_abs = max_abs.max(err);
        }
    }
    MulErrorMetrics {
        mred: rel / n,
        med: abs / n,
        max_abs_error: max_abs,
        error_rate: wrong as f64 / n,
    }
}
