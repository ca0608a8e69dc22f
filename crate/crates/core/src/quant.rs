//! Per-tensor affine uniform quantization.
//!
//! `code = clamp(round((v - b) / s), 0, 2^bits - 1)` and `v ≈ s·code + b`,
//! with round-half-away-from-zero. Quantiles use linear interpolation at rank
//! `q·(n-1)` of the sorted values.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mullib::check_bits;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub scale: f64,
    pub offset: f64,
    pub bits: u8,
    pub clip_lo: f64,
    pub clip_hi: f64,
}

impl QuantParams {
    /// Grid spanning `[lo, hi]`. A zero-width range gets scale 1 anchored at `lo`.
    pub fn from_range(lo: f64, hi: f64, bits: u8) -> Result<Self> {
        check_bits(bits)?;
        if !(lo.is_finite() && hi.is_finite()) || hi < lo {
            return Err(Error::InvalidArgument(format!("bad quantization range [{lo}, {hi}]")));
        }
        let steps = ((1u32 << bits) - 1) as f64;
        let scale = if hi > lo { (hi - lo) / steps } else { 1.0 };
        Ok(QuantParams {
            scale,
            offset: lo,
            bits,
            clip_lo: lo,
            clip_hi: lo + scale * steps,
        })
    }

    pub fn levels(&self) -> u32 {
        1 << self.bits
    }

    pub fn max_code(&self) -> u16 {
        ((1u32 << self.bits) - 1) as u16
    }

    #[inline]
    pub fn quantize_value(&self, v: f64) -> u16 {
        let c = ((v - self.offset) / self.scale).round();
        if c >= self.max_code() as f64 {
            self.max_code()
        } else if c > 0.0 {
            c as u16
        } else {
            0
        }
    }

    #[inline]
    pub fn dequantize_code(&self, code: u16) -> f64 {
        self.scale * code as f64 + self.offset
    }

    /// Whether the straight-through gradient passes at `v`.
    #[inline]
    pub fn in_range(&self, v: f64) -> bool {
        v >= self.clip_lo && v <= self.clip_hi
    }

    pub fn clamp(&self, v: f64) -> f64 {
        v.clamp(self.clip_lo, self.clip_hi)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantTensor {
    pub codes: Vec<u16>,
    pub params: QuantParams,
    pub shape: Vec<usize>,
}

/// Linear-interpolation quantile of already-sorted values.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let rank = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        let t = rank - lo as f64;
        sorted[lo] + (sorted[hi] - sorted[lo]) * t
    }
}

pub fn sorted_copy(values: &[f64]) -> Vec<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// Fit per-tensor parameters on the `[q, 1-q]` quantile range (`q = 0` is min/max).
pub fn fit_params(values: &[f64], bits: u8, q: f64) -> Result<QuantParams> {
    if values.is_empty() {
        return Err(Error::EmptyTensor);
    }
    fit_params_sorted(&sorted_copy(values), bits, q)
}

pub fn fit_params_sorted(sorted: &[f64], bits: u8, q: f64) -> Result<QuantParams> {
    if sorted.is_empty() {
        return Err(Error::EmptyTensor);
    }
    if !(0.0..0.5).contains(&q) {
        return Err(Error::InvalidArgument(format!("quantile {q} outside [0, 0.5)")));
    }
    let lo = quantile_sorted(sorted, q);
    let hi = quantile_sorted(sorted, 1.0 - q);
    QuantParams::from_range(lo, hi, bits)
}

pub fn quantize(values: &[f64], shape: &[usize], params: QuantParams) -> Result<QuantTensor> {
    if shape.iter().product::<usize>() != values.len() {
        return Err(Error::Shape(format!(
            "{} values for shape {shape:?}",
            values.len()
        )));
    }
    Ok(QuantTensor {
        codes: values.iter().map(|&v| params.quantize_value(v)).collect(),
        params,
        shape: shape.to_vec(),
    })
}

pub fn dequantize(qt: &QuantTensor) -> Vec<f64> {
    qt.codes
        .iter()
        .map(|&c| qt.params.dequantize_code(c))
        .collect()
}
