//! Quantized CNN engine with exact and LUT-approximate multiplication.

pub(crate) mod kernels;
mod loss;
mod model;
mod sim;

pub use loss::{loss_ce, softmax, LossOutput};
pub use model::{
    fold_batchnorm, Assignment, BatchNorm, ConvLayer, Layer, LayerCalib, LayerQuant, LayerShape,
    ModelGraph, MulKind, Shape3,
};
pub use sim::{
    argmax, BackwardOptions, ForwardTrace, ProductTable, SampleGrads, SampleTrace, Simulator,
};

use crate::error::{Error, Result};
use crate::mullib::LutMultiplier;
use kernels::{conv_codes, pad, AffineTerms};

/// Integer accumulations of one output element.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProductSums {
    /// `Σ P(X̂, Ŵ)` over the receptive field.
    pub products: i64,
    /// `Σ X̂` over the receptive field.
    pub sum_x: i64,
}

fn check_codes(ls: &LayerShape, q: &LayerQuant, xcodes: &[u16], wcodes: &[u16], bias: usize) -> Result<()> {
    let x_len = ls.n_in * ls.in_h * ls.in_w;
    if xcodes.len() != x_len {
        return Err(Error::Shape(format!("{} input codes, layer expects {x_len}", xcodes.len())));
    }
    if wcodes.len() != ls.n_out * ls.terms() {
        return Err(Error::Shape(format!(
            "{} weight codes, layer expects {}",
            wcodes.len(),
            ls.n_out * ls.terms()
        )));
    }
    if bias != ls.n_out {
        return Err(Error::Shape(format!("{bias} biases for {} outputs", ls.n_out)));
    }
    if xcodes.iter().any(|&c| c > q.x.max_code()) || wcodes.iter().any(|&c| c > q.w.max_code()) {
        return Err(Error::InvalidArgument("code outside the quantization range".into()));
    }
    Ok(())
}

/// Per-output integer sums, with products taken from `table` (row-major,
/// `2^a × 2^b`) or exact when `table` is `None`. Padding uses the code of 0.0.
pub fn conv_products(
    ls: &LayerShape,
    q: &LayerQuant,
    xcodes: &[u16],
    wcodes: &[u16],
    table: Option<&[u32]>,
) -> Result<Vec<ProductSums>> {
    check_codes(ls, q, xcodes, wcodes, ls.n_out)?;
    let in_shape = Shape3::new(ls.n_in, ls.in_h, ls.in_w);
    let xp = pad(xcodes, in_shape, ls.padding, q.x.quantize_value(0.0));
    let mut out = vec![ProductSums { products: 0, sum_x: 0 }; ls.outputs()];
    let mut emit = |_o, idx: usize, acc: i64, sx| {
        out[idx] = ProductSums {
            products: acc,
            sum_x: sx,
        }
    };
    match table {
        None => conv_codes(ls, &xp, wcodes, |x, w| x as i64 * w as i64, &mut emit),
        Some(t) => {
            let bb = q.w.bits as u32;
            if t.len() != 1 << (q.x.bits + q.w.bits) {
                return Err(Error::Shape(format!("table of {} entries", t.len())));
            }
            conv_codes(ls, &xp, wcodes, |x, w| t[((x as usize) << bb) | w as usize] as i64, &mut emit)
        }
    }
    Ok(out)
}

fn affine_output(ls: &LayerShape, q: &LayerQuant, wcodes: &[u16], bias: &[f64], sums: &[ProductSums]) -> Vec<f64> {
    let aff = AffineTerms::new(ls, q, wcodes);
    let per = ls.out_h * ls.out_w;
    sums.iter()
        .enumerate()
        .map(|(i, s)| {
            let o = i / per;
            aff.output(o, s.products as f64, s.sum_x, bias[o])
        })
        .collect()
}

/// Quantized convolution with exact products:
/// `s_X s_W Σ X̂Ŵ + s_X b_W Σ X̂ + s_W b_X Σ Ŵ + T b_X b_W + bias`.
pub fn conv_exact_quant(
    ls: &LayerShape,
    q: &LayerQuant,
    xcodes: &[u16],
    wcodes: &[u16],
    bias: &[f64],
) -> Result<Vec<f64>> {
    check_codes(ls, q, xcodes, wcodes, bias.len())?;
    let sums = conv_products(ls, q, xcodes, wcodes, None)?;
    Ok(affine_output(ls, q, wcodes, bias, &sums))
}

/// As [`conv_exact_quant`] with every `X̂·Ŵ` replaced by the multiplier's table entry.
pub fn conv_approx(
    ls: &LayerShape,
    q: &LayerQuant,
    xcodes: &[u16],
    wcodes: &[u16],
    bias: &[f64],
    mul: &LutMultiplier,
) -> Result<Vec<f64>> {
    if mul.bits() != q.bits() {
        return Err(Error::InvalidMultiplier {
            name: mul.name().to_string(),
            reason: format!(
                "is {}x{} but the layer uses {}x{}",
                mul.bits_a(),
                mul.bits_b(),
                q.x.bits,
                q.w.bits
            ),
        });
    }
    check_codes(ls, q, xcodes, wcodes, bias.len())?;
    let sums = conv_products(ls, q, xcodes, wcodes, Some(mul.table()))?;
    Ok(affine_output(ls, q, wcodes, bias, &sums))
}
