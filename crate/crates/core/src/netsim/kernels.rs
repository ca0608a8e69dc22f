//! Convolution kernels over padded buffers.
//!
//! Quantized kernels follow the affine expansion of a quantized dot product:
//!
//! `Y = s_X s_W Σ P(X̂, Ŵ) + s_X b_W Σ X̂ + s_W b_X Σ Ŵ + T b_X b_W + bias`
//!
//! where `P` is the exact product or the multiplier table lookup and `T` the
//! number of terms. Integer sums are accumulated exactly in `i64`.

use std::ops::AddAssign;

use super::model::{LayerQuant, LayerShape, Shape3};

pub(crate) fn pad<T: Copy>(src: &[T], shape: Shape3, padding: usize, fill: T) -> Vec<T> {
    if padding == 0 {
        return src.to_vec();
    }
    let ph = shape.h + 2 * padding;
    let pw = shape.w + 2 * padding;
    let mut out = vec![fill; shape.c * ph * pw];
    for c in 0..shape.c {
        for y in 0..shape.h {
            let s = (c * shape.h + y) * shape.w;
            let d = (c * ph + y + padding) * pw + padding;
            out[d..d + shape.w].copy_from_slice(&src[s..s + shape.w]);
        }
    }
    out
}

pub(crate) fn unpad(src: &[f64], shape: Shape3, padding: usize, r: usize) -> Vec<f64> {
    if padding == 0 {
        return src.to_vec();
    }
    let ph = shape.h + 2 * padding;
    let pw = shape.w + 2 * padding;
    let mut out = vec![0.0; shape.len() * r];
    for c in 0..shape.c {
        for y in 0..shape.h {
            let s = ((c * ph + y + padding) * pw + padding) * r;
            let d = (c * shape.h + y) * shape.w * r;
            out[d..d + shape.w * r].copy_from_slice(&src[s..s + shape.w * r]);
        }
    }
    out
}

/// Walk every output element, accumulating `prod(x̂, ŵ)` and `Σ x̂` over its
/// receptive field in the padded code image `xp`.
#[inline]
pub(crate) fn conv_codes<T, F, E>(ls: &LayerShape, xp: &[u16], wcodes: &[u16], prod: F, mut emit: E)
where
    T: Copy + Default + AddAssign,
    F: Fn(u16, u16) -> T,
    E: FnMut(usize, usize, T, i64),
{
    let (ph, pw) = (ls.padded_h(), ls.padded_w());
    let (kh, kw, s) = (ls.kernel_h, ls.kernel_w, ls.stride);
    let terms = ls.terms();
    for o in 0..ls.n_out {
        let wo = &wcodes[o * terms..(o + 1) * terms];
        for oy in 0..ls.out_h {
            for ox in 0..ls.out_w {
                let mut acc = T::default();
                let mut sum_x = 0i64;
                for c in 0..ls.n_in {
                    for ky in 0..kh {
                        let xrow = &xp[(c * ph + oy * s + ky) * pw + ox * s..][..kw];
                        let wrow = &wo[(c * kh + ky) * kw..][..kw];
                        for (&xc, &wc) in xrow.iter().zip(wrow) {
                            acc += prod(xc, wc);
                            sum_x += xc as i64;
                        }
                    }
                }
                emit(o, (o * ls.out_h + oy) * ls.out_w + ox, acc, sum_x);
            }
        }
    }
}

/// Scalar parts of the affine expansion shared by every output of a layer.
#[derive(Debug, Clone)]
pub(crate) struct AffineTerms {
    pub sxsw: f64,
    pub sx_bw: f64,
    pub sw_bx: f64,
    pub const_term: f64,
    /// Σ Ŵ per output channel.
    pub wsum: Vec<i64>,
}

impl AffineTerms {
    pub fn new(ls: &LayerShape, q: &LayerQuant, wcodes: &[u16]) -> Self {
        let terms = ls.terms();
        AffineTerms {
            sxsw: q.x.scale * q.w.scale,
            sx_bw: q.x.scale * q.w.offset,
            sw_bx: q.w.scale * q.x.offset,
            const_term: terms as f64 * q.x.offset * q.w.offset,
            wsum: wcodes
                .chunks(terms)
                .map(|c| c.iter().map(|&w| w as i64).sum())
                .collect(),
        }
    }

    #[inline]
    pub fn output(&self, o: usize, products: f64, sum_x: i64, bias: f64) -> f64 {
        self.sxsw * products
            + self.sx_bw * sum_x as f64
            + self.sw_bx * self.wsum[o] as f64
            + self.const_term
            + bias
    }
}

pub(crate) fn conv_float(ls: &LayerShape, xp: &[f64], w: &[f64], bias: &[f64]) -> Vec<f64> {
    let (ph, pw) = (ls.padded_h(), ls.padded_w());
    let (kh, kw, s) = (ls.kernel_h, ls.kernel_w, ls.stride);
    let terms = ls.terms();
    let mut out = vec![0.0; ls.outputs()];
    for o in 0..ls.n_out {
        let wo = &w[o * terms..(o + 1) * terms];
        for oy in 0..ls.out_h {
            for ox in 0..ls.out_w {
                let mut acc = 0.0;
                for c in 0..ls.n_in {
                    for ky in 0..kh {
                        let xrow = &xp[(c * ph + oy * s + ky) * pw + ox * s..][..kw];
                        let wrow = &wo[(c * kh + ky) * kw..][..kw];
                        for (&x, &wv) in xrow.iter().zip(wrow) {
                            acc += x * wv;
                        }
                    }
                }
                out[(o * ls.out_h + oy) * ls.out_w + ox] = acc + bias[o];
            }
        }
    }
    out
}

/// Reverse pass of a convolution with `r` interleaved gradient channels
/// (`g[idx * r + ch]`). Returns the padded input gradient when requested and,
/// for `r == 1`, weight and bias gradients against the padded operand `xp`.
pub(crate) struct ConvGrads {
    pub input_padded: Option<Vec<f64>>,
    pub weight: Option<Vec<f64>>,
    pub bias: Option<Vec<f64>>,
}

pub(crate) fn conv_backward(
    ls: &LayerShape,
    w: &[f64],
    gout: &[f64],
    r: usize,
    need_input: bool,
    weight_operand: Option<&[f64]>,
) -> ConvGrads {
    let (ph, pw) = (ls.padded_h(), ls.padded_w());
    let (kh, kw, s) = (ls.kernel_h, ls.kernel_w, ls.stride);
    let terms = ls.terms();
    let mut gin = need_input.then(|| vec![0.0; ls.n_in * ph * pw * r]);
    let mut gw = weight_operand.map(|_| vec![0.0; w.len()]);
    let mut gb = weight_operand.map(|_| vec![0.0; ls.n_out]);
    for o in 0..ls.n_out {
        let wo = &w[o * terms..(o + 1) * terms];
        for oy in 0..ls.out_h {
            for ox in 0..ls.out_w {
                let idx = (o * ls.out_h + oy) * ls.out_w + ox;
                let g = &gout[idx * r..(idx + 1) * r];
                if g.iter().all(|&v| v == 0.0) {
                    continue;
                }
                if let Some(gb) = gb.as_mut() {
                    gb[o] += g[0];
                }
                for c in 0..ls.n_in {
                    for ky in 0..kh {
                        let base = (c * ph + oy * s + ky) * pw + ox * s;
                        let wbase = (c * kh + ky) * kw;
                        if let Some(gin) = gin.as_mut() {
                            for kx in 0..kw {
                                let wv = wo[wbase + kx];
                                let dst = &mut gin[(base + kx) * r..(base + kx + 1) * r];
                                for (d, &gv) in dst.iter_mut().zip(g) {
                                    *d += gv * wv;
                                }
                            }
                        }
                        if let (Some(gw), Some(xp)) = (gw.as_mut(), weight_operand) {
                            let g0 = g[0];
                            for kx in 0..kw {
                                gw[o * terms + wbase + kx] += g0 * xp[base + kx];
                            }
                        }
                    }
                }
            }
        }
    }
    ConvGrads {
        input_padded: gin,
        weight: gw,
        bias: gb,
    }
}
