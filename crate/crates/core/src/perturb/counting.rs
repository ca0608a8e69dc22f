//! Weighted scatter realization of the counting matrices.
//!
//! Instead of materializing one `2^a × 2^b` count matrix per output element,
//! every multiply `(m, n)` feeding output `o` adds that output's weight into a
//! single accumulator cell. With `∂L/∂Y` as weights this yields the aggregate
//! `Σ_o (∂L/∂Y_o) C_o` directly.

use crate::error::{Error, Result};
use crate::netsim::kernels::pad;
use crate::netsim::{LayerQuant, LayerShape, Shape3};
use crate::par;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CountMode {
    RawCount,
    GradWeighted,
    /// Counts of a single output element (flat index within one sample).
    OutputWeighted(usize),
}

/// Per-output weights for a counting pass.
#[derive(Debug, Clone, Copy)]
pub enum CountWeights<'a> {
    Unit,
    /// One weight per output element per sample.
    Grad(&'a [Vec<f64>]),
    Output(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CountingAccumulator {
    pub bits_a: u8,
    pub bits_b: u8,
    pub mode: CountMode,
    /// Integer counts (raw and single-output modes).
    pub counts: Option<Vec<u64>>,
    /// Real-valued accumulators (gradient-weighted mode).
    pub values: Option<Vec<f64>>,
}

impl CountingAccumulator {
    pub fn get(&self, m: usize, n: usize) -> f64 {
        let i = (m << self.bits_b) | n;
        match (&self.counts, &self.values) {
            (Some(c), _) => c[i] as f64,
            (_, Some(v)) => v[i],
            _ => 0.0,
        }
    }

    /// Accumulators flattened as `[m·2^b + n]`.
    pub fn flat(&self) -> Vec<f64> {
        match (&self.counts, &self.values) {
            (Some(c), _) => c.iter().map(|&v| v as f64).collect(),
            (_, Some(v)) => v.clone(),
            _ => Vec::new(),
        }
    }

    pub fn total(&self) -> f64 {
        self.flat().iter().sum()
    }

    /// `Σ C ⊙ E` in integers (counting modes only).
    pub fn dot_integer(&self, e: &[i64]) -> Option<i64> {
        let c = self.counts.as_ref()?;
        Some(c.iter().zip(e).map(|(&c, &e)| c as i64 * e).sum())
    }
}

/// Add `g[idx·r + ch]` into `acc[(m << bb | n)·r + ch]` for every multiply of
/// every output element with a nonzero gradient.
pub(crate) fn scatter(ls: &LayerShape, xp: &[u16], wcodes: &[u16], bb: u32, g: &[f64], r: usize, acc: &mut [f64]) {
    let (ph, pw) = (ls.padded_h(), ls.padded_w());
    let (kh, kw, s) = (ls.kernel_h, ls.kernel_w, ls.stride);
    let terms = ls.terms();
    for o in 0..ls.n_out {
        let wo = &wcodes[o * terms..(o + 1) * terms];
        for oy in 0..ls.out_h {
            for ox in 0..ls.out_w {
                let idx = (o * ls.out_h + oy) * ls.out_w + ox;
                let gv = &g[idx * r..(idx + 1) * r];
                if gv.iter().all(|&v| v == 0.0) {
                    continue;
                }
                for c in 0..ls.n_in {
                    for ky in 0..kh {
                        let xrow = &xp[(c * ph + oy * s + ky) * pw + ox * s..][..kw];
                        let wrow = &wo[(c * kh + ky) * kw..][..kw];
                        for (&xc, &wc) in xrow.iter().zip(wrow) {
                            let cell = (((xc as usize) << bb) | wc as usize) * r;
                            if r == 1 {
                                acc[cell] += gv[0];
                            } else {
                                for (a, &v) in acc[cell..cell + r].iter_mut().zip(gv) {
                                    *a += v;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn scatter_raw(ls: &LayerShape, xp: &[u16], wcodes: &[u16], bb: u32, only: Option<usize>, acc: &mut [u64]) {
    let (ph, pw) = (ls.padded_h(), ls.padded_w());
    let (kh, kw, s) = (ls.kernel_h, ls.kernel_w, ls.stride);
    let terms = ls.terms();
    for o in 0..ls.n_out {
        let wo = &wcodes[o * terms..(o + 1) * terms];
        for oy in 0..ls.out_h {
            for ox in 0..ls.out_w {
                let idx = (o * ls.out_h + oy) * ls.out_w + ox;
                if only.is_some_and(|t| t != idx) {
                    continue;
                }
                for c in 0..ls.n_in {
                    for ky in 0..kh {
                        let xrow = &xp[(c * ph + oy * s + ky) * pw + ox * s..][..kw];
                        let wrow = &wo[(c * kh + ky) * kw..][..kw];
                        for (&xc, &wc) in xrow.iter().zip(wrow) {
                            acc[((xc as usize) << bb) | wc as usize] += 1;
                        }
                    }
                }
            }
        }
    }
}

/// Count (or gradient-weight) the operand pairs of a layer over a batch of
/// unpadded input codes. Padding positions use the code of 0.0 and count as
/// multiplies.
pub fn counting_pass(
    ls: &LayerShape,
    q: &LayerQuant,
    xcodes: &[Vec<u16>],
    wcodes: &[u16],
    weights: CountWeights<'_>,
) -> Result<CountingAccumulator> {
    let (a, b) = q.bits();
    let x_len = ls.n_in * ls.in_h * ls.in_w;
    if wcodes.len() != ls.n_out * ls.terms() {
        return Err(Error::Shape(format!("{} weight codes for this layer", wcodes.len())));
    }
    if let Some(x) = xcodes.iter().find(|x| x.len() != x_len) {
        return Err(Error::Shape(format!("{} input codes, layer expects {x_len}", x.len())));
    }
    if xcodes.iter().flatten().any(|&c| c > q.x.max_code()) || wcodes.iter().any(|&c| c > q.w.max_code()) {
        return Err(Error::InvalidArgument("code outside the quantization range".into()));
    }
    let cells = 1usize << (a + b);
    let shape = Shape3::new(ls.n_in, ls.in_h, ls.in_w);
    let pad_code = q.x.quantize_value(0.0);
    let bb = b as u32;
    let padded = |x: &Vec<u16>| pad(x, shape, ls.padding, pad_code);
    let mode = match weights {
        CountWeights::Unit => CountMode::RawCount,
        CountWeights::Grad(_) => CountMode::GradWeighted,
        CountWeights::Output(i) => CountMode::OutputWeighted(i),
    };
    let mut acc = CountingAccumulator {
        bits_a: a,
        bits_b: b,
        mode,
        counts: None,
        values: None,
    };
    match weights {
        CountWeights::Grad(g) => {
            if g.len() != xcodes.len() || g.iter().any(|v| v.len() != ls.outputs()) {
                return Err(Error::Shape("gradient weights must match the layer output".into()));
            }
            let parts = par::map_chunks(xcodes, par::SAMPLE_CHUNK, |start, chunk| {
                let mut local = vec![0.0; cells];
                for (i, x) in chunk.iter().enumerate() {
                    scatter(ls, &padded(x), wcodes, bb, &g[start + i], 1, &mut local);
                }
                local
            });
            let mut total = vec![0.0; cells];
            for p in parts {
                total.iter_mut().zip(p).for_each(|(t, v)| *t += v);
            }
            acc.values = Some(total);
        }
        CountWeights::Unit | CountWeights::Output(_) => {
            let only = match weights {
                CountWeights::Output(i) if i >= ls.outputs() => {
                    return Err(Error::Shape(format!("output index {i} of {}", ls.outputs())))
                }
                CountWeights::Output(i) => Some(i),
                _ => None,
            };
            let mut total = vec![0u64; cells];
            for x in xcodes {
                scatter_raw(ls, &padded(x), wcodes, bb, only, &mut total);
            }
            acc.counts = Some(total);
        }
    }
    Ok(acc)
}

/// `g[m·2^b + n] = s_X s_W Σ_o (∂L/∂Y_o) C_o[m][n]`, summed over the batch.
/// Batch averaging is carried by the upstream gradients.
pub fn layer_gradient(
    ls: &LayerShape,
    q: &LayerQuant,
    xcodes: &[Vec<u16>],
    wcodes: &[u16],
    dy: &[Vec<f64>],
) -> Result<Vec<f64>> {
    let acc = counting_pass(ls, q, xcodes, wcodes, CountWeights::Grad(dy))?;
    let s = q.x.scale * q.w.scale;
    Ok(acc.flat().into_iter().map(|v| v * s).collect())
}
