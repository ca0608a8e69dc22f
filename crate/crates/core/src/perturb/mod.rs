//! Second-order estimate of the loss change caused by substituting an
//! approximate multiplier into one layer.
//!
//! For layer `k` with flattened error vector `e` the estimate is
//! `Ω = gᵀe + ½ eᵀHe`. `g` and `H` depend only on the exact quantized model and
//! the sample batch, so they are computed once per layer and every candidate
//! is then scored by a dot product.
//!
//! `H` is the Gauss-Newton form, the batch mean of `J_nᵀ H_n J_n` where `J_n`
//! is the Jacobian of sample `n`'s logits w.r.t. `e` and `H_n` its softmax
//! cross-entropy Hessian. Averaging `J` before forming the product would let
//! per-sample directions cancel. In rank-one mode each `H_n ≈ λ_n v_n v_nᵀ`
//! by power iteration, so only `u_n = J_nᵀv_n` is needed and one extra
//! backward channel suffices; the representation keeps one `u_n` per sample.

mod counting;
mod hessian;
mod table;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use counting::{counting_pass, layer_gradient, CountMode, CountWeights, CountingAccumulator};
pub use hessian::{output_hessian_ce, power_iteration, PowerResult, SymMatrix, POWER_MAX_ITERS, POWER_TOL};
pub use table::{LayerTable, PerturbationTable, TableEntry};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::mullib::MultiplierLibrary;
use crate::netsim::{softmax, Assignment, BackwardOptions, ModelGraph, Simulator};
use crate::par;

/// Largest error-vector length for which the dense Hessian is built.
pub const FULL_HESSIAN_MAX: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HessianMode {
    Full,
    #[default]
    RankOne,
}

impl HessianMode {
    pub fn as_str(self) -> &'static str {
        match self {
            HessianMode::Full => "full",
            HessianMode::RankOne => "rank-one",
        }
    }
}

impl fmt::Display for HessianMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for HessianMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(HessianMode::Full),
            "rank-one" | "rank_one" | "rank1" => Ok(HessianMode::RankOne),
            _ => Err(Error::InvalidArgument(format!("unknown hessian mode `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum HessianRep {
    /// Dense `D × D` matrix, `D = 2^(a+b)`.
    Full(SymMatrix),
    /// `H ≈ Σ_n λ_n u_n u_nᵀ` with `u_n = J_nᵀv_n`; `λ_n` carries the `1/N`
    /// batch weight and samples with `λ_n = 0` are dropped.
    RankOne { u: Vec<Vec<f64>>, lambda: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSensitivity {
    pub layer: usize,
    pub bits: (u8, u8),
    /// `s_X · s_W` of the layer.
    pub scale: f64,
    pub grad: Vec<f64>,
    pub hessian: HessianRep,
}

impl LayerSensitivity {
    pub fn dim(&self) -> usize {
        self.grad.len()
    }
}

/// `gᵀe + ½ eᵀHe` (full) or `gᵀe + ½ Σ λ_n (u_nᵀe)²` (rank one).
pub fn evaluate_omega(sens: &LayerSensitivity, e: &[f64]) -> Result<f64> {
    if e.len() != sens.dim() {
        return Err(Error::Shape(format!(
            "error vector of length {} for a layer with {} entries",
            e.len(),
            sens.dim()
        )));
    }
    let lin: f64 = sens.grad.iter().zip(e).map(|(g, e)| g * e).sum();
    let quad = match &sens.hessian {
        HessianRep::Full(h) => h.quad(e),
        HessianRep::RankOne { u, lambda } => u
            .iter()
            .zip(lambda)
            .map(|(u, l)| {
                let ue: f64 = u.iter().zip(e).map(|(u, e)| u * e).sum();
                l * ue * ue
            })
            .sum(),
    };
    Ok(lin + 0.5 * quad)
}

/// Batch-aggregated `s_X s_W Σ_o (∂z/∂Y_o) C_o` for every multiplicative
/// layer, with `channels` seeds per logit produced by `seed(sample, logits)`
/// (interleaved `[logit · channels + ch]`). Returns, per layer ordinal, a
/// flat `[cell · channels + ch]` accumulator.
pub fn seeded_layer_sums<F>(sim: &Simulator<'_>, data: &Dataset, channels: usize, seed: F) -> Result<Vec<Vec<f64>>>
where
    F: Fn(usize, &[f64]) -> Vec<f64> + Sync + Send,
{
    if !sim.is_quantized() {
        return Err(Error::InvalidArgument("estimation needs a quantized simulator".into()));
    }
    if data.is_empty() {
        return Err(Error::EmptyTensor);
    }
    let model = sim.model();
    let mul = model.mul_layers();
    let dims: Vec<usize> = mul
        .iter()
        .map(|&p| {
            let (a, b) = sim.layer_quant(p).unwrap().bits();
            1usize << (a + b)
        })
        .collect();
    let opts = BackwardOptions {
        channels,
        weight_grads: false,
        keep_output_grads: true,
    };
    let idx: Vec<usize> = (0..data.len()).collect();
    let parts = par::map_chunks(&idx, par::SAMPLE_CHUNK, |_, chunk| {
        let mut acc: Vec<Vec<f64>> = dims.iter().map(|&d| vec![0.0; d * channels]).collect();
        for &i in chunk {
            let trace = sim.forward_sample(data.image(i));
            let s = seed(i, trace.logits());
            let grads = sim.backward_sample(&trace, &s, opts);
            for (k, &pos) in mul.iter().enumerate() {
                let Some(g) = grads.output_grads[pos].as_ref() else {
                    continue;
                };
                let q = sim.layer_quant(pos).unwrap();
                let xp = sim.padded_codes(pos, &trace).unwrap();
                counting::scatter(
                    &sim.layer_shape(pos).unwrap(),
                    &xp,
                    sim.weight_codes(pos).unwrap(),
                    q.w.bits as u32,
                    g,
                    channels,
                    &mut acc[k],
                );
            }
        }
        acc
    });
    let mut total: Vec<Vec<f64>> = dims.iter().map(|&d| vec![0.0; d * channels]).collect();
    for part in parts {
        for (t, p) in total.iter_mut().zip(part) {
            t.iter_mut().zip(p).for_each(|(a, b)| *a += b);
        }
    }
    for (k, &pos) in mul.iter().enumerate() {
        let q = sim.layer_quant(pos).unwrap();
        let s = q.x.scale * q.w.scale;
        total[k].iter_mut().for_each(|v| *v *= s);
    }
    Ok(total)
}

fn channel(flat: &[f64], channels: usize, ch: usize) -> Vec<f64> {
    flat.iter().skip(ch).step_by(channels).copied().collect()
}

/// Batch-mean output Jacobian of one layer: row `i` is `∂z̄_i/∂e`.
pub fn output_jacobian(sim: &Simulator<'_>, data: &Dataset, layer: usize) -> Result<Vec<Vec<f64>>> {
    let k = sim.model().classes;
    let n = data.len() as f64;
    let sums = seeded_layer_sums(sim, data, k, |_, _| {
        let mut s = vec![0.0; k * k];
        for i in 0..k {
            s[i * k + i] = 1.0 / n;
        }
        s
    })?;
    let flat = sums.get(layer).ok_or_else(|| Error::InvalidArgument(format!("no layer {layer}")))?;
    Ok((0..k).map(|i| channel(flat, k, i)).collect())
}

/// Per-sample counterpart of [`seeded_layer_sums`]: `f(sample, logits)`
/// returns the seeds and an auxiliary value, and the result holds, per
/// sample, the auxiliary value and one flat accumulator per layer.
fn seeded_sample_sums<A, F>(sim: &Simulator<'_>, data: &Dataset, channels: usize, f: F) -> Result<Vec<(A, Vec<Vec<f64>>)>>
where
    A: Send,
    F: Fn(usize, &[f64]) -> (Vec<f64>, A) + Sync + Send,
{
    if !sim.is_quantized() {
        return Err(Error::InvalidArgument("estimation needs a quantized simulator".into()));
    }
    if data.is_empty() {
        return Err(Error::EmptyTensor);
    }
    let mul = sim.model().mul_layers();
    let opts = BackwardOptions {
        channels,
        weight_grads: false,
        keep_output_grads: true,
    };
    let idx: Vec<usize> = (0..data.len()).collect();
    let parts = par::map_chunks(&idx, par::SAMPLE_CHUNK, |_, chunk| {
        chunk
            .iter()
            .map(|&i| {
                let trace = sim.forward_sample(data.image(i));
                let (s, aux) = f(i, trace.logits());
                let grads = sim.backward_sample(&trace, &s, opts);
                let sums = mul
                    .iter()
                    .map(|&pos| {
                        let q = sim.layer_quant(pos).unwrap();
                        let mut acc = vec![0.0; (1usize << (q.x.bits + q.w.bits)) * channels];
                        if let Some(g) = grads.output_grads[pos].as_ref() {
                            let xp = sim.padded_codes(pos, &trace).unwrap();
                            counting::scatter(
                                &sim.layer_shape(pos).unwrap(),
                                &xp,
                                sim.weight_codes(pos).unwrap(),
                                q.w.bits as u32,
                                g,
                                channels,
                                &mut acc,
                            );
                        }
                        let scale = q.x.scale * q.w.scale;
                        acc.iter_mut().for_each(|v| *v *= scale);
                        acc
                    })
                    .collect();
                (aux, sums)
            })
            .collect::<Vec<_>>()
    });
    Ok(parts.into_iter().flatten().collect())
}

/// Gradient and Hessian representation of every multiplicative layer,
/// measured on the exact quantized model.
pub fn estimate_sensitivities(
    sim: &Simulator<'_>,
    data: &Dataset,
    mode: HessianMode,
    seed: u64,
) -> Result<Vec<LayerSensitivity>> {
    let model = sim.model();
    let mul = model.mul_layers();
    let bits: Vec<(u8, u8)> = mul
        .iter()
        .map(|&p| sim.layer_quant(p).map(|q| q.bits()).ok_or(Error::Unprepared(0)))
        .collect::<Result<_>>()?;
    if mode == HessianMode::Full {
        if let Some(&(a, b)) = bits.iter().find(|&&(a, b)| 1usize << (a + b) > FULL_HESSIAN_MAX) {
            return Err(Error::HessianInfeasible {
                bits_a: a,
                bits_b: b,
                entries: 1 << (a + b),
            });
        }
    }
    let k = model.classes;
    let n = data.len() as f64;
    let labels = &data.labels;
    let loss_seed = |i: usize, p: &[f64]| -> Vec<f64> {
        let mut s = p.to_vec();
        s[labels[i] as usize] -= 1.0;
        s.iter().map(|v| v / n).collect()
    };
    let dims: Vec<usize> = bits.iter().map(|&(a, b)| 1usize << (a + b)).collect();
    let sensitivity = |layer: usize, grad: Vec<f64>, hessian: HessianRep| LayerSensitivity {
        layer,
        bits: bits[layer],
        scale: scale_of(sim, mul[layer]),
        grad,
        hessian,
    };
    match mode {
        HessianMode::Full => {
            let r = k + 1;
            let samples = seeded_sample_sums(sim, data, r, |i, z| {
                let p = softmax(z);
                let ls = loss_seed(i, &p);
                let mut s = vec![0.0; k * r];
                for c in 0..k {
                    s[c * r] = ls[c];
                    s[c * r + 1 + c] = 1.0;
                }
                (s, p)
            })?;
            Ok((0..mul.len())
                .map(|layer| {
                    let d = dims[layer];
                    let mut grad = vec![0.0; d];
                    let mut plus = Vec::with_capacity(samples.len() * k);
                    let mut minus = Vec::with_capacity(samples.len());
                    for (p, sums) in &samples {
                        let flat = &sums[layer];
                        grad.iter_mut().zip(channel(flat, r, 0)).for_each(|(g, v)| *g += v);
                        let jac: Vec<Vec<f64>> = (0..k).map(|c| channel(flat, r, 1 + c)).collect();
                        let (pos, neg) = ce_factors(&jac, p, n);
                        plus.extend(pos);
                        minus.push(neg);
                    }
                    sensitivity(layer, grad, HessianRep::Full(gram_difference(d, &plus, &minus)))
                })
                .collect())
        }
        HessianMode::RankOne => {
            let samples = seeded_sample_sums(sim, data, 2, |i, z| {
                let p = softmax(z);
                let ls = loss_seed(i, &p);
                let h = output_hessian_ce(std::slice::from_ref(&p)).expect("softmax output is normalized");
                let top = power_iteration(k, |v| h.matvec(v), POWER_MAX_ITERS, POWER_TOL, seed);
                let mut s = vec![0.0; k * 2];
                for c in 0..k {
                    s[c * 2] = ls[c];
                    s[c * 2 + 1] = top.vector[c];
                }
                (s, top.lambda)
            })?;
            Ok((0..mul.len())
                .map(|layer| {
                    let mut grad = vec![0.0; dims[layer]];
                    let mut u = Vec::new();
                    let mut lambda = Vec::new();
                    for (l, sums) in &samples {
                        let flat = &sums[layer];
                        grad.iter_mut().zip(channel(flat, 2, 0)).for_each(|(g, v)| *g += v);
                        if *l > 0.0 {
                            u.push(channel(flat, 2, 1));
                            lambda.push(*l / n);
                        }
                    }
                    sensitivity(layer, grad, HessianRep::RankOne { u, lambda })
                })
                .collect())
        }
    }
}

fn scale_of(sim: &Simulator<'_>, pos: usize) -> f64 {
    let q = sim.layer_quant(pos).unwrap();
    q.x.scale * q.w.scale
}

/// Factors of `Jᵀ(diag(p) − ppᵀ)J / n`: rows `√(p_c/n) J_c` and `Jᵀp/√n`.
fn ce_factors(jac: &[Vec<f64>], p: &[f64], n: f64) -> (Vec<Vec<f64>>, Vec<f64>) {
    let d = jac.first().map_or(0, Vec::len);
    let mut neg = vec![0.0; d];
    let mut pos = Vec::with_capacity(jac.len());
    for (row, &pc) in jac.iter().zip(p) {
        let w = (pc / n).sqrt();
        pos.push(row.iter().map(|v| v * w).collect());
        neg.iter_mut().zip(row).for_each(|(a, v)| *a += pc * v);
    }
    neg.iter_mut().for_each(|a| *a /= n.sqrt());
    (pos, neg)
}

/// `Σ aaᵀ − Σ bbᵀ` over the given rows.
fn gram_difference(d: usize, plus: &[Vec<f64>], minus: &[Vec<f64>]) -> SymMatrix {
    let rows = par::map_range(d, |a| {
        let mut row = vec![0.0; d];
        for (set, sign) in [(plus, 1.0), (minus, -1.0)] {
            for v in set {
                let va = sign * v[a];
                if va != 0.0 {
                    row.iter_mut().zip(v).for_each(|(r, &x)| *r += va * x);
                }
            }
        }
        row
    });
    SymMatrix {
        n: d,
        data: rows.concat(),
    }
}

pub fn table_source(mode: HessianMode) -> String {
    format!("taylor-{mode}")
}

/// Sensitivities plus `Ω` for every library candidate of every layer.
pub fn build_table(
    model: &ModelGraph,
    data: &Dataset,
    library: &MultiplierLibrary,
    mode: HessianMode,
    seed: u64,
) -> Result<(PerturbationTable, Vec<LayerSensitivity>)> {
    let bits = model.layer_bits()?;
    for (layer, &(a, b)) in bits.iter().enumerate() {
        if library.candidates(a, b).next().is_none() {
            return Err(Error::NoCandidates {
                layer,
                bits_a: a,
                bits_b: b,
            });
        }
    }
    let sim = Simulator::quantized(model, &Assignment::all_exact(model), library)?;
    let sens = estimate_sensitivities(&sim, data, mode, seed)?;
    let layers = sens
        .iter()
        .map(|s| {
            let (a, b) = s.bits;
            let cands: Vec<_> = library.candidates(a, b).collect();
            let omegas = par::map_slice(&cands, |m| evaluate_omega(s, &m.error_matrix().flat_f64()));
            Ok(LayerTable {
                layer: s.layer,
                bits_a: a,
                bits_b: b,
                entries: cands
                    .iter()
                    .zip(omegas)
                    .map(|(m, o)| {
                        Ok(TableEntry {
                            multiplier: m.name().to_string(),
                            omega: o?,
                        })
                    })
                    .collect::<Result<_>>()?,
            })
        })
        .collect::<Result<_>>()?;
    Ok((
        PerturbationTable {
            source: table_source(mode),
            batch_size: data.len(),
            layers,
        },
        sens,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rank_one(g: Vec<f64>, u: Vec<f64>, lambda: f64) -> LayerSensitivity {
        LayerSensitivity {
            layer: 0,
            bits: (1, 1),
            scale: 1.0,
            grad: g,
            hessian: HessianRep::RankOne {
                u: vec![u],
                lambda: vec![lambda],
            },
        }
    }

    #[test]
    fn omega_examples() {
        let s = rank_one(vec![0.0; 4], vec![1.0, 0.0, 0.0, 0.5], 0.5);
        assert_eq!(evaluate_omega(&s, &[0.0; 4]).unwrap(), 0.0);
        assert_eq!(evaluate_omega(&s, &[1.0, 0.0, 0.0, 2.0]).unwrap(), 1.0);
        assert!(evaluate_omega(&s, &[0.0; 3]).is_err());
    }

    #[test]
    fn omega_scales_linearly_and_quadratically() {
        let s = rank_one(vec![0.3, -0.2, 0.1, 0.0], vec![1.0, 2.0, -1.0, 0.5], 0.7);
        let e = [1.0, -2.0, 0.5, 3.0];
        let lin: f64 = s.grad.iter().zip(&e).map(|(g, e)| g * e).sum();
        let quad = evaluate_omega(&s, &e).unwrap() - lin;
        for alpha in [0.5, 2.0, -3.0] {
            let ea: Vec<f64> = e.iter().map(|v| v * alpha).collect();
            let got = evaluate_omega(&s, &ea).unwrap();
            assert!((got - (alpha * lin + alpha * alpha * quad)).abs() < 1e-12);
        }
    }

    #[test]
    fn ce_factors_give_gauss_newton() {
        let jac = vec![vec![1.0, 2.0, 0.0], vec![0.5, -1.0, 3.0]];
        let p = [0.3, 0.7];
        let h = output_hessian_ce(&[p.to_vec()]).unwrap();
        let (pos, neg) = ce_factors(&jac, &p, 2.0);
        let g = gram_difference(3, &pos, &[neg]);
        for a in 0..3 {
            for b in 0..3 {
                let mut want = 0.0;
                for i in 0..2 {
                    for l in 0..2 {
                        want += jac[i][a] * h.get(i, l) * jac[l][b];
                    }
                }
                assert!((g.get(a, b) - want / 2.0).abs() < 1e-15);
                assert_eq!(g.get(a, b), g.get(b, a));
            }
        }
    }

    #[test]
    fn mode_names() {
        for m in [HessianMode::Full, HessianMode::RankOne] {
            assert_eq!(m.as_str().parse::<HessianMode>().unwrap(), m);
        }
        assert!("diag".parse::<HessianMode>().is_err());
    }
}
