//! Retraining-free accuracy recovery for an approximate assignment.
//!
//! Phase 1 re-fits each layer's input quantizer on the approximate model's
//! activations, clipped at the `(q, 1-q)` quantiles for the `q` whose
//! quantized activations are closest (in mean relative error over nonzero
//! reference entries) to what the exact model feeds the layer.
//! Phase 2 learns per-layer weight clipping bounds
//! `W' = clip(W, σ(γ)·min W, σ(β)·max W)` by plain gradient descent on the
//! cross-entropy loss of the approximate model, with straight-through
//! gradients for rounding and the multiplier tables.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::mullib::MultiplierLibrary;
use crate::netsim::{loss_ce, Assignment, BackwardOptions, LayerCalib, ModelGraph, Simulator};
use crate::par;
use crate::quant::{fit_params, fit_params_sorted, sorted_copy, QuantParams};

pub const MRE_EPS: f64 = 1e-8;
/// Number of quantiles tried by the input-scale search: `q = 0.00, 0.01, …, 0.49`.
pub const QUANTILE_STEPS: usize = 50;

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `γ = β = ln 999`, i.e. `σ = 0.999`.
pub fn initial_bound() -> f64 {
    999f64.ln()
}

/// `(σ(γ)·min W, σ(β)·max W)`.
pub fn lwc_bounds(w: &[f64], gamma: f64, beta: f64) -> (f64, f64) {
    let min = w.iter().copied().fold(f64::INFINITY, f64::min);
    let max = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (sigmoid(gamma) * min, sigmoid(beta) * max)
}

pub fn lwc_clip(w: &[f64], gamma: f64, beta: f64) -> Vec<f64> {
    if w.is_empty() {
        return Vec::new();
    }
    let (lo, hi) = lwc_bounds(w, gamma, beta);
    w.iter().map(|&v| v.max(lo).min(hi)).collect()
}

/// `(∂L/∂γ, ∂L/∂β)` given `∂L/∂W'`. Only elements clipped at a bound
/// contribute: `∂W'/∂γ = min(W')(1-σ(γ))` below, `∂W'/∂β = max(W')(1-σ(β))` above.
pub fn lwc_gradients(w: &[f64], clipped: &[f64], gamma: f64, beta: f64, grad: &[f64]) -> Result<(f64, f64)> {
    if w.is_empty() {
        return Err(Error::EmptyTensor);
    }
    if w.len() != clipped.len() || w.len() != grad.len() {
        return Err(Error::Shape(format!(
            "W has {} elements, W' {}, gradient {}",
            w.len(),
            clipped.len(),
            grad.len()
        )));
    }
    let (lo, hi) = lwc_bounds(w, gamma, beta);
    let tol = 1e-12 * (1.0 + lo.abs().max(hi.abs()));
    let (mut dg, mut db) = (0.0, 0.0);
    for ((&v, &c), &g) in w.iter().zip(clipped).zip(grad) {
        if v < lo {
            if (c - lo).abs() > tol {
                return Err(Error::InvalidArgument("W' is not the clip of W at these bounds".into()));
            }
            dg += g * lo * (1.0 - sigmoid(gamma));
        } else if v > hi {
            if (c - hi).abs() > tol {
                return Err(Error::InvalidArgument("W' is not the clip of W at these bounds".into()));
            }
            db += g * hi * (1.0 - sigmoid(beta));
        } else if c != v {
            return Err(Error::InvalidArgument("W' is not the clip of W at these bounds".into()));
        }
    }
    Ok((dg, db))
}

/// `mean(|a - x| / (|x| + ε))`.
pub fn mre(a: &[f64], x: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), x.len());
    if x.is_empty() {
        return 0.0;
    }
    a.iter()
        .zip(x)
        .map(|(a, x)| (a - x).abs() / (x.abs() + MRE_EPS))
        .sum::<f64>()
        / x.len() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScaleSearch {
    pub q_star: f64,
    pub s_star: f64,
    pub mre: f64,
    /// MRE for every `q` tried, in sweep order.
    pub sweep: Vec<f64>,
}

/// Sweep `q` and pick the input quantizer, fitted to `approx` at the
/// `(q, 1-q)` quantiles, whose fake-quantized activations are closest to
/// `exact`; ties go to the smaller `q`. `exact` is what the layer receives in
/// the exact model (already dequantized); the relative error is averaged over
/// its nonzero entries. `s*` is the scale fitted at `q*`.
pub fn input_scale_search(approx: &[f64], exact: &[f64], bits: u8) -> Result<ScaleSearch> {
    if approx.is_empty() || exact.is_empty() {
        return Err(Error::EmptyTensor);
    }
    if approx.len() != exact.len() {
        return Err(Error::Shape(format!(
            "{} approximate vs {} exact activations",
            approx.len(),
            exact.len()
        )));
    }
    let sorted = sorted_copy(approx);
    let grids = (0..QUANTILE_STEPS)
        .map(|i| fit_params_sorted(&sorted, bits, i as f64 / 100.0))
        .collect::<Result<Vec<_>>>()?;
    // Zero reference entries are left out: with a tiny ε they would
    // contribute |a|/ε each and the sweep would only minimise the approximate
    // activations wherever a ReLU zeroed the exact ones.
    let nonzero: Vec<(f64, f64)> = approx.iter().zip(exact).filter(|(_, x)| **x != 0.0).map(|(&a, &x)| (a, x)).collect();
    let sweep = par::map_slice(&grids, |p| {
        if nonzero.is_empty() {
            return 0.0;
        }
        nonzero
            .iter()
            .map(|&(a, x)| (p.dequantize_code(p.quantize_value(a)) - x).abs() / (x.abs() + MRE_EPS))
            .sum::<f64>()
            / nonzero.len() as f64
    });
    let (best, &mre) = sweep
        .iter()
        .enumerate()
        .fold((0, &sweep[0]), |(bi, bv), (i, v)| if *v < *bv { (i, v) } else { (bi, bv) });
    Ok(ScaleSearch {
        q_star: best as f64 / 100.0,
        s_star: grids[best].scale,
        mre,
        sweep,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Restart an epoch with half the learning rate when a batch loss exceeds
    /// this multiple of the initial loss.
    pub divergence_factor: f64,
    pub max_restarts: usize,
    pub seed: u64,
}

impl Default for CalibConfig {
    fn default() -> Self {
        CalibConfig {
            epochs: 5,
            lr: 0.1,
            batch_size: 64,
            divergence_factor: 10.0,
            max_restarts: 3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibState {
    /// Per multiplicative layer, in ordinal order.
    pub layers: Vec<LayerCalib>,
    /// Phase-1 MRE at `q*` per layer.
    pub input_mre: Vec<f64>,
    pub initial_loss: f64,
    /// Mean batch loss of each completed epoch.
    pub epoch_losses: Vec<f64>,
    pub restarts: usize,
    pub final_lr: f64,
}

/// Collect every multiplicative layer's input on `data` (sample-major).
fn layer_inputs(sim: &Simulator<'_>, data: &Dataset, pos: usize) -> Result<Vec<f64>> {
    sim.collect_layer_inputs(data, pos)
}

/// Set `W` quantization of layer `k` from the current clipping bounds.
fn requantize_weights(model: &mut ModelGraph, k: usize) -> Result<()> {
    let conv = model.conv_mut(k).ok_or(Error::Unprepared(k))?;
    let mut quant = conv.quant.ok_or(Error::Unprepared(k))?;
    let clipped = conv.effective_weights();
    quant.w = fit_params(&clipped, quant.w.bits, 0.0)?;
    conv.quant = Some(quant);
    Ok(())
}

fn fake_quant(v: &[f64], p: &QuantParams) -> Vec<f64> {
    v.iter().map(|&x| p.dequantize_code(p.quantize_value(x))).collect()
}

/// Phase 1 only: re-fit every layer's input quantizer in forward order.
pub fn calibrate_inputs(
    model: &mut ModelGraph,
    assignment: &Assignment,
    library: &MultiplierLibrary,
    samples: &Dataset,
) -> Result<Vec<ScaleSearch>> {
    if samples.is_empty() {
        return Err(Error::EmptyTensor);
    }
    let reference = model.clone();
    let exact_sim = Simulator::quantized(&reference, &Assignment::all_exact(&reference), library)?;
    let positions = model.mul_layers();
    let mut out = Vec::with_capacity(positions.len());
    for (k, &pos) in positions.iter().enumerate() {
        let xq = reference.conv(k).and_then(|c| c.quant).ok_or(Error::Unprepared(k))?.x;
        let exact = fake_quant(&layer_inputs(&exact_sim, samples, pos)?, &xq);
        let approx = {
            let sim = Simulator::quantized(model, assignment, library)?;
            layer_inputs(&sim, samples, pos)?
        };
        let conv = model.conv_mut(k).ok_or(Error::Unprepared(k))?;
        let mut quant = conv.quant.ok_or(Error::Unprepared(k))?;
        let search = input_scale_search(&approx, &exact, quant.x.bits)?;
        quant.x = fit_params(&approx, quant.x.bits, search.q_star)?;
        conv.quant = Some(quant);
        if let Some(c) = conv.calib.as_mut() {
            c.q_star = search.q_star;
            c.s_star = search.s_star;
        }
        out.push(search);
    }
    Ok(out)
}

/// Mean loss and summed weight gradients `∂L/∂W'` per layer ordinal.
fn batch_gradients(sim: &Simulator<'_>, batch: &Dataset) -> Result<(f64, Vec<Vec<f64>>)> {
    let trace = sim.forward(batch, true)?;
    let out = loss_ce(&trace.logits, &batch.labels)?;
    let samples = trace.samples.as_ref().unwrap();
    let positions = sim.model().mul_layers();
    let opts = BackwardOptions {
        channels: 1,
        weight_grads: true,
        keep_output_grads: false,
    };
    let idx: Vec<usize> = (0..samples.len()).collect();
    let parts = par::map_chunks(&idx, par::SAMPLE_CHUNK, |_, chunk| {
        let mut acc: Vec<Vec<f64>> = Vec::new();
        for &i in chunk {
            let g = sim.backward_sample(&samples[i], &out.seeds[i], opts);
            for (k, &pos) in positions.iter().enumerate() {
                let wg = g.weight_grads[pos].as_deref().unwrap_or(&[]);
                if acc.len() <= k {
                    acc.push(vec![0.0; sim.model().layers[pos].as_conv().unwrap().weight_len()]);
                }
                acc[k].iter_mut().zip(wg).for_each(|(a, b)| *a += b);
            }
        }
        acc
    });
    let mut total: Vec<Vec<f64>> = positions
        .iter()
        .map(|&p| vec![0.0; sim.model().layers[p].as_conv().unwrap().weight_len()])
        .collect();
    for part in parts {
        for (t, p) in total.iter_mut().zip(part) {
            t.iter_mut().zip(p).for_each(|(a, b)| *a += b);
        }
    }
    Ok((out.loss, total))
}

fn loss_of(model: &ModelGraph, assignment: &Assignment, library: &MultiplierLibrary, data: &Dataset) -> Result<f64> {
    Ok(Simulator::quantized(model, assignment, library)?.forward(data, false)?.loss)
}

/// Full calibration: input-scale search, then `cfg.epochs` of learnable
/// weight clipping. Multiplier tables and the assignment are not touched.
pub fn calibrate(
    model: &ModelGraph,
    assignment: &Assignment,
    library: &MultiplierLibrary,
    samples: &Dataset,
    cfg: &CalibConfig,
) -> Result<(ModelGraph, CalibState)> {
    if cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return Err(Error::InvalidArgument("calibration needs a positive batch size and learning rate".into()));
    }
    let mut model = model.clone();
    let searches = calibrate_inputs(&mut model, assignment, library, samples)?;
    let n_layers = searches.len();
    for (k, search) in searches.iter().enumerate() {
        model.conv_mut(k).unwrap().calib = Some(LayerCalib {
            gamma: initial_bound(),
            beta: initial_bound(),
            q_star: search.q_star,
            s_star: search.s_star,
        });
        requantize_weights(&mut model, k)?;
    }

    let initial_loss = loss_of(&model, assignment, library, samples)?;
    let mut lr = cfg.lr;
    let mut restarts = 0;
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut epoch = 0;
    while epoch < cfg.epochs {
        let snapshot = model.clone();
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)));
        let mut sum = 0.0;
        let mut batches = 0;
        let mut diverged = None;
        for idx in order.chunks(cfg.batch_size) {
            let batch = samples.subset(idx);
            let (loss, grads) = {
                let sim = Simulator::quantized(&model, assignment, library)?;
                batch_gradients(&sim, &batch)?
            };
            if !loss.is_finite() || loss > cfg.divergence_factor * initial_loss {
                diverged = Some((loss, initial_loss));
                break;
            }
            sum += loss;
            batches += 1;
            for (k, g) in grads.iter().enumerate() {
                let conv = model.conv_mut(k).unwrap();
                let w = conv.weights_f64();
                let mut c = conv.calib.unwrap();
                let clipped = lwc_clip(&w, c.gamma, c.beta);
                let (dg, db) = lwc_gradients(&w, &clipped, c.gamma, c.beta, g)?;
                c.gamma -= lr * dg;
                c.beta -= lr * db;
                conv.calib = Some(c);
                requantize_weights(&mut model, k)?;
            }
        }
        if let Some((loss, initial)) = diverged {
            if restarts >= cfg.max_restarts {
                return Err(Error::Diverged { restarts, loss, initial });
            }
            restarts += 1;
            lr *= 0.5;
            model = snapshot;
            log::warn!("calibration epoch {epoch}: loss {loss:.4} exceeds {}x initial {initial:.4}; lr -> {lr}", cfg.divergence_factor);
            continue;
        }
        epoch_losses.push(sum / batches.max(1) as f64);
        epoch += 1;
    }
    let layers = (0..n_layers)
        .map(|k| model.conv(k).unwrap().calib.unwrap())
        .collect();
    Ok((
        model,
        CalibState {
            layers,
            input_mre: searches.iter().map(|s| s.mre).collect(),
            initial_loss,
            epoch_losses,
            restarts,
            final_lr: lr,
        },
    ))
}

/// Per-layer MRE between the pre-activation outputs of `model` under
/// `assignment` and those of `reference` with exact multipliers.
pub fn output_mre(
    model: &ModelGraph,
    assignment: &Assignment,
    reference: &ModelGraph,
    library: &MultiplierLibrary,
    data: &Dataset,
) -> Result<Vec<f64>> {
    let approx = Simulator::quantized(model, assignment, library)?;
    let exact = Simulator::quantized(reference, &Assignment::all_exact(reference), library)?;
    model
        .mul_layers()
        .iter()
        .map(|&pos| {
            let a = approx.collect_layer_inputs(data, pos + 1)?;
            let x = exact.collect_layer_inputs(data, pos + 1)?;
            Ok(mre(&a, &x))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clip_examples() {
        let w = [-2.0, -1.5, -0.2, 0.4, 1.0];
        assert_eq!(lwc_clip(&w, 50.0, 50.0), w.to_vec());
        let c = lwc_clip(&w, 0.0, 50.0);
        assert_eq!(c, vec![-1.0, -1.0, -0.2, 0.4, 1.0]);
        assert_eq!(lwc_clip(&c, 0.0, 50.0).len(), 5);
    }

    #[test]
    fn gradient_example() {
        let w = [-2.0, 0.5, 1.0];
        let c = lwc_clip(&w, 0.0, 50.0);
        let (dg, db) = lwc_gradients(&w, &c, 0.0, 50.0, &[1.0, 0.0, 0.0]).unwrap();
        assert!((dg + 0.5).abs() < 1e-15);
        assert_eq!(db, 0.0);
        let (dg, db) = lwc_gradients(&w, &w, 50.0, 50.0, &[1.0, 1.0, 1.0]).unwrap();
        assert_eq!((dg, db), (0.0, 0.0));
        assert!(lwc_gradients(&w, &w, 0.0, 50.0, &[1.0; 3]).is_err());
    }

    #[test]
    fn search_identity_and_outlier() {
        let x: Vec<f64> = (1..=101).map(f64::from).collect();
        let xq = fake_quant(&x, &fit_params(&x, 8, 0.0).unwrap());
        let s = input_scale_search(&x, &xq, 8).unwrap();
        assert_eq!((s.q_star, s.mre), (0.0, 0.0));
        assert_eq!(s.sweep.len(), 50);
        let mut a = x.clone();
        a[50] = 1e6;
        let s = input_scale_search(&a, &xq, 8).unwrap();
        assert!(s.q_star > 0.0);
        assert!(s.mre < s.sweep[0]);
        assert!(input_scale_search(&[], &[], 4).is_err());
    }

    #[test]
    fn search_ignores_zero_reference_entries() {
        let x: Vec<f64> = (0..100).map(|i| if i % 2 == 0 { 0.0 } else { f64::from(i) }).collect();
        let mut a = x.clone();
        let base = input_scale_search(&a, &x, 4).unwrap();
        for i in (0..100).step_by(2) {
            a[i] = 0.5;
        }
        let s = input_scale_search(&a, &x, 4).unwrap();
        assert!(s.mre < 1.0, "{}", s.mre);
        assert_eq!(s.sweep.len(), base.sweep.len());
    }
}
