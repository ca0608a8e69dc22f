//! Compiled forward/backward engine.

use super::kernels::{conv_backward, conv_codes, conv_float, pad, unpad, AffineTerms};
use super::loss::{loss_ce, LossOutput};
use super::model::{Assignment, Layer, LayerQuant, LayerShape, ModelGraph, Shape3};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::mullib::{LutMultiplier, MultiplierLibrary, Provenance};
use crate::par;

/// What replaces `X̂·Ŵ` inside a multiplicative layer.
#[derive(Debug, Clone, PartialEq)]
pub enum ProductTable {
    Exact,
    /// Row-major multiplier table, `table[x̂ << b | ŵ]`.
    Lut(Vec<u32>),
    /// Exact product plus a real-valued error `e[x̂ << b | ŵ]`. Used to inject
    /// arbitrary error vectors for derivative checks.
    Injected(Vec<f64>),
    /// No rounding: the layer sees its clamped float input and dequantized
    /// weights. This is the function the straight-through gradient
    /// differentiates, used downstream of an injection point. Under
    /// [`Simulator::forward_anchored`] the input is instead the anchor's
    /// rounded value plus the deviation from the anchor (zero where the anchor
    /// lies outside the clip range), which reproduces the quantized forward at
    /// the anchor.
    Relaxed,
}

impl ProductTable {
    pub fn from_multiplier(m: &LutMultiplier) -> Self {
        if m.provenance() == Provenance::Exact {
            ProductTable::Exact
        } else {
            ProductTable::Lut(m.table().to_vec())
        }
    }
}

#[derive(Debug, Clone)]
struct QuantExec {
    quant: LayerQuant,
    wcodes: Vec<u16>,
    affine: AffineTerms,
    table: ProductTable,
    pad_code: u16,
}

#[derive(Debug, Clone)]
struct MulExec {
    shape: LayerShape,
    /// Float weights, or dequantized weight codes in quantized mode.
    weights: Vec<f64>,
    bias: Vec<f64>,
    quant: Option<QuantExec>,
}

/// Per-sample record of a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleTrace {
    /// `acts[i]` is the input of layer `i`; the last entry holds the logits.
    /// For multiplicative layers `acts[i + 1]` is the pre-activation output `Y`.
    pub acts: Vec<Vec<f64>>,
    /// Input codes of quantized multiplicative layers, by layer position.
    pub codes: Vec<Option<Vec<u16>>>,
    argmax: Vec<Option<Vec<u32>>>,
}

impl SampleTrace {
    pub fn logits(&self) -> &[f64] {
        self.acts.last().unwrap()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub logits: Vec<Vec<f64>>,
    pub loss: f64,
    pub probs: Vec<Vec<f64>>,
    pub samples: Option<Vec<SampleTrace>>,
}

impl ForwardTrace {
    pub fn accuracy(&self, labels: &[u8]) -> f64 {
        let correct = self
            .logits
            .iter()
            .zip(labels)
            .filter(|(z, &y)| argmax(z) == y as usize)
            .count();
        100.0 * correct as f64 / labels.len().max(1) as f64
    }
}

pub fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &x)| {
            if x > bv {
                (i, x)
            } else {
                (bi, bv)
            }
        })
        .0
}

#[derive(Debug, Clone, Copy, Default)]
pub struct BackwardOptions {
    /// Number of interleaved seed channels.
    pub channels: usize,
    /// Weight and bias gradients (channel 0 only).
    pub weight_grads: bool,
    /// Keep `∂/∂Y` of every multiplicative layer.
    pub keep_output_grads: bool,
}

#[derive(Debug, Clone, Default)]
pub struct SampleGrads {
    /// By layer position: `∂/∂Y` with `channels` interleaved values per element.
    pub output_grads: Vec<Option<Vec<f64>>>,
    /// By layer position: `∂/∂W` against the weights the forward pass used.
    pub weight_grads: Vec<Option<Vec<f64>>>,
    pub bias_grads: Vec<Option<Vec<f64>>>,
}

/// A model compiled for execution in float or quantized mode.
pub struct Simulator<'m> {
    model: &'m ModelGraph,
    shapes: Vec<Shape3>,
    mul: Vec<Option<MulExec>>,
    affine_bn: Vec<Option<Vec<(f64, f64)>>>,
    quantized: bool,
}

impl<'m> Simulator<'m> {
    /// Full-precision execution (training and reference).
    pub fn float(model: &'m ModelGraph) -> Result<Self> {
        Self::build(model, None)
    }

    /// Quantized execution with the given multiplier per layer.
    pub fn quantized(
        model: &'m ModelGraph,
        assignment: &Assignment,
        library: &MultiplierLibrary,
    ) -> Result<Self> {
        let bits = model.layer_bits()?;
        let tables = bits
            .iter()
            .enumerate()
            .map(|(k, &(a, b))| {
                let name = assignment.get(k).ok_or_else(|| {
                    Error::Assignment(format!("layer {k} has no multiplier assigned"))
                })?;
                if name == "exact" && library.exact(a, b).is_none() {
                    return Ok(ProductTable::Exact);
                }
                Ok(ProductTable::from_multiplier(library.resolve(name, a, b)?))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::build(model, Some(tables))
    }

    /// Quantized execution with explicit product tables per layer ordinal.
    pub fn with_tables(model: &'m ModelGraph, tables: Vec<ProductTable>) -> Result<Self> {
        Self::build(model, Some(tables))
    }

    fn build(model: &'m ModelGraph, tables: Option<Vec<ProductTable>>) -> Result<Self> {
        let shapes = model.shapes()?;
        let quantized = tables.is_some();
        let mut tables = tables.map(Vec::into_iter);
        let mut mul = Vec::with_capacity(model.layers.len());
        let mut affine_bn = Vec::with_capacity(model.layers.len());
        let mut ordinal = 0;
        for (pos, layer) in model.layers.iter().enumerate() {
            affine_bn.push(match layer {
                Layer::BatchNorm(bn) => Some(bn.affine()),
                _ => None,
            });
            let Layer::Conv(conv) = layer else {
                mul.push(None);
                continue;
            };
            let shape = conv.layer_shape(shapes[pos])?;
            if conv.weight.len() != conv.weight_len() || conv.bias.len() != conv.n_out {
                return Err(Error::Model(format!("layer {pos}: parameter sizes do not match shape")));
            }
            let bias = conv.bias.iter().map(|&b| b as f64).collect();
            let exec = match tables.as_mut() {
                None => MulExec {
                    shape,
                    weights: conv.weights_f64(),
                    bias,
                    quant: None,
                },
                Some(it) => {
                    let table = it.next().ok_or_else(|| {
                        Error::Assignment(format!("no product table for layer {ordinal}"))
                    })?;
                    let quant = conv.quant.ok_or(Error::Unprepared(ordinal))?;
                    let (a, b) = quant.bits();
                    let expected = 1usize << (a + b);
                    match &table {
                        ProductTable::Lut(t) if t.len() != expected => {
                            return Err(Error::Assignment(format!(
                                "layer {ordinal}: table size {} does not match {a}x{b}",
                                t.len()
                            )))
                        }
                        ProductTable::Injected(e) if e.len() != expected => {
                            return Err(Error::Assignment(format!(
                                "layer {ordinal}: error vector size {} does not match {a}x{b}",
                                e.len()
                            )))
                        }
                        _ => {}
                    }
                    let wcodes: Vec<u16> = conv
                        .effective_weights()
                        .iter()
                        .map(|&w| quant.w.quantize_value(w))
                        .collect();
                    let weights = wcodes.iter().map(|&c| quant.w.dequantize_code(c)).collect();
                    MulExec {
                        shape,
                        weights,
                        bias,
                        quant: Some(QuantExec {
                            affine: AffineTerms::new(&shape, &quant, &wcodes),
                            pad_code: quant.x.quantize_value(0.0),
                            quant,
                            wcodes,
                            table,
                        }),
                    }
                }
            };
            mul.push(Some(exec));
            ordinal += 1;
        }
        if let Some(mut rest) = tables {
            if rest.next().is_some() {
                return Err(Error::Assignment("more product tables than layers".into()));
            }
        }
        Ok(Simulator {
            model,
            shapes,
            mul,
            affine_bn,
            quantized,
        })
    }

    pub fn model(&self) -> &ModelGraph {
        self.model
    }

    pub fn shapes(&self) -> &[Shape3] {
        &self.shapes
    }

    pub fn is_quantized(&self) -> bool {
        self.quantized
    }

    /// Layer geometry by layer position (multiplicative layers only).
    pub fn layer_shape(&self, pos: usize) -> Option<LayerShape> {
        self.mul[pos].as_ref().map(|m| m.shape)
    }

    /// Weight codes of a quantized layer, by layer position.
    pub fn weight_codes(&self, pos: usize) -> Option<&[u16]> {
        self.mul[pos]
            .as_ref()
            .and_then(|m| m.quant.as_ref())
            .map(|q| q.wcodes.as_slice())
    }

    /// Input codes of a quantized layer from a sample trace, padded with the
    /// code of 0.0.
    pub fn padded_codes(&self, pos: usize, trace: &SampleTrace) -> Option<Vec<u16>> {
        let m = self.mul[pos].as_ref()?;
        let q = m.quant.as_ref()?;
        let codes = trace.codes[pos].as_ref()?;
        Some(pad(codes, self.shapes[pos], m.shape.padding, q.pad_code))
    }

    pub fn layer_quant(&self, pos: usize) -> Option<LayerQuant> {
        self.mul[pos].as_ref().and_then(|m| m.quant.as_ref()).map(|q| q.quant)
    }

    pub fn forward_sample(&self, input: &[f32]) -> SampleTrace {
        self.forward_sample_impl(input, None)
    }

    fn forward_sample_impl(&self, input: &[f32], anchor: Option<&SampleTrace>) -> SampleTrace {
        let n = self.model.layers.len();
        let mut acts: Vec<Vec<f64>> = Vec::with_capacity(n + 1);
        acts.push(input.iter().map(|&v| v as f64).collect());
        let mut codes = vec![None; n];
        let mut argmax = vec![None; n];
        for (pos, layer) in self.model.layers.iter().enumerate() {
            let x = &acts[pos];
            let in_shape = self.shapes[pos];
            let out = match layer {
                Layer::Conv(_) => {
                    let m = self.mul[pos].as_ref().unwrap();
                    match &m.quant {
                        None => {
                            let xp = pad(x, in_shape, m.shape.padding, 0.0);
                            conv_float(&m.shape, &xp, &m.weights, &m.bias)
                        }
                        Some(q) if q.table == ProductTable::Relaxed => {
                            let p = q.quant.x;
                            let xr: Vec<f64> = match anchor {
                                None => x.iter().map(|&v| p.clamp(v)).collect(),
                                Some(a) => x
                                    .iter()
                                    .zip(&a.acts[pos])
                                    .map(|(&v, &a)| {
                                        let base = p.dequantize_code(p.quantize_value(a));
                                        if p.in_range(a) {
                                            base + (v - a)
                                        } else {
                                            base
                                        }
                                    })
                                    .collect(),
                            };
                            let pad_value = match anchor {
                                None => p.clamp(0.0),
                                Some(_) => p.dequantize_code(q.pad_code),
                            };
                            let xp = pad(&xr, in_shape, m.shape.padding, pad_value);
                            codes[pos] = Some(x.iter().map(|&v| q.quant.x.quantize_value(v)).collect());
                            conv_float(&m.shape, &xp, &m.weights, &m.bias)
                        }
                        Some(q) => {
                            let xc: Vec<u16> =
                                x.iter().map(|&v| q.quant.x.quantize_value(v)).collect();
                            let y = quant_conv(&m.shape, q, &xc, &m.bias, in_shape);
                            codes[pos] = Some(xc);
                            y
                        }
                    }
                }
                Layer::Relu => x.iter().map(|&v| v.max(0.0)).collect(),
                Layer::MaxPool { size, stride } => {
                    let (y, idx) = max_pool(x, in_shape, self.shapes[pos + 1], *size, *stride);
                    argmax[pos] = Some(idx);
                    y
                }
                Layer::AvgPool { size, stride } => {
                    avg_pool(x, in_shape, self.shapes[pos + 1], *size, *stride)
                }
                Layer::Flatten => x.clone(),
                Layer::BatchNorm(_) => {
                    let aff = self.affine_bn[pos].as_ref().unwrap();
                    let hw = in_shape.h * in_shape.w;
                    x.iter()
                        .enumerate()
                        .map(|(i, &v)| {
                            let (s, t) = aff[i / hw];
                            v * s + t
                        })
                        .collect()
                }
                Layer::Add { from } => x.iter().zip(&acts[from + 1]).map(|(a, b)| a + b).collect(),
            };
            acts.push(out);
        }
        SampleTrace {
            acts,
            codes,
            argmax,
        }
    }

    /// Forward a dataset; per-sample traces are kept when `retain` is set.
    pub fn forward(&self, data: &Dataset, retain: bool) -> Result<ForwardTrace> {
        self.check_input(data)?;
        let idx: Vec<usize> = (0..data.len()).collect();
        let chunks = par::map_chunks(&idx, par::SAMPLE_CHUNK, |_, c| {
            c.iter()
                .map(|&i| {
                    let t = self.forward_sample(data.image(i));
                    let logits = t.logits().to_vec();
                    (logits, retain.then_some(t))
                })
                .collect::<Vec<_>>()
        });
        let mut logits = Vec::with_capacity(data.len());
        let mut samples = retain.then(|| Vec::with_capacity(data.len()));
        for (z, t) in chunks.into_iter().flatten() {
            logits.push(z);
            if let (Some(s), Some(t)) = (samples.as_mut(), t) {
                s.push(t);
            }
        }
        let LossOutput { loss, probs, .. } = loss_ce(&logits, &data.labels)?;
        Ok(ForwardTrace {
            logits,
            loss,
            probs,
            samples,
        })
    }

    /// Forward a dataset with relaxed layers linearized around `anchors`, one
    /// trace per sample from the quantized model. Finite differences of this
    /// function match the straight-through gradients.
    pub fn forward_anchored(&self, data: &Dataset, anchors: &[SampleTrace]) -> Result<ForwardTrace> {
        self.check_input(data)?;
        if anchors.len() != data.len() {
            return Err(Error::Shape(format!("{} anchors for {} samples", anchors.len(), data.len())));
        }
        let idx: Vec<usize> = (0..data.len()).collect();
        let logits: Vec<Vec<f64>> = par::map_chunks(&idx, par::SAMPLE_CHUNK, |_, c| {
            c.iter()
                .map(|&i| self.forward_sample_impl(data.image(i), Some(&anchors[i])).logits().to_vec())
                .collect::<Vec<_>>()
        })
        .concat();
        let LossOutput { loss, probs, .. } = loss_ce(&logits, &data.labels)?;
        Ok(ForwardTrace {
            logits,
            loss,
            probs,
            samples: None,
        })
    }

    /// Inputs (pre-quantization activations) of one layer over a dataset,
    /// concatenated sample-major.
    pub fn collect_layer_inputs(&self, data: &Dataset, pos: usize) -> Result<Vec<f64>> {
        self.check_input(data)?;
        let idx: Vec<usize> = (0..data.len()).collect();
        let chunks = par::map_chunks(&idx, par::SAMPLE_CHUNK, |_, c| {
            c.iter()
                .flat_map(|&i| {
                    let mut t = self.forward_sample(data.image(i));
                    std::mem::take(&mut t.acts[pos])
                })
                .collect::<Vec<f64>>()
        });
        Ok(chunks.concat())
    }

    fn check_input(&self, data: &Dataset) -> Result<()> {
        if data.shape != self.model.input {
            return Err(Error::Shape(format!(
                "dataset samples are {:?}, model expects {:?}",
                data.shape, self.model.input
            )));
        }
        Ok(())
    }

    /// Reverse pass for one sample. `seed` holds `channels` interleaved
    /// gradients per logit. Activation rounding and multiplier tables are
    /// straight-through: gradients pass as if the product were exact and
    /// rounding the identity inside the clip range, zero outside it.
    pub fn backward_sample(
        &self,
        trace: &SampleTrace,
        seed: &[f64],
        opts: BackwardOptions,
    ) -> SampleGrads {
        let r = opts.channels.max(1);
        let n = self.model.layers.len();
        debug_assert_eq!(seed.len(), self.model.classes * r);
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n + 1];
        grads[n] = Some(seed.to_vec());
        let mut out = SampleGrads {
            output_grads: vec![None; n],
            weight_grads: vec![None; n],
            bias_grads: vec![None; n],
        };
        let first_needed = self.mul.iter().position(Option::is_some).unwrap_or(0);
        for pos in (0..n).rev() {
            let Some(g) = grads[pos + 1].take() else {
                continue;
            };
            let in_shape = self.shapes[pos];
            let need_input = pos > first_needed || matches!(self.model.layers[pos], Layer::Add { .. });
            let gin: Option<Vec<f64>> = match &self.model.layers[pos] {
                Layer::Conv(_) => {
                    let m = self.mul[pos].as_ref().unwrap();
                    let operand = opts.weight_grads.then(|| match &m.quant {
                        None => pad(&trace.acts[pos], in_shape, m.shape.padding, 0.0),
                        Some(q) => {
                            let deq: Vec<f64> = trace.codes[pos]
                                .as_ref()
                                .unwrap()
                                .iter()
                                .map(|&c| q.quant.x.dequantize_code(c))
                                .collect();
                            pad(&deq, in_shape, m.shape.padding, q.quant.x.dequantize_code(q.pad_code))
                        }
                    });
                    let cg = conv_backward(&m.shape, &m.weights, &g, r, need_input, operand.as_deref());
                    out.weight_grads[pos] = cg.weight;
                    out.bias_grads[pos] = cg.bias;
                    if opts.keep_output_grads {
                        out.output_grads[pos] = Some(g);
                    }
                    cg.input_padded.map(|gp| {
                        let mut gi = unpad(&gp, in_shape, m.shape.padding, r);
                        if let Some(q) = &m.quant {
                            for (i, &x) in trace.acts[pos].iter().enumerate() {
                                if !q.quant.x.in_range(x) {
                                    gi[i * r..(i + 1) * r].fill(0.0);
                                }
                            }
                        }
                        gi
                    })
                }
                Layer::Relu => need_input.then(|| {
                    let mut g = g;
                    for (i, &x) in trace.acts[pos].iter().enumerate() {
                        if x <= 0.0 {
                            g[i * r..(i + 1) * r].fill(0.0);
                        }
                    }
                    g
                }),
                Layer::MaxPool { .. } => need_input.then(|| {
                    let idx = trace.argmax[pos].as_ref().unwrap();
                    let mut gi = vec![0.0; in_shape.len() * r];
                    for (o, &src) in idx.iter().enumerate() {
                        let src = src as usize;
                        for ch in 0..r {
                            gi[src * r + ch] += g[o * r + ch];
                        }
                    }
                    gi
                }),
                Layer::AvgPool { size, stride } => need_input.then(|| {
                    avg_pool_backward(&g, in_shape, self.shapes[pos + 1], *size, *stride, r)
                }),
                Layer::Flatten => need_input.then_some(g),
                Layer::BatchNorm(_) => need_input.then(|| {
                    let aff = self.affine_bn[pos].as_ref().unwrap();
                    let hw = in_shape.h * in_shape.w;
                    let mut g = g;
                    for (i, v) in g.iter_mut().enumerate() {
                        *v *= aff[(i / r) / hw].0;
                    }
                    g
                }),
                Layer::Add { from } => {
                    accumulate(&mut grads[from + 1], &g);
                    Some(g)
                }
            };
            if let Some(gi) = gin {
                accumulate(&mut grads[pos], &gi);
            }
        }
        out
    }

    /// `∂/∂Y` of every multiplicative layer (by ordinal) for each sample.
    pub fn backward(
        &self,
        trace: &ForwardTrace,
        seeds: &[Vec<f64>],
    ) -> Result<Vec<Vec<Vec<f64>>>> {
        let samples = trace
            .samples
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("backward needs a retained trace".into()))?;
        if seeds.len() != samples.len() {
            return Err(Error::Shape(format!(
                "{} seeds for {} samples",
                seeds.len(),
                samples.len()
            )));
        }
        let opts = BackwardOptions {
            channels: 1,
            weight_grads: false,
            keep_output_grads: true,
        };
        let mul = self.model.mul_layers();
        Ok(par::map_range(samples.len(), |i| {
            let g = self.backward_sample(&samples[i], &seeds[i], opts);
            mul.iter()
                .map(|&p| g.output_grads[p].clone().unwrap_or_default())
                .collect()
        }))
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: &[f64]) {
    match slot {
        Some(v) => v.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g.to_vec()),
    }
}

fn quant_conv(ls: &LayerShape, q: &QuantExec, xc: &[u16], bias: &[f64], in_shape: Shape3) -> Vec<f64> {
    let xp = pad(xc, in_shape, ls.padding, q.pad_code);
    let mut out = vec![0.0; ls.outputs()];
    let bb = q.quant.w.bits as u32;
    match &q.table {
        ProductTable::Exact => conv_codes(
            ls,
            &xp,
            &q.wcodes,
            |x, w| x as i64 * w as i64,
            |o, idx, acc: i64, sx| out[idx] = q.affine.output(o, acc as f64, sx, bias[o]),
        ),
        ProductTable::Lut(t) => conv_codes(
            ls,
            &xp,
            &q.wcodes,
            |x, w| t[((x as usize) << bb) | w as usize] as i64,
            |o, idx, acc: i64, sx| out[idx] = q.affine.output(o, acc as f64, sx, bias[o]),
        ),
        ProductTable::Injected(e) => conv_codes(
            ls,
            &xp,
            &q.wcodes,
            |x, w| x as f64 * w as f64 + e[((x as usize) << bb) | w as usize],
            |o, idx, acc: f64, sx| out[idx] = q.affine.output(o, acc, sx, bias[o]),
        ),
        ProductTable::Relaxed => unreachable!("relaxed layers run in float"),
    }
    out
}

fn max_pool(x: &[f64], s: Shape3, o: Shape3, size: usize, stride: usize) -> (Vec<f64>, Vec<u32>) {
    let mut y = Vec::with_capacity(o.len());
    let mut idx = Vec::with_capacity(o.len());
    for c in 0..s.c {
        for oy in 0..o.h {
            for ox in 0..o.w {
                let mut best = f64::NEG_INFINITY;
                let mut bi = 0;
                for ky in 0..size {
                    for kx in 0..size {
                        let i = (c * s.h + oy * stride + ky) * s.w + ox * stride + kx;
                        if x[i] > best {
                            best = x[i];
                            bi = i;
                        }
                    }
                }
                y.push(best);
                idx.push(bi as u32);
            }
        }
    }
    (y, idx)
}

fn avg_pool(x: &[f64], s: Shape3, o: Shape3, size: usize, stride: usize) -> Vec<f64> {
    let norm = 1.0 / (size * size) as f64;
    let mut y = Vec::with_capacity(o.len());
    for c in 0..s.c {
        for oy in 0..o.h {
            for ox in 0..o.w {
                let mut acc = 0.0;
                for ky in 0..size {
                    for kx in 0..size {
                        acc += x[(c * s.h + oy * stride + ky) * s.w + ox * stride + kx];
                    }
                }
                y.push(acc * norm);
            }
        }
    }
    y
}

fn avg_pool_backward(g: &[f64], s: Shape3, o: Shape3, size: usize, stride: usize, r: usize) -> Vec<f64> {
    let norm = 1.0 / (size * size) as f64;
    let mut gi = vec![0.0; s.len() * r];
    for c in 0..s.c {
        for oy in 0..o.h {
            for ox in 0..o.w {
                let oi = (c * o.h + oy) * o.w + ox;
                for ky in 0..size {
                    for kx in 0..size {
                        let i = (c * s.h + oy * stride + ky) * s.w + ox * stride + kx;
                        for ch in 0..r {
                            gi[i * r + ch] += g[oi * r + ch] * norm;
                        }
                    }
                }
            }
        }
    }
    gi
}
