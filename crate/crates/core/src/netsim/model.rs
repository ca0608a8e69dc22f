use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::QuantParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shape3 {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape3 {
    pub const fn new(c: usize, h: usize, w: usize) -> Self {
        Shape3 { c, h, w }
    }

    pub fn len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Geometry of one multiplicative layer for a single input sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub n_out: usize,
    pub n_in: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl LayerShape {
    /// Multiplications per output element.
    pub fn terms(&self) -> usize {
        self.n_in * self.kernel_h * self.kernel_w
    }

    pub fn outputs(&self) -> usize {
        self.n_out * self.out_h * self.out_w
    }

    /// Multiplications per input sample: `N_O·H·W·N_I·H_K·W_K`.
    pub fn macs(&self) -> usize {
        self.outputs() * self.terms()
    }

    pub fn padded_h(&self) -> usize {
        self.in_h + 2 * self.padding
    }

    pub fn padded_w(&self) -> usize {
        self.in_w + 2 * self.padding
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MulKind {
    Conv2d,
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerQuant {
    pub x: QuantParams,
    pub w: QuantParams,
}

impl LayerQuant {
    /// `(input bits, weight bits)`, i.e. the LUT operand widths.
    pub fn bits(&self) -> (u8, u8) {
        (self.x.bits, self.w.bits)
    }
}

/// Calibration state stored with a layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerCalib {
    /// Learnable lower clipping bound (pre-sigmoid).
    pub gamma: f64,
    /// Learnable upper clipping bound (pre-sigmoid).
    pub beta: f64,
    /// Selected input quantile.
    pub q_star: f64,
    /// Input scale chosen by the quantile search.
    pub s_star: f64,
}

/// Convolution, or a linear layer treated as a 1x1 convolution on a 1x1 map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvLayer {
    pub kind: MulKind,
    pub n_out: usize,
    pub n_in: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    #[serde(skip)]
    pub weight: Vec<f32>,
    #[serde(skip)]
    pub bias: Vec<f32>,
    #[serde(default)]
    pub quant: Option<LayerQuant>,
    #[serde(default)]
    pub calib: Option<LayerCalib>,
}

impl ConvLayer {
    pub fn conv2d(
        n_out: usize,
        n_in: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        ConvLayer {
            kind: MulKind::Conv2d,
            n_out,
            n_in,
            kernel_h: kernel,
            kernel_w: kernel,
            stride,
            padding,
            weight: vec![0.0; n_out * n_in * kernel * kernel],
            bias: vec![0.0; n_out],
            quant: None,
            calib: None,
        }
    }

    pub fn linear(n_out: usize, n_in: usize) -> Self {
        ConvLayer {
            kind: MulKind::Linear,
            n_out,
            n_in,
            kernel_h: 1,
            kernel_w: 1,
            stride: 1,
            padding: 0,
            weight: vec![0.0; n_out * n_in],
            bias: vec![0.0; n_out],
            quant: None,
            calib: None,
        }
    }

    pub fn weight_len(&self) -> usize {
        self.n_out * self.n_in * self.kernel_h * self.kernel_w
    }

    pub fn weights_f64(&self) -> Vec<f64> {
        self.weight.iter().map(|&w| w as f64).collect()
    }

    /// Weights as seen by the quantizer: clipped to the learned bounds when
    /// calibration state is present.
    pub fn effective_weights(&self) -> Vec<f64> {
        let w = self.weights_f64();
        match &self.calib {
            Some(c) => crate::calib::lwc_clip(&w, c.gamma, c.beta),
            None => w,
        }
    }

    pub fn output_shape(&self, input: Shape3) -> Result<Shape3> {
        if input.c != self.n_in {
            return Err(Error::Shape(format!(
                "layer expects {} input channels, got {}",
                self.n_in, input.c
            )));
        }
        if self.kind == MulKind::Linear && (input.h != 1 || input.w != 1) {
            return Err(Error::Shape(format!(
                "linear layer needs a flattened input, got {}x{}x{}",
                input.c, input.h, input.w
            )));
        }
        let ph = input.h + 2 * self.padding;
        let pw = input.w + 2 * self.padding;
        if self.stride == 0 || ph < self.kernel_h || pw < self.kernel_w {
            return Err(Error::Shape(format!(
                "kernel {}x{} (stride {}) does not fit padded input {ph}x{pw}",
                self.kernel_h, self.kernel_w, self.stride
            )));
        }
        Ok(Shape3::new(
            self.n_out,
            (ph - self.kernel_h) / self.stride + 1,
            (pw - self.kernel_w) / self.stride + 1,
        ))
    }

    pub fn layer_shape(&self, input: Shape3) -> Result<LayerShape> {
        let out = self.output_shape(input)?;
        Ok(LayerShape {
            n_out: self.n_out,
            n_in: self.n_in,
            kernel_h: self.kernel_h,
            kernel_w: self.kernel_w,
            stride: self.stride,
            padding: self.padding,
            in_h: input.h,
            in_w: input.w,
            out_h: out.h,
            out_w: out.w,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    #[serde(skip)]
    pub gamma: Vec<f32>,
    #[serde(skip)]
    pub beta: Vec<f32>,
    #[serde(skip)]
    pub mean: Vec<f32>,
    #[serde(skip)]
    pub var: Vec<f32>,
    pub channels: usize,
    pub eps: f64,
}

impl BatchNorm {
    pub fn identity(channels: usize) -> Self {
        BatchNorm {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            channels,
            eps: 1e-5,
        }
    }

    /// Per-channel `(scale, shift)` of the inference-mode affine map.
    pub fn affine(&self) -> Vec<(f64, f64)> {
        (0..self.channels)
            .map(|c| {
                let scale = self.gamma[c] as f64 / (self.var[c] as f64 + self.eps).sqrt();
                (scale, self.beta[c] as f64 - self.mean[c] as f64 * scale)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Layer {
    Conv(ConvLayer),
    Relu,
    MaxPool { size: usize, stride: usize },
    AvgPool { size: usize, stride: usize },
    Flatten,
    BatchNorm(BatchNorm),
    /// Adds the output of an earlier layer (residual connection).
    Add { from: usize },
}

impl Layer {
    pub fn as_conv(&self) -> Option<&ConvLayer> {
        match self {
            Layer::Conv(c) => Some(c),
            _ => None,
        }
    }

    pub fn as_conv_mut(&mut self) -> Option<&mut ConvLayer> {
        match self {
            Layer::Conv(c) => Some(c),
            _ => None,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Layer::Conv(c) if c.kind == MulKind::Linear => "linear",
            Layer::Conv(_) => "conv2d",
            Layer::Relu => "relu",
            Layer::MaxPool { .. } => "maxpool",
            Layer::AvgPool { .. } => "avgpool",
            Layer::Flatten => "flatten",
            Layer::BatchNorm(_) => "batchnorm",
            Layer::Add { .. } => "add",
        }
    }
}

fn pool_output(input: Shape3, size: usize, stride: usize) -> Result<Shape3> {
    if size == 0 || stride == 0 || input.h < size || input.w < size {
        return Err(Error::Shape(format!(
            "pool {size} (stride {stride}) does not fit {}x{}",
            input.h, input.w
        )));
    }
    Ok(Shape3::new(
        input.c,
        (input.h - size) / stride + 1,
        (input.w - size) / stride + 1,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelGraph {
    pub name: String,
    pub input: Shape3,
    pub classes: usize,
    pub layers: Vec<Layer>,
}

impl ModelGraph {
    /// Activation shapes: `[input, out(layer 0), ..., out(layer n-1)]`.
    pub fn shapes(&self) -> Result<Vec<Shape3>> {
        let mut shapes = vec![self.input];
        for (i, layer) in self.layers.iter().enumerate() {
            let cur = *shapes.last().unwrap();
            let wrap = |e: Error| Error::Model(format!("layer {i} ({}): {e}", layer.kind_name()));
            let next = match layer {
                Layer::Conv(c) => c.output_shape(cur).map_err(wrap)?,
                Layer::Relu => cur,
                Layer::MaxPool { size, stride } | Layer::AvgPool { size, stride } => {
                    pool_output(cur, *size, *stride).map_err(wrap)?
                }
                Layer::Flatten => Shape3::new(cur.len(), 1, 1),
                Layer::BatchNorm(bn) => {
                    if bn.channels != cur.c {
                        return Err(wrap(Error::Shape(format!(
                            "{} channels vs input {}",
                            bn.channels, cur.c
                        ))));
                    }
                    cur
                }
                Layer::Add { from } => {
                    if *from >= i {
                        return Err(wrap(Error::Shape(format!(
                            "residual source {from} is not an earlier layer"
                        ))));
                    }
                    if shapes[from + 1] != cur {
                        return Err(wrap(Error::Shape(format!(
                            "residual shapes differ: {:?} vs {:?}",
                            shapes[from + 1], cur
                        ))));
                    }
                    cur
                }
            };
            shapes.push(next);
        }
        let out = *shapes.last().unwrap();
        if out.len() != self.classes {
            return Err(Error::Model(format!(
                "final output has {} values but model declares {} classes",
                out.len(),
                self.classes
            )));
        }
        Ok(shapes)
    }

    /// Positions of the multiplicative layers; the ordinal in this list is the
    /// layer index `k` used by assignments and tables.
    pub fn mul_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, Layer::Conv(_)))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn conv(&self, ordinal: usize) -> Option<&ConvLayer> {
        self.mul_layers()
            .get(ordinal)
            .and_then(|&p| self.layers[p].as_conv())
    }

    pub fn conv_mut(&mut self, ordinal: usize) -> Option<&mut ConvLayer> {
        let pos = *self.mul_layers().get(ordinal)?;
        self.layers[pos].as_conv_mut()
    }

    pub fn layer_shapes(&self) -> Result<Vec<LayerShape>> {
        let shapes = self.shapes()?;
        self.mul_layers()
            .into_iter()
            .map(|p| self.layers[p].as_conv().unwrap().layer_shape(shapes[p]))
            .collect()
    }

    /// Operand widths per multiplicative layer.
    pub fn layer_bits(&self) -> Result<Vec<(u8, u8)>> {
        self.mul_layers()
            .iter()
            .enumerate()
            .map(|(k, &p)| {
                self.layers[p]
                    .as_conv()
                    .and_then(|c| c.quant.as_ref())
                    .map(LayerQuant::bits)
                    .ok_or(Error::Unprepared(k))
            })
            .collect()
    }

    pub fn is_prepared(&self) -> bool {
        self.layer_bits().is_ok()
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .filter_map(Layer::as_conv)
            .map(|c| c.weight.len() + c.bias.len())
            .sum()
    }
}

/// Multiplier name per multiplicative layer ordinal; `"exact"` selects the
/// exact reference for the layer's widths.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment(pub BTreeMap<usize, String>);

impl Assignment {
    pub fn all_exact(model: &ModelGraph) -> Self {
        Assignment(
            (0..model.mul_layers().len())
                .map(|k| (k, "exact".to_string()))
                .collect(),
        )
    }

    pub fn uniform(model: &ModelGraph, name: &str) -> Self {
        Assignment(
            (0..model.mul_layers().len())
                .map(|k| (k, name.to_string()))
                .collect(),
        )
    }

    pub fn with(mut self, layer: usize, name: &str) -> Self {
        self.0.insert(layer, name.to_string());
        self
    }

    pub fn get(&self, layer: usize) -> Option<&str> {
        self.0.get(&layer).map(String::as_str)
    }
}

/// Absorb each inference-mode batch norm into the convolution before it.
pub fn fold_batchnorm(model: &ModelGraph) -> Result<ModelGraph> {
    let mut layers: Vec<Layer> = Vec::with_capacity(model.layers.len());
    // new position of each old layer's output
    let mut remap: Vec<usize> = Vec::with_capacity(model.layers.len());
    let mut absorbed_conv = vec![false; model.layers.len()];
    for (i, layer) in model.layers.iter().enumerate() {
        match layer {
            Layer::BatchNorm(bn) => {
                let conv = match (i.checked_sub(1), layers.last_mut()) {
                    (Some(_), Some(Layer::Conv(c))) => c,
                    _ => {
                        return Err(Error::Model(format!(
                            "batch norm at layer {i} does not follow a convolution"
                        )))
                    }
                };
                if bn.channels != conv.n_out {
                    return Err(Error::Model(format!(
                        "batch norm at layer {i} has {} channels, conv has {}",
                        bn.channels, conv.n_out
                    )));
                }
                let per_out = conv.n_in * conv.kernel_h * conv.kernel_w;
                for (o, (scale, shift)) in bn.affine().into_iter().enumerate() {
                    for w in &mut conv.weight[o * per_out..(o + 1) * per_out] {
                        *w = (*w as f64 * scale) as f32;
                    }
                    conv.bias[o] = (conv.bias[o] as f64 * scale + shift) as f32;
                }
                conv.quant = None;
                absorbed_conv[i - 1] = true;
                remap.push(layers.len() - 1);
            }
            Layer::Add { from } => {
                if absorbed_conv[*from] {
                    return Err(Error::Model(format!(
                        "residual at layer {i} reads a convolution output that batch norm rewrites"
                    )));
                }
                layers.push(Layer::Add { from: remap[*from] });
                remap.push(layers.len() - 1);
            }
            other => {
                layers.push(other.clone());
                remap.push(layers.len() - 1);
            }
        }
    }
    let folded = ModelGraph {
        name: model.name.clone(),
        input: model.input,
        classes: model.classes,
        layers,
    };
    folded.shapes()?;
    Ok(folded)
}
