//! Built-in desk-scale architectures.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::netsim::{BatchNorm, ConvLayer, Layer, ModelGraph, Shape3};

pub const ARCHITECTURES: &[&str] = &["lenet-small", "toy-resnet"];

/// Two 5x5 convolutions and two linear layers for 1x28x28 inputs.
pub fn lenet_small() -> ModelGraph {
    ModelGraph {
        name: "lenet-small".into(),
        input: Shape3::new(1, 28, 28),
        classes: 10,
        layers: vec![
            Layer::Conv(ConvLayer::conv2d(8, 1, 5, 1, 0)),
            Layer::Relu,
            Layer::MaxPool { size: 2, stride: 2 },
            Layer::Conv(ConvLayer::conv2d(16, 8, 5, 1, 0)),
            Layer::Relu,
            Layer::MaxPool { size: 2, stride: 2 },
            Layer::Flatten,
            Layer::Conv(ConvLayer::linear(32, 256)),
            Layer::Relu,
            Layer::Conv(ConvLayer::linear(10, 32)),
        ],
    }
}

/// Stem plus one residual block with batch norms, for 1x28x28 inputs.
pub fn toy_resnet() -> ModelGraph {
    ModelGraph {
        name: "toy-resnet".into(),
        input: Shape3::new(1, 28, 28),
        classes: 10,
        layers: vec![
            Layer::Conv(ConvLayer::conv2d(8, 1, 3, 1, 1)),
            Layer::BatchNorm(BatchNorm::identity(8)),
            Layer::Relu,
            Layer::MaxPool { size: 2, stride: 2 },
            Layer::Conv(ConvLayer::conv2d(8, 8, 3, 1, 1)),
            Layer::BatchNorm(BatchNorm::identity(8)),
            Layer::Relu,
            Layer::Conv(ConvLayer::conv2d(8, 8, 3, 1, 1)),
            Layer::BatchNorm(BatchNorm::identity(8)),
            Layer::Add { from: 3 },
            Layer::Relu,
            Layer::AvgPool { size: 2, stride: 2 },
            Layer::Flatten,
            Layer::Conv(ConvLayer::linear(10, 392)),
        ],
    }
}

pub fn by_name(name: &str) -> Result<ModelGraph> {
    match name {
        "lenet-small" => Ok(lenet_small()),
        "toy-resnet" => Ok(toy_resnet()),
        other => Err(Error::InvalidArgument(format!(
            "unknown architecture `{other}` (known: {})",
            ARCHITECTURES.join(", ")
        ))),
    }
}

/// He-uniform weights, zero biases; batch-norm statistics get small seeded
/// perturbations around the identity so folding is exercised.
pub fn init_weights(model: &mut ModelGraph, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for layer in &mut model.layers {
        match layer {
            Layer::Conv(c) => {
                let fan_in = (c.n_in * c.kernel_h * c.kernel_w) as f64;
                let bound = (6.0 / fan_in).sqrt();
                for w in &mut c.weight {
                    *w = rng.gen_range(-bound..bound) as f32;
                }
                c.bias.iter_mut().for_each(|b| *b = 0.0);
            }
            Layer::BatchNorm(bn) => {
                for ch in 0..bn.channels {
                    bn.gamma[ch] = rng.gen_range(0.9..1.1);
                    bn.beta[ch] = rng.gen_range(-0.05..0.05);
                    bn.mean[ch] = rng.gen_range(-0.1..0.1);
                    bn.var[ch] = rng.gen_range(0.8..1.2);
                }
            }
            _ => {}
        }
    }
}

/// Architecture with seeded initial weights.
pub fn build(name: &str, seed: u64) -> Result<ModelGraph> {
    let mut m = by_name(name)?;
    init_weights(&mut m, seed);
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netsim::fold_batchnorm;

    #[test]
    fn shapes_resolve() {
        let l = lenet_small();
        assert_eq!(l.shapes().unwrap().last().unwrap().len(), 10);
        assert_eq!(l.mul_layers().len(), 4);
        let r = toy_resnet();
        assert_eq!(r.shapes().unwrap().last().unwrap().len(), 10);
        let folded = fold_batchnorm(&build("toy-resnet", 3).unwrap()).unwrap();
        assert!(folded.layers.iter().all(|l| !matches!(l, Layer::BatchNorm(_))));
        assert_eq!(folded.mul_layers().len(), 4);
    }

    #[test]
    fn init_is_seeded() {
        assert_eq!(build("lenet-small", 1).unwrap(), build("lenet-small", 1).unwrap());
        assert_ne!(build("lenet-small", 1).unwrap(), build("lenet-small", 2).unwrap());
        assert!(by_name("vgg").is_err());
    }
}
