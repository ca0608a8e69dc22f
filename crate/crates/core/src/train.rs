//! Float-mode trainer for the bundled desk models.
//!
//! Mini-batch SGD with momentum on convolution and linear parameters; batch
//! norms are treated as fixed inference-mode affine maps.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::netsim::{softmax, BackwardOptions, Layer, ModelGraph, Simulator};
use crate::par;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 15,
            lr: 0.01,
            momentum: 0.9,
            batch_size: 32,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
struct Grads {
    weight: Vec<Option<Vec<f64>>>,
    bias: Vec<Option<Vec<f64>>>,
    loss: f64,
}

impl Grads {
    fn add(&mut self, other: Grads) {
        if self.weight.is_empty() {
            *self = other;
            return;
        }
        for (a, b) in self.weight.iter_mut().chain(self.bias.iter_mut()).zip(other.weight.into_iter().chain(other.bias)) {
            if let (Some(a), Some(b)) = (a.as_mut(), b) {
                a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
            }
        }
        self.loss += other.loss;
    }
}

fn batch_grads(sim: &Simulator<'_>, data: &Dataset, batch: &[usize]) -> Grads {
    let inv = 1.0 / batch.len() as f64;
    let opts = BackwardOptions {
        channels: 1,
        weight_grads: true,
        keep_output_grads: false,
    };
    let parts = par::map_chunks(batch, par::SAMPLE_CHUNK, |_, c| {
        let mut acc = Grads::default();
        for &i in c {
            let t = sim.forward_sample(data.image(i));
            let y = data.labels[i] as usize;
            let mut seed = softmax(t.logits());
            let loss = -(seed[y].max(f64::MIN_POSITIVE)).ln() * inv;
            seed[y] -= 1.0;
            seed.iter_mut().for_each(|s| *s *= inv);
            let g = sim.backward_sample(&t, &seed, opts);
            acc.add(Grads {
                weight: g.weight_grads,
                bias: g.bias_grads,
                loss,
            });
        }
        acc
    });
    let mut total = Grads::default();
    for p in parts {
        total.add(p);
    }
    total
}

/// Train in place; returns the mean training loss of each epoch.
pub fn train(model: &mut ModelGraph, data: &Dataset, cfg: &TrainConfig) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::EmptyTensor);
    }
    if cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return Err(Error::InvalidArgument("batch size and lr must be positive".into()));
    }
    let mut velocity: Vec<Option<(Vec<f64>, Vec<f64>)>> = model
        .layers
        .iter()
        .map(|l| l.as_conv().map(|c| (vec![0.0; c.weight.len()], vec![0.0; c.bias.len()])))
        .collect();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut batches = 0;
        for batch in order.chunks(cfg.batch_size) {
            let g = {
                let sim = Simulator::float(model)?;
                batch_grads(&sim, data, batch)
            };
            sum += g.loss;
            batches += 1;
            for (pos, layer) in model.layers.iter_mut().enumerate() {
                let (Layer::Conv(c), Some((vw, vb))) = (layer, velocity[pos].as_mut()) else {
                    continue;
                };
                let gw = g.weight[pos].as_ref().expect("weight gradient");
                let gb = g.bias[pos].as_ref().expect("bias gradient");
                for ((w, v), gr) in c.weight.iter_mut().zip(vw.iter_mut()).zip(gw) {
                    *v = cfg.momentum * *v + gr;
                    *w = (*w as f64 - cfg.lr * *v) as f32;
                }
                for ((b, v), gr) in c.bias.iter_mut().zip(vb.iter_mut()).zip(gb) {
                    *v = cfg.momentum * *v + gr;
                    *b = (*b as f64 - cfg.lr * *v) as f32;
                }
            }
        }
        let mean = sum / batches as f64;
        if !mean.is_finite() {
            return Err(Error::Diverged {
                restarts: 0,
                loss: mean,
                initial: losses.first().copied().unwrap_or(f64::NAN),
            });
        }
        log::info!("epoch {}: loss {mean:.4}", epoch + 1);
        losses.push(mean);
    }
    Ok(losses)
}

/// Top-1 accuracy (percent) of the float model.
pub fn float_accuracy(model: &ModelGraph, data: &Dataset) -> Result<f64> {
    let sim = Simulator::float(model)?;
    Ok(sim.forward(data, false)?.accuracy(&data.labels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netsim::{ConvLayer, Shape3};

    #[test]
    fn separable_toy_is_learned() {
        // class = which half of a 2x2 image is brighter
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for i in 0..64 {
            let a = (i % 7) as f32 / 7.0;
            let b = a + 0.3 + (i % 3) as f32 * 0.1;
            let y = (i % 2) as u8;
            let (top, bottom) = if y == 0 { (b, a) } else { (a, b) };
            images.extend_from_slice(&[top, top, bottom, bottom]);
            labels.push(y);
        }
        let data = Dataset::new(Shape3::new(1, 2, 2), 2, images, labels).unwrap();
        let mut model = ModelGraph {
            name: "toy".into(),
            input: Shape3::new(1, 2, 2),
            classes: 2,
            layers: vec![Layer::Flatten, Layer::Conv(ConvLayer::linear(2, 4))],
        };
        let before = float_accuracy(&model, &data).unwrap();
        let cfg = TrainConfig { epochs: 30, lr: 0.5, batch_size: 8, ..Default::default() };
        let losses = train(&mut model, &data, &cfg).unwrap();
        assert!(losses.last().unwrap() < &losses[0]);
        assert_eq!(float_accuracy(&model, &data).unwrap(), 100.0);
        assert!(before <= 100.0);
    }
}
