#![allow(dead_code)]

use std::path::PathBuf;

use appmul::data::{self, Dataset};
use appmul::mullib::{LutMultiplier, Provenance};
use appmul::netsim::{ConvLayer, Layer, LayerQuant, LayerShape, ModelGraph, Shape3};
use appmul::quant::QuantParams;
use rand::Rng;

pub fn repo_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

pub fn mnist() -> (Dataset, Dataset) {
    data::load_mnist_dir(repo_root().join("data/mnist")).expect("bundled MNIST subset")
}

pub fn lenet() -> ModelGraph {
    appmul::modelfile::read(repo_root().join("models/lenet-small.amq")).expect("bundled model")
}

/// Average ranks, ties sharing the mean rank.
pub fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        for &t in &idx[i..=j] {
            r[t] = (i + j) as f64 / 2.0;
        }
        i = j + 1;
    }
    r
}

pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma).powi(2);
        vb += (y - mb).powi(2);
    }
    cov / (va * vb).sqrt()
}

pub fn random_params<R: Rng>(rng: &mut R, bits: u8) -> QuantParams {
    let lo = rng.gen_range(-1.5..0.5);
    let hi = lo + rng.gen_range(0.1..2.0);
    QuantParams::from_range(lo, hi, bits).unwrap()
}

pub fn random_shape<R: Rng>(rng: &mut R) -> LayerShape {
    let kernel = rng.gen_range(1..=3);
    let padding = rng.gen_range(0..=1);
    let stride = rng.gen_range(1..=2);
    let in_h = rng.gen_range(kernel..=kernel + 4);
    let in_w = rng.gen_range(kernel..=kernel + 4);
    LayerShape {
        n_out: rng.gen_range(1..=8),
        n_in: rng.gen_range(1..=8),
        kernel_h: kernel,
        kernel_w: kernel,
        stride,
        padding,
        in_h,
        in_w,
        out_h: (in_h + 2 * padding - kernel) / stride + 1,
        out_w: (in_w + 2 * padding - kernel) / stride + 1,
    }
}

pub fn random_multiplier<R: Rng>(rng: &mut R, bits_a: u8, bits_b: u8) -> LutMultiplier {
    let max = ((1u32 << bits_a) - 1) * ((1u32 << bits_b) - 1);
    let table = (0..1u32 << (bits_a + bits_b)).map(|_| rng.gen_range(0..=max)).collect();
    LutMultiplier::new("random", bits_a, bits_b, table, 1.0, Provenance::Generated).unwrap()
}

pub fn random_layer_quant<R: Rng>(rng: &mut R, bits_a: u8, bits_b: u8) -> LayerQuant {
    LayerQuant {
        x: random_params(rng, bits_a),
        w: random_params(rng, bits_b),
    }
}

/// Two convolutions; the second collapses the map into `classes` logits.
pub fn two_conv_net<R: Rng>(rng: &mut R, classes: usize) -> ModelGraph {
    let mut c1 = ConvLayer::conv2d(3, 1, 3, 1, 1);
    let mut c2 = ConvLayer::conv2d(classes, 3, 6, 1, 0);
    for w in c1.weight.iter_mut().chain(c2.weight.iter_mut()) {
        *w = rng.gen_range(-0.6..0.6);
    }
    for b in c1.bias.iter_mut().chain(c2.bias.iter_mut()) {
        *b = rng.gen_range(-0.2..0.2);
    }
    ModelGraph {
        name: "two-conv".into(),
        input: Shape3::new(1, 6, 6),
        classes,
        layers: vec![Layer::Conv(c1), Layer::Relu, Layer::Conv(c2), Layer::Flatten],
    }
}

pub fn random_images<R: Rng>(rng: &mut R, shape: Shape3, classes: usize, n: usize) -> Dataset {
    let images = (0..n * shape.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let labels = (0..n).map(|_| rng.gen_range(0..classes) as u8).collect();
    Dataset::new(shape, classes, images, labels).unwrap()
}
