//! Randomly initialized toy architectures.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::linalg::Matrix;
use crate::netmodel::{BatchNorm, Conv2d, Dense, Layer, Network};
use crate::tensor::Tensor;

/// Conv feature extractor followed by a dense classifier head:
///
/// ```text
/// [conv3x3 → BN → ReLU → pool] × pooled_convs, [conv3x3 → BN → ReLU] × rest,
/// flatten → dense → BN → ReLU → dropout → (dense → BN → ReLU)* → dense(classes)
/// ```
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyArch {
    pub input: [usize; 3],
    pub conv_channels: Vec<usize>,
    /// Number of leading conv blocks followed by 2×2 max pooling.
    pub pooled_convs: usize,
    pub dense_widths: Vec<usize>,
    pub classes: usize,
    pub dropout: f64,
}

impl Default for ToyArch {
    fn default() -> Self {
        ToyArch {
            input: [1, 8, 8],
            conv_channels: vec![32, 32, 32],
            pooled_convs: 2,
            dense_widths: vec![256, 256],
            classes: 10,
            dropout: 0.5,
        }
    }
}

fn he_dense(out: usize, inp: usize, bias: bool, rng: &mut ChaCha8Rng) -> Layer {
    let d = Normal::new(0.0, (2.0 / inp as f64).sqrt()).expect("valid std");
    Layer::Dense(Dense::new(Matrix::from_fn(out, inp, |_, _| d.sample(rng)), bias.then(|| vec![0.0; out])))
}

fn he_conv(out: usize, inp: usize, rng: &mut ChaCha8Rng) -> Layer {
    let fan_in = inp * 9;
    let d = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
    let w = (0..out * fan_in).map(|_| d.sample(rng)).collect();
    Layer::Conv2d(Conv2d {
        weight: Tensor::new(vec![out, inp, 3, 3], w).expect("consistent shape"),
        bias: vec![0.0; out],
        stride: 1,
        padding: 1,
    })
}

impl ToyArch {
    pub fn build(&self, seed: u64) -> Result<Network> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::new();
        let [mut c, mut h, mut w] = self.input;
        for (i, &out) in self.conv_channels.iter().enumerate() {
            layers.push(he_conv(out, c, &mut rng));
            layers.push(Layer::BatchNorm(BatchNorm::identity(out)));
            layers.push(Layer::Relu);
            if i < self.pooled_convs {
                layers.push(Layer::MaxPool2);
                h /= 2;
                w /= 2;
            }
            c = out;
        }
        let mut width = c * h * w;
        if !self.conv_channels.is_empty() {
            layers.push(Layer::Flatten);
        }
        for (i, &out) in self.dense_widths.iter().enumerate() {
            layers.push(he_dense(out, width, true, &mut rng));
            layers.push(Layer::BatchNorm(BatchNorm::identity(out)));
            layers.push(Layer::Relu);
            if i == 0 && self.dropout > 0.0 {
                layers.push(Layer::Dropout { rate: self.dropout });
            }
            width = out;
        }
        layers.push(he_dense(self.classes, width, true, &mut rng));
        Network::new(self.input.to_vec(), layers)
    }

    /// Indices of the conv blocks' layers (conv and its batch norm): the
    /// feature extractor frozen during dense-only fine-tuning.
    pub fn conv_layer_indices(net: &Network) -> Vec<usize> {
        let flatten = net.layers().iter().position(|l| matches!(l, Layer::Flatten)).unwrap_or(0);
        (0..flatten).filter(|&i| matches!(net.layer(i), Layer::Conv2d(_) | Layer::BatchNorm(_))).collect()
    }
}

/// Plain multilayer perceptron with ReLU activations (no batch norm).
pub fn mlp(widths: &[usize], seed: u64) -> Result<Network> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::new();
    for (i, pair) in widths.windows(2).enumerate() {
        if i > 0 {
            layers.push(Layer::Relu);
        }
        layers.push(he_dense(pair[1], pair[0], true, &mut rng));
    }
    Network::new(vec![widths[0]], layers)
}
