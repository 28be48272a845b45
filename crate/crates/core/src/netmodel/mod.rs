//! Feed-forward network representation, inference with activation capture,
//! and parameter/FLOP accounting.
//!
//! A *capture point* is the activation `φ` fed into a Dense/Conv layer that
//! follows an earlier Dense/Conv → [BatchNorm] → ReLU block (possibly through
//! max pooling, a dropout marker and a flatten). Its id is the index of the
//! layer whose output is captured (the last layer before any flatten), and its
//! width is the number of nodes/channels of the producing layer. Conv
//! activations are reported with one row per (image, spatial position).

pub mod io;
pub mod ops;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::tensor::Tensor;
use ops::ConvGeom;

pub const DEFAULT_BN_EPS: f64 = 1e-5;
pub const DEFAULT_BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    /// `out × in`
    pub weight: Matrix,
    pub bias: Option<Vec<f64>>,
}

impl Dense {
    pub fn new(weight: Matrix, bias: Option<Vec<f64>>) -> Self {
        Dense { weight, bias }
    }

    pub fn in_features(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_features(&self) -> usize {
        self.weight.rows()
    }

    pub(crate) fn bias_or_zero(&self) -> Vec<f64> {
        self.bias.clone().unwrap_or_else(|| vec![0.0; self.out_features()])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    /// `(out_c, in_c, k_h, k_w)`
    pub weight: Tensor,
    pub bias: Vec<f64>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn kernel(&self) -> (usize, usize) {
        (self.weight.shape()[2], self.weight.shape()[3])
    }

    pub(crate) fn geom(&self, in_h: usize, in_w: usize) -> ConvGeom {
        let (k_h, k_w) = self.kernel();
        ConvGeom {
            in_c: self.in_channels(),
            in_h,
            in_w,
            out_c: self.out_channels(),
            k_h,
            k_w,
            stride: self.stride,
            padding: self.padding,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm {
    pub fn identity(channels: usize) -> Self {
        BatchNorm {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            eps: DEFAULT_BN_EPS,
            momentum: DEFAULT_BN_MOMENTUM,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Keeps channels `keep` in the given order.
    pub fn select(&self, keep: &[usize]) -> BatchNorm {
        let pick = |v: &Vec<f64>| keep.iter().map(|&i| v[i]).collect::<Vec<_>>();
        BatchNorm {
            gamma: pick(&self.gamma),
            beta: pick(&self.beta),
            running_mean: pick(&self.running_mean),
            running_var: pick(&self.running_var),
            eps: self.eps,
            momentum: self.momentum,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Dense(Dense),
    Conv2d(Conv2d),
    BatchNorm(BatchNorm),
    Relu,
    /// 2×2 max pooling, stride 2.
    MaxPool2,
    Flatten,
    /// Inference is the identity; training applies inverted Bernoulli dropout.
    Dropout { rate: f64 },
}

impl Layer {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Dense(_) => "dense",
            Layer::Conv2d(_) => "conv2d",
            Layer::BatchNorm(_) => "batchnorm",
            Layer::Relu => "relu",
            Layer::MaxPool2 => "maxpool2",
            Layer::Flatten => "flatten",
            Layer::Dropout { .. } => "dropout",
        }
    }

    pub fn is_weighted(&self) -> bool {
        matches!(self, Layer::Dense(_) | Layer::Conv2d(_))
    }

    pub fn shape_summary(&self) -> LayerShape {
        match self {
            Layer::Dense(d) => LayerShape::Dense {
                input: d.in_features(),
                output: d.out_features(),
                bias: d.bias.is_some(),
            },
            Layer::Conv2d(c) => {
                let (k_h, k_w) = c.kernel();
                LayerShape::Conv2d { in_c: c.in_channels(), out_c: c.out_channels(), k_h, k_w }
            }
            Layer::BatchNorm(b) => LayerShape::BatchNorm { channels: b.channels() },
            _ => LayerShape::Parameterless,
        }
    }
}

/// Weight-free description of a layer, enough for parameter accounting.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerShape {
    Dense { input: usize, output: usize, bias: bool },
    Conv2d { in_c: usize, out_c: usize, k_h: usize, k_w: usize },
    BatchNorm { channels: usize },
    Parameterless,
}

impl LayerShape {
    /// Weights + biases; batch norm contributes its scale and shift.
    pub fn params(&self) -> usize {
        match *self {
            LayerShape::Dense { input, output, bias } => output * input + if bias { output } else { 0 },
            LayerShape::Conv2d { in_c, out_c, k_h, k_w } => out_c * in_c * k_h * k_w + out_c,
            LayerShape::BatchNorm { channels } => 2 * channels,
            LayerShape::Parameterless => 0,
        }
    }
}

pub fn count_params_shapes(shapes: &[LayerShape]) -> usize {
    shapes.iter().map(LayerShape::params).sum()
}

/// A captured activation matrix: rows are samples, columns are nodes.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationBatch {
    pub layer: usize,
    pub samples: Matrix,
}

/// Topology of one capture point; see the module docs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CapturePoint {
    /// Capture id: index of the layer whose output is captured.
    pub tap: usize,
    pub producer: usize,
    pub batch_norm: Option<usize>,
    pub activation: usize,
    pub consumer: usize,
    /// A flatten sits between the tap and the consumer.
    pub flattened: bool,
    /// Node count `m_l`.
    pub width: usize,
    /// Spatial positions per sample at the tap (1 for dense activations).
    pub positions: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    layers: Vec<Layer>,
    input_shape: Vec<usize>,
}

impl Network {
    pub fn new(input_shape: Vec<usize>, layers: Vec<Layer>) -> Result<Self> {
        let net = Network { layers, input_shape };
        net.validate()?;
        Ok(net)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub(crate) fn layers_mut(&mut self) -> &mut Vec<Layer> {
        &mut self.layers
    }

    pub fn layer(&self, i: usize) -> &Layer {
        &self.layers[i]
    }

    /// Replaces the layer list, re-validating the result.
    pub fn with_layers(&self, layers: Vec<Layer>) -> Result<Network> {
        Network::new(self.input_shape.clone(), layers)
    }

    pub fn num_classes(&self) -> usize {
        self.output_shapes().ok().and_then(|s| s.last().map(|v| v.iter().product())).unwrap_or(0)
    }

    pub fn layer_shapes(&self) -> Vec<LayerShape> {
        self.layers.iter().map(Layer::shape_summary).collect()
    }

    /// Output shape (without batch dimension) after each layer.
    pub fn output_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shape = self.input_shape.clone();
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            shape = layer_output_shape(i, layer, &shape)?;
            out.push(shape.clone());
        }
        Ok(out)
    }

    fn validate(&self) -> Result<()> {
        if self.input_shape.is_empty() || self.input_shape.iter().any(|&d| d == 0) {
            return Err(Error::shape(format!("invalid input shape {:?}", self.input_shape)));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::BatchNorm(b) => {
                    let n = b.channels();
                    if b.beta.len() != n || b.running_mean.len() != n || b.running_var.len() != n {
                        return Err(Error::shape_at(i, "batch norm vectors differ in length"));
                    }
                    if b.running_var.iter().any(|&v| !(v > 0.0)) {
                        return Err(Error::shape_at(i, "batch norm running variance must be > 0"));
                    }
                }
                Layer::Dense(d) => {
                    if let Some(b) = &d.bias {
                        if b.len() != d.out_features() {
                            return Err(Error::shape_at(i, "dense bias length differs from output width"));
                        }
                    }
                }
                Layer::Conv2d(c) => {
                    if c.weight.shape().len() != 4 {
                        return Err(Error::shape_at(i, "conv weight must be 4-d"));
                    }
                    if c.bias.len() != c.out_channels() {
                        return Err(Error::shape_at(i, "conv bias length differs from out channels"));
                    }
                    if c.stride == 0 {
                        return Err(Error::shape_at(i, "conv stride must be >= 1"));
                    }
                }
                Layer::Dropout { rate } => {
                    if !(0.0..1.0).contains(rate) {
                        return Err(Error::shape_at(i, "dropout rate must be in [0, 1)"));
                    }
                }
                _ => {}
            }
        }
        self.output_shapes().map(|_| ())
    }

    /// All capture points in input-to-output order.
    pub fn capture_points(&self) -> Vec<CapturePoint> {
        let shapes = match self.output_shapes() {
            Ok(s) => s,
            Err(_) => return Vec::new(),
        };
        let mut points = Vec::new();
        for consumer in 0..self.layers.len() {
            if !self.layers[consumer].is_weighted() {
                continue;
            }
            if let Some(p) = self.trace_capture(consumer, &shapes) {
                points.push(p);
            }
        }
        points
    }

    pub fn capture_point(&self, id: usize) -> Result<CapturePoint> {
        self.capture_points()
            .into_iter()
            .find(|p| p.tap == id)
            .ok_or_else(|| Error::Topology(format!("layer {id} is not a capture point")))
    }

    fn trace_capture(&self, consumer: usize, shapes: &[Vec<usize>]) -> Option<CapturePoint> {
        // Walk back over pooling / dropout / flatten layers to the activation.
        let mut i = consumer;
        let mut flatten_at = None;
        loop {
            if i == 0 {
                return None;
            }
            i -= 1;
            match &self.layers[i] {
                Layer::Flatten => {
                    if flatten_at.replace(i).is_some() {
                        return None;
                    }
                }
                Layer::Dropout { .. } | Layer::MaxPool2 => {}
                Layer::Relu => break,
                _ => return None,
            }
        }
        let flattened = flatten_at.is_some();
        let tap = match flatten_at {
            Some(f) => f - 1,
            None => consumer - 1,
        };
        let activation = i;
        if activation == 0 {
            return None;
        }
        let mut j = activation - 1;
        let mut batch_norm = None;
        if let Layer::BatchNorm(_) = &self.layers[j] {
            batch_norm = Some(j);
            if j == 0 {
                return None;
            }
            j -= 1;
        }
        if !self.layers[j].is_weighted() {
            return None;
        }
        let tap_shape = &shapes[tap];
        let width = tap_shape[0];
        let positions = tap_shape.iter().skip(1).product::<usize>();
        Some(CapturePoint {
            tap,
            producer: j,
            batch_norm,
            activation,
            consumer,
            flattened,
            width,
            positions,
        })
    }

    /// Inference forward pass. Returns the final-layer output and the
    /// activations at the requested capture ids.
    pub fn forward(&self, batch: &Tensor, capture: &[usize]) -> Result<(Tensor, Vec<ActivationBatch>)> {
        if batch.shape().len() != self.input_shape.len() + 1 || batch.shape()[1..] != self.input_shape[..] {
            return Err(Error::shape(format!(
                "batch shape {:?} does not match input shape {:?}",
                batch.shape(),
                self.input_shape
            )));
        }
        let n = batch.batch();
        let mut shape = self.input_shape.clone();
        let mut x = batch.data().to_vec();
        let mut captured: Vec<Option<ActivationBatch>> = vec![None; capture.len()];
        for (i, layer) in self.layers.iter().enumerate() {
            let out_shape = layer_output_shape(i, layer, &shape)?;
            x = forward_layer(layer, &x, n, &shape);
            shape = out_shape;
            if capture.contains(&i) {
                let rows = activation_rows(&x, n, &shape);
                for (slot, _) in captured.iter_mut().zip(capture).filter(|(_, &c)| c == i) {
                    *slot = Some(ActivationBatch { layer: i, samples: rows.clone() });
                }
            }
        }
        for &c in capture {
            if c >= self.layers.len() {
                return Err(Error::Topology(format!("capture id {c} beyond last layer")));
            }
        }
        let mut out_shape = vec![n];
        out_shape.extend_from_slice(&shape);
        Ok((Tensor::new(out_shape, x)?, captured.into_iter().map(|c| c.expect("every id visited")).collect()))
    }

    /// Activations at the requested capture ids, running only as many layers
    /// as needed.
    pub fn capture(&self, batch: &Tensor, capture: &[usize]) -> Result<Vec<ActivationBatch>> {
        let Some(&last) = capture.iter().max() else {
            return Ok(Vec::new());
        };
        if last >= self.layers.len() {
            return Err(Error::Topology(format!("capture id {last} beyond last layer")));
        }
        let prefix = Network { layers: self.layers[..=last].to_vec(), input_shape: self.input_shape.clone() };
        prefix.forward(batch, capture).map(|(_, caps)| caps)
    }

    /// Forward pass returning only the output; panics are impossible for a
    /// validated network with a matching batch.
    pub fn predict(&self, batch: &Tensor) -> Result<Tensor> {
        self.forward(batch, &[]).map(|(y, _)| y)
    }

    pub fn count_params(&self) -> usize {
        count_params_shapes(&self.layer_shapes())
    }

    /// Multiply-accumulates of Dense/Conv layers for one input sample.
    pub fn count_flops(&self) -> usize {
        let mut shape = self.input_shape.clone();
        let mut flops = 0;
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Dense(d) => flops += d.in_features() * d.out_features(),
                Layer::Conv2d(c) => {
                    let g = c.geom(shape[1], shape[2]);
                    flops += g.out_c * g.patch_len() * g.out_positions();
                }
                _ => {}
            }
            shape = layer_output_shape(i, layer, &shape).expect("validated network");
        }
        flops
    }

    /// Sets every dropout marker's rate to zero.
    pub fn without_dropout(&self) -> Network {
        let mut net = self.clone();
        for l in net.layers.iter_mut() {
            if let Layer::Dropout { rate } = l {
                *rate = 0.0;
            }
        }
        net
    }

    /// Rounds every parameter to f32 precision (the on-disk precision).
    pub fn round_to_f32(&self) -> Network {
        let mut net = self.clone();
        let r = |v: &mut [f64]| v.iter_mut().for_each(|x| *x = *x as f32 as f64);
        for l in net.layers.iter_mut() {
            match l {
                Layer::Dense(d) => {
                    r(d.weight.as_mut_slice());
                    if let Some(b) = d.bias.as_mut() {
                        r(b);
                    }
                }
                Layer::Conv2d(c) => {
                    r(c.weight.data_mut());
                    r(&mut c.bias);
                }
                Layer::BatchNorm(b) => {
                    r(&mut b.gamma);
                    r(&mut b.beta);
                    r(&mut b.running_mean);
                    r(&mut b.running_var);
                }
                _ => {}
            }
        }
        net
    }
}

pub(crate) fn layer_output_shape(i: usize, layer: &Layer, shape: &[usize]) -> Result<Vec<usize>> {
    match layer {
        Layer::Dense(d) => {
            if shape.len() != 1 || shape[0] != d.in_features() {
                return Err(Error::shape_at(
                    i,
                    format!("dense expects [{}], got {shape:?}", d.in_features()),
                ));
            }
            Ok(vec![d.out_features()])
        }
        Layer::Conv2d(c) => {
            if shape.len() != 3 || shape[0] != c.in_channels() {
                return Err(Error::shape_at(
                    i,
                    format!("conv expects [{}, h, w], got {shape:?}", c.in_channels()),
                ));
            }
            let (k_h, k_w) = c.kernel();
            if shape[1] + 2 * c.padding < k_h || shape[2] + 2 * c.padding < k_w {
                return Err(Error::shape_at(i, "conv kernel larger than padded input"));
            }
            let g = c.geom(shape[1], shape[2]);
            Ok(vec![c.out_channels(), g.out_h(), g.out_w()])
        }
        Layer::BatchNorm(b) => {
            if shape.is_empty() || shape[0] != b.channels() {
                return Err(Error::shape_at(
                    i,
                    format!("batch norm has {} channels, input {shape:?}", b.channels()),
                ));
            }
            Ok(shape.to_vec())
        }
        Layer::Relu | Layer::Dropout { .. } => Ok(shape.to_vec()),
        Layer::MaxPool2 => {
            if shape.len() != 3 || shape[1] < 2 || shape[2] < 2 {
                return Err(Error::shape_at(i, format!("max pool needs [c, h>=2, w>=2], got {shape:?}")));
            }
            Ok(vec![shape[0], shape[1] / 2, shape[2] / 2])
        }
        Layer::Flatten => Ok(vec![shape.iter().product()]),
    }
}

/// Inference-mode forward of a single layer on `n` samples of shape `shape`.
pub(crate) fn forward_layer(layer: &Layer, x: &[f64], n: usize, shape: &[usize]) -> Vec<f64> {
    match layer {
        Layer::Dense(d) => ops::dense_forward(x, n, &d.weight, &d.bias_or_zero()),
        Layer::Conv2d(c) => {
            let g = c.geom(shape[1], shape[2]);
            ops::conv_forward(x, n, &g, c.weight.data(), &c.bias, false).0
        }
        Layer::BatchNorm(b) => {
            let s = shape.iter().skip(1).product();
            ops::batchnorm_eval(
                x,
                n,
                b.channels(),
                s,
                &b.gamma,
                &b.beta,
                &b.running_mean,
                &b.running_var,
                b.eps,
            )
        }
        Layer::Relu => x.iter().map(|&v| v.max(0.0)).collect(),
        Layer::MaxPool2 => ops::maxpool2_forward(x, n * shape[0], shape[1], shape[2]).0,
        Layer::Flatten | Layer::Dropout { .. } => x.to_vec(),
    }
}

/// Lays out activations with one row per (sample, position) and one column per channel.
pub(crate) fn activation_rows(x: &[f64], n: usize, shape: &[usize]) -> Matrix {
    let c = shape[0];
    let s: usize = shape.iter().skip(1).product();
    if s == 1 {
        return Matrix::new(n, c, x.to_vec());
    }
    let mut m = Matrix::zeros(n * s, c);
    for i in 0..n {
        for ch in 0..c {
            let src = &x[(i * c + ch) * s..(i * c + ch + 1) * s];
            for (p, &v) in src.iter().enumerate() {
                m[(i * s + p, ch)] = v;
            }
        }
    }
    m
}
