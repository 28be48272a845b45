//! Backpropagation, optimizers, the training loop, evaluation and
//! finite-difference gradient checking.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netmodel::ops::{self, BnCache, ConvGeom};
use crate::netmodel::{forward_layer, layer_output_shape, Layer, Network};
use crate::tensor::Tensor;

use super::data::DomainDataset;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Sgd,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub optimizer: Optimizer,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Layer indices whose parameters (and batch-norm statistics) stay fixed.
    pub freeze: BTreeSet<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: Optimizer::Adam,
            learning_rate: 1e-4,
            weight_decay: 5e-4,
            batch_size: 50,
            epochs: 2,
            freeze: BTreeSet::new(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    fn validate(&self, layers: usize) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate", "must be a finite non-negative number"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("weight_decay", "must be a finite non-negative number"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if let Some(&i) = self.freeze.iter().find(|&&i| i >= layers) {
            return Err(Error::config("freeze", format!("layer index {i} out of range (network has {layers})")));
        }
        Ok(())
    }
}

/// Mean training loss of every epoch.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
}

/// Parameter gradients, one vector per parameter tensor, in the order of
/// [`param_slices`].
pub type LayerGrads = Vec<Vec<f64>>;

/// Parameter tensors of a layer: weight then bias, or gamma then beta.
pub fn param_slices(layer: &Layer) -> Vec<&[f64]> {
    match layer {
        Layer::Dense(d) => {
            let mut v = vec![d.weight.as_slice()];
            if let Some(b) = &d.bias {
                v.push(b.as_slice());
            }
            v
        }
        Layer::Conv2d(c) => vec![c.weight.data(), c.bias.as_slice()],
        Layer::BatchNorm(b) => vec![b.gamma.as_slice(), b.beta.as_slice()],
        _ => Vec::new(),
    }
}

fn param_slices_mut(layer: &mut Layer) -> Vec<&mut [f64]> {
    match layer {
        Layer::Dense(d) => {
            let mut v = vec![d.weight.as_mut_slice()];
            if let Some(b) = d.bias.as_mut() {
                v.push(b.as_mut_slice());
            }
            v
        }
        Layer::Conv2d(c) => vec![c.weight.data_mut(), c.bias.as_mut_slice()],
        Layer::BatchNorm(b) => vec![b.gamma.as_mut_slice(), b.beta.as_mut_slice()],
        _ => Vec::new(),
    }
}

enum Tape {
    Dense { x: Vec<f64> },
    Conv { cols: Vec<f64>, geom: ConvGeom },
    BnTrain(BnCache),
    BnEval,
    Relu { mask: Vec<bool> },
    Pool { arg: Vec<usize>, in_len: usize },
    Dropout { keep: Vec<f64> },
    Identity,
}

struct ForwardPass {
    output: Vec<f64>,
    tapes: Vec<Tape>,
    /// Input shape (without batch) of every layer.
    in_shapes: Vec<Vec<usize>>,
}

/// Training-mode forward. Batch norms not listed as frozen use batch
/// statistics; dropout is applied only when an RNG is given.
fn forward_train(
    net: &Network,
    x: &[f64],
    n: usize,
    frozen: &[bool],
    mut dropout_rng: Option<&mut ChaCha8Rng>,
) -> ForwardPass {
    let mut shape = net.input_shape().to_vec();
    let mut cur = x.to_vec();
    let mut tapes = Vec::with_capacity(net.layers().len());
    let mut in_shapes = Vec::with_capacity(net.layers().len());
    for (i, layer) in net.layers().iter().enumerate() {
        let out_shape = layer_output_shape(i, layer, &shape).expect("validated network");
        let (y, tape) = match layer {
            Layer::Dense(d) => {
                let y = ops::dense_forward(&cur, n, &d.weight, &d.bias_or_zero());
                (y, Tape::Dense { x: cur })
            }
            Layer::Conv2d(c) => {
                let geom = c.geom(shape[1], shape[2]);
                let (y, cols) = ops::conv_forward(&cur, n, &geom, c.weight.data(), &c.bias, true);
                (y, Tape::Conv { cols, geom })
            }
            Layer::BatchNorm(b) if !frozen[i] => {
                let s = shape.iter().skip(1).product();
                let (y, cache) = ops::batchnorm_train(&cur, n, b.channels(), s, &b.gamma, &b.beta, b.eps);
                (y, Tape::BnTrain(cache))
            }
            Layer::BatchNorm(_) => (forward_layer(layer, &cur, n, &shape), Tape::BnEval),
            Layer::Relu => {
                let mask: Vec<bool> = cur.iter().map(|&v| v > 0.0).collect();
                let y = cur.iter().map(|&v| v.max(0.0)).collect();
                (y, Tape::Relu { mask })
            }
            Layer::MaxPool2 => {
                let in_len = cur.len();
                let (y, arg) = ops::maxpool2_forward(&cur, n * shape[0], shape[1], shape[2]);
                (y, Tape::Pool { arg, in_len })
            }
            Layer::Dropout { rate } if *rate > 0.0 && dropout_rng.is_some() => {
                let rng = dropout_rng.as_deref_mut().expect("checked");
                let scale = 1.0 / (1.0 - rate);
                let keep: Vec<f64> =
                    (0..cur.len()).map(|_| if rng.random::<f64>() < *rate { 0.0 } else { scale }).collect();
                let y = cur.iter().zip(&keep).map(|(a, k)| a * k).collect();
                (y, Tape::Dropout { keep })
            }
            Layer::Flatten | Layer::Dropout { .. } => (cur, Tape::Identity),
        };
        in_shapes.push(shape);
        tapes.push(tape);
        cur = y;
        shape = out_shape;
    }
    ForwardPass { output: cur, tapes, in_shapes }
}

/// Backpropagates `dy` through the network. Parameter gradients are computed
/// for layers with `want_grad[i]`; propagation stops below `lowest`.
fn backward(
    net: &Network,
    pass: &ForwardPass,
    mut dy: Vec<f64>,
    n: usize,
    want_grad: &[bool],
    lowest: usize,
) -> Vec<LayerGrads> {
    let layers = net.layers();
    let mut grads: Vec<LayerGrads> =
        layers.iter().map(|l| param_slices(l).iter().map(|p| vec![0.0; p.len()]).collect()).collect();
    for i in (lowest..layers.len()).rev() {
        let need_dx = i > lowest;
        let shape = &pass.in_shapes[i];
        let g = &mut grads[i];
        dy = match (&layers[i], &pass.tapes[i]) {
            (Layer::Dense(d), Tape::Dense { x }) => {
                let (dw, db) = match g.as_mut_slice() {
                    [dw, db] => (dw.as_mut_slice(), db.as_mut_slice()),
                    [dw] => (dw.as_mut_slice(), &mut [][..]),
                    _ => unreachable!(),
                };
                if want_grad[i] {
                    if d.bias.is_some() {
                        ops::dense_backward(x, &dy, n, &d.weight, dw, db, need_dx)
                    } else {
                        let mut scratch = vec![0.0; d.out_features()];
                        ops::dense_backward(x, &dy, n, &d.weight, dw, &mut scratch, need_dx)
                    }
                } else if need_dx {
                    let mut dx = vec![0.0; n * d.in_features()];
                    crate::linalg::gemm_acc(&dy, d.weight.as_slice(), &mut dx, n, d.out_features(), d.in_features());
                    dx
                } else {
                    Vec::new()
                }
            }
            (Layer::Conv2d(c), Tape::Conv { cols, geom }) => {
                let (dw, db) = match g.as_mut_slice() {
                    [dw, db] => (dw.as_mut_slice(), db.as_mut_slice()),
                    _ => unreachable!(),
                };
                if want_grad[i] || need_dx {
                    ops::conv_backward(cols, &dy, n, geom, c.weight.data(), dw, db, need_dx)
                } else {
                    Vec::new()
                }
            }
            (Layer::BatchNorm(b), Tape::BnTrain(cache)) => {
                let s = shape.iter().skip(1).product();
                let (dgamma, dbeta) = match g.as_mut_slice() {
                    [a, b] => (a.as_mut_slice(), b.as_mut_slice()),
                    _ => unreachable!(),
                };
                ops::batchnorm_train_backward(&dy, cache, n, b.channels(), s, &b.gamma, dgamma, dbeta)
            }
            (Layer::BatchNorm(b), Tape::BnEval) => {
                let s = shape.iter().skip(1).product();
                ops::batchnorm_eval_backward(&dy, n, b.channels(), s, &b.gamma, &b.running_var, b.eps)
            }
            (Layer::Relu, Tape::Relu { mask }) => {
                dy.iter().zip(mask).map(|(&g, &m)| if m { g } else { 0.0 }).collect()
            }
            (Layer::MaxPool2, Tape::Pool { arg, in_len }) => ops::maxpool2_backward(&dy, arg, *in_len),
            (Layer::Dropout { .. }, Tape::Dropout { keep }) => dy.iter().zip(keep).map(|(a, k)| a * k).collect(),
            (_, Tape::Identity) => dy,
            _ => unreachable!("tape does not match layer"),
        };
        if !need_dx {
            break;
        }
    }
    grads
}

fn check_classes(net: &Network, data: &DomainDataset) -> Result<()> {
    if data.classes != net.num_classes() {
        return Err(Error::shape(format!(
            "dataset has {} classes, network outputs {}",
            data.classes,
            net.num_classes()
        )));
    }
    if let Some(&l) = data.labels.iter().find(|&&l| l as usize >= data.classes) {
        return Err(Error::shape(format!("label {l} out of range for {} classes", data.classes)));
    }
    Ok(())
}

/// Mean cross-entropy and parameter gradients on one batch, with batch norms
/// in training mode and dropout disabled.
pub fn gradients(net: &Network, x: &Tensor, labels: &[u16]) -> Result<(f64, Vec<LayerGrads>)> {
    let n = x.batch();
    if labels.len() != n || x.shape()[1..] != net.input_shape()[..] {
        return Err(Error::shape("batch and labels disagree with the network input"));
    }
    let layers = net.layers().len();
    let pass = forward_train(net, x.data(), n, &vec![false; layers], None);
    let (loss, dy) = ops::softmax_cross_entropy(&pass.output, n, net.num_classes(), labels);
    Ok((loss, backward(net, &pass, dy, n, &vec![true; layers], 0)))
}

/// Trains a copy of `net` on the union of `data`.
pub fn train(net: &Network, data: &[&DomainDataset], cfg: &TrainConfig) -> Result<Network> {
    train_with_report(net, data, cfg).map(|(n, _)| n)
}

pub fn train_with_report(net: &Network, data: &[&DomainDataset], cfg: &TrainConfig) -> Result<(Network, TrainReport)> {
    cfg.validate(net.layers().len())?;
    for d in data {
        check_classes(net, d)?;
    }
    let mut net = net.clone();
    let mut report = TrainReport::default();
    let total: usize = data.iter().map(|d| d.len()).sum();
    if cfg.epochs == 0 || total == 0 {
        return Ok((net, report));
    }
    let features = Tensor::concat(&data.iter().map(|d| &d.features).collect::<Vec<_>>())?;
    let labels: Vec<u16> = data.iter().flat_map(|d| d.labels.iter().copied()).collect();
    let item = features.item_len();

    let layers = net.layers().len();
    let frozen: Vec<bool> = (0..layers).map(|i| cfg.freeze.contains(&i)).collect();
    let trainable: Vec<bool> =
        (0..layers).map(|i| !frozen[i] && !param_slices(net.layer(i)).is_empty()).collect();
    let Some(lowest) = trainable.iter().position(|&t| t) else {
        // Nothing to update; still report the loss trajectory.
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        for _ in 0..cfg.epochs {
            let mut order: Vec<usize> = (0..total).collect();
            order.shuffle(&mut rng);
            let mut sum = 0.0;
            for chunk in order.chunks(cfg.batch_size) {
                let (xb, yb) = gather(&features, &labels, chunk, item);
                let pass = forward_train(&net, &xb, chunk.len(), &frozen, Some(&mut rng));
                let (loss, _) = ops::softmax_cross_entropy(&pass.output, chunk.len(), net.num_classes(), &yb);
                sum += loss * chunk.len() as f64;
            }
            report.epoch_losses.push(sum / total as f64);
        }
        return Ok((net, report));
    };

    let mut state: Vec<Vec<(Vec<f64>, Vec<f64>)>> = net
        .layers()
        .iter()
        .map(|l| param_slices(l).iter().map(|p| (vec![0.0; p.len()], vec![0.0; p.len()])).collect())
        .collect();
    let mut step = 0i32;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..total).collect();
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let n = chunk.len();
            let (xb, yb) = gather(&features, &labels, chunk, item);
            let pass = forward_train(&net, &xb, n, &frozen, Some(&mut rng));
            let (loss, dy) = ops::softmax_cross_entropy(&pass.output, n, net.num_classes(), &yb);
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, loss });
            }
            sum += loss * n as f64;
            let grads = backward(&net, &pass, dy, n, &trainable, lowest);
            step += 1;
            update_running_stats(&mut net, &pass, n, &frozen);
            for (i, layer) in net.layers_mut().iter_mut().enumerate() {
                if !trainable[i] {
                    continue;
                }
                for ((p, g), (m, v)) in param_slices_mut(layer).into_iter().zip(&grads[i]).zip(state[i].iter_mut()) {
                    apply_update(cfg, step, p, g, m, v);
                }
            }
        }
        let mean = sum / total as f64;
        if !mean.is_finite() || !net_is_finite(&net) {
            return Err(Error::Diverged { epoch, loss: mean });
        }
        report.epoch_losses.push(mean);
    }
    Ok((net, report))
}

fn gather(features: &Tensor, labels: &[u16], idx: &[usize], item: usize) -> (Vec<f64>, Vec<u16>) {
    let mut xb = Vec::with_capacity(idx.len() * item);
    for &i in idx {
        xb.extend_from_slice(features.item(i));
    }
    (xb, idx.iter().map(|&i| labels[i]).collect())
}

fn update_running_stats(net: &mut Network, pass: &ForwardPass, n: usize, frozen: &[bool]) {
    for (i, layer) in net.layers_mut().iter_mut().enumerate() {
        if let (Layer::BatchNorm(b), Tape::BnTrain(cache)) = (layer, &pass.tapes[i]) {
            if frozen[i] {
                continue;
            }
            let count = n * pass.in_shapes[i].iter().skip(1).product::<usize>();
            let unbias = if count > 1 { count as f64 / (count - 1) as f64 } else { 1.0 };
            for c in 0..b.channels() {
                b.running_mean[c] = (1.0 - b.momentum) * b.running_mean[c] + b.momentum * cache.batch_mean[c];
                b.running_var[c] = (1.0 - b.momentum) * b.running_var[c] + b.momentum * cache.batch_var[c] * unbias;
            }
        }
    }
}

fn apply_update(cfg: &TrainConfig, step: i32, p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64]) {
    let lr = cfg.learning_rate;
    let wd = cfg.weight_decay;
    match cfg.optimizer {
        Optimizer::Sgd => {
            for (w, &gi) in p.iter_mut().zip(g) {
                *w -= lr * (gi + wd * *w);
            }
        }
        Optimizer::Adam => {
            let c1 = 1.0 - ADAM_BETA1.powi(step);
            let c2 = 1.0 - ADAM_BETA2.powi(step);
            for k in 0..p.len() {
                let gi = g[k] + wd * p[k];
                m[k] = ADAM_BETA1 * m[k] + (1.0 - ADAM_BETA1) * gi;
                v[k] = ADAM_BETA2 * v[k] + (1.0 - ADAM_BETA2) * gi * gi;
                let mh = m[k] / c1;
                let vh = v[k] / c2;
                p[k] -= lr * mh / (vh.sqrt() + ADAM_EPS);
            }
        }
    }
}

fn net_is_finite(net: &Network) -> bool {
    net.layers().iter().all(|l| param_slices(l).iter().all(|p| p.iter().all(|v| v.is_finite())))
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = k;
        }
    }
    best
}

/// Fraction of samples whose argmax prediction equals the label.
pub fn evaluate(net: &Network, data: &DomainDataset) -> Result<f64> {
    check_classes(net, data)?;
    if data.is_empty() {
        return Ok(0.0);
    }
    let classes = net.num_classes();
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(512) {
        let x = data.features.select_items(chunk);
        let y = net.predict(&x)?;
        for (r, &i) in chunk.iter().enumerate() {
            if argmax(&y.data()[r * classes..(r + 1) * classes]) == data.labels[i] as usize {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

/// ReLU masks and pooling choices of a training-mode forward.
fn kink_signature(pass: &ForwardPass) -> Vec<u64> {
    let mut sig = Vec::new();
    for t in &pass.tapes {
        match t {
            Tape::Relu { mask } => {
                for chunk in mask.chunks(64) {
                    sig.push(chunk.iter().enumerate().fold(0u64, |acc, (k, &b)| acc | ((b as u64) << k)));
                }
            }
            Tape::Pool { arg, .. } => sig.extend(arg.iter().map(|&a| a as u64)),
            _ => {}
        }
    }
    sig
}

fn loss_and_signature(net: &Network, x: &Tensor, labels: &[u16]) -> (f64, Vec<u64>) {
    let n = x.batch();
    let pass = forward_train(net, x.data(), n, &vec![false; net.layers().len()], None);
    let (loss, _) = ops::softmax_cross_entropy(&pass.output, n, net.num_classes(), labels);
    (loss, kink_signature(&pass))
}

/// Largest relative error between analytic and central-difference gradients
/// over all parameters. Parameters whose perturbation changes a ReLU mask or
/// a pooling choice are skipped, since the loss is not differentiable there.
pub fn grad_check(net: &Network, x: &Tensor, labels: &[u16], epsilon: f64) -> Result<f64> {
    let (_, grads) = gradients(net, x, labels)?;
    let (_, base_sig) = loss_and_signature(net, x, labels);
    let mut probe = net.clone();
    let mut worst: f64 = 0.0;
    for i in 0..net.layers().len() {
        for (t, grad) in grads[i].iter().enumerate() {
            for k in 0..grad.len() {
                let orig = param_slices(probe.layer(i))[t][k];
                param_slices_mut(&mut probe.layers_mut()[i])[t][k] = orig + epsilon;
                let (lp, sp) = loss_and_signature(&probe, x, labels);
                param_slices_mut(&mut probe.layers_mut()[i])[t][k] = orig - epsilon;
                let (lm, sm) = loss_and_signature(&probe, x, labels);
                param_slices_mut(&mut probe.layers_mut()[i])[t][k] = orig;
                if sp != base_sig || sm != base_sig {
                    continue;
                }
                let numeric = (lp - lm) / (2.0 * epsilon);
                let analytic = grad[k];
                let denom = analytic.abs().max(numeric.abs()).max(1e-6);
                worst = worst.max((analytic - numeric).abs() / denom);
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Matrix;
    use crate::netmodel::Dense;

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0]), 0);
    }

    #[test]
    fn sgd_step_matches_hand_update() {
        // One sample, one dense layer, zero weights: softmax is uniform.
        let net = Network::new(vec![2], vec![Layer::Dense(Dense::new(Matrix::zeros(2, 2), Some(vec![0.0; 2])))])
            .unwrap();
        let x = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let (loss, g) = gradients(&net, &x, &[0]).unwrap();
        assert!((loss - 2f64.ln()).abs() < 1e-15);
        assert_eq!(g[0][0], vec![-0.5, -1.0, 0.5, 1.0]);
        assert_eq!(g[0][1], vec![-0.5, 0.5]);
    }
}
