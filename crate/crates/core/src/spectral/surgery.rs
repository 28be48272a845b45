//! Rewrites a network according to a pruning plan: the producing layer keeps
//! only the selected nodes and the consuming layer absorbs `Â_J`.

use super::PruningPlan;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::netmodel::{CapturePoint, Layer, Network};
use crate::tensor::Tensor;

/// Applies `plan` whatever the consumer kind.
pub fn apply_plan(net: &Network, plan: &PruningPlan) -> Result<Network> {
    let cp = net.capture_point(plan.layer)?;
    rewrite(net, &cp, plan)
}

/// Applies `plan` where the capture point feeds a dense layer.
pub fn apply_plan_dense(net: &Network, layer_id: usize, plan: &PruningPlan) -> Result<Network> {
    let cp = checked_point(net, layer_id, plan)?;
    if !matches!(net.layer(cp.consumer), Layer::Dense(_)) {
        return Err(Error::Topology(format!("capture point {layer_id} does not feed a dense layer")));
    }
    rewrite(net, &cp, plan)
}

/// Applies `plan` where the capture point feeds a convolution.
pub fn apply_plan_conv(net: &Network, layer_id: usize, plan: &PruningPlan) -> Result<Network> {
    let cp = checked_point(net, layer_id, plan)?;
    if !matches!(net.layer(cp.consumer), Layer::Conv2d(_)) {
        return Err(Error::Topology(format!("capture point {layer_id} does not feed a convolution")));
    }
    rewrite(net, &cp, plan)
}

fn checked_point(net: &Network, layer_id: usize, plan: &PruningPlan) -> Result<CapturePoint> {
    if plan.layer != layer_id {
        return Err(Error::Topology(format!("plan is for capture point {}, not {layer_id}", plan.layer)));
    }
    net.capture_point(layer_id)
}

fn rewrite(net: &Network, cp: &CapturePoint, plan: &PruningPlan) -> Result<Network> {
    plan.validate()?;
    if plan.width() != cp.width {
        return Err(Error::shape_at(
            cp.tap,
            format!("plan covers {} nodes, capture point has {}", plan.width(), cp.width),
        ));
    }
    let keep = &plan.selected;
    let a = &plan.recovery;
    let mut layers = net.layers().to_vec();

    match &mut layers[cp.producer] {
        Layer::Dense(d) => {
            d.weight = d.weight.select_rows(keep);
            if let Some(b) = d.bias.as_mut() {
                *b = keep.iter().map(|&j| b[j]).collect();
            }
        }
        Layer::Conv2d(c) => {
            let (in_c, (kh, kw)) = (c.in_channels(), c.kernel());
            let per = in_c * kh * kw;
            let mut w = Vec::with_capacity(keep.len() * per);
            for &j in keep {
                w.extend_from_slice(&c.weight.data()[j * per..(j + 1) * per]);
            }
            c.weight = Tensor::new(vec![keep.len(), in_c, kh, kw], w)?;
            c.bias = keep.iter().map(|&j| c.bias[j]).collect();
        }
        _ => unreachable!("capture point producer is weighted"),
    }
    if let Some(b) = cp.batch_norm {
        if let Layer::BatchNorm(bn) = &layers[b] {
            layers[b] = Layer::BatchNorm(bn.select(keep));
        }
    }

    match &mut layers[cp.consumer] {
        Layer::Dense(d) if !cp.flattened => d.weight = d.weight.matmul(a),
        Layer::Dense(d) => d.weight = fold_grouped(&d.weight, a, cp.positions)?,
        Layer::Conv2d(c) => {
            let (o, (kh, kw)) = (c.out_channels(), c.kernel());
            let m = c.in_channels();
            let k = a.cols();
            let src = c.weight.data();
            let mut w = vec![0.0; o * k * kh * kw];
            let hw = kh * kw;
            for oc in 0..o {
                for ch in 0..m {
                    for col in 0..k {
                        let coef = a[(ch, col)];
                        if coef == 0.0 {
                            continue;
                        }
                        let s = &src[(oc * m + ch) * hw..(oc * m + ch + 1) * hw];
                        let d = &mut w[(oc * k + col) * hw..(oc * k + col + 1) * hw];
                        for (dv, sv) in d.iter_mut().zip(s) {
                            *dv += coef * sv;
                        }
                    }
                }
            }
            c.weight = Tensor::new(vec![o, k, kh, kw], w)?;
        }
        _ => unreachable!("capture point consumer is weighted"),
    }
    net.with_layers(layers)
}

/// Dense weights reading a flattened `m × P` map (column `c·P + p`): every
/// spatial position's column group is right-multiplied by `a`.
fn fold_grouped(w: &Matrix, a: &Matrix, positions: usize) -> Result<Matrix> {
    let (m, k) = a.shape();
    if w.cols() != m * positions {
        return Err(Error::shape(format!(
            "dense fan-in {} is not {m} channels × {positions} positions",
            w.cols()
        )));
    }
    let mut out = Matrix::zeros(w.rows(), k * positions);
    for o in 0..w.rows() {
        let src = w.row(o);
        let dst = out.row_mut(o);
        for c in 0..m {
            for col in 0..k {
                let coef = a[(c, col)];
                if coef == 0.0 {
                    continue;
                }
                for p in 0..positions {
                    dst[col * positions + p] += coef * src[c * positions + p];
                }
            }
        }
    }
    Ok(out)
}
