//! Low-rank factorizations of dense layers and the rank-matching rule used to
//! compare them with node pruning at equal parameter budgets.
//!
//! The data-dependent variant minimizes `‖W X − Ŵ X‖_F` over rank-`k` `Ŵ`,
//! where `X` holds the layer's observed inputs as columns. With `U_k` the top
//! `k` left singular vectors of `W X`, `Ŵ = U_k U_kᵀ W` attains the minimum:
//! any rank-`k` `Ŵ X` is a rank-`k` approximation of `W X`, so by
//! Eckart-Young the optimum is the projection of `W X` onto its top-`k`
//! left singular subspace, and `U_k U_kᵀ W X` is exactly that projection.

use crate::error::{Error, Result};
use crate::linalg::{svd, Matrix};
use crate::netmodel::{Dense, Layer, LayerShape, Network};

/// `x ↦ second · (first · x) + bias`.
#[derive(Clone, Debug, PartialEq)]
pub struct FactoredDense {
    /// `k × n`, no bias.
    pub first: Matrix,
    /// `m × k`
    pub second: Matrix,
    /// Length `m`.
    pub bias: Vec<f64>,
}

impl FactoredDense {
    pub fn rank(&self) -> usize {
        self.first.rows()
    }

    pub fn product(&self) -> Matrix {
        self.second.matmul(&self.first)
    }

    /// `k(m+n) + m`.
    pub fn param_count(&self) -> usize {
        let (m, k) = self.second.shape();
        k * (m + self.first.cols()) + m
    }

    /// The two dense layers replacing the original one.
    pub fn into_layers(self) -> [Layer; 2] {
        [Layer::Dense(Dense::new(self.first, None)), Layer::Dense(Dense::new(self.second, Some(self.bias)))]
    }
}

fn check_rank(k: usize, max: usize) -> Result<()> {
    if k == 0 || k > max {
        return Err(Error::RankOutOfRange { k, max });
    }
    Ok(())
}

fn check_bias(w: &Matrix, b: &[f64]) -> Result<()> {
    if b.len() != w.rows() {
        return Err(Error::shape(format!("bias length {} for {} outputs", b.len(), w.rows())));
    }
    Ok(())
}

/// Best rank-`k` approximation of `W` in Frobenius norm.
pub fn svd_truncate(w: &Matrix, b: &[f64], k: usize) -> Result<FactoredDense> {
    let (m, n) = w.shape();
    check_rank(k, m.min(n))?;
    check_bias(w, b)?;
    let d = svd(w)?;
    let second = Matrix::from_fn(m, k, |r, c| d.u[(r, c)] * d.s[c]);
    let first = Matrix::from_fn(k, n, |r, c| d.v[(c, r)]);
    Ok(FactoredDense { first, second, bias: b.to_vec() })
}

/// Rank-`k` factorization minimizing the output error on inputs `x`
/// (`n × samples`).
pub fn dalr_compress(w: &Matrix, b: &[f64], x: &Matrix, k: usize) -> Result<FactoredDense> {
    let (m, n) = w.shape();
    if x.rows() != n {
        return Err(Error::shape(format!("inputs have {} rows, layer takes {n}", x.rows())));
    }
    check_rank(k, m.min(x.cols()))?;
    check_bias(w, b)?;
    if !x.is_finite() {
        return Err(Error::DegenerateData("non-finite inputs".into()));
    }
    let y = w.matmul(x);
    if y.max_abs() == 0.0 {
        return Err(Error::DegenerateData("layer output is zero on all samples".into()));
    }
    let d = svd(&y)?;
    let second = Matrix::from_fn(m, k, |r, c| d.u[(r, c)]);
    let first = second.t_matmul(w);
    Ok(FactoredDense { first, second, bias: b.to_vec() })
}

/// Node count to keep in an `m`-output layer (fan-in `n`, followed by a
/// `p`-output layer) so that pruning matches the parameter budget of a
/// rank-`k` factorization:
/// `k' = ⌊(k(m+n) + m + pm + k) / (n + 1 + p)⌋`, at least 1.
pub fn matched_rank(k: usize, m: usize, n: usize, p: usize) -> usize {
    let num = k * (m + n) + m + p * m + k;
    (num / (n + 1 + p)).max(1)
}

/// A rank-`k` factorization of an `m × n` layer saves weights iff `k(m+n) < mn`.
pub fn dalr_feasible(k: usize, m: usize, n: usize) -> bool {
    k * (m + n) < m * n
}

/// Replaces the dense layer at `index` with its factorization.
pub fn replace_dense(net: &Network, index: usize, f: FactoredDense) -> Result<Network> {
    let Some(Layer::Dense(d)) = net.layers().get(index) else {
        return Err(Error::Topology(format!("layer {index} is not dense")));
    };
    if f.second.rows() != d.out_features() || f.first.cols() != d.in_features() {
        return Err(Error::shape_at(index, "factorization shape differs from the layer"));
    }
    let mut layers = net.layers().to_vec();
    layers.splice(index..=index, f.into_layers());
    net.with_layers(layers)
}

/// Layer shapes after factorizing dense layer `index` at rank `k`.
pub fn factored_shapes(shapes: &[LayerShape], index: usize, k: usize) -> Result<Vec<LayerShape>> {
    let LayerShape::Dense { input, output, .. } = shapes[index] else {
        return Err(Error::Topology(format!("layer {index} is not dense")));
    };
    let mut out = shapes.to_vec();
    out.splice(
        index..=index,
        [LayerShape::Dense { input, output: k, bias: false }, LayerShape::Dense { input: k, output, bias: true }],
    );
    Ok(out)
}

/// Layer shapes after keeping `keep` of the outputs of dense layer `index`
/// (followed directly, up to parameterless layers, by dense layer `next`).
pub fn pruned_shapes(shapes: &[LayerShape], index: usize, next: usize, keep: usize) -> Result<Vec<LayerShape>> {
    let mut out = shapes.to_vec();
    match (&mut out[index], shapes[next]) {
        (LayerShape::Dense { output, .. }, LayerShape::Dense { output: p, bias, .. }) => {
            *output = keep;
            out[next] = LayerShape::Dense { input: keep, output: p, bias };
        }
        _ => return Err(Error::Topology(format!("layers {index} and {next} are not both dense"))),
    }
    for s in out.iter_mut().take(next).skip(index + 1) {
        if let LayerShape::BatchNorm { channels } = s {
            *channels = keep;
        }
    }
    Ok(out)
}
