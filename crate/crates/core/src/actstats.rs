//! Per-layer activation moments: uncentered second moment, mean, centered
//! covariance, the covariance scaling matrix, and node activation rates.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::netmodel::{io::encode_model, ActivationBatch, Network};
use crate::trainkit::DomainDataset;

/// Images pushed through the network per forward call while collecting.
const COLLECT_CHUNK: usize = 256;

pub const DEFAULT_SCALING_FLOOR: f64 = 1e-12;

/// Running sums of activations at one capture point.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentAccumulator {
    layer: usize,
    n: usize,
    sum: Vec<f64>,
    sum_outer: Matrix,
}

impl MomentAccumulator {
    pub fn new(layer: usize, width: usize) -> Self {
        MomentAccumulator { layer, n: 0, sum: vec![0.0; width], sum_outer: Matrix::zeros(width, width) }
    }

    pub fn layer(&self) -> usize {
        self.layer
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn width(&self) -> usize {
        self.sum.len()
    }

    pub fn sum(&self) -> &[f64] {
        &self.sum
    }

    pub fn sum_outer(&self) -> &Matrix {
        &self.sum_outer
    }

    pub fn accumulate(&mut self, batch: &ActivationBatch) -> Result<()> {
        if batch.layer != self.layer {
            return Err(Error::shape(format!(
                "batch from layer {} fed to accumulator of layer {}",
                batch.layer, self.layer
            )));
        }
        let phi = &batch.samples;
        if phi.rows() == 0 {
            return Ok(());
        }
        if phi.cols() != self.width() {
            return Err(Error::shape_at(
                self.layer,
                format!("activation width {} differs from accumulator width {}", phi.cols(), self.width()),
            ));
        }
        for r in 0..phi.rows() {
            for (s, &v) in self.sum.iter_mut().zip(phi.row(r)) {
                *s += v;
            }
        }
        let outer = phi.t_matmul(phi);
        for (a, b) in self.sum_outer.as_mut_slice().iter_mut().zip(outer.as_slice()) {
            *a += b;
        }
        self.n += phi.rows();
        Ok(())
    }

    pub fn merge(&self, other: &MomentAccumulator) -> Result<MomentAccumulator> {
        if self.layer != other.layer || self.width() != other.width() {
            return Err(Error::shape(format!(
                "cannot merge accumulators of layer {} (width {}) and layer {} (width {})",
                self.layer,
                self.width(),
                other.layer,
                other.width()
            )));
        }
        Ok(MomentAccumulator {
            layer: self.layer,
            n: self.n + other.n,
            sum: self.sum.iter().zip(&other.sum).map(|(a, b)| a + b).collect(),
            sum_outer: self.sum_outer.add(&other.sum_outer),
        })
    }

    pub fn finalize(&self, tag: impl Into<String>) -> Result<LayerStatistics> {
        if self.n < 2 {
            return Err(Error::InsufficientSamples { needed: 2, have: self.n });
        }
        let n = self.n as f64;
        let mut sigma = self.sum_outer.scale(1.0 / n);
        sigma.symmetrize();
        let mean: Vec<f64> = self.sum.iter().map(|s| s / n).collect();
        let mut cov = sigma.sub(&Matrix::outer(&mean, &mean));
        cov.symmetrize();
        Ok(LayerStatistics { layer: self.layer, tag: tag.into(), n: self.n, sigma, mean, cov })
    }
}

/// Finalized moments of one capture point under one data setting.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerStatistics {
    pub layer: usize,
    /// Which data the statistics describe (e.g. `source`, `target`).
    pub tag: String,
    pub n: usize,
    /// Uncentered second moment.
    pub sigma: Matrix,
    pub mean: Vec<f64>,
    /// Centered covariance, `sigma − mean·meanᵀ`.
    pub cov: Matrix,
}

impl LayerStatistics {
    pub fn width(&self) -> usize {
        self.mean.len()
    }

    /// The matrix used as `C` by the moment-matching regularizers.
    pub fn second_moment(&self, kind: MomentKind) -> &Matrix {
        match kind {
            MomentKind::Centered => &self.cov,
            MomentKind::Raw => &self.sigma,
        }
    }
}

/// Whether the regularizer compares centered covariances or raw second moments.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MomentKind {
    #[default]
    Centered,
    Raw,
}

/// `S_ij = (C_ii C_jj)^(-1/4)`, symmetric and non-negative.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalingMatrix {
    pub s: Matrix,
}

/// Scaling matrix from the target centered covariance; diagonal entries
/// below `floor` are clamped to `floor`.
pub fn scaling_matrix(target: &LayerStatistics, floor: f64) -> ScalingMatrix {
    scaling_matrix_of(&target.cov, floor)
}

pub fn scaling_matrix_of(c: &Matrix, floor: f64) -> ScalingMatrix {
    let d: Vec<f64> = c.diagonal().into_iter().map(|v| v.max(floor).powf(-0.25)).collect();
    ScalingMatrix { s: Matrix::from_fn(d.len(), d.len(), |i, j| d[i] * d[j]) }
}

/// Streams `datasets` (the first `limit[i]` samples of each) through `net`
/// and accumulates moments at every capture id in `layers`.
pub fn collect_moments(
    net: &Network,
    layers: &[usize],
    datasets: &[(&DomainDataset, usize)],
) -> Result<Vec<MomentAccumulator>> {
    let points = net.capture_points();
    let mut accs = Vec::with_capacity(layers.len());
    for &l in layers {
        let cp = points
            .iter()
            .find(|p| p.tap == l)
            .ok_or_else(|| Error::Topology(format!("layer {l} is not a capture point")))?;
        accs.push(MomentAccumulator::new(l, cp.width));
    }
    for &(data, limit) in datasets {
        let take = limit.min(data.len());
        let idx: Vec<usize> = (0..take).collect();
        for chunk in idx.chunks(COLLECT_CHUNK) {
            let x = data.features.select_items(chunk);
            let caps = net.capture(&x, layers)?;
            for (acc, cap) in accs.iter_mut().zip(&caps) {
                acc.accumulate(cap)?;
            }
        }
    }
    Ok(accs)
}

/// Per-node fraction of activations that are strictly positive for the
/// nodes of capture point `layer`. Rates are read before any pooling or
/// dropout between the nonlinearity and the tap. Conv nodes count every
/// spatial position as a sample.
pub fn activation_rates(net: &Network, layer: usize, data: &DomainDataset) -> Result<Vec<f64>> {
    let cp = net.capture_point(layer)?;
    let layer = cp.activation;
    let mut positive = vec![0usize; cp.width];
    let mut rows = 0usize;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(COLLECT_CHUNK) {
        let caps = net.capture(&data.features.select_items(chunk), &[layer])?;
        let phi = &caps[0].samples;
        for r in 0..phi.rows() {
            for (p, &v) in positive.iter_mut().zip(phi.row(r)) {
                if v > 0.0 {
                    *p += 1;
                }
            }
        }
        rows += phi.rows();
    }
    Ok(positive.into_iter().map(|p| if rows == 0 { 0.0 } else { p as f64 / rows as f64 }).collect())
}

/// Mean over `nodes` of the per-node activation rate.
pub fn activation_rate(net: &Network, layer: usize, nodes: &[usize], data: &DomainDataset) -> Result<f64> {
    let rates = activation_rates(net, layer, data)?;
    if let Some(&bad) = nodes.iter().find(|&&j| j >= rates.len()) {
        return Err(Error::shape_at(layer, format!("node {bad} out of range for width {}", rates.len())));
    }
    if nodes.is_empty() {
        return Ok(0.0);
    }
    Ok(nodes.iter().map(|&j| rates[j]).sum::<f64>() / nodes.len() as f64)
}

const CACHE_MAGIC: &str = "SPST1";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CacheManifest {
    magic: String,
    layer: usize,
    n: usize,
    width: usize,
}

/// Content-addressed on-disk cache of moment accumulators.
///
/// Each entry is `<key>.json` (manifest) plus `<key>.bin` holding `sum` then
/// `sum_outer` as little-endian f64.
#[derive(Clone, Debug)]
pub struct StatsCache {
    dir: PathBuf,
}

impl StatsCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        StatsCache { dir: dir.into() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Hash of the model, the exact samples used and the capture id.
    pub fn key(net: &Network, datasets: &[(&DomainDataset, usize)], layer: usize) -> String {
        let mut h = Sha256::new();
        let (manifest, blob) = encode_model(net);
        h.update(manifest.as_bytes());
        h.update(&blob);
        for &(d, limit) in datasets {
            let take = limit.min(d.len());
            h.update((take as u64).to_le_bytes());
            for v in &d.features.data()[..take * d.features.item_len()] {
                h.update(v.to_le_bytes());
            }
            for l in &d.labels[..take] {
                h.update(l.to_le_bytes());
            }
        }
        h.update((layer as u64).to_le_bytes());
        hex::encode(h.finalize())
    }

    pub fn get(&self, key: &str) -> Result<Option<MomentAccumulator>> {
        let mpath = self.dir.join(format!("{key}.json"));
        let bpath = self.dir.join(format!("{key}.bin"));
        if !mpath.exists() || !bpath.exists() {
            return Ok(None);
        }
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let m: CacheManifest =
            serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", mpath.display())))?;
        if m.magic != CACHE_MAGIC {
            return Err(Error::Format(format!("{}: bad magic {:?}", mpath.display(), m.magic)));
        }
        let blob = fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;
        let expected = (m.width + m.width * m.width) * 8;
        if blob.len() != expected {
            return Err(Error::Format(format!(
                "{}: expected {expected} bytes, found {}",
                bpath.display(),
                blob.len()
            )));
        }
        let vals: Vec<f64> =
            blob.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect();
        let (sum, outer) = vals.split_at(m.width);
        Ok(Some(MomentAccumulator {
            layer: m.layer,
            n: m.n,
            sum: sum.to_vec(),
            sum_outer: Matrix::new(m.width, m.width, outer.to_vec()),
        }))
    }

    pub fn put(&self, key: &str, acc: &MomentAccumulator) -> Result<()> {
        fs::create_dir_all(&self.dir).map_err(|e| Error::io(&self.dir, e))?;
        let manifest =
            CacheManifest { magic: CACHE_MAGIC.into(), layer: acc.layer, n: acc.n, width: acc.width() };
        let mut blob = Vec::with_capacity((acc.width() + acc.width() * acc.width()) * 8);
        for v in acc.sum.iter().chain(acc.sum_outer.as_slice()) {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        let bpath = self.dir.join(format!("{key}.bin"));
        fs::write(&bpath, blob).map_err(|e| Error::io(&bpath, e))?;
        let mpath = self.dir.join(format!("{key}.json"));
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        fs::write(&mpath, text).map_err(|e| Error::io(&mpath, e))
    }
}

/// Like [`collect_moments`] for a single capture id, going through `cache`
/// when one is given.
pub fn collect_cached(
    net: &Network,
    layer: usize,
    datasets: &[(&DomainDataset, usize)],
    cache: Option<&StatsCache>,
) -> Result<MomentAccumulator> {
    let Some(cache) = cache else {
        return Ok(collect_moments(net, &[layer], datasets)?.remove(0));
    };
    let key = StatsCache::key(net, datasets, layer);
    if let Some(acc) = cache.get(&key)? {
        return Ok(acc);
    }
    let acc = collect_moments(net, &[layer], datasets)?.remove(0);
    cache.put(&key, &acc)?;
    Ok(acc)
}

/// Wraps a plain sample matrix as an activation batch.
pub fn batch_of(layer: usize, samples: Matrix) -> ActivationBatch {
    ActivationBatch { layer, samples }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_batch_leaves_accumulator() {
        let mut acc = MomentAccumulator::new(3, 2);
        let before = acc.clone();
        acc.accumulate(&batch_of(3, Matrix::zeros(0, 2))).unwrap();
        assert_eq!(acc, before);
    }

    #[test]
    fn one_sample_sums() {
        let mut acc = MomentAccumulator::new(0, 3);
        let v = [1.0, -2.0, 0.5];
        acc.accumulate(&batch_of(0, Matrix::new(1, 3, v.to_vec()))).unwrap();
        assert_eq!(acc.sum(), &v);
        assert_eq!(acc.sum_outer(), &Matrix::outer(&v, &v));
        assert!(matches!(acc.finalize("t"), Err(Error::InsufficientSamples { needed: 2, have: 1 })));
    }

    #[test]
    fn wrong_layer_or_width_rejected() {
        let mut acc = MomentAccumulator::new(0, 3);
        assert!(acc.accumulate(&batch_of(1, Matrix::zeros(2, 3))).is_err());
        assert!(acc.accumulate(&batch_of(0, Matrix::zeros(2, 4))).is_err());
        assert!(acc.merge(&MomentAccumulator::new(0, 2)).is_err());
    }

    #[test]
    fn constant_activations_have_zero_covariance() {
        let v = [0.5, 2.0];
        let mut acc = MomentAccumulator::new(0, 2);
        acc.accumulate(&batch_of(0, Matrix::from_rows(&[v.to_vec(), v.to_vec(), v.to_vec()]))).unwrap();
        let st = acc.finalize("c").unwrap();
        assert!(st.sigma.sub(&Matrix::outer(&v, &v)).max_abs() < 1e-15);
        assert!(st.cov.max_abs() < 1e-15);
    }

    #[test]
    fn antipodal_pair() {
        let u = [1.0, -3.0, 2.0];
        let neg: Vec<f64> = u.iter().map(|x| -x).collect();
        let mut acc = MomentAccumulator::new(0, 3);
        acc.accumulate(&batch_of(0, Matrix::from_rows(&[u.to_vec(), neg]))).unwrap();
        let st = acc.finalize("p").unwrap();
        assert!(st.mean.iter().all(|&m| m == 0.0));
        assert_eq!(st.sigma, Matrix::outer(&u, &u));
        assert_eq!(st.cov, st.sigma);
    }

    #[test]
    fn scaling_matrix_examples() {
        let id = scaling_matrix_of(&Matrix::identity(3), DEFAULT_SCALING_FLOOR);
        assert!(id.s.as_slice().iter().all(|&v| v == 1.0));
        let s = scaling_matrix_of(&Matrix::diag(&[16.0, 1.0]), DEFAULT_SCALING_FLOOR);
        assert_eq!(s.s, Matrix::from_rows(&[vec![0.25, 0.5], vec![0.5, 1.0]]));
        let dead = scaling_matrix_of(&Matrix::diag(&[0.0, 1.0]), 1e-12);
        assert!(dead.s.is_finite());
        assert!((dead.s[(0, 0)] - 1e6).abs() < 1e-6 && (dead.s[(0, 1)] - 1e3).abs() < 1e-9);
    }
}
