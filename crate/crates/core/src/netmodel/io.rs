//! On-disk formats: model directories (`model.json` + `weights.bin`) and
//! dataset directories (`dataset.json` + `features.bin` + `labels.bin`).
//!
//! Manifests are JSON; blobs are raw little-endian `f32` (weights, features)
//! or `u16` (labels), concatenated in manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{BatchNorm, Conv2d, Dense, Layer, Network};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::tensor::Tensor;
use crate::trainkit::{Domain, DomainDataset, Split};

pub const MODEL_MAGIC: &str = "SPNM1";
pub const DATASET_MAGIC: &str = "SPDS1";
pub const FORMAT_VERSION: u32 = 1;

pub const MODEL_MANIFEST: &str = "model.json";
pub const MODEL_BLOB: &str = "weights.bin";
pub const DATASET_MANIFEST: &str = "dataset.json";
pub const DATASET_FEATURES: &str = "features.bin";
pub const DATASET_LABELS: &str = "labels.bin";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelManifest {
    magic: String,
    version: u32,
    input_shape: Vec<usize>,
    layers: Vec<LayerEntry>,
    blob_bytes: usize,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerEntry {
    kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    stride: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    padding: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    eps: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    momentum: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

impl TensorEntry {
    fn new(name: &str, shape: Vec<usize>) -> Self {
        TensorEntry { name: name.to_string(), shape }
    }

    fn len(&self) -> usize {
        self.shape.iter().product()
    }
}

fn push_f32(blob: &mut Vec<u8>, values: &[f64]) {
    for &v in values {
        blob.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

/// Serializes a network into its manifest text and weight blob.
pub fn encode_model(net: &Network) -> (String, Vec<u8>) {
    let mut blob = Vec::new();
    let mut layers = Vec::with_capacity(net.layers().len());
    for layer in net.layers() {
        let mut e = LayerEntry { kind: layer.kind().to_string(), ..Default::default() };
        match layer {
            Layer::Dense(d) => {
                e.tensors.push(TensorEntry::new("weight", vec![d.out_features(), d.in_features()]));
                push_f32(&mut blob, d.weight.as_slice());
                if let Some(b) = &d.bias {
                    e.tensors.push(TensorEntry::new("bias", vec![b.len()]));
                    push_f32(&mut blob, b);
                }
            }
            Layer::Conv2d(c) => {
                e.stride = Some(c.stride);
                e.padding = Some(c.padding);
                e.tensors.push(TensorEntry::new("weight", c.weight.shape().to_vec()));
                push_f32(&mut blob, c.weight.data());
                e.tensors.push(TensorEntry::new("bias", vec![c.bias.len()]));
                push_f32(&mut blob, &c.bias);
            }
            Layer::BatchNorm(b) => {
                e.eps = Some(b.eps);
                e.momentum = Some(b.momentum);
                for (name, v) in [
                    ("gamma", &b.gamma),
                    ("beta", &b.beta),
                    ("running_mean", &b.running_mean),
                    ("running_var", &b.running_var),
                ] {
                    e.tensors.push(TensorEntry::new(name, vec![v.len()]));
                    push_f32(&mut blob, v);
                }
            }
            Layer::Dropout { rate } => e.rate = Some(*rate),
            Layer::Relu | Layer::MaxPool2 | Layer::Flatten => {}
        }
        layers.push(e);
    }
    let manifest = ModelManifest {
        magic: MODEL_MAGIC.to_string(),
        version: FORMAT_VERSION,
        input_shape: net.input_shape().to_vec(),
        layers,
        blob_bytes: blob.len(),
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    (text, blob)
}

struct BlobReader<'a> {
    blob: &'a [u8],
    pos: usize,
}

impl BlobReader<'_> {
    fn take(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = n * 4;
        if self.pos + bytes > self.blob.len() {
            return Err(Error::Format(format!(
                "weight blob truncated: need {} bytes at offset {}, have {}",
                bytes,
                self.pos,
                self.blob.len()
            )));
        }
        let out = self.blob[self.pos..self.pos + bytes]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        self.pos += bytes;
        Ok(out)
    }
}

fn expect_tensors<'a>(i: usize, e: &'a LayerEntry, names: &[&str]) -> Result<&'a [TensorEntry]> {
    let got: Vec<&str> = e.tensors.iter().map(|t| t.name.as_str()).collect();
    if got != names {
        return Err(Error::Format(format!("layer {i} ({}) expects tensors {names:?}, manifest lists {got:?}", e.kind)));
    }
    Ok(&e.tensors)
}

/// Rebuilds a network from manifest text and blob bytes.
pub fn decode_model(manifest: &str, blob: &[u8]) -> Result<Network> {
    let m: ModelManifest =
        serde_json::from_str(manifest).map_err(|e| Error::Format(format!("bad model manifest: {e}")))?;
    if m.magic != MODEL_MAGIC {
        return Err(Error::Format(format!("bad magic {:?}, expected {MODEL_MAGIC:?}", m.magic)));
    }
    if m.version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported model format version {}", m.version)));
    }
    if m.blob_bytes != blob.len() {
        return Err(Error::Format(format!(
            "weight blob has {} bytes, manifest declares {}",
            blob.len(),
            m.blob_bytes
        )));
    }
    let mut rd = BlobReader { blob, pos: 0 };
    let mut layers = Vec::with_capacity(m.layers.len());
    for (i, e) in m.layers.iter().enumerate() {
        let layer = match e.kind.as_str() {
            "dense" => {
                let has_bias = e.tensors.len() == 2;
                let names: &[&str] = if has_bias { &["weight", "bias"] } else { &["weight"] };
                let t = expect_tensors(i, e, names)?;
                let ws = &t[0].shape;
                if ws.len() != 2 {
                    return Err(Error::Format(format!("layer {i}: dense weight must be 2-d")));
                }
                let weight = Matrix::new(ws[0], ws[1], rd.take(t[0].len())?);
                let bias = if has_bias {
                    if t[1].shape != [ws[0]] {
                        return Err(Error::Format(format!("layer {i}: dense bias shape {:?}", t[1].shape)));
                    }
                    Some(rd.take(t[1].len())?)
                } else {
                    None
                };
                Layer::Dense(Dense::new(weight, bias))
            }
            "conv2d" => {
                let t = expect_tensors(i, e, &["weight", "bias"])?;
                if t[0].shape.len() != 4 || t[1].shape != [t[0].shape[0]] {
                    return Err(Error::Format(format!("layer {i}: conv tensor shapes inconsistent")));
                }
                let weight = Tensor::new(t[0].shape.clone(), rd.take(t[0].len())?)?;
                let bias = rd.take(t[1].len())?;
                Layer::Conv2d(Conv2d {
                    weight,
                    bias,
                    stride: e.stride.ok_or_else(|| Error::Format(format!("layer {i}: conv missing stride")))?,
                    padding: e.padding.ok_or_else(|| Error::Format(format!("layer {i}: conv missing padding")))?,
                })
            }
            "batchnorm" => {
                let t = expect_tensors(i, e, &["gamma", "beta", "running_mean", "running_var"])?;
                let c = t[0].len();
                if t.iter().any(|x| x.shape != [c]) {
                    return Err(Error::Format(format!("layer {i}: batch norm tensor shapes inconsistent")));
                }
                Layer::BatchNorm(BatchNorm {
                    gamma: rd.take(c)?,
                    beta: rd.take(c)?,
                    running_mean: rd.take(c)?,
                    running_var: rd.take(c)?,
                    eps: e.eps.ok_or_else(|| Error::Format(format!("layer {i}: batch norm missing eps")))?,
                    momentum: e.momentum.unwrap_or(super::DEFAULT_BN_MOMENTUM),
                })
            }
            "relu" => Layer::Relu,
            "maxpool2" => Layer::MaxPool2,
            "flatten" => Layer::Flatten,
            "dropout" => Layer::Dropout {
                rate: e.rate.ok_or_else(|| Error::Format(format!("layer {i}: dropout missing rate")))?,
            },
            other => return Err(Error::Format(format!("layer {i}: unknown kind {other:?}"))),
        };
        layers.push(layer);
    }
    if rd.pos != blob.len() {
        return Err(Error::Format(format!("{} trailing bytes in weight blob", blob.len() - rd.pos)));
    }
    Network::new(m.input_shape, layers).map_err(|e| Error::Format(format!("inconsistent model: {e}")))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Writes `model.json` and `weights.bin` into `dir`.
pub fn save_model(net: &Network, dir: &Path) -> Result<()> {
    ensure_dir(dir)?;
    let (manifest, blob) = encode_model(net);
    write(&dir.join(MODEL_MANIFEST), manifest.as_bytes())?;
    write(&dir.join(MODEL_BLOB), &blob)
}

pub fn load_model(dir: &Path) -> Result<Network> {
    let manifest = read(&dir.join(MODEL_MANIFEST))?;
    let manifest = String::from_utf8(manifest).map_err(|_| Error::Format("manifest is not UTF-8".into()))?;
    let blob = read(&dir.join(MODEL_BLOB))?;
    decode_model(&manifest, &blob)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetManifest {
    magic: String,
    version: u32,
    domain: Domain,
    split: Split,
    shape: Vec<usize>,
    count: usize,
    classes: usize,
}

pub fn save_dataset(data: &DomainDataset, dir: &Path) -> Result<()> {
    ensure_dir(dir)?;
    let manifest = DatasetManifest {
        magic: DATASET_MAGIC.to_string(),
        version: FORMAT_VERSION,
        domain: data.domain,
        split: data.split,
        shape: data.features.shape()[1..].to_vec(),
        count: data.len(),
        classes: data.classes,
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write(&dir.join(DATASET_MANIFEST), text.as_bytes())?;
    let mut feats = Vec::with_capacity(data.features.len() * 4);
    push_f32(&mut feats, data.features.data());
    write(&dir.join(DATASET_FEATURES), &feats)?;
    let labels: Vec<u8> = data.labels.iter().flat_map(|l| l.to_le_bytes()).collect();
    write(&dir.join(DATASET_LABELS), &labels)
}

pub fn load_dataset(dir: &Path) -> Result<DomainDataset> {
    let text = read(&dir.join(DATASET_MANIFEST))?;
    let m: DatasetManifest =
        serde_json::from_slice(&text).map_err(|e| Error::Format(format!("bad dataset manifest: {e}")))?;
    if m.magic != DATASET_MAGIC || m.version != FORMAT_VERSION {
        return Err(Error::Format(format!("bad dataset magic/version {:?}/{}", m.magic, m.version)));
    }
    let per: usize = m.shape.iter().product();
    let feats = read(&dir.join(DATASET_FEATURES))?;
    if feats.len() != m.count * per * 4 {
        return Err(Error::Format(format!(
            "feature blob has {} bytes, expected {}",
            feats.len(),
            m.count * per * 4
        )));
    }
    let labels = read(&dir.join(DATASET_LABELS))?;
    if labels.len() != m.count * 2 {
        return Err(Error::Format(format!("label blob has {} bytes, expected {}", labels.len(), m.count * 2)));
    }
    let values = feats
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let labels: Vec<u16> = labels.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect();
    if labels.iter().any(|&l| l as usize >= m.classes) {
        return Err(Error::Format("label out of class range".into()));
    }
    let mut shape = vec![m.count];
    shape.extend_from_slice(&m.shape);
    let features = Tensor::new(shape, values).map_err(|e| Error::Format(e.to_string()))?;
    Ok(DomainDataset { domain: m.domain, split: m.split, features, labels, classes: m.classes })
}
