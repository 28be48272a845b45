//! Seeded synthetic two-domain glyph datasets.
//!
//! Each class is a seven-segment style glyph drawn on an 8×8 canvas with
//! random jitter, stroke intensity and pixel noise. The target domain runs the
//! same generator and then applies a fixed affine intensity map, a fixed
//! translation and extra pixel noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

pub const GLYPH_SIZE: usize = 8;
pub const GLYPH_CLASSES: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Source,
    Target,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainDataset {
    pub domain: Domain,
    pub split: Split,
    /// `count × input_shape`
    pub features: Tensor,
    pub labels: Vec<u16>,
    pub classes: usize,
}

impl DomainDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// The first `n` samples (or all, if fewer).
    pub fn head(&self, n: usize) -> DomainDataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    pub fn subset(&self, idx: &[usize]) -> DomainDataset {
        DomainDataset {
            domain: self.domain,
            split: self.split,
            features: self.features.select_items(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        }
    }
}

/// Fixed appearance shift applied to produce the target domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DomainShiftConfig {
    /// Multiplies pixel intensities.
    pub contrast: f64,
    /// Added to pixel intensities after scaling.
    pub brightness: f64,
    /// Horizontal translation in pixels (positive = right).
    pub shift_x: i32,
    /// Vertical translation in pixels (positive = down).
    pub shift_y: i32,
    /// Standard deviation of extra Gaussian pixel noise.
    pub noise_std: f64,
}

impl DomainShiftConfig {
    pub fn none() -> Self {
        DomainShiftConfig { contrast: 1.0, brightness: 0.0, shift_x: 0, shift_y: 0, noise_std: 0.0 }
    }
}

impl Default for DomainShiftConfig {
    fn default() -> Self {
        DomainShiftConfig { contrast: 0.8, brightness: 0.3, shift_x: 1, shift_y: 1, noise_std: 0.1 }
    }
}

/// Source and target datasets, each with a train and a test split.
#[derive(Clone, Debug, PartialEq)]
pub struct TwoDomainData {
    pub source_train: DomainDataset,
    pub source_test: DomainDataset,
    pub target_train: DomainDataset,
    pub target_test: DomainDataset,
}

impl TwoDomainData {
    pub fn get(&self, domain: Domain, split: Split) -> &DomainDataset {
        match (domain, split) {
            (Domain::Source, Split::Train) => &self.source_train,
            (Domain::Source, Split::Test) => &self.source_test,
            (Domain::Target, Split::Train) => &self.target_train,
            (Domain::Target, Split::Test) => &self.target_test,
        }
    }
}

// Seven segments: top, upper-left, upper-right, middle, lower-left, lower-right, bottom.
const SEGMENTS: [[bool; 7]; GLYPH_CLASSES] = [
    [true, true, true, false, true, true, true],     // 0
    [false, false, true, false, false, true, false], // 1
    [true, false, true, true, true, false, true],    // 2
    [true, false, true, true, false, true, true],    // 3
    [false, true, true, true, false, true, false],   // 4
    [true, true, false, true, false, true, true],    // 5
    [true, true, false, true, true, true, true],     // 6
    [true, false, true, false, false, true, false],  // 7
    [true, true, true, true, true, true, true],      // 8
    [true, true, true, true, false, true, true],     // 9
];

fn segment_pixels(seg: usize) -> Vec<(usize, usize)> {
    // Glyph box spans rows 1..=6, columns 2..=5.
    let (top, mid, bot, left, right) = (1, 3, 6, 2, 5);
    match seg {
        0 => (left..=right).map(|c| (top, c)).collect(),
        1 => (top..=mid).map(|r| (r, left)).collect(),
        2 => (top..=mid).map(|r| (r, right)).collect(),
        3 => (left..=right).map(|c| (mid, c)).collect(),
        4 => (mid..=bot).map(|r| (r, left)).collect(),
        5 => (mid..=bot).map(|r| (r, right)).collect(),
        6 => (left..=right).map(|c| (bot, c)).collect(),
        _ => unreachable!(),
    }
}

fn render(class: usize, rng: &mut ChaCha8Rng, noise: &Normal<f64>) -> Vec<f64> {
    let n = GLYPH_SIZE;
    let mut img = vec![0.0; n * n];
    let jx: i32 = rng.random_range(-1..=1);
    let jy: i32 = rng.random_range(-1..=1);
    let ink = rng.random_range(0.6..1.0);
    for (seg, on) in SEGMENTS[class].iter().enumerate() {
        if !on {
            continue;
        }
        let strength = ink * rng.random_range(0.75..1.0);
        for (r, c) in segment_pixels(seg) {
            let (r, c) = (r as i32 + jy, c as i32 + jx);
            if (0..n as i32).contains(&r) && (0..n as i32).contains(&c) {
                let v = &mut img[r as usize * n + c as usize];
                *v = f64::max(*v, strength);
            }
        }
    }
    for v in img.iter_mut() {
        *v += noise.sample(rng);
    }
    img
}

fn apply_shift(img: &[f64], shift: &DomainShiftConfig, rng: &mut ChaCha8Rng, noise: Option<&Normal<f64>>) -> Vec<f64> {
    let n = GLYPH_SIZE as i32;
    let mut out = vec![0.0; img.len()];
    for r in 0..n {
        for c in 0..n {
            let (sr, sc) = (r - shift.shift_y, c - shift.shift_x);
            let v = if (0..n).contains(&sr) && (0..n).contains(&sc) { img[(sr * n + sc) as usize] } else { 0.0 };
            let mut v = shift.contrast * v + shift.brightness;
            if let Some(d) = noise {
                v += d.sample(rng);
            }
            out[(r * n + c) as usize] = v;
        }
    }
    out
}

fn stream_id(domain: Domain, split: Split) -> u64 {
    match (domain, split) {
        (Domain::Source, Split::Train) => 1,
        (Domain::Source, Split::Test) => 2,
        (Domain::Target, Split::Train) => 3,
        (Domain::Target, Split::Test) => 4,
    }
}

fn generate(seed: u64, n: usize, domain: Domain, split: Split, shift: &DomainShiftConfig) -> DomainDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream_id(domain, split));
    let base_noise = Normal::new(0.0, 0.08).expect("valid normal");
    let extra = (shift.noise_std > 0.0).then(|| Normal::new(0.0, shift.noise_std).expect("valid normal"));
    let mut labels: Vec<u16> = (0..n).map(|i| (i % GLYPH_CLASSES) as u16).collect();
    // Fisher-Yates keeps the class balance exact while randomizing order.
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        labels.swap(i, j);
    }
    let mut data = Vec::with_capacity(n * GLYPH_SIZE * GLYPH_SIZE);
    for &y in &labels {
        let img = render(y as usize, &mut rng, &base_noise);
        match domain {
            Domain::Source => data.extend(img),
            Domain::Target => data.extend(apply_shift(&img, shift, &mut rng, extra.as_ref())),
        }
    }
    DomainDataset {
        domain,
        split,
        features: Tensor::new(vec![n, 1, GLYPH_SIZE, GLYPH_SIZE], data).expect("consistent shape"),
        labels,
        classes: GLYPH_CLASSES,
    }
}

/// Generates balanced 10-class 8×8 glyph datasets for both domains, `n_per_split`
/// samples in every (domain, split). Deterministic in `seed`.
///
/// Panics if `n_per_split < 100`.
pub fn make_two_domain(seed: u64, n_per_split: usize, shift: &DomainShiftConfig) -> TwoDomainData {
    assert!(n_per_split >= 100, "n_per_split must be at least 100");
    TwoDomainData {
        source_train: generate(seed, n_per_split, Domain::Source, Split::Train, shift),
        source_test: generate(seed, n_per_split, Domain::Source, Split::Test, shift),
        target_train: generate(seed, n_per_split, Domain::Target, Split::Train, shift),
        target_test: generate(seed, n_per_split, Domain::Target, Split::Test, shift),
    }
}
