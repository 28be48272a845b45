//! Experiment configuration (TOML).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::actstats::{MomentKind, DEFAULT_SCALING_FLOOR};
use crate::error::{Error, Result};
use crate::trainkit::{DomainShiftConfig, Optimizer, ToyArch, TrainConfig};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    /// One model trained on source and target training data together.
    DigitsJoint,
    /// Train on source, then train only the dense head on target.
    PretrainFinetune,
}

/// Which samples feed the second-moment estimate used for selection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataChoice {
    TargetOnly,
    /// Same total count, split between target and source.
    TargetSourceMix,
    /// The full target count plus extra source samples.
    TargetPlusSource,
}

impl DataChoice {
    pub fn name(self) -> &'static str {
        match self {
            DataChoice::TargetOnly => "target_only",
            DataChoice::TargetSourceMix => "target_source_mix",
            DataChoice::TargetPlusSource => "target_plus_source",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Spectral,
    SpectralRegSubset,
    SpectralRegNode,
    Svd,
    Dalr,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Spectral => "spectral",
            Method::SpectralRegSubset => "spectral_reg_subset",
            Method::SpectralRegNode => "spectral_reg_node",
            Method::Svd => "svd",
            Method::Dalr => "dalr",
        }
    }

    pub fn is_spectral(self) -> bool {
        matches!(self, Method::Spectral | Method::SpectralRegSubset | Method::SpectralRegNode)
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Method::Spectral, Method::SpectralRegSubset, Method::SpectralRegNode, Method::Svd, Method::Dalr]
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::config("method", format!("unknown method {s:?}")))
    }
}

/// Meaning of the numbers in `sweep`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepKind {
    /// Required retention ratio for every pruned layer.
    #[default]
    Alpha,
    /// Fraction of nodes kept in every pruned layer (`ceil(f·m)`).
    KeepFraction,
    /// Rank of the factorized dense layer; spectral methods keep the
    /// budget-matched node count in that layer instead.
    Rank,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub n_per_split: usize,
    pub shift: DomainShiftConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { n_per_split: 2000, shift: DomainShiftConfig::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StatsConfig {
    /// Target samples used for statistics (the `target_only` count).
    pub samples: usize,
    /// Share of source samples in `target_source_mix`.
    pub mix_source_fraction: f64,
    /// Source samples added in `target_plus_source`, relative to `samples`.
    pub plus_source_ratio: f64,
    pub moment_kind: MomentKind,
    pub scaling_floor: f64,
    /// Cache accumulated moments under `paths.work_dir/stats`.
    pub cache: bool,
}

impl Default for StatsConfig {
    fn default() -> Self {
        StatsConfig {
            samples: 1000,
            mix_source_fraction: 0.5,
            plus_source_ratio: 0.5,
            moment_kind: MomentKind::Centered,
            scaling_floor: DEFAULT_SCALING_FLOOR,
            cache: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompressConfig {
    /// Fixed α or keep fraction for conv layers under alpha and
    /// keep-fraction sweeps; `None` uses the sweep value.
    pub conv_value: Option<f64>,
    /// Ridge for the greedy search; `None` picks one from the trace.
    pub ridge: Option<f64>,
    /// Prune conv capture points too (otherwise dense only).
    pub include_conv: bool,
    /// Layer index of the dense layer factorized by low-rank methods;
    /// `None` picks the last hidden dense layer.
    pub lowrank_layer: Option<usize>,
}

impl Default for CompressConfig {
    fn default() -> Self {
        CompressConfig { conv_value: None, ridge: None, include_conv: true, lowrank_layer: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    /// Fraction of nodes selected at each analysed capture point.
    pub keep_fraction: f64,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig { keep_fraction: 0.25 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub work_dir: PathBuf,
    pub report: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Paths { work_dir: PathBuf::from("runs"), report: None }
    }
}

/// Toy-scale training defaults: the small model needs a larger step than the
/// reference fine-tuning rate to converge in a few epochs.
pub fn toy_train_config() -> TrainConfig {
    TrainConfig { optimizer: Optimizer::Adam, learning_rate: 3e-3, epochs: 8, ..TrainConfig::default() }
}

fn default_train() -> TrainConfig {
    toy_train_config()
}

fn default_adapt() -> TrainConfig {
    TrainConfig { learning_rate: 1e-3, epochs: 4, ..TrainConfig::default() }
}

fn default_lambda() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub scenario: Scenario,
    pub data_choice: DataChoice,
    pub method: Method,
    #[serde(default)]
    pub sweep_kind: SweepKind,
    pub sweep: Vec<f64>,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub model: ToyArch,
    /// Initial training (joint, or source-only pretraining).
    #[serde(default = "default_train")]
    pub train: TrainConfig,
    /// Dense-only target training of the pretrain/fine-tune scenario.
    #[serde(default = "default_adapt")]
    pub adapt: TrainConfig,
    /// Optional training after compression.
    #[serde(default)]
    pub fine_tune: Option<TrainConfig>,
    #[serde(default)]
    pub stats: StatsConfig,
    #[serde(default)]
    pub compress: CompressConfig,
    #[serde(default)]
    pub analysis: AnalysisConfig,
    #[serde(default)]
    pub paths: Paths,
}

impl ExperimentConfig {
    /// A small valid configuration for the given method and sweep.
    pub fn new(method: Method, sweep_kind: SweepKind, sweep: Vec<f64>, seeds: Vec<u64>) -> Self {
        ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            scenario: Scenario::DigitsJoint,
            data_choice: DataChoice::TargetOnly,
            method,
            sweep_kind,
            sweep,
            lambda: default_lambda(),
            seeds,
            data: DataConfig::default(),
            model: ToyArch::default(),
            train: default_train(),
            adapt: default_adapt(),
            fine_tune: None,
            stats: StatsConfig::default(),
            compress: CompressConfig::default(),
            analysis: AnalysisConfig::default(),
            paths: Paths::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let value: toml::Value = toml::from_str(text).map_err(|e| Error::config("<document>", e.message()))?;
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(value).map_err(|e| {
            let path = e.path().to_string();
            Error::config(path, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::config(
                "schema_version",
                format!("unsupported version {} (expected {SCHEMA_VERSION})", self.schema_version),
            ));
        }
        if self.sweep.is_empty() {
            return Err(Error::config("sweep", "must not be empty"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "must not be empty"));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config("lambda", "must be finite and >= 0"));
        }
        match (self.method.is_spectral(), self.sweep_kind) {
            (false, SweepKind::Rank) | (true, _) => {}
            (false, kind) => {
                return Err(Error::config(
                    "sweep_kind",
                    format!("method {} needs rank sweeps, got {kind:?}", self.method.name()),
                ))
            }
        }
        for (i, &v) in self.sweep.iter().enumerate() {
            let ok = match self.sweep_kind {
                SweepKind::Alpha | SweepKind::KeepFraction => v > 0.0 && v <= 1.0,
                SweepKind::Rank => v >= 1.0 && v.fract() == 0.0,
            };
            if !ok {
                return Err(Error::config(format!("sweep[{i}]"), format!("invalid value {v} for {:?}", self.sweep_kind)));
            }
        }
        if let Some(a) = self.compress.conv_value {
            if !(a > 0.0 && a <= 1.0) {
                return Err(Error::config("compress.conv_value", "must be in (0, 1]"));
            }
        }
        if self.data.n_per_split < 100 {
            return Err(Error::config("data.n_per_split", "must be at least 100"));
        }
        let s = &self.stats;
        if s.samples < 2 || s.samples > self.data.n_per_split {
            return Err(Error::config("stats.samples", "must be in 2..=data.n_per_split"));
        }
        if !(0.0..=1.0).contains(&s.mix_source_fraction) {
            return Err(Error::config("stats.mix_source_fraction", "must be in [0, 1]"));
        }
        if !(s.plus_source_ratio >= 0.0) || (s.samples as f64 * s.plus_source_ratio) as usize > self.data.n_per_split {
            return Err(Error::config("stats.plus_source_ratio", "needs more source samples than generated"));
        }
        if !(self.analysis.keep_fraction > 0.0 && self.analysis.keep_fraction <= 1.0) {
            return Err(Error::config("analysis.keep_fraction", "must be in (0, 1]"));
        }
        Ok(())
    }
}
