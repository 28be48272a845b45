//! Experiment orchestration: data, training, statistics, compression,
//! optional fine-tuning, evaluation and reporting.

mod analysis;
pub mod config;
pub mod report;

use std::path::{Path, PathBuf};
use std::time::Instant;

use sha2::{Digest, Sha256};

use crate::actstats::{collect_cached, LayerStatistics, StatsCache};
use crate::error::{Error, Result, StageExt};
use crate::lowrank::{dalr_compress, matched_rank, replace_dense, svd_truncate};
use crate::netmodel::io::{load_model, save_model};
use crate::netmodel::{Layer, Network};
use crate::spectral::{apply_plan, find_subset, GreedyConfig, PruningPlan, RegMode};
use crate::trainkit::{evaluate, make_two_domain, train, DomainDataset, ToyArch, TwoDomainData};

pub use analysis::{analyze_nodes, node_specificity_analysis, node_specificity_for, SpecificityLayer, SpecificitySet, SpecificityTable};
pub use config::{
    toy_train_config, DataChoice, ExperimentConfig, Method, Scenario, SweepKind, SCHEMA_VERSION,
};
pub use report::{emit_report, read_json_report, report_to_csv, CompressionReport, ReportFormat, RunRecord};

pub fn prepare_data(cfg: &ExperimentConfig, seed: u64) -> TwoDomainData {
    make_two_domain(seed, cfg.data.n_per_split, &cfg.data.shift)
}

/// Trains the scenario's model for `seed` from scratch.
pub fn train_model(cfg: &ExperimentConfig, seed: u64, data: &TwoDomainData) -> Result<Network> {
    let net = cfg.model.build(seed).stage("train")?;
    let mut first = cfg.train.clone();
    first.seed = seed;
    match cfg.scenario {
        Scenario::DigitsJoint => train(&net, &[&data.source_train, &data.target_train], &first),
        Scenario::PretrainFinetune => {
            let pre = train(&net, &[&data.source_train], &first).stage("train")?;
            let mut adapt = cfg.adapt.clone();
            adapt.seed = seed.wrapping_add(1);
            adapt.freeze.extend(ToyArch::conv_layer_indices(&pre));
            train(&pre, &[&data.target_train], &adapt)
        }
    }
    .stage("train")
}

/// Hash of everything that determines the trained model.
pub fn model_key(cfg: &ExperimentConfig, seed: u64) -> String {
    let mut h = Sha256::new();
    let parts = (&cfg.scenario, &cfg.data, &cfg.model, &cfg.train, &cfg.adapt, seed);
    h.update(serde_json::to_vec(&parts).expect("config serializes"));
    hex::encode(&h.finalize()[..12])
}

pub fn model_dir(cfg: &ExperimentConfig, seed: u64) -> PathBuf {
    cfg.paths.work_dir.join("models").join(format!("seed{seed}-{}", model_key(cfg, seed)))
}

/// Loads the trained model from the work directory, training (and saving)
/// it first if absent.
pub fn load_or_train(cfg: &ExperimentConfig, seed: u64, data: &TwoDomainData) -> Result<Network> {
    let dir = model_dir(cfg, seed);
    if dir.join(crate::netmodel::io::MODEL_MANIFEST).exists() {
        return load_model(&dir).stage("train");
    }
    let net = train_model(cfg, seed, data)?;
    save_model(&net, &dir).stage("train")?;
    // Reload so the in-memory model matches the stored precision.
    load_model(&dir).stage("train")
}

/// Samples (dataset, count) estimating the selection statistics.
pub fn stats_sources<'a>(cfg: &ExperimentConfig, data: &'a TwoDomainData, choice: DataChoice) -> Vec<(&'a DomainDataset, usize)> {
    let n = cfg.stats.samples;
    match choice {
        DataChoice::TargetOnly => vec![(&data.target_train, n)],
        DataChoice::TargetSourceMix => {
            let src = (n as f64 * cfg.stats.mix_source_fraction).round() as usize;
            vec![(&data.target_train, n - src), (&data.source_train, src)]
        }
        DataChoice::TargetPlusSource => {
            let src = (n as f64 * cfg.stats.plus_source_ratio).round() as usize;
            vec![(&data.target_train, n), (&data.source_train, src)]
        }
    }
}

fn stats_cache(cfg: &ExperimentConfig) -> Option<StatsCache> {
    cfg.stats.cache.then(|| StatsCache::new(cfg.paths.work_dir.join("stats")))
}

fn layer_stats(
    net: &Network,
    layer: usize,
    sources: &[(&DomainDataset, usize)],
    cache: Option<&StatsCache>,
    tag: &str,
) -> Result<LayerStatistics> {
    collect_cached(net, layer, sources, cache)?.finalize(tag)
}

/// A compressed network and the plans that produced it.
#[derive(Clone, Debug)]
pub struct CompressOutcome {
    pub net: Network,
    pub plans: Vec<PruningPlan>,
}

impl CompressOutcome {
    pub fn layer_ratios(&self) -> Vec<f64> {
        self.plans.iter().map(|p| p.achieved_ratio).collect()
    }
}

/// Index of the dense layer factorized by low-rank methods (and pruned by
/// spectral methods under rank sweeps).
pub fn lowrank_layer(cfg: &ExperimentConfig, net: &Network) -> Result<usize> {
    let idx = match cfg.compress.lowrank_layer {
        Some(i) => i,
        None => net
            .capture_points()
            .last()
            .map(|p| p.producer)
            .ok_or_else(|| Error::Topology("network has no capture points".into()))?,
    };
    match net.layers().get(idx) {
        Some(Layer::Dense(_)) => Ok(idx),
        _ => Err(Error::config("compress.lowrank_layer", format!("layer {idx} is not dense"))),
    }
}

fn spectral_config(
    cfg: &ExperimentConfig,
    method: Method,
    value: f64,
    width: usize,
    conv: bool,
    matched_keep: Option<usize>,
) -> GreedyConfig {
    let reg_mode = match method {
        Method::SpectralRegNode => RegMode::Node,
        Method::SpectralRegSubset => RegMode::Subset,
        _ => RegMode::None,
    };
    let value = if conv { cfg.compress.conv_value.unwrap_or(value) } else { value };
    let (alpha, max_cardinality) = match cfg.sweep_kind {
        SweepKind::Alpha => (value, None),
        SweepKind::KeepFraction => (1.0, Some(((value * width as f64).ceil() as usize).clamp(1, width))),
        SweepKind::Rank => (1.0, matched_keep),
    };
    GreedyConfig {
        alpha,
        lambda: cfg.lambda,
        reg_mode,
        max_cardinality,
        ridge: cfg.compress.ridge,
        moment_kind: cfg.stats.moment_kind,
        scaling_floor: cfg.stats.scaling_floor,
    }
}

/// Compresses `net` with `method` at one sweep point.
pub fn compress_model(
    cfg: &ExperimentConfig,
    net: &Network,
    data: &TwoDomainData,
    method: Method,
    value: f64,
) -> Result<CompressOutcome> {
    let cache = stats_cache(cfg);
    let cache = cache.as_ref();
    let sources = stats_sources(cfg, data, cfg.data_choice);
    if !method.is_spectral() {
        let idx = lowrank_layer(cfg, net)?;
        let k = value as usize;
        let Layer::Dense(d) = net.layer(idx) else { unreachable!("checked dense") };
        let bias = d.bias_or_zero();
        let factored = if method == Method::Svd {
            svd_truncate(&d.weight, &bias, k)
        } else {
            let mut acc = Vec::new();
            for &(ds, limit) in &sources {
                let idx_range: Vec<usize> = (0..limit.min(ds.len())).collect();
                for chunk in idx_range.chunks(256) {
                    acc.push(net.capture(&ds.features.select_items(chunk), &[idx - 1])?.remove(0).samples);
                }
            }
            let rows: usize = acc.iter().map(|m| m.rows()).sum();
            let mut data = Vec::with_capacity(rows * d.in_features());
            for m in &acc {
                data.extend_from_slice(m.as_slice());
            }
            let x = crate::linalg::Matrix::new(rows, d.in_features(), data).transpose();
            dalr_compress(&d.weight, &bias, &x, k)
        }
        .stage("compress")?;
        let net = replace_dense(net, idx, factored).stage("compress")?;
        return Ok(CompressOutcome { net, plans: Vec::new() });
    }

    let points = net.capture_points();
    let rank_layer = match cfg.sweep_kind {
        SweepKind::Rank => Some(lowrank_layer(cfg, net)?),
        _ => None,
    };
    let mut current = net.clone();
    let mut plans = Vec::new();
    for cp in points {
        let conv = matches!(net.layer(cp.producer), Layer::Conv2d(_));
        if let Some(r) = rank_layer {
            if cp.producer != r {
                continue;
            }
        } else if conv && !cfg.compress.include_conv {
            continue;
        }
        let matched_keep = rank_layer.map(|_| {
            let (n, p) = match (net.layer(cp.producer), net.layer(cp.consumer)) {
                (Layer::Dense(d), Layer::Dense(next)) => (d.in_features(), next.out_features()),
                _ => (cp.width, cp.width),
            };
            matched_rank(value as usize, cp.width, n, p).min(cp.width)
        });
        let gcfg = spectral_config(cfg, method, value, cp.width, conv, matched_keep);
        let sigma = layer_stats(&current, cp.tap, &sources, cache, cfg.data_choice.name()).stage("stats")?;
        let domains = if gcfg.reg_mode != RegMode::None {
            let n = cfg.stats.samples;
            let src = layer_stats(&current, cp.tap, &[(&data.source_train, n)], cache, "source").stage("stats")?;
            let tgt = layer_stats(&current, cp.tap, &[(&data.target_train, n)], cache, "target").stage("stats")?;
            Some((src, tgt))
        } else {
            None
        };
        let plan = find_subset(cp.tap, &sigma.sigma, domains.as_ref().map(|(s, t)| (s, t)), &gcfg).stage("compress")?;
        current = apply_plan(&current, &plan).stage("compress")?;
        plans.push(plan);
    }
    Ok(CompressOutcome { net: current, plans })
}

/// Optional post-compression training on target data.
pub fn fine_tune(cfg: &ExperimentConfig, net: &Network, data: &TwoDomainData, method: Method, seed: u64) -> Result<Network> {
    let Some(ft) = &cfg.fine_tune else {
        return Ok(net.clone());
    };
    let mut ft = ft.clone();
    ft.seed = seed.wrapping_add(2);
    if cfg.scenario == Scenario::PretrainFinetune {
        ft.freeze.extend(ToyArch::conv_layer_indices(net));
    }
    let start = if method.is_spectral() { net.without_dropout() } else { net.clone() };
    train(&start, &[&data.target_train], &ft).stage("finetune")
}

/// Compresses, optionally fine-tunes and evaluates one sweep point.
pub fn run_point(
    cfg: &ExperimentConfig,
    seed: u64,
    data: &TwoDomainData,
    net: &Network,
    method: Method,
    value: f64,
) -> Result<RunRecord> {
    let start = Instant::now();
    let outcome = compress_model(cfg, net, data, method, value)?;
    let tuned = fine_tune(cfg, &outcome.net, data, method, seed)?;
    let acc_source = evaluate(&tuned, &data.source_test).stage("eval")?;
    let acc_target = evaluate(&tuned, &data.target_test).stage("eval")?;
    let (before, after) = (net.count_params(), tuned.count_params());
    let ratios = outcome.layer_ratios();
    Ok(RunRecord {
        seed,
        method,
        sweep_value: value,
        lambda: cfg.lambda,
        data_choice: cfg.data_choice,
        params_before: before,
        params_after: after,
        flops_before: net.count_flops(),
        flops_after: tuned.count_flops(),
        compression_rate: 1.0 - after as f64 / before as f64,
        ratio_achieved: (!ratios.is_empty()).then(|| ratios.iter().sum::<f64>() / ratios.len() as f64),
        acc_source,
        acc_target,
        seconds: start.elapsed().as_secs_f64(),
        layer_ratios: ratios,
    })
}

/// All sweep points of one seed for an already trained model.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64, data: &TwoDomainData, net: &Network) -> Result<CompressionReport> {
    let mut report = CompressionReport::default();
    for &value in &cfg.sweep {
        report.records.push(run_point(cfg, seed, data, net, cfg.method, value)?);
    }
    Ok(report)
}

/// Full pipeline over every seed and sweep point.
pub fn run(cfg: &ExperimentConfig) -> Result<CompressionReport> {
    cfg.validate()?;
    let mut report = CompressionReport::default();
    for &seed in &cfg.seeds {
        let data = prepare_data(cfg, seed);
        let net = load_or_train(cfg, seed, &data)?;
        report.extend(run_seed(cfg, seed, &data, &net)?);
    }
    report.sort();
    Ok(report)
}

/// Writes every (domain, split) dataset of `seed` under `dir`.
pub fn write_datasets(data: &TwoDomainData, dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for (name, ds) in [
        ("source_train", &data.source_train),
        ("source_test", &data.source_test),
        ("target_train", &data.target_train),
        ("target_test", &data.target_test),
    ] {
        let d = dir.join(name);
        crate::netmodel::io::save_dataset(ds, &d)?;
        out.push(d);
    }
    Ok(out)
}
