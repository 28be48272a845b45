//! Acceptance suite. Runs every criterion at its stated tolerance and prints
//! one PASS/FAIL line per criterion plus a summary.
//!
//! `ACCEPTANCE_ONLY=1,4,12` restricts the run to the listed criteria.
//! `ACCEPTANCE_STRICT=1` makes the process exit non-zero when any criterion
//! fails; by default failures are reported but do not fail `cargo test`.

mod common;

use std::path::PathBuf;
use std::time::Instant;

use common::*;
use rand::seq::SliceRandom;
use rand::Rng;
use specprune::actstats::{batch_of, LayerStatistics, MomentAccumulator};
use specprune::linalg::Matrix;
use specprune::lowrank::{dalr_compress, dalr_feasible, factored_shapes, matched_rank, pruned_shapes, svd_truncate};
use specprune::netmodel::{count_params_shapes, Conv2d, Dense, Layer, LayerShape, Network};
use specprune::pipeline::{
    compress_model, emit_report, node_specificity_for, prepare_data, run_seed, train_model, CompressionReport, DataChoice,
    ExperimentConfig, Method, ReportFormat, RunRecord, SpecificityTable, SweepKind,
};
use specprune::spectral::{apply_plan, find_subset, find_subset_reference, recovery_matrix, retention_ratio, GreedyConfig, RegMode};
use specprune::trainkit::{grad_check, mlp, ToyArch, TwoDomainData};
use specprune::Tensor;

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Outcome { pass, detail: detail.into() }
    }
}

fn repo_path(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

fn out_dir() -> PathBuf {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    std::fs::create_dir_all(&dir).expect("create acceptance output dir");
    dir
}

fn stats_of(samples: Matrix, tag: &str) -> LayerStatistics {
    let mut acc = MomentAccumulator::new(0, samples.cols());
    acc.accumulate(&batch_of(0, samples)).unwrap();
    acc.finalize(tag).unwrap()
}

fn sigma_of(net: &Network, tap: usize, x: &Tensor) -> Matrix {
    let batch = net.capture(x, &[tap]).unwrap().remove(0);
    let mut acc = MomentAccumulator::new(tap, batch.samples.cols());
    acc.accumulate(&batch).unwrap();
    acc.finalize("").unwrap().sigma
}

// ---------------------------------------------------------------------------

fn recovery_optimality() -> Outcome {
    let start = Instant::now();
    let (m, n) = (12, 500);
    let mut worst_rel: f64 = 0.0;
    let mut beaten = 0;
    for inst in 0..20u64 {
        let mut rng = rng(100 + inst);
        let phi = correlated_samples(&mut rng, n, m);
        let sigma = second_moment(&phi);
        let size = 1 + inst as usize % 10;
        let mut idx: Vec<usize> = (0..m).collect();
        idx.shuffle(&mut rng);
        let j: Vec<usize> = idx[..size].to_vec();

        let err = |a: &Matrix| -> f64 {
            let mut total = 0.0;
            for r in 0..n {
                for f in 0..m {
                    let pred: f64 = j.iter().enumerate().map(|(c, &jj)| a[(f, c)] * phi[(r, jj)]).sum();
                    total += (phi[(r, f)] - pred).powi(2);
                }
            }
            total / n as f64
        };
        let a_hat = recovery_matrix(&sigma, &j, 0.0).unwrap();
        // Normal equations Σ_JJ Aᵀ = Σ_JF, solved independently.
        let sjj = Matrix::from_fn(size, size, |a, b| sigma[(j[a], j[b])]);
        let sjf = Matrix::from_fn(size, m, |a, b| sigma[(j[a], b)]);
        let oracle = transpose(&gauss_solve(&sjj, &sjf));
        let (e_hat, e_ls) = (err(&a_hat), err(&oracle));
        worst_rel = worst_rel.max((e_hat - e_ls).abs() / e_ls.max(1e-300));
        let mut all_worse = true;
        for c in 0..1000 {
            let scale = [1e-3, 1e-2, 0.1, 1.0][c % 4];
            let cand = Matrix::from_fn(m, size, |a, b| oracle[(a, b)] + scale * rng.random_range(-1.0..1.0));
            if err(&cand) < e_hat {
                all_worse = false;
            }
        }
        if all_worse {
            beaten += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Outcome::new(
        worst_rel <= 1e-8 && beaten == 20 && secs < 5.0,
        format!("max rel. gap to least squares {worst_rel:.2e}; beats all random candidates on {beaten}/20; {secs:.2}s"),
    )
}

fn retention_laws() -> Outcome {
    let start = Instant::now();
    let m = 8;
    let mut worst = [0.0f64; 4]; // empty, full, monotone, scaling
    let mut oracle_gap: f64 = 0.0;
    let mut checked = 0usize;
    let all: Vec<Vec<usize>> = (0..=4).flat_map(|k| subsets(m, k)).collect();
    for inst in 0..50u64 {
        let mut rng = rng(200 + inst);
        let sigma = random_spd(&mut rng, m, 0.05);
        worst[0] = worst[0].max(retention_ratio(&sigma, &[], 0.0).unwrap().abs());
        let full: Vec<usize> = (0..m).collect();
        worst[1] = worst[1].max((retention_ratio(&sigma, &full, 0.0).unwrap() - 1.0).abs());
        for j in &all {
            let r = retention_ratio(&sigma, j, 0.0).unwrap();
            oracle_gap = oracle_gap.max((r - ratio_direct(&sigma, j)).abs());
            for c in [0.1, 1.0, 10.0] {
                let rc = retention_ratio(&sigma.scale(c * c), j, 0.0).unwrap();
                worst[3] = worst[3].max((rc - r).abs());
            }
            if j.len() < 4 {
                for add in (0..m).filter(|x| !j.contains(x)) {
                    let mut bigger = j.clone();
                    bigger.push(add);
                    let rb = retention_ratio(&sigma, &bigger, 0.0).unwrap();
                    worst[2] = worst[2].max(r - rb);
                }
            }
            checked += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = worst[0] == 0.0 && worst[1] <= 1e-10 && worst[2] <= 1e-12 && worst[3] <= 1e-10 && oracle_gap <= 1e-10 && secs < 10.0;
    Outcome::new(
        pass,
        format!(
            "{checked} subsets; |r(empty)| {:.1e}, |r(F)-1| {:.1e}, worst decrease {:.1e}, scaling drift {:.1e}, direct-formula gap {oracle_gap:.1e}; {secs:.2}s",
            worst[0], worst[1], worst[2], worst[3]
        ),
    )
}

fn greedy_vs_exhaustive() -> Outcome {
    let m = 10;
    let mut gaps = Vec::new();
    let mut ok = true;
    let mut plateaus = 0;
    for seed in 0..20u64 {
        let mut rng = rng(300 + seed);
        let sigma = random_spd(&mut rng, m, 0.05);
        let cfg = GreedyConfig { alpha: 1.0, max_cardinality: Some(3), ridge: Some(0.0), ..GreedyConfig::default() };
        let plan = find_subset(0, &sigma, None, &cfg).unwrap();
        let best = subsets(m, 3).iter().map(|j| ratio_direct(&sigma, j)).fold(f64::MIN, f64::max);
        ok &= plan.selected.len() == 3 && plan.achieved_ratio <= best + 1e-9;
        gaps.push(best - plan.achieved_ratio);
        let full = find_subset(0, &sigma, None, &GreedyConfig { alpha: 1.0, ..GreedyConfig::default() }).unwrap();
        plateaus += full.plateau_flag as usize + plan.plateau_flag as usize;
    }
    let max_gap = gaps.iter().cloned().fold(0.0, f64::max);
    Outcome::new(
        ok && plateaus == 0,
        format!(
            "greedy <= exhaustive + 1e-9 on all 20; optimality gap mean {:.2e}, max {max_gap:.2e}, exact on {}/20; plateau flags {plateaus}",
            mean(&gaps),
            gaps.iter().filter(|g| g.abs() <= 1e-12).count()
        ),
    )
}

fn duplicated_dense_net(seed: u64) -> Network {
    let mut rng = rng(seed);
    let base = gaussian(&mut rng, 4, 5);
    let w = Matrix::from_fn(8, 5, |r, c| base[(r / 2, c)]);
    let b0 = vec_of(&mut rng, 4);
    let b: Vec<f64> = (0..8).map(|r| 0.3 * b0[r / 2]).collect();
    Network::new(
        vec![5],
        vec![
            Layer::Dense(Dense::new(w, Some(b))),
            Layer::Relu,
            Layer::Dense(Dense::new(gaussian(&mut rng, 3, 8), Some(vec_of(&mut rng, 3)))),
        ],
    )
    .unwrap()
}

fn duplicated_conv_net(seed: u64) -> Network {
    let mut rng = rng(seed);
    let base = vec_of(&mut rng, 3 * 9);
    let w: Vec<f64> = (0..6).flat_map(|o| base[(o / 2) * 9..(o / 2) * 9 + 9].to_vec()).collect();
    let conv = |w: Vec<f64>, o: usize, i: usize, bias: Vec<f64>| {
        Layer::Conv2d(Conv2d { weight: Tensor::new(vec![o, i, 3, 3], w).unwrap(), bias, stride: 1, padding: 1 })
    };
    let b0 = vec_of(&mut rng, 3);
    Network::new(
        vec![1, 6, 6],
        vec![
            conv(w, 6, 1, (0..6).map(|o| 0.2 * b0[o / 2]).collect()),
            Layer::Relu,
            conv(vec_of(&mut rng, 2 * 6 * 9), 2, 6, vec_of(&mut rng, 2)),
            Layer::Relu,
            Layer::Flatten,
            Layer::Dense(Dense::new(gaussian(&mut rng, 4, 72), Some(vec![0.0; 4]))),
        ],
    )
    .unwrap()
}

fn max_logit_drift(a: &Network, b: &Network, x: &Tensor) -> f64 {
    let (la, lb) = (a.predict(x).unwrap(), b.predict(x).unwrap());
    la.data().iter().zip(lb.data()).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max)
}

fn lossless_pruning() -> Outcome {
    let mut rng = rng(400);
    let cfg = GreedyConfig { alpha: 0.999, ..GreedyConfig::default() };
    let dense = duplicated_dense_net(401);
    let x = Tensor::new(vec![400, 5], vec_of(&mut rng, 2000)).unwrap();
    let plan_d = find_subset(1, &sigma_of(&dense, 1, &x), None, &cfg).unwrap();
    let pruned_d = apply_plan(&dense, &plan_d).unwrap();
    let x_eval = Tensor::new(vec![200, 5], vec_of(&mut rng, 1000)).unwrap();
    let drift_d = max_logit_drift(&dense, &pruned_d, &x_eval);

    let conv = duplicated_conv_net(402);
    let xc = Tensor::new(vec![100, 1, 6, 6], vec_of(&mut rng, 3600)).unwrap();
    let plan_c = find_subset(1, &sigma_of(&conv, 1, &xc), None, &cfg).unwrap();
    let pruned_c = apply_plan(&conv, &plan_c).unwrap();
    let xc_eval = Tensor::new(vec![50, 1, 6, 6], vec_of(&mut rng, 1800)).unwrap();
    let drift_c = max_logit_drift(&conv, &pruned_c, &xc_eval);
    Outcome::new(
        plan_d.selected.len() == 4 && plan_c.selected.len() == 3 && drift_d < 1e-4 && drift_c < 1e-4,
        format!(
            "dense 8 -> {} nodes, drift {drift_d:.1e}; conv 6 -> {} channels, drift {drift_c:.1e}",
            plan_d.selected.len(),
            plan_c.selected.len()
        ),
    )
}

fn lambda_zero_equivalence() -> Outcome {
    let m = 12;
    let mut same = 0;
    for inst in 0..10u64 {
        let mut rng = rng(500 + inst);
        let src = stats_of(correlated_samples(&mut rng, 300, m), "source");
        let shifted = correlated_samples(&mut rng, 300, m);
        let tgt = stats_of(Matrix::from_fn(300, m, |r, c| shifted[(r, c)] + 0.1 * c as f64), "target");
        let base = GreedyConfig { alpha: 0.99, lambda: 0.0, ..GreedyConfig::default() };
        let plain = find_subset(0, &tgt.sigma, None, &base).unwrap().selected;
        let mut all = true;
        for mode in [RegMode::Node, RegMode::Subset] {
            let cfg = GreedyConfig { reg_mode: mode, ..base.clone() };
            all &= find_subset(0, &tgt.sigma, Some((&src, &tgt)), &cfg).unwrap().selected == plain;
        }
        same += all as usize;
    }
    Outcome::new(same == 10, format!("identical index sequences on {same}/10 instances (node and subset forms)"))
}

fn dalr_optimality() -> Outcome {
    let (m, n, samples, k) = (10, 14, 60, 4);
    let mut worst_rel: f64 = 0.0;
    let mut never_worse = true;
    let mut mean_adv = Vec::new();
    for inst in 0..20u64 {
        let mut rng = rng(600 + inst);
        let w = gaussian(&mut rng, m, n);
        let x = gaussian(&mut rng, n, samples);
        let b = vec_of(&mut rng, m);
        let objective = |f: &specprune::lowrank::FactoredDense| frob(&matmul(&w.sub(&f.product()), &x));
        let d = objective(&dalr_compress(&w, &b, &x, k).unwrap());
        let s = objective(&svd_truncate(&w, &b, k).unwrap());
        let sv = singular_values(&matmul(&w, &x));
        let bound = sv[k..].iter().map(|v| v * v).sum::<f64>().sqrt();
        worst_rel = worst_rel.max((d - bound).abs() / bound);
        never_worse &= d <= s * (1.0 + 1e-12);
        mean_adv.push(s / d);
    }
    Outcome::new(
        worst_rel <= 1e-8 && never_worse,
        format!(
            "max rel. deviation from tail bound {worst_rel:.1e}; data objective never above plain SVD (mean SVD/DALR ratio {:.3})",
            mean(&mean_adv)
        ),
    )
}

/// VGG19 layer shapes with a `classes`-way output layer; returns the shapes
/// and the indices of the last two hidden dense layers.
fn vgg19_shapes(classes: usize) -> (Vec<LayerShape>, usize, usize) {
    let mut shapes = Vec::new();
    let mut c = 3;
    for (out, reps) in [(64, 2), (128, 2), (256, 4), (512, 4), (512, 4)] {
        for _ in 0..reps {
            shapes.push(LayerShape::Conv2d { in_c: c, out_c: out, k_h: 3, k_w: 3 });
            shapes.push(LayerShape::Parameterless);
            c = out;
        }
        shapes.push(LayerShape::Parameterless);
    }
    shapes.push(LayerShape::Parameterless);
    shapes.push(LayerShape::Dense { input: 512 * 7 * 7, output: 4096, bias: true });
    shapes.push(LayerShape::Parameterless);
    let fc7 = shapes.len();
    shapes.push(LayerShape::Dense { input: 4096, output: 4096, bias: true });
    shapes.push(LayerShape::Parameterless);
    let fc8 = shapes.len();
    shapes.push(LayerShape::Dense { input: 4096, output: classes, bias: true });
    (shapes, fc7, fc8)
}

fn budget_matching() -> Outcome {
    let k108 = matched_rank(4, 4096, 4096, 102);
    let (shapes, fc7, fc8) = vgg19_shapes(102);
    let mut worst: f64 = 0.0;
    let mut rows = Vec::new();
    for k in [4, 8, 16, 32, 64, 128] {
        let dalr = count_params_shapes(&factored_shapes(&shapes, fc7, k).unwrap());
        let keep = matched_rank(k, 4096, 4096, 102);
        let spectral = count_params_shapes(&pruned_shapes(&shapes, fc7, fc8, keep).unwrap());
        let rel = (spectral as f64 - dalr as f64).abs() / dalr as f64;
        worst = worst.max(rel);
        rows.push(format!("k={k}->{keep}: {:.4}%", 100.0 * rel));
    }
    let frac: f64 = 100.0 * (4.0 * 8192.0) / (4096.0 * 4096.0);
    let frac_rounded = (frac * 100.0).round() / 100.0;
    let pass = k108 == 108 && worst < 1e-3 && dalr_feasible(4, 4096, 4096) && frac_rounded == 0.20;
    Outcome::new(
        pass,
        format!(
            "matched_rank(4,4096,4096,102)={k108}; whole-network count gaps [{}]; k=4 factor weights {frac:.3}% of the layer -> {frac_rounded:.2}%",
            rows.join(", ")
        ),
    )
}

fn gradient_checks() -> Outcome {
    let mut rng = rng(1100);
    let arch = ToyArch { conv_channels: vec![3, 4], pooled_convs: 1, dense_widths: vec![12], dropout: 0.0, ..ToyArch::default() };
    let cnn = arch.build(1101).unwrap();
    let params = cnn.count_params();
    let x = Tensor::new(vec![6, 1, 8, 8], vec_of(&mut rng, 6 * 64)).unwrap();
    let labels: Vec<u16> = (0..6).map(|i| (i % 10) as u16).collect();
    let cnn_err = grad_check(&cnn, &x, &labels, 1e-5).unwrap();
    let mut dense_err: f64 = 0.0;
    for seed in 0..3 {
        let net = mlp(&[6, 10, 8, 4], 1110 + seed).unwrap();
        let x = Tensor::new(vec![5, 6], vec_of(&mut rng, 30)).unwrap();
        dense_err = dense_err.max(grad_check(&net, &x, &[0, 1, 2, 3, 1], 1e-3).unwrap());
    }
    Outcome::new(
        cnn_err < 1e-3 && dense_err < 1e-4 && params < 5000,
        format!("toy CNN ({params} params) max rel. error {cnn_err:.1e}; dense nets {dense_err:.1e}"),
    )
}

// ---------------------------------------------------------------------------
// Seeded toy experiments sharing one set of trained models.

struct Digits {
    cfg: ExperimentConfig,
    data: Vec<TwoDomainData>,
    nets: Vec<Network>,
    train_secs: f64,
    target_only: Option<CompressionReport>,
}

impl Digits {
    fn new() -> Self {
        let cfg = ExperimentConfig::load(&repo_path("configs/digits_data_choice.toml")).expect("digits config");
        let start = Instant::now();
        let mut data = Vec::new();
        let mut nets = Vec::new();
        for &seed in &cfg.seeds {
            let d = prepare_data(&cfg, seed);
            // Same precision as a model stored on disk.
            nets.push(train_model(&cfg, seed, &d).expect("training").round_to_f32());
            data.push(d);
        }
        Digits { cfg, data, nets, train_secs: start.elapsed().as_secs_f64(), target_only: None }
    }

    fn sweep(&self, cfg: &ExperimentConfig) -> CompressionReport {
        let mut report = CompressionReport::default();
        for (i, &seed) in cfg.seeds.iter().enumerate() {
            report.extend(run_seed(cfg, seed, &self.data[i], &self.nets[i]).expect("sweep"));
        }
        report
    }
}

fn data_choice_trend(d: &mut Digits) -> Outcome {
    let start = Instant::now();
    let mut reports = Vec::new();
    for choice in [DataChoice::TargetOnly, DataChoice::TargetSourceMix, DataChoice::TargetPlusSource] {
        let mut cfg = d.cfg.clone();
        cfg.data_choice = choice;
        reports.push((choice, d.sweep(&cfg)));
    }
    let secs = d.train_secs + start.elapsed().as_secs_f64();
    let mut all = CompressionReport::default();
    for (_, r) in &reports {
        all.extend(r.clone());
    }
    all.sort();
    emit_report(&all, &out_dir().join("data_choice.csv"), ReportFormat::Csv).unwrap();

    let mut pass = true;
    let mut lines = Vec::new();
    let mut checked = 0;
    let sweep = &d.cfg.sweep;
    for (pos, v) in sweep.iter().enumerate() {
        let mut accs = Vec::new();
        let mut rates = Vec::new();
        for (choice, r) in &reports {
            let recs: Vec<&RunRecord> = r.records.iter().filter(|x| x.sweep_value == *v).collect();
            let a: Vec<f64> = recs.iter().map(|x| x.acc_target).collect();
            rates.extend(recs.iter().map(|x| x.compression_rate));
            accs.push((choice.name(), mean(&a), std_pop(&a)));
        }
        let matched = rates.iter().all(|&x| x == rates[0]);
        pass &= matched;
        let rate = rates[0];
        let upper = pos >= sweep.len() / 2;
        let cell = accs.iter().map(|(n, m, s)| format!("{n} {m:.4}±{s:.4}")).collect::<Vec<_>>().join(", ");
        let mut mark = "";
        if rate >= 0.9 {
            checked += 1;
            let ok = accs[1..].iter().all(|(_, m, _)| accs[0].1 >= *m);
            pass &= ok;
            mark = if ok { " [checked: ok]" } else { " [checked: FAILS]" };
        } else if upper {
            // The upper half of the sweep must lie at >= 90% compression.
            pass = false;
            mark = " [upper half below 90%]";
        }
        lines.push(format!("    keep {v}: rate {rate:.4}{} -> {cell}{mark}", if matched { "" } else { " (rates differ)" }));
    }
    pass &= checked >= sweep.len() / 2 && secs < 600.0;
    for l in &lines {
        println!("{l}");
    }
    d.target_only = Some(reports.swap_remove(0).1);
    let verdict = if pass { "at all" } else { "not at every one of the" };
    Outcome::new(
        pass,
        format!("target_only >= both mixtures {verdict} {checked} points with rate >= 90%; 10 seeds; {secs:.0}s incl. training"),
    )
}

fn regularization_trend(d: &Digits) -> Outcome {
    let cfg_reg = ExperimentConfig::load(&repo_path("configs/digits_regularization.toml")).expect("regularization config");
    let baseline = d.target_only.as_ref().expect("data-choice sweep ran first");
    let mut top: Vec<f64> = cfg_reg.sweep.clone();
    let rate_of = |v: f64| baseline.records.iter().find(|r| r.sweep_value == v).map(|r| r.compression_rate).unwrap();
    top.sort_by(|a, b| rate_of(*b).total_cmp(&rate_of(*a)));
    top.truncate(2);
    let mut cfg = cfg_reg.clone();
    cfg.sweep = top.clone();
    let reg = d.sweep(&cfg);
    let mut all = reg.clone();
    all.extend(CompressionReport { records: baseline.records.iter().filter(|r| top.contains(&r.sweep_value)).cloned().collect() });
    all.sort();
    emit_report(&all, &out_dir().join("regularization.csv"), ReportFormat::Csv).unwrap();

    let mut pass = true;
    let mut parts = Vec::new();
    for v in &top {
        let base: Vec<&RunRecord> = baseline.records.iter().filter(|r| r.sweep_value == *v).collect();
        let regd: Vec<&RunRecord> = reg.records.iter().filter(|r| r.sweep_value == *v).collect();
        println!("    keep {v} (rate {:.4}) per-seed target accuracy, spectral vs spectral_reg_node:", base[0].compression_rate);
        for (b, r) in base.iter().zip(&regd) {
            assert_eq!(b.seed, r.seed);
            println!("      seed {}: {:.4} vs {:.4}", b.seed, b.acc_target, r.acc_target);
        }
        let mb = mean(&base.iter().map(|r| r.acc_target).collect::<Vec<_>>());
        let mr = mean(&regd.iter().map(|r| r.acc_target).collect::<Vec<_>>());
        pass &= mr >= mb;
        parts.push(format!("rate {:.4}: {mr:.4} vs {mb:.4}", base[0].compression_rate));
    }
    Outcome::new(pass, format!("mean target accuracy reg_node vs spectral at the two highest rates: {}", parts.join("; ")))
}

fn node_specificity(d: &Digits) -> Outcome {
    let cfg = ExperimentConfig::load(&repo_path("configs/node_specificity.toml")).expect("analysis config");
    let mut tables: Vec<SpecificityTable> = Vec::new();
    for (i, &seed) in cfg.seeds.iter().enumerate() {
        tables.push(node_specificity_for(&cfg, seed, &d.nets[i], &d.data[i]).expect("analysis"));
    }
    std::fs::write(out_dir().join("node_specificity.json"), serde_json::to_string_pretty(&tables).unwrap()).unwrap();
    let fmt = |s: &specprune::pipeline::SpecificitySet| match (s.rate_source, s.rate_target) {
        (Some(a), Some(b)) => format!("{a:.3}/{b:.3} (n={})", s.nodes.len()),
        _ => "empty".to_string(),
    };
    let mut holds = 0;
    let mut shrink = Vec::new();
    for t in &tables {
        let ok = t.first.sign_pattern_holds(0.05);
        holds += ok as usize;
        let (g1, g2) = (t.first.specific_gap(), t.last.specific_gap());
        shrink.push(if g1 > 0.0 { 1.0 - g2 / g1 } else { 0.0 });
        println!(
            "    seed {}: first layer src-specific {}, tgt-specific {}, control {} -> {}; gap {g1:.3} -> last layer {g2:.3}",
            t.seed,
            fmt(&t.first.source_specific),
            fmt(&t.first.target_specific),
            fmt(&t.first.control),
            if ok { "pattern" } else { "no pattern" }
        );
    }
    let med = median(&shrink);
    Outcome::new(
        holds >= 8 && med >= 0.5,
        format!("sign pattern in {holds}/10 seeds; median last-layer gap reduction {:.0}%", 100.0 * med),
    )
}

fn performance(d: &Digits) -> Outcome {
    let mut cfg = ExperimentConfig::new(Method::Spectral, SweepKind::Alpha, vec![0.96], vec![d.cfg.seeds[0]]);
    cfg.model = d.cfg.model.clone();
    cfg.data = d.cfg.data.clone();
    let net = &d.nets[0];
    let nodes: usize = net.capture_points().iter().map(|c| c.width).sum();
    let start = Instant::now();
    let out = compress_model(&cfg, net, &d.data[0], Method::Spectral, 0.96).unwrap();
    let secs = start.elapsed().as_secs_f64();

    // Incremental vs reference greedy, per step.
    let mut worst: f64 = 0.0;
    let mut same_order = true;
    let mut check = |sigma: &Matrix, domains: Option<(&LayerStatistics, &LayerStatistics)>, mode: RegMode| {
        let g = GreedyConfig { alpha: 1.0, reg_mode: mode, ..GreedyConfig::default() };
        let a = find_subset(0, sigma, domains, &g).unwrap();
        let b = find_subset_reference(0, sigma, domains, &g).unwrap();
        same_order &= a.selected == b.selected;
        for (x, y) in a.ratio_trace.iter().zip(&b.ratio_trace) {
            worst = worst.max((x - y).abs());
        }
    };
    for inst in 0..3u64 {
        let mut rng = rng(1200 + inst);
        let s = stats_of(correlated_samples(&mut rng, 400, 64), "source");
        let t = stats_of(correlated_samples(&mut rng, 400, 64), "target");
        check(&t.sigma, None, RegMode::None);
        check(&t.sigma, Some((&s, &t)), RegMode::Node);
    }
    let tap = net.capture_points()[1].tap;
    let n = 500;
    let stats = |ds| specprune::actstats::collect_moments(net, &[tap], &[(ds, n)]).unwrap().remove(0).finalize("").unwrap();
    let (s, t) = (stats(&d.data[0].source_train), stats(&d.data[0].target_train));
    for mode in [RegMode::None, RegMode::Node, RegMode::Subset] {
        check(&t.sigma, Some((&s, &t)), mode);
    }
    Outcome::new(
        secs < 60.0 && nodes <= 2048 && worst <= 1e-8 && same_order,
        format!(
            "alpha 0.96 on the {nodes}-node toy network in {secs:.2}s (rate {:.3}); incremental vs reference max step gap {worst:.1e}, same order: {same_order}",
            1.0 - out.net.count_params() as f64 / net.count_params() as f64
        ),
    )
}

fn main() {
    let only: Option<Vec<u32>> =
        std::env::var("ACCEPTANCE_ONLY").ok().map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |id: u32| only.as_ref().is_none_or(|o| o.contains(&id));
    let names: [(u32, &str); 12] = [
        (1, "recovery-matrix optimality"),
        (2, "retention-ratio laws"),
        (3, "greedy vs exhaustive"),
        (4, "lossless pruning of duplicated nodes"),
        (5, "lambda = 0 equivalence"),
        (6, "low-rank data objective optimality"),
        (7, "budget matching"),
        (8, "data-choice trend"),
        (9, "regularization trend"),
        (10, "node-specificity pattern"),
        (11, "gradient checks"),
        (12, "performance"),
    ];
    let mut results: Vec<(u32, Outcome)> = Vec::new();
    let mut record = |id: u32, o: Outcome| {
        let name = names.iter().find(|(i, _)| *i == id).unwrap().1;
        println!("criterion {id:>2} {} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((id, o));
    };
    let simple: [(u32, fn() -> Outcome); 8] = [
        (1, recovery_optimality),
        (2, retention_laws),
        (3, greedy_vs_exhaustive),
        (4, lossless_pruning),
        (5, lambda_zero_equivalence),
        (6, dalr_optimality),
        (7, budget_matching),
        (11, gradient_checks),
    ];
    for (id, f) in simple {
        if wanted(id) {
            record(id, f());
        }
    }
    if [8, 9, 10, 12].iter().any(|&i| wanted(i)) {
        let mut digits = Digits::new();
        println!("(trained {} toy models in {:.0}s)", digits.nets.len(), digits.train_secs);
        if wanted(8) || wanted(9) {
            let o = data_choice_trend(&mut digits);
            if wanted(8) {
                record(8, o);
            }
        }
        if wanted(9) {
            record(9, regularization_trend(&digits));
        }
        if wanted(10) {
            record(10, node_specificity(&digits));
        }
        if wanted(12) {
            record(12, performance(&digits));
        }
    }
    println!("\nacceptance summary");
    for (id, o) in &results {
        let name = names.iter().find(|(i, _)| i == id).unwrap().1;
        println!("  {} criterion {id:>2}: {name}", if o.pass { "PASS" } else { "FAIL" });
    }
    let failed = results.iter().filter(|(_, o)| !o.pass).count();
    println!("{} passed, {failed} failed", results.len() - failed);
    let strict = std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    if failed > 0 && strict {
        std::process::exit(1);
    }
}
