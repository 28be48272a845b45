mod common;

use common::*;
use proptest::prelude::*;
use specprune::actstats::{batch_of, LayerStatistics, MomentAccumulator};
use specprune::linalg::Matrix;
use specprune::netmodel::{BatchNorm, Conv2d, Dense, Layer, Network};
use specprune::spectral::{
    apply_plan, default_ridge, find_subset, find_subset_reference, load_plan, recovery_matrix, retention_ratio, save_plan,
    GreedyConfig, RegMode,
};
use specprune::{Error, Tensor};

fn stats_of(samples: &Matrix, tag: &str) -> LayerStatistics {
    let mut acc = MomentAccumulator::new(0, samples.cols());
    acc.accumulate(&batch_of(0, samples.clone())).unwrap();
    acc.finalize(tag).unwrap()
}

fn domain_pair(seed: u64, n: usize, m: usize, scale: f64) -> (LayerStatistics, LayerStatistics) {
    let mut r = rng(seed);
    let s = correlated_samples(&mut r, n, m);
    let t = correlated_samples(&mut r, n, m);
    let shift: Vec<f64> = vec_of(&mut r, m);
    let t = Matrix::from_fn(n, m, |i, j| t[(i, j)] + 0.5 * shift[j]);
    (stats_of(&s.scale(scale), "source"), stats_of(&t.scale(scale), "target"))
}

fn sigma_of(net: &Network, tap: usize, x: &Tensor) -> Matrix {
    let caps = net.capture(x, &[tap]).unwrap();
    stats_of(&caps[0].samples, "").sigma
}

#[test]
fn ratio_and_recovery_agree_with_oracle() {
    let sigma = random_spd(&mut rng(1), 7, 0.01);
    for j in [vec![0], vec![3, 1], vec![6, 2, 4, 0]] {
        let r = retention_ratio(&sigma, &j, 0.0).unwrap();
        assert!((r - ratio_direct(&sigma, &j)).abs() < 1e-12);
        let a = recovery_matrix(&sigma, &j, 0.0).unwrap();
        // Â Σ_JJ = Σ_FJ
        let sjj = sigma.select(&j, &j);
        let all: Vec<usize> = (0..7).collect();
        assert!(frob_diff(&matmul(&a, &sjj), &sigma.select(&all, &j)) < 1e-10);
    }
    assert!(retention_ratio(&sigma, &[7], 0.0).is_err());
    assert!(retention_ratio(&sigma, &[1, 1], 0.0).is_err());
}

#[test]
fn default_ridge_scales_with_trace() {
    let s = Matrix::diag(&[2.0, 4.0]);
    assert!((default_ridge(&s) - 3e-8).abs() < 1e-20);
}

#[test]
fn ties_break_to_the_lowest_index() {
    let plan = find_subset(0, &Matrix::identity(5), None, &GreedyConfig { alpha: 0.6, ridge: Some(0.0), ..GreedyConfig::default() }).unwrap();
    assert_eq!(plan.selected, vec![0, 1, 2]);
    assert!((plan.achieved_ratio - 0.6).abs() < 1e-12);
}

#[test]
fn regularized_modes_need_domain_statistics() {
    let sigma = random_spd(&mut rng(2), 4, 0.1);
    let cfg = GreedyConfig { reg_mode: RegMode::Node, ..GreedyConfig::default() };
    assert!(matches!(find_subset(0, &sigma, None, &cfg), Err(Error::StatsMissing)));
    for bad in [0.0, 1.5, f64::NAN] {
        assert!(find_subset(0, &sigma, None, &GreedyConfig { alpha: bad, ..GreedyConfig::default() }).is_err());
    }
    assert!(find_subset(0, &sigma, None, &GreedyConfig { lambda: -1.0, ..GreedyConfig::default() }).is_err());
}

#[test]
fn dead_node_sets_plateau_and_stops() {
    // With the default ridge the two live nodes retain slightly less than
    // everything, and the dead node cannot add anything.
    let sigma = Matrix::diag(&[1.0, 2.0, 0.0]);
    let plan = find_subset(0, &sigma, None, &GreedyConfig { alpha: 1.0, ..GreedyConfig::default() }).unwrap();
    assert_eq!(plan.selected, vec![1, 0]);
    assert!(plan.plateau_flag);
    assert!(plan.achieved_ratio < 1.0 && plan.achieved_ratio > 1.0 - 1e-6);
}

#[test]
fn regularizer_steers_away_from_shifted_nodes() {
    // Node 0 and 1 carry identical signal; node 1 is shifted in the target domain.
    let mut r = rng(4);
    let z = gaussian(&mut r, 300, 3);
    let src = Matrix::from_fn(300, 4, |i, j| z[(i, j.saturating_sub(1).min(2))]);
    let tgt = Matrix::from_fn(300, 4, |i, j| src[(i, j)] + if j == 0 { 2.0 } else { 0.0 });
    let (s, t) = (stats_of(&src, "source"), stats_of(&tgt, "target"));
    let cfg = GreedyConfig { alpha: 1.0, max_cardinality: Some(1), lambda: 0.0, ..GreedyConfig::default() };
    let plain = find_subset(0, &t.sigma, None, &cfg).unwrap().selected;
    assert_eq!(plain, vec![0]);
    let reg = GreedyConfig { lambda: 10.0, reg_mode: RegMode::Node, ..cfg.clone() };
    assert_ne!(find_subset(0, &t.sigma, Some((&s, &t)), &reg).unwrap().selected, vec![0]);
}

#[test]
fn dense_surgery_through_batch_norm_is_exact_on_duplicates() {
    let mut r = rng(5);
    let base = gaussian(&mut r, 3, 4);
    let w = Matrix::from_fn(6, 4, |i, j| base[(i % 3, j)]);
    let b0 = vec_of(&mut r, 3);
    let mut bn = BatchNorm::identity(6);
    bn.running_mean = (0..6).map(|i| 0.1 * b0[i % 3]).collect();
    let net = Network::new(
        vec![4],
        vec![
            Layer::Dense(Dense::new(w, Some((0..6).map(|i| b0[i % 3]).collect()))),
            Layer::BatchNorm(bn),
            Layer::Relu,
            Layer::Dropout { rate: 0.5 },
            Layer::Dense(Dense::new(gaussian(&mut r, 2, 6), Some(vec![0.1, -0.1]))),
        ],
    )
    .unwrap();
    let x = Tensor::new(vec![200, 4], vec_of(&mut r, 800)).unwrap();
    let tap = net.capture_points()[0].tap;
    let plan = find_subset(tap, &sigma_of(&net, tap, &x), None, &GreedyConfig { alpha: 0.9999, ..GreedyConfig::default() }).unwrap();
    assert_eq!(plan.selected.len(), 3);
    let pruned = apply_plan(&net, &plan).unwrap();
    let drift = pruned.predict(&x).unwrap().data().iter().zip(net.predict(&x).unwrap().data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(drift < 1e-5, "drift {drift}");
    assert!(pruned.count_params() < net.count_params());
}

#[test]
fn conv_into_flatten_surgery_is_exact_on_duplicates() {
    let mut r = rng(6);
    let base = vec_of(&mut r, 2 * 9);
    let w: Vec<f64> = (0..4).flat_map(|o| base[(o % 2) * 9..(o % 2) * 9 + 9].to_vec()).collect();
    let net = Network::new(
        vec![1, 4, 4],
        vec![
            Layer::Conv2d(Conv2d { weight: Tensor::new(vec![4, 1, 3, 3], w).unwrap(), bias: vec![0.1, 0.2, 0.1, 0.2], stride: 1, padding: 1 }),
            Layer::Relu,
            Layer::MaxPool2,
            Layer::Flatten,
            Layer::Dense(Dense::new(gaussian(&mut r, 3, 16), Some(vec![0.0; 3]))),
        ],
    )
    .unwrap();
    let x = Tensor::new(vec![60, 1, 4, 4], vec_of(&mut r, 960)).unwrap();
    let tap = net.capture_points()[0].tap;
    let plan = find_subset(tap, &sigma_of(&net, tap, &x), None, &GreedyConfig { alpha: 0.9999, ..GreedyConfig::default() }).unwrap();
    assert_eq!(plan.selected.len(), 2);
    let pruned = apply_plan(&net, &plan).unwrap();
    let drift = pruned.predict(&x).unwrap().data().iter().zip(net.predict(&x).unwrap().data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(drift < 1e-5, "drift {drift}");
}

#[test]
fn plans_round_trip_through_files() {
    let sigma = random_spd(&mut rng(7), 6, 0.1);
    let cfg = GreedyConfig { alpha: 0.9, ..GreedyConfig::default() };
    let plan = find_subset(4, &sigma, None, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_plan(&plan, Some(&cfg), dir.path()).unwrap();
    assert_eq!(load_plan(dir.path()).unwrap(), plan);
    let p = dir.path().join("plan.json");
    let text = std::fs::read_to_string(&p).unwrap();
    std::fs::write(&p, text.replace("SPPL1", "NOPE")).unwrap();
    assert!(matches!(load_plan(dir.path()), Err(Error::Format(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn trace_is_monotone_and_reaches_alpha(seed in any::<u64>(), m in 2usize..16, alpha in 0.3f64..1.0) {
        let sigma = random_spd(&mut rng(seed), m, 0.01);
        let plan = find_subset(0, &sigma, None, &GreedyConfig { alpha, ..GreedyConfig::default() }).unwrap();
        for w in plan.ratio_trace.windows(2) {
            prop_assert!(w[1] >= w[0] - 1e-12);
        }
        prop_assert!(plan.achieved_ratio >= alpha - 1e-12 || plan.plateau_flag);
        prop_assert_eq!(plan.ratio_trace.len(), plan.selected.len());
        prop_assert_eq!(plan.recovery.shape(), (m, plan.selected.len()));
    }

    #[test]
    fn selection_follows_node_relabeling(seed in any::<u64>(), m in 2usize..12, rot in 1usize..11) {
        let sigma = random_spd(&mut rng(seed), m, 0.01);
        let perm: Vec<usize> = (0..m).map(|i| (i + rot) % m).collect();
        // Node i of the relabeled matrix is node perm[i] of the original.
        let relabeled = sigma.select(&perm, &perm);
        let cfg = GreedyConfig { alpha: 0.95, ..GreedyConfig::default() };
        let a = find_subset(0, &sigma, None, &cfg).unwrap().selected;
        let b = find_subset(0, &relabeled, None, &cfg).unwrap().selected;
        let mapped: Vec<usize> = b.iter().map(|&i| perm[i]).collect();
        prop_assert_eq!(a, mapped);
    }

    #[test]
    fn ratio_is_scale_invariant(seed in any::<u64>(), m in 2usize..10, c in prop::sample::select(vec![0.1, 1.0, 10.0])) {
        let sigma = random_spd(&mut rng(seed), m, 0.01);
        let j: Vec<usize> = (0..m).step_by(2).collect();
        let a = retention_ratio(&sigma, &j, 0.0).unwrap();
        let b = retention_ratio(&sigma.scale(c * c), &j, 0.0).unwrap();
        prop_assert!((a - b).abs() < 1e-10);
    }

    /// Scaling every activation by `c` scales both regularizers by `c`; the
    /// max-normalized score, and so the selection, must not change.
    #[test]
    fn regularized_selection_ignores_activation_scale(seed in any::<u64>(), c in 0.2f64..5.0, subset in any::<bool>()) {
        let mode = if subset { RegMode::Subset } else { RegMode::Node };
        let cfg = GreedyConfig { alpha: 0.97, reg_mode: mode, ..GreedyConfig::default() };
        let (s1, t1) = domain_pair(seed, 120, 8, 1.0);
        let (s2, t2) = domain_pair(seed, 120, 8, c);
        let a = find_subset(0, &t1.sigma, Some((&s1, &t1)), &cfg).unwrap().selected;
        let b = find_subset(0, &t2.sigma, Some((&s2, &t2)), &cfg).unwrap().selected;
        prop_assert_eq!(a, b);
    }

    #[test]
    fn incremental_matches_reference(seed in any::<u64>(), mode in 0u8..3) {
        let reg_mode = [RegMode::None, RegMode::Node, RegMode::Subset][mode as usize];
        let (s, t) = domain_pair(seed, 150, 10, 1.0);
        let cfg = GreedyConfig { alpha: 1.0, reg_mode, ..GreedyConfig::default() };
        let a = find_subset(0, &t.sigma, Some((&s, &t)), &cfg).unwrap();
        let b = find_subset_reference(0, &t.sigma, Some((&s, &t)), &cfg).unwrap();
        prop_assert_eq!(&a.selected, &b.selected);
        for (x, y) in a.ratio_trace.iter().zip(&b.ratio_trace) {
            prop_assert!((x - y).abs() < 1e-8);
        }
        prop_assert!(frob_diff(&a.recovery, &b.recovery) < 1e-6 * (1.0 + frob(&b.recovery)));
    }
}
