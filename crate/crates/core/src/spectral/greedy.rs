//! Greedy forward selection of nodes, with an optional moment-matching
//! penalty folded into the selection score.

use serde::{Deserialize, Serialize};

use super::{check_sigma, degenerate, recovery_matrix, reg_node, reg_subset, retention_ratio, PruningPlan};
use crate::actstats::{scaling_matrix_of, LayerStatistics, MomentKind, DEFAULT_SCALING_FLOOR};
use crate::error::{Error, Result};
use crate::linalg::{chol_extend, chol_solve, CholeskyFactor, Matrix};

/// Gains below this (in ratio units) count as no progress.
const PLATEAU_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegMode {
    #[default]
    None,
    /// Penalty evaluated on the whole candidate subset `J ∪ {j}`.
    Subset,
    /// Penalty computed once per node.
    Node,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GreedyConfig {
    /// Required retention ratio, in `(0, 1]`.
    pub alpha: f64,
    pub lambda: f64,
    pub reg_mode: RegMode,
    pub max_cardinality: Option<usize>,
    /// Ridge added to `Σ_JJ`; `None` means [`default_ridge`].
    pub ridge: Option<f64>,
    pub moment_kind: MomentKind,
    pub scaling_floor: f64,
}

impl Default for GreedyConfig {
    fn default() -> Self {
        GreedyConfig {
            alpha: 0.96,
            lambda: 1.0,
            reg_mode: RegMode::None,
            max_cardinality: None,
            ridge: None,
            moment_kind: MomentKind::Centered,
            scaling_floor: DEFAULT_SCALING_FLOOR,
        }
    }
}

impl GreedyConfig {
    fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::config("alpha", format!("must be in (0, 1], got {}", self.alpha)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config("lambda", format!("must be finite and >= 0, got {}", self.lambda)));
        }
        if let Some(r) = self.ridge {
            if !(r >= 0.0 && r.is_finite()) {
                return Err(Error::config("ridge", format!("must be finite and >= 0, got {r}")));
            }
        }
        Ok(())
    }
}

/// `1e-8 · Tr Σ / m`.
pub fn default_ridge(sigma: &Matrix) -> f64 {
    1e-8 * sigma.trace() / sigma.rows().max(1) as f64
}

/// Evaluates `r(J ∪ {j})` for candidates and grows `J`.
trait RatioOracle {
    fn values(&mut self, selected: &[usize], candidates: &[usize]) -> Result<Vec<f64>>;
    fn add(&mut self, selected: &[usize], i: usize) -> Result<()>;
    fn recovery(&self, selected: &[usize]) -> Result<Matrix>;
}

/// Maintains the residual `Σ − Σ_FJ (Σ_JJ + ρI)⁻¹ Σ_JF` and a Cholesky
/// factor of `Σ_JJ + ρI`; each candidate's gain is its squared residual
/// column norm over its Schur pivot.
struct Incremental<'a> {
    sigma: &'a Matrix,
    residual: Matrix,
    chol: CholeskyFactor,
    ridge: f64,
    trace: f64,
    ratio: f64,
}

impl Incremental<'_> {
    fn gain(&self, j: usize) -> f64 {
        let pivot = self.residual[(j, j)] + self.ridge;
        if !(pivot > 0.0) {
            return 0.0;
        }
        let row = self.residual.row(j);
        crate::linalg::dot(row, row) / pivot
    }
}

impl RatioOracle for Incremental<'_> {
    fn values(&mut self, _selected: &[usize], candidates: &[usize]) -> Result<Vec<f64>> {
        Ok(candidates.iter().map(|&j| self.ratio + self.gain(j) / self.trace).collect())
    }

    fn add(&mut self, selected: &[usize], i: usize) -> Result<()> {
        let gain = self.gain(i);
        let pivot = self.residual[(i, i)] + self.ridge;
        let col: Vec<f64> = selected.iter().map(|&a| self.sigma[(a, i)]).collect();
        self.chol = chol_extend(&self.chol, &col, self.sigma[(i, i)]).map_err(degenerate)?;
        if pivot > 0.0 {
            let scale = 1.0 / pivot.sqrt();
            let g: Vec<f64> = self.residual.row(i).iter().map(|v| v * scale).collect();
            let m = g.len();
            let data = self.residual.as_mut_slice();
            for a in 0..m {
                let ga = g[a];
                for (d, gb) in data[a * m..(a + 1) * m].iter_mut().zip(&g) {
                    *d -= ga * gb;
                }
            }
        }
        self.ratio += gain / self.trace;
        Ok(())
    }

    fn recovery(&self, selected: &[usize]) -> Result<Matrix> {
        let all: Vec<usize> = (0..self.sigma.rows()).collect();
        Ok(chol_solve(&self.chol, &self.sigma.select(selected, &all))?.transpose())
    }
}

/// Recomputes the full ratio for every candidate.
struct Reference<'a> {
    sigma: &'a Matrix,
    ridge: f64,
}

impl RatioOracle for Reference<'_> {
    fn values(&mut self, selected: &[usize], candidates: &[usize]) -> Result<Vec<f64>> {
        let mut j = selected.to_vec();
        j.push(0);
        candidates
            .iter()
            .map(|&c| {
                *j.last_mut().expect("nonempty") = c;
                retention_ratio(self.sigma, &j, self.ridge)
            })
            .collect()
    }

    fn add(&mut self, _selected: &[usize], _i: usize) -> Result<()> {
        Ok(())
    }

    fn recovery(&self, selected: &[usize]) -> Result<Matrix> {
        recovery_matrix(self.sigma, selected, self.ridge)
    }
}

/// Greedy subset search using the incremental residual update.
///
/// `domains` is `(source, target)` statistics and is required whenever
/// `cfg.reg_mode` is not [`RegMode::None`].
pub fn find_subset(
    layer: usize,
    sigma: &Matrix,
    domains: Option<(&LayerStatistics, &LayerStatistics)>,
    cfg: &GreedyConfig,
) -> Result<PruningPlan> {
    let trace = check_sigma(sigma)?;
    let ridge = cfg.ridge.unwrap_or_else(|| default_ridge(sigma));
    let mut oracle = Incremental {
        sigma,
        residual: sigma.clone(),
        chol: CholeskyFactor::empty(ridge),
        ridge,
        trace,
        ratio: 0.0,
    };
    run_greedy(layer, sigma, domains, cfg, &mut oracle)
}

/// Same search, recomputing every candidate's ratio from scratch.
pub fn find_subset_reference(
    layer: usize,
    sigma: &Matrix,
    domains: Option<(&LayerStatistics, &LayerStatistics)>,
    cfg: &GreedyConfig,
) -> Result<PruningPlan> {
    check_sigma(sigma)?;
    let ridge = cfg.ridge.unwrap_or_else(|| default_ridge(sigma));
    run_greedy(layer, sigma, domains, cfg, &mut Reference { sigma, ridge })
}

enum Penalty<'a> {
    Off,
    Node(Vec<f64>),
    Subset {
        source: &'a LayerStatistics,
        target: &'a LayerStatistics,
        scaling: crate::actstats::ScalingMatrix,
        kind: MomentKind,
    },
}

fn run_greedy(
    layer: usize,
    sigma: &Matrix,
    domains: Option<(&LayerStatistics, &LayerStatistics)>,
    cfg: &GreedyConfig,
    oracle: &mut dyn RatioOracle,
) -> Result<PruningPlan> {
    cfg.validate()?;
    let m = sigma.rows();
    let penalty = match (cfg.reg_mode, domains) {
        (RegMode::None, _) => Penalty::Off,
        (_, None) => return Err(Error::StatsMissing),
        (_, Some((s, t))) if s.width() != m || t.width() != m => {
            return Err(Error::shape_at(layer, "domain statistics width differs from the second moment"));
        }
        (_, Some(_)) if cfg.lambda == 0.0 => Penalty::Off,
        (RegMode::Node, Some((s, t))) => {
            let scaling = scaling_matrix_of(t.second_moment(cfg.moment_kind), cfg.scaling_floor);
            Penalty::Node(reg_node(s, t, &scaling, cfg.moment_kind)?)
        }
        (RegMode::Subset, Some((s, t))) => Penalty::Subset {
            source: s,
            target: t,
            scaling: scaling_matrix_of(t.second_moment(cfg.moment_kind), cfg.scaling_floor),
            kind: cfg.moment_kind,
        },
    };
    let max_card = cfg.max_cardinality.unwrap_or(m).min(m);

    let mut selected: Vec<usize> = Vec::new();
    let mut in_set = vec![false; m];
    let mut ratio = 0.0;
    let mut trace = Vec::new();
    let mut plateau = false;
    while ratio < cfg.alpha && selected.len() < max_card {
        let candidates: Vec<usize> = (0..m).filter(|&j| !in_set[j]).collect();
        if candidates.is_empty() {
            break;
        }
        let values = oracle.values(&selected, &candidates)?;
        let best_value = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !(best_value - ratio >= PLATEAU_TOL) {
            plateau = true;
            break;
        }
        let scores = penalized_scores(&values, &candidates, &selected, &penalty, cfg.lambda)?;
        let mut pick = 0;
        for k in 1..scores.len() {
            if scores[k] > scores[pick] {
                pick = k;
            }
        }
        let i = candidates[pick];
        oracle.add(&selected, i)?;
        selected.push(i);
        in_set[i] = true;
        ratio = values[pick];
        trace.push(ratio);
    }
    let recovery = oracle.recovery(&selected)?;
    Ok(PruningPlan { layer, selected, recovery, ratio_trace: trace, achieved_ratio: ratio, plateau_flag: plateau })
}

/// `V_j − λ·σ(V)·R_j / max R` over the candidates.
fn penalized_scores(
    values: &[f64],
    candidates: &[usize],
    selected: &[usize],
    penalty: &Penalty,
    lambda: f64,
) -> Result<Vec<f64>> {
    let regs: Vec<f64> = match penalty {
        Penalty::Off => return Ok(values.to_vec()),
        Penalty::Node(r) => candidates.iter().map(|&j| r[j]).collect(),
        Penalty::Subset { source, target, scaling, kind } => {
            let mut j = selected.to_vec();
            j.push(0);
            candidates
                .iter()
                .map(|&c| {
                    *j.last_mut().expect("nonempty") = c;
                    reg_subset(source, target, scaling, &j, *kind)
                })
                .collect::<Result<_>>()?
        }
    };
    let max_r = regs.iter().cloned().fold(0.0, f64::max);
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    if !(max_r > 0.0) || values.len() < 2 {
        return Ok(values.to_vec());
    }
    Ok(values.iter().zip(&regs).map(|(v, r)| v - lambda * std * r / max_r).collect())
}
