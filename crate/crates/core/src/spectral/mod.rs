//! Spectral node selection: retention ratio, recovery matrix, source/target
//! moment-matching regularizers and the greedy subset search.
//!
//! For a capture point with second moment `Σ` over nodes `F`, a subset `J`
//! keeps `r(J) = Tr(Σ_FJ (Σ_JJ + ρI)⁻¹ Σ_JF) / Tr Σ` of the activation energy,
//! and `Â_J = Σ_FJ (Σ_JJ + ρI)⁻¹` reconstructs `φ ≈ Â_J φ_J`.

mod greedy;
mod surgery;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::actstats::{LayerStatistics, MomentKind, ScalingMatrix};
use crate::error::{Error, Result};
use crate::linalg::{chol_solve, cholesky, Matrix};

pub use greedy::{default_ridge, find_subset, find_subset_reference, GreedyConfig, RegMode};
pub use surgery::{apply_plan, apply_plan_conv, apply_plan_dense};

/// Selected nodes of one capture point and how to rebuild the rest.
#[derive(Clone, Debug, PartialEq)]
pub struct PruningPlan {
    pub layer: usize,
    /// Selection order.
    pub selected: Vec<usize>,
    /// `m × |J|`
    pub recovery: Matrix,
    /// Ratio after each selection.
    pub ratio_trace: Vec<f64>,
    pub achieved_ratio: f64,
    pub plateau_flag: bool,
}

impl PruningPlan {
    pub fn width(&self) -> usize {
        self.recovery.rows()
    }

    /// The keep-everything plan (`Â = I`).
    pub fn identity(layer: usize, width: usize) -> PruningPlan {
        PruningPlan {
            layer,
            selected: (0..width).collect(),
            recovery: Matrix::identity(width),
            ratio_trace: Vec::new(),
            achieved_ratio: 1.0,
            plateau_flag: false,
        }
    }

    pub(crate) fn validate(&self) -> Result<()> {
        let m = self.recovery.rows();
        if self.recovery.cols() != self.selected.len() {
            return Err(Error::shape_at(self.layer, "recovery columns differ from selection size"));
        }
        let mut seen = vec![false; m];
        for &j in &self.selected {
            if j >= m || std::mem::replace(&mut seen[j], true) {
                return Err(Error::shape_at(self.layer, format!("invalid or repeated node index {j}")));
            }
        }
        Ok(())
    }
}

fn check_sigma(sigma: &Matrix) -> Result<f64> {
    if !sigma.is_square() {
        return Err(Error::shape(format!("second moment must be square, got {:?}", sigma.shape())));
    }
    let tr = sigma.trace();
    if !(tr > 0.0) || !tr.is_finite() {
        return Err(Error::DegenerateSigma(format!("trace is {tr}")));
    }
    Ok(tr)
}

fn check_subset(j: &[usize], m: usize) -> Result<()> {
    match j.iter().find(|&&i| i >= m) {
        Some(i) => Err(Error::shape(format!("index {i} out of range for width {m}"))),
        None => Ok(()),
    }
}

fn degenerate(e: Error) -> Error {
    match e {
        Error::NotPositiveDefinite { index, pivot } => {
            Error::DegenerateSigma(format!("restricted block singular at position {index} (pivot {pivot:e})"))
        }
        e => e,
    }
}

/// `(Σ_JJ + ρI)⁻¹ Σ_JF`, shape `|J| × m`.
fn solve_block(sigma: &Matrix, j: &[usize], ridge: f64) -> Result<Matrix> {
    let all: Vec<usize> = (0..sigma.rows()).collect();
    let f = cholesky(&sigma.select(j, j), ridge).map_err(degenerate)?;
    chol_solve(&f, &sigma.select(j, &all))
}

/// Fraction of `Tr Σ` retained by reconstructing from nodes `j`.
pub fn retention_ratio(sigma: &Matrix, j: &[usize], ridge: f64) -> Result<f64> {
    let tr = check_sigma(sigma)?;
    check_subset(j, sigma.rows())?;
    if j.is_empty() {
        return Ok(0.0);
    }
    let x = solve_block(sigma, j, ridge)?;
    let mut num = 0.0;
    for (a, &ja) in j.iter().enumerate() {
        num += crate::linalg::dot(sigma.row(ja), x.row(a));
    }
    Ok(num / tr)
}

/// `Â_J = Σ_FJ (Σ_JJ + ρI)⁻¹`, shape `m × |J|`.
pub fn recovery_matrix(sigma: &Matrix, j: &[usize], ridge: f64) -> Result<Matrix> {
    check_sigma(sigma)?;
    check_subset(j, sigma.rows())?;
    if j.is_empty() {
        return Ok(Matrix::zeros(sigma.rows(), 0));
    }
    Ok(solve_block(sigma, j, ridge)?.transpose())
}

fn check_pair(source: &LayerStatistics, target: &LayerStatistics, s: &ScalingMatrix) -> Result<usize> {
    let m = target.width();
    if source.width() != m || s.s.shape() != (m, m) || source.layer != target.layer {
        return Err(Error::shape(format!(
            "statistics disagree: source layer {} width {}, target layer {} width {}, scaling {:?}",
            source.layer,
            source.width(),
            target.layer,
            m,
            s.s.shape()
        )));
    }
    Ok(m)
}

/// Subset regularizer `‖Δμ_J‖ + ‖S_JJ ⊙ (C^s_JJ − C^t_JJ)‖_F`.
pub fn reg_subset(
    source: &LayerStatistics,
    target: &LayerStatistics,
    s: &ScalingMatrix,
    j: &[usize],
    kind: MomentKind,
) -> Result<f64> {
    let m = check_pair(source, target, s)?;
    check_subset(j, m)?;
    if j.is_empty() {
        return Err(Error::shape("subset regularizer needs a nonempty subset"));
    }
    let (cs, ct) = (source.second_moment(kind), target.second_moment(kind));
    let mean_sq: f64 = j.iter().map(|&a| (source.mean[a] - target.mean[a]).powi(2)).sum();
    let mut cov_sq = 0.0;
    for &a in j {
        for &b in j {
            cov_sq += (s.s[(a, b)] * (cs[(a, b)] - ct[(a, b)])).powi(2);
        }
    }
    Ok(mean_sq.sqrt() + cov_sq.sqrt())
}

/// Per-node regularizer `|Δμ_j| + ‖S_{j,F} ⊙ (C^s_{j,F} − C^t_{j,F})‖`.
pub fn reg_node(
    source: &LayerStatistics,
    target: &LayerStatistics,
    s: &ScalingMatrix,
    kind: MomentKind,
) -> Result<Vec<f64>> {
    let m = check_pair(source, target, s)?;
    let (cs, ct) = (source.second_moment(kind), target.second_moment(kind));
    Ok((0..m)
        .map(|a| {
            let row: f64 = (0..m).map(|b| (s.s[(a, b)] * (cs[(a, b)] - ct[(a, b)])).powi(2)).sum();
            (source.mean[a] - target.mean[a]).abs() + row.sqrt()
        })
        .collect())
}

pub const PLAN_MAGIC: &str = "SPPL1";
const PLAN_MANIFEST: &str = "plan.json";
const PLAN_BLOB: &str = "recovery.bin";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PlanManifest {
    magic: String,
    layer: usize,
    width: usize,
    selected: Vec<usize>,
    ratio_trace: Vec<f64>,
    achieved_ratio: f64,
    plateau_flag: bool,
    config: Option<GreedyConfig>,
}

/// Writes `plan.json` and `recovery.bin` (row-major little-endian f64) into `dir`.
pub fn save_plan(plan: &PruningPlan, config: Option<&GreedyConfig>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = PlanManifest {
        magic: PLAN_MAGIC.into(),
        layer: plan.layer,
        width: plan.width(),
        selected: plan.selected.clone(),
        ratio_trace: plan.ratio_trace.clone(),
        achieved_ratio: plan.achieved_ratio,
        plateau_flag: plan.plateau_flag,
        config: config.cloned(),
    };
    let mpath = dir.join(PLAN_MANIFEST);
    fs::write(&mpath, serde_json::to_string_pretty(&manifest).expect("manifest serializes"))
        .map_err(|e| Error::io(&mpath, e))?;
    let blob: Vec<u8> = plan.recovery.as_slice().iter().flat_map(|v| v.to_le_bytes()).collect();
    let bpath = dir.join(PLAN_BLOB);
    fs::write(&bpath, blob).map_err(|e| Error::io(&bpath, e))
}

pub fn load_plan(dir: &Path) -> Result<PruningPlan> {
    let mpath = dir.join(PLAN_MANIFEST);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let m: PlanManifest =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", mpath.display())))?;
    if m.magic != PLAN_MAGIC {
        return Err(Error::Format(format!("{}: bad magic {:?}", mpath.display(), m.magic)));
    }
    let bpath = dir.join(PLAN_BLOB);
    let blob = fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;
    if blob.len() != m.width * m.selected.len() * 8 {
        return Err(Error::Format(format!("{}: unexpected length {}", bpath.display(), blob.len())));
    }
    let data = blob.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    let plan = PruningPlan {
        layer: m.layer,
        recovery: Matrix::new(m.width, m.selected.len(), data),
        selected: m.selected,
        ratio_trace: m.ratio_trace,
        achieved_ratio: m.achieved_ratio,
        plateau_flag: m.plateau_flag,
    };
    plan.validate().map_err(|e| Error::Format(e.to_string()))?;
    Ok(plan)
}
