//! Which nodes get selected under source-only versus target-only statistics,
//! and how often those nodes fire on each domain.

use serde::{Deserialize, Serialize};

use super::{layer_stats, load_or_train, prepare_data, ExperimentConfig};
use crate::actstats::activation_rates;
use crate::error::{Error, Result, StageExt};
use crate::netmodel::Network;
use crate::spectral::{find_subset, GreedyConfig};
use crate::trainkit::TwoDomainData;

/// Mean activation rates of one node class on both test splits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpecificitySet {
    pub nodes: Vec<usize>,
    /// `None` when the set is empty.
    pub rate_source: Option<f64>,
    pub rate_target: Option<f64>,
}

impl SpecificitySet {
    fn new(nodes: Vec<usize>, rs: &[f64], rt: &[f64]) -> Self {
        let mean = |r: &[f64]| (!nodes.is_empty()).then(|| nodes.iter().map(|&j| r[j]).sum::<f64>() / nodes.len() as f64);
        SpecificitySet { rate_source: mean(rs), rate_target: mean(rt), nodes }
    }

    /// `rate_source − rate_target`.
    pub fn gap(&self) -> Option<f64> {
        Some(self.rate_source? - self.rate_target?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpecificityLayer {
    pub layer: usize,
    pub width: usize,
    pub selected_source: Vec<usize>,
    pub selected_target: Vec<usize>,
    /// Selected with source statistics only.
    pub source_specific: SpecificitySet,
    /// Selected with target statistics only.
    pub target_specific: SpecificitySet,
    /// Selected by neither.
    pub control: SpecificitySet,
}

impl SpecificityLayer {
    /// Names of empty node classes, as errors.
    pub fn empty_sets(&self) -> Vec<Error> {
        let mut out = Vec::new();
        for (name, set) in [
            ("source_specific", &self.source_specific),
            ("target_specific", &self.target_specific),
            ("control", &self.control),
        ] {
            if set.nodes.is_empty() {
                out.push(Error::EmptySpecificSet(name));
            }
        }
        out
    }

    /// Source-specific nodes fire more on source, target-specific more on
    /// target, and the control class within `tol` on both.
    pub fn sign_pattern_holds(&self, tol: f64) -> bool {
        matches!(self.source_specific.gap(), Some(g) if g > 0.0)
            && matches!(self.target_specific.gap(), Some(g) if g < 0.0)
            && matches!(self.control.gap(), Some(g) if g.abs() <= tol)
    }

    /// Mean absolute source/target rate gap of the two specific classes
    /// (empty classes are skipped; 0 if both are empty).
    pub fn specific_gap(&self) -> f64 {
        let gaps: Vec<f64> = [&self.source_specific, &self.target_specific]
            .iter()
            .filter_map(|s| s.gap())
            .map(f64::abs)
            .collect();
        if gaps.is_empty() {
            0.0
        } else {
            gaps.iter().sum::<f64>() / gaps.len() as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpecificityTable {
    pub seed: u64,
    pub first: SpecificityLayer,
    pub last: SpecificityLayer,
}

/// Selects `keep_fraction` of the nodes at capture point `layer` once with
/// source and once with target training statistics, then measures activation
/// rates of each node class on both test splits.
pub fn analyze_nodes(cfg: &ExperimentConfig, net: &Network, data: &TwoDomainData, layer: usize) -> Result<SpecificityLayer> {
    let cp = net.capture_point(layer)?;
    let n = cfg.stats.samples;
    let keep = ((cfg.analysis.keep_fraction * cp.width as f64).ceil() as usize).clamp(1, cp.width);
    let gcfg = GreedyConfig {
        alpha: 1.0,
        max_cardinality: Some(keep),
        ridge: cfg.compress.ridge,
        ..GreedyConfig::default()
    };
    let select = |ds| -> Result<Vec<usize>> {
        let st = layer_stats(net, layer, &[(ds, n)], None, "")?;
        let mut j = find_subset(layer, &st.sigma, None, &gcfg)?.selected;
        j.sort_unstable();
        Ok(j)
    };
    let js = select(&data.source_train)?;
    let jt = select(&data.target_train)?;
    let rs = activation_rates(net, layer, &data.source_test)?;
    let rt = activation_rates(net, layer, &data.target_test)?;
    let only = |a: &[usize], b: &[usize]| a.iter().copied().filter(|x| !b.contains(x)).collect::<Vec<_>>();
    let control: Vec<usize> = (0..cp.width).filter(|j| !js.contains(j) && !jt.contains(j)).collect();
    Ok(SpecificityLayer {
        layer,
        width: cp.width,
        source_specific: SpecificitySet::new(only(&js, &jt), &rs, &rt),
        target_specific: SpecificitySet::new(only(&jt, &js), &rs, &rt),
        control: SpecificitySet::new(control, &rs, &rt),
        selected_source: js,
        selected_target: jt,
    })
}

/// The analysis at the first and the last capture point of a trained model.
pub fn node_specificity_for(cfg: &ExperimentConfig, seed: u64, net: &Network, data: &TwoDomainData) -> Result<SpecificityTable> {
    let points = net.capture_points();
    let (Some(first), Some(last)) = (points.first(), points.last()) else {
        return Err(Error::Topology("network has no capture points".into()));
    };
    Ok(SpecificityTable {
        seed,
        first: analyze_nodes(cfg, net, data, first.tap).stage("analyze")?,
        last: analyze_nodes(cfg, net, data, last.tap).stage("analyze")?,
    })
}

/// Runs the analysis for every configured seed.
pub fn node_specificity_analysis(cfg: &ExperimentConfig) -> Result<Vec<SpecificityTable>> {
    cfg.validate()?;
    let mut out = Vec::new();
    for &seed in &cfg.seeds {
        let data = prepare_data(cfg, seed);
        let net = load_or_train(cfg, seed, &data)?;
        out.push(node_specificity_for(cfg, seed, &net, &data)?);
    }
    Ok(out)
}
