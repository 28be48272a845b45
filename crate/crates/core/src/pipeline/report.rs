//! Run records and their CSV/JSON serialization.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{DataChoice, Method};
use crate::error::{Error, Result};

/// One (seed, method, sweep point) run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunRecord {
    pub seed: u64,
    pub method: Method,
    pub sweep_value: f64,
    pub lambda: f64,
    pub data_choice: DataChoice,
    pub params_before: usize,
    pub params_after: usize,
    pub flops_before: usize,
    pub flops_after: usize,
    pub compression_rate: f64,
    /// Mean achieved retention ratio over the pruned layers (spectral methods).
    pub ratio_achieved: Option<f64>,
    pub acc_source: f64,
    pub acc_target: f64,
    pub seconds: f64,
    /// Achieved ratio of every pruned layer, input to output.
    #[serde(default)]
    pub layer_ratios: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompressionReport {
    pub records: Vec<RunRecord>,
}

impl CompressionReport {
    /// Orders records by (seed, method, sweep value).
    pub fn sort(&mut self) {
        self.records.sort_by(|a, b| {
            (a.seed, a.method)
                .cmp(&(b.seed, b.method))
                .then(a.sweep_value.total_cmp(&b.sweep_value))
                .then(a.data_choice.cmp(&b.data_choice))
        });
    }

    pub fn extend(&mut self, other: CompressionReport) {
        self.records.extend(other.records);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
}

impl ReportFormat {
    /// Picks the format from a file extension (`.json`, otherwise CSV).
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("json") => ReportFormat::Json,
            _ => ReportFormat::Csv,
        }
    }
}

pub const CSV_COLUMNS: [&str; 14] = [
    "seed",
    "method",
    "sweep_value",
    "lambda",
    "data_choice",
    "params_before",
    "params_after",
    "flops_before",
    "flops_after",
    "compression_rate",
    "ratio_achieved",
    "acc_source",
    "acc_target",
    "seconds",
];

pub fn report_to_csv(report: &CompressionReport) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Format(format!("csv: {e}"));
    w.write_record(CSV_COLUMNS).map_err(csv_err)?;
    for r in &report.records {
        w.write_record([
            r.seed.to_string(),
            r.method.name().to_string(),
            r.sweep_value.to_string(),
            r.lambda.to_string(),
            r.data_choice.name().to_string(),
            r.params_before.to_string(),
            r.params_after.to_string(),
            r.flops_before.to_string(),
            r.flops_after.to_string(),
            r.compression_rate.to_string(),
            r.ratio_achieved.map(|v| v.to_string()).unwrap_or_default(),
            r.acc_source.to_string(),
            r.acc_target.to_string(),
            format!("{:.3}", r.seconds),
        ])
        .map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn emit_report(report: &CompressionReport, path: &Path, format: ReportFormat) -> Result<()> {
    let text = match format {
        ReportFormat::Csv => report_to_csv(report)?,
        ReportFormat::Json => serde_json::to_string_pretty(report).expect("report serializes"),
    };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json_report(path: &Path) -> Result<CompressionReport> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}
