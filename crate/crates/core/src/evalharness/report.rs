use std::path::Path;

use serde::{Deserialize, Serialize};

use super::experiments::{EvalOptions, SweepAxis};
use super::Method;
use crate::actstore::{write_json, ActivationDataset};
use crate::error::{Error, Result};

pub const REPORT_CSV: &str = "report.csv";
pub const REPORT_JSON: &str = "report.json";
pub const ORACLE_CSV: &str = "oracle.csv";
pub const SWEEP_CSV: &str = "sweep.csv";
pub const SWEEP_JSON: &str = "sweep.json";

/// Describes the run without wall-clock fields so reports stay
/// byte-reproducible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub tool: String,
    pub version: String,
    pub classes: usize,
    pub layers: usize,
    pub samples: usize,
    pub embed_dim: usize,
    pub test_samples: usize,
}

impl RunMetadata {
    pub fn new(ds: &ActivationDataset, test_samples: usize) -> Self {
        RunMetadata {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            classes: ds.num_classes(),
            layers: ds.num_layers(),
            samples: ds.num_samples(),
            embed_dim: ds.embed_dim(),
            test_samples,
        }
    }
}

/// One row of `report.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerResult {
    pub layer: usize,
    pub method: Method,
    pub top1: f64,
    pub top2: f64,
    pub top3: f64,
    pub compression: f64,
    #[serde(rename = "ap")]
    pub additional_parameters: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleSummary {
    pub method: Method,
    /// Evaluated exit layers; `histogram[j]` belongs to `layers[j]`.
    pub layers: Vec<usize>,
    pub accuracy: f64,
    pub histogram: Vec<usize>,
    pub cumulative_fraction: Vec<f64>,
    pub best_single_layer_top1: f64,
}

/// Cosine-scored accuracy with and without the rate term in training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegularizerComparison {
    pub layer: usize,
    pub combined_loss_top1: f64,
    pub cosine_loss_top1: f64,
    pub delta: f64,
    /// `helps`, `hurts` or `neutral`.
    pub direction: String,
}

impl RegularizerComparison {
    pub fn new(layer: usize, combined_loss_top1: f64, cosine_loss_top1: f64) -> Self {
        let delta = combined_loss_top1 - cosine_loss_top1;
        let direction = if delta > 0.0 {
            "helps"
        } else if delta < 0.0 {
            "hurts"
        } else {
            "neutral"
        };
        RegularizerComparison {
            layer,
            combined_loss_top1,
            cosine_loss_top1,
            delta,
            direction: direction.to_string(),
        }
    }
}

/// How often rate and cosine scoring of the same exit module agree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TgemAgreement {
    pub layer: usize,
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metadata: RunMetadata,
    pub options: EvalOptions,
    pub results: Vec<LayerResult>,
    pub oracle: Vec<OracleSummary>,
    pub regularizer: Vec<RegularizerComparison>,
    pub agreement: Vec<TgemAgreement>,
}

impl EvalReport {
    pub fn oracle_for(&self, method: Method) -> Option<&OracleSummary> {
        self.oracle.iter().find(|o| o.method == method)
    }

    pub fn result(&self, layer: usize, method: Method) -> Option<&LayerResult> {
        self.results
            .iter()
            .find(|r| r.layer == layer && r.method == method)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        write_rows(path.as_ref(), &self.results)
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        write_json(path.as_ref(), self)
    }

    /// Writes `report.csv`, `report.json` and, for the first method,
    /// `oracle.csv` into `dir`.
    pub fn write_all(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        create_dir(dir)?;
        self.write_csv(dir.join(REPORT_CSV))?;
        self.write_json(dir.join(REPORT_JSON))?;
        if let Some(o) = self.oracle.first() {
            write_oracle_csv(dir.join(ORACLE_CSV), o)?;
        }
        Ok(())
    }
}

#[derive(Serialize)]
struct OracleRow {
    layer: usize,
    exit_count: usize,
    cumulative_fraction: f64,
}

pub fn write_oracle_csv(path: impl AsRef<Path>, oracle: &OracleSummary) -> Result<()> {
    let rows: Vec<OracleRow> = oracle
        .layers
        .iter()
        .zip(&oracle.histogram)
        .zip(&oracle.cumulative_fraction)
        .map(|((&layer, &exit_count), &cumulative_fraction)| OracleRow {
            layer,
            exit_count,
            cumulative_fraction,
        })
        .collect();
    write_rows(path.as_ref(), &rows)
}

/// One row of `sweep.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: usize,
    pub layer: usize,
    pub method: Method,
    pub top1: f64,
    pub top2: f64,
    pub top3: f64,
    #[serde(rename = "ap")]
    pub additional_parameters: u64,
}

/// Smallest sweep value whose top-1 is within `tolerance` of the best.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Saturation {
    pub layer: usize,
    pub method: Method,
    pub best_value: usize,
    pub best_top1: f64,
    pub saturated_value: usize,
    pub tolerance: f64,
}

impl Saturation {
    pub fn from_points(
        layer: usize,
        method: Method,
        points: &[&SweepPoint],
        tolerance: f64,
    ) -> Option<Self> {
        // First maximum in value order, so ties favour the smaller value.
        let mut sorted: Vec<&SweepPoint> = points.to_vec();
        sorted.sort_by_key(|p| p.value);
        let best = sorted
            .iter()
            .copied()
            .reduce(|a, b| if b.top1 > a.top1 { b } else { a })?;
        let saturated = sorted
            .iter()
            .find(|p| p.top1 >= best.top1 - tolerance)
            .expect("best point qualifies");
        Some(Saturation {
            layer,
            method,
            best_value: best.value,
            best_top1: best.top1,
            saturated_value: saturated.value,
            tolerance,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub metadata: RunMetadata,
    pub axis: SweepAxis,
    pub values: Vec<usize>,
    pub layers: Vec<usize>,
    pub points: Vec<SweepPoint>,
    pub saturation: Vec<Saturation>,
}

impl SweepReport {
    pub fn point(&self, value: usize, layer: usize, method: Method) -> Option<&SweepPoint> {
        self.points
            .iter()
            .find(|p| p.value == value && p.layer == layer && p.method == method)
    }

    pub fn write_all(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        create_dir(dir)?;
        write_rows(&dir.join(SWEEP_CSV), &self.points)?;
        write_json(&dir.join(SWEEP_JSON), self)
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::format(path, format!("{other:?}")),
    })?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
