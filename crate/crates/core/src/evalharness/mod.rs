//! Per-layer accuracy tables, calibration-size and K sweeps, compression
//! accounting and the oracle early-exit analysis.

mod cost;
mod experiments;
mod metrics;
mod report;

pub use cost::{compression_ratio, CostModel};
pub use experiments::{
    layer_predictions, run_sweep, run_table1, select_test_subset, EvalOptions, LayerScores,
    SweepAxis, SweepOptions,
};
pub use metrics::{oracle_early_exit, rank_of, topk_accuracy, OracleOutcome, ScoreOrder};
pub use report::{
    write_oracle_csv, EvalReport, LayerResult, OracleSummary, RegularizerComparison, RunMetadata,
    Saturation, SweepPoint, SweepReport, TgemAgreement,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A (parameter estimator, similarity function) pair evaluated per layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Calibration-set Gaussians scored by class-rate.
    SamplingRate,
    /// Calibration-set class means scored by cosine similarity.
    SamplingCosine,
    /// Exit module trained on rate + cosine, scored by rate.
    TgemRate,
    /// Exit module trained on rate + cosine, scored by cosine.
    TgemCosine,
    /// Jumper trained on the cosine loss alone, scored by cosine.
    JumperCosine,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::SamplingRate,
        Method::SamplingCosine,
        Method::TgemRate,
        Method::TgemCosine,
        Method::JumperCosine,
    ];

    /// The four methods reported by default.
    pub const DEFAULT: [Method; 4] = [
        Method::SamplingRate,
        Method::SamplingCosine,
        Method::TgemRate,
        Method::TgemCosine,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::SamplingRate => "sampling-rate",
            Method::SamplingCosine => "sampling-cosine",
            Method::TgemRate => "tgem-rate",
            Method::TgemCosine => "tgem-cosine",
            Method::JumperCosine => "jumper-cosine",
        }
    }

    pub fn is_sampling(self) -> bool {
        matches!(self, Method::SamplingRate | Method::SamplingCosine)
    }

    pub fn order(self) -> ScoreOrder {
        match self {
            Method::SamplingRate | Method::TgemRate => ScoreOrder::LowerIsBetter,
            _ => ScoreOrder::HigherIsBetter,
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| {
                Error::InvalidConfig(format!(
                    "unknown method `{s}` (expected one of: {})",
                    Method::ALL.map(Method::as_str).join(", ")
                ))
            })
    }
}
