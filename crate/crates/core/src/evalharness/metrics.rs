use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::Matrix;

/// Whether a lower or a higher score marks the better class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreOrder {
    LowerIsBetter,
    HigherIsBetter,
}

impl ScoreOrder {
    #[inline]
    fn beats(self, a: f64, b: f64) -> bool {
        match self {
            ScoreOrder::LowerIsBetter => a < b,
            ScoreOrder::HigherIsBetter => a > b,
        }
    }
}

/// Rank of `class` within one score row (0 = best). Ties resolve to the
/// lower class index, matching the argmin/argmax convention.
pub fn rank_of(scores: &[f64], class: usize, order: ScoreOrder) -> usize {
    let own = scores[class];
    scores
        .iter()
        .enumerate()
        .filter(|&(c, &s)| order.beats(s, own) || (s == own && c < class))
        .count()
}

/// Fraction of rows whose true class ranks among the `k` best.
pub fn topk_accuracy(
    scores: &Matrix,
    labels: &[usize],
    k: usize,
    order: ScoreOrder,
) -> Result<f64> {
    if k == 0 || k > scores.cols() {
        return Err(Error::OutOfRange(format!(
            "top-k with k = {k} over {} classes",
            scores.cols()
        )));
    }
    if labels.len() != scores.rows() {
        return Err(Error::DimensionMismatch {
            context: "topk_accuracy (labels)",
            expected: scores.rows(),
            got: labels.len(),
        });
    }
    if labels.is_empty() {
        return Err(Error::Empty("top-k accuracy over zero samples"));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= scores.cols()) {
        return Err(Error::OutOfRange(format!("label {bad}")));
    }
    let hits = scores
        .iter_rows()
        .zip(labels)
        .filter(|(row, &y)| rank_of(row, y, order) < k)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleOutcome {
    pub accuracy: f64,
    /// `histogram[l]` counts samples exiting after layer `l + 1`.
    pub histogram: Vec<usize>,
}

impl OracleOutcome {
    /// Fraction of samples exiting at or before `layer` (1-based).
    pub fn cumulative_fraction(&self, layer: usize) -> f64 {
        let total: usize = self.histogram.iter().sum();
        if total == 0 {
            return 0.0;
        }
        self.histogram[..layer.min(self.histogram.len())]
            .iter()
            .sum::<usize>() as f64
            / total as f64
    }
}

/// Oracle early exit: each sample leaves at the first layer whose prediction
/// is correct, or at the last layer otherwise.
///
/// `preds[s][l]` is the prediction for sample `s` at layer `l + 1`.
pub fn oracle_early_exit(preds: &[Vec<usize>], labels: &[usize]) -> Result<OracleOutcome> {
    if preds.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            context: "oracle_early_exit (labels)",
            expected: preds.len(),
            got: labels.len(),
        });
    }
    let layers = preds.first().map_or(0, Vec::len);
    if layers == 0 {
        return Err(Error::Empty("oracle_early_exit needs at least one layer"));
    }
    let mut histogram = vec![0usize; layers];
    let mut correct = 0usize;
    for (row, &y) in preds.iter().zip(labels) {
        if row.len() != layers {
            return Err(Error::DimensionMismatch {
                context: "oracle_early_exit (layers)",
                expected: layers,
                got: row.len(),
            });
        }
        match row.iter().position(|&p| p == y) {
            Some(l) => {
                correct += 1;
                histogram[l] += 1;
            }
            None => histogram[layers - 1] += 1,
        }
    }
    let accuracy = if labels.is_empty() {
        0.0
    } else {
        correct as f64 / labels.len() as f64
    };
    Ok(OracleOutcome {
        accuracy,
        histogram,
    })
}
