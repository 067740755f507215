use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::actstore::{read_json, write_json};
use crate::error::{Error, Result};

/// Parameter budget of an image encoder: one entry per residual block
/// (exit point) plus everything outside the blocks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostModel {
    pub blocks: Vec<u64>,
    pub other: u64,
}

const VIT_B_32: &str = include_str!("../../data/costmodel_vit_b_32.json");
const VIT_L_14: &str = include_str!("../../data/costmodel_vit_l_14.json");

impl CostModel {
    pub fn total(&self) -> u64 {
        self.blocks.iter().sum::<u64>() + self.other
    }

    /// `n` identical blocks and nothing else.
    pub fn uniform(n: usize, per_block: u64) -> Self {
        CostModel {
            blocks: vec![per_block; n],
            other: 0,
        }
    }

    /// Bundled profiles: `vit-b-32` and `vit-l-14`.
    pub fn bundled(name: &str) -> Result<Self> {
        let text = match name {
            "vit-b-32" => VIT_B_32,
            "vit-l-14" => VIT_L_14,
            other => {
                return Err(Error::InvalidConfig(format!(
                    "unknown cost profile `{other}` (bundled: vit-b-32, vit-l-14)"
                )))
            }
        };
        Ok(serde_json::from_str(text).expect("bundled cost model is valid JSON"))
    }

    /// A bundled profile name or a path to a `costmodel.json`.
    pub fn resolve(name_or_path: &str) -> Result<Self> {
        match CostModel::bundled(name_or_path) {
            Ok(c) => Ok(c),
            Err(_) => CostModel::load(name_or_path),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        read_json(path.as_ref())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_json(path.as_ref(), self)
    }

    pub fn params_through(&self, exit_layer: usize) -> Result<u64> {
        if exit_layer == 0 || exit_layer > self.blocks.len() {
            return Err(Error::OutOfRange(format!(
                "exit layer {exit_layer} (cost model has {} blocks)",
                self.blocks.len()
            )));
        }
        Ok(self.blocks[..exit_layer].iter().sum())
    }
}

/// `(Σ block params up to exit_layer + ee_params) / total encoder params`.
pub fn compression_ratio(exit_layer: usize, cost: &CostModel, ee_params: u64) -> Result<f64> {
    let used = cost.params_through(exit_layer)? + ee_params;
    let total = cost.total();
    if total == 0 {
        return Err(Error::InvalidConfig(
            "cost model has zero parameters".into(),
        ));
    }
    Ok(used as f64 / total as f64)
}
