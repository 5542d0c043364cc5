//! Standard scaler: `z = (x - μ) / σ` per feature, statistics from the
//! training split only.

use serde::{Deserialize, Serialize};

use super::{FastEwqError, Result, FEATURE_NAMES};
use crate::numeric::{mean, sum_sq_dev};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StdConvention {
    /// Divide by n - 1.
    #[default]
    Sample,
    /// Divide by n.
    Population,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalerParams {
    pub means: [f64; 3],
    pub stds: [f64; 3],
}

impl ScalerParams {
    /// Leaves features unchanged.
    pub fn identity() -> Self {
        Self {
            means: [0.0; 3],
            stds: [1.0; 3],
        }
    }

    pub fn transform(&self, x: &[f64; 3]) -> [f64; 3] {
        std::array::from_fn(|j| (x[j] - self.means[j]) / self.stds[j])
    }
}

pub fn fit_scaler(rows: &[[f64; 3]], convention: StdConvention) -> Result<ScalerParams> {
    if rows.len() < 2 {
        return Err(FastEwqError::TooFewRecords {
            needed: 2,
            got: rows.len(),
        });
    }
    let mut means = [0.0; 3];
    let mut stds = [0.0; 3];
    for j in 0..3 {
        let column: Vec<f64> = rows.iter().map(|r| r[j]).collect();
        let divisor = match convention {
            StdConvention::Sample => rows.len() as f64 - 1.0,
            StdConvention::Population => rows.len() as f64,
        };
        means[j] = mean(&column);
        stds[j] = (sum_sq_dev(&column) / divisor).sqrt();
        if !(stds[j] > 0.0) {
            return Err(FastEwqError::ConstantFeature(FEATURE_NAMES[j].to_owned()));
        }
    }
    Ok(ScalerParams { means, stds })
}
