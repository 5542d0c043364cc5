//! Metadata-only quantization classifier.
//!
//! A random forest learns which transformer blocks an entropy analysis would
//! quantize, from three numbers known before any weight is downloaded:
//! parameter count, execution index and model depth. [`plan::fast_plan`]
//! turns its predictions into a cluster plan.

pub mod dataset;
pub mod forest;
pub mod metrics;
pub mod plan;
pub mod scaler;

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::planner::PlanError;

pub use dataset::{
    load_dataset, read_dataset, synthetic_half_split, write_dataset, BlockRecord, QuantType,
};
pub use forest::{DecisionTree, ForestModel, ForestParams, Node, Prediction};
pub use metrics::{evaluate, ClassMetrics, ClassificationReport, Confusion};
pub use plan::{fast_plan, fast_plan_with};
pub use scaler::{fit_scaler, ScalerParams, StdConvention};

/// Feature order used everywhere a 3-vector appears.
pub const FEATURE_NAMES: [&str; 3] = ["num_parameters", "exec_index", "num_blocks"];

/// Smallest dataset accepted for a held-out split.
pub const MIN_SPLIT_RECORDS: usize = 10;

#[derive(Debug, Error)]
pub enum FastEwqError {
    #[error("dataset is missing column `{0}`")]
    MissingColumn(String),
    #[error("line {line}: bad value `{value}` in column `{column}`")]
    BadField {
        line: u64,
        column: String,
        value: String,
    },
    #[error(
        "line {line}: quantization_type {quantization_type} disagrees with quantized={quantized}"
    )]
    InconsistentLabel {
        line: u64,
        quantization_type: QuantType,
        quantized: u8,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("need at least {needed} records, got {got}")]
    TooFewRecords { needed: usize, got: usize },
    #[error("feature `{0}` is constant in the training split")]
    ConstantFeature(String),
    #[error("training split contains a single class")]
    SingleClass,
    #[error("split fraction must be in (0, 1], got {0}")]
    BadSplit(f64),
    #[error("model has no trees")]
    Unfitted,
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("no rows to evaluate")]
    EmptyEvaluation,
    #[error("schema has no transformer blocks")]
    NoTransformerBlocks,
    #[error(transparent)]
    Plan(#[from] PlanError),
}

pub type Result<T> = std::result::Result<T, FastEwqError>;

/// Splits `records` per class in a seeded shuffle, keeping
/// `round(n_class * fraction)` of each class for training. Returns
/// (train, held_out); held-out rows keep their input order.
pub fn stratified_split(
    records: &[BlockRecord],
    fraction: f64,
    seed: u64,
) -> Result<(Vec<BlockRecord>, Vec<BlockRecord>)> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(FastEwqError::BadSplit(fraction));
    }
    if fraction < 1.0 && records.len() < MIN_SPLIT_RECORDS {
        return Err(FastEwqError::TooFewRecords {
            needed: MIN_SPLIT_RECORDS,
            got: records.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train_idx = Vec::new();
    let mut held_idx = Vec::new();
    for class in [0u8, 1] {
        let mut idx: Vec<usize> = (0..records.len())
            .filter(|&i| records[i].label() == class)
            .collect();
        idx.shuffle(&mut rng);
        let n_train = (idx.len() as f64 * fraction).round() as usize;
        held_idx.extend_from_slice(&idx[n_train..]);
        idx.truncate(n_train);
        train_idx.extend(idx);
    }
    held_idx.sort_unstable();
    let pick = |v: &[usize]| v.iter().map(|&i| records[i].clone()).collect::<Vec<_>>();
    Ok((pick(&train_idx), pick(&held_idx)))
}

/// Splits, fits the scaler on the training part and trains the forest.
/// With `fraction == 1.0` every record is used for training and the
/// held-out list is empty.
pub fn train_forest(
    records: &[BlockRecord],
    fraction: f64,
    params: &ForestParams,
) -> Result<(ForestModel, Vec<BlockRecord>)> {
    train_forest_with(records, fraction, params, StdConvention::default())
}

pub fn train_forest_with(
    records: &[BlockRecord],
    fraction: f64,
    params: &ForestParams,
    convention: StdConvention,
) -> Result<(ForestModel, Vec<BlockRecord>)> {
    if params.n_trees == 0 {
        return Err(FastEwqError::Unfitted);
    }
    let (train, held_out) = stratified_split(records, fraction, params.seed)?;
    let y: Vec<u8> = train.iter().map(BlockRecord::label).collect();
    if !(y.contains(&0) && y.contains(&1)) {
        return Err(FastEwqError::SingleClass);
    }
    let raw: Vec<[f64; 3]> = train.iter().map(BlockRecord::features).collect();
    let scaler = fit_scaler(&raw, convention)?;
    let x: Vec<[f64; 3]> = raw.iter().map(|r| scaler.transform(r)).collect();
    log::info!(
        "training {} trees on {} rows ({} held out)",
        params.n_trees,
        train.len(),
        held_out.len()
    );
    Ok((ForestModel::fit_scaled(&x, &y, scaler, params), held_out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_keeps_class_ratio() {
        let rows = synthetic_half_split(200, 11);
        let (train, held) = stratified_split(&rows, 0.7, 5).unwrap();
        assert_eq!(train.len() + held.len(), 200);
        for class in [0, 1] {
            let n = rows.iter().filter(|r| r.label() == class).count() as f64;
            let t = train.iter().filter(|r| r.label() == class).count() as f64;
            assert!((t - 0.7 * n).abs() <= 1.0);
        }
    }

    #[test]
    fn full_split_has_no_held_out() {
        let rows = synthetic_half_split(50, 2);
        let (train, held) = stratified_split(&rows, 1.0, 0).unwrap();
        assert_eq!(train.len(), 50);
        assert!(held.is_empty());
    }

    #[test]
    fn split_errors() {
        let rows = synthetic_half_split(9, 2);
        assert!(matches!(
            stratified_split(&rows, 0.7, 0),
            Err(FastEwqError::TooFewRecords { needed: 10, got: 9 })
        ));
        assert!(matches!(
            stratified_split(&rows, 0.0, 0),
            Err(FastEwqError::BadSplit(_))
        ));
        assert!(matches!(
            stratified_split(&rows, 1.5, 0),
            Err(FastEwqError::BadSplit(_))
        ));
    }

    #[test]
    fn single_class_is_rejected() {
        let rows: Vec<BlockRecord> = (2..20)
            .map(|e| BlockRecord::new("m", 32, e, 1000 + e, QuantType::Raw))
            .collect();
        assert!(matches!(
            train_forest(&rows, 1.0, &ForestParams::default()),
            Err(FastEwqError::SingleClass)
        ));
    }

    #[test]
    fn stump_forest_is_majority_predictor() {
        let rows = synthetic_half_split(60, 4);
        let params = ForestParams {
            n_trees: 1,
            max_depth: Some(0),
            bootstrap: false,
            ..ForestParams::default()
        };
        let (model, _) = train_forest(&rows, 1.0, &params).unwrap();
        let ones = rows.iter().filter(|r| r.label() == 1).count();
        let majority = u8::from(2 * ones > rows.len());
        for r in &rows {
            assert_eq!(model.predict(&r.features()).unwrap().class, majority);
        }
    }

    #[test]
    fn reproducible_and_round_trips() {
        let rows = synthetic_half_split(120, 9);
        let params = ForestParams {
            n_trees: 12,
            seed: 77,
            ..ForestParams::default()
        };
        let (a, ha) = train_forest(&rows, 0.7, &params).unwrap();
        let (b, hb) = train_forest(&rows, 0.7, &params).unwrap();
        assert_eq!(a, b);
        assert_eq!(ha, hb);
        let text = serde_json::to_string(&a).unwrap();
        let back: ForestModel = serde_json::from_str(&text).unwrap();
        assert_eq!(back, a);
        for r in &rows {
            assert_eq!(
                back.predict(&r.features()).unwrap(),
                a.predict(&r.features()).unwrap()
            );
        }
    }
}
