//! Entropy-weighted quantization planning.
//!
//! - [`tensor_io`]: safetensors-layout reading and block grouping
//! - [`entropy`]: softmax entropy per tensor and per block
//! - [`planner`]: threshold decisions and capacity-constrained distribution
//! - [`fastewq`]: metadata-only random-forest classifier and its planner
//! - [`evalstats`]: perplexity aggregation, composite score, significance tests

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod entropy;
pub mod evalstats;
pub mod fastewq;
pub mod numeric;
pub mod planner;
pub mod tensor_io;

pub use entropy::{AnalysisReport, BlockEntropyReport, EntropyConfig};
pub use planner::{Cluster, MachineSpec, Precision, PrecisionTable, QuantPlan};
pub use tensor_io::{Container, GroupingRule, ModelSchema, TensorMeta};
