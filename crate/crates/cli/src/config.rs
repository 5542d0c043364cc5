//! Run configuration: built-in defaults, then the file given by `--config`
//! or `EWQ_CONFIG`, then command-line flags.

use std::path::Path;
use std::str::FromStr;

use anyhow::{bail, Context};
use ewq_core::evalstats::{AllMissing, PerplexityConfig, Weights};
use ewq_core::fastewq::StdConvention;
use ewq_core::planner::{PlacementStrategy, Precision, PrecisionTable};
use ewq_core::tensor_io::DEFAULT_LAYER_PATTERN;
use serde::{Deserialize, Serialize};

/// A `raw=16,q8=8,q4=4.25,q1_58=2` style override. Unlisted precisions keep
/// their current width.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BitsSpec(pub Vec<(Precision, f64)>);

impl BitsSpec {
    pub fn apply(&self, table: &mut PrecisionTable) {
        for &(p, bits) in &self.0 {
            table.set(p, bits);
        }
    }
}

impl FromStr for BitsSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let mut out = Vec::new();
        for item in s.split(',').map(str::trim).filter(|i| !i.is_empty()) {
            let (name, value) = item
                .split_once('=')
                .ok_or_else(|| format!("expected name=bits, got `{item}`"))?;
            let p = match name.trim() {
                "raw" => Precision::Raw,
                "q8" => Precision::Q8,
                "q4" => Precision::Q4,
                "q1_58" => Precision::Q1_58,
                other => return Err(format!("unknown precision `{other}`")),
            };
            let bits: f64 = value
                .trim()
                .parse()
                .map_err(|_| format!("bad bit width `{value}` for {name}"))?;
            out.push((p, bits));
        }
        if out.is_empty() {
            return Err("empty bit table".into());
        }
        Ok(Self(out))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForestConfig {
    pub trees: usize,
    pub max_depth: Option<usize>,
    pub min_samples_split: usize,
    pub seed: u64,
    pub split: f64,
    pub std: StdConvention,
}

impl Default for ForestConfig {
    fn default() -> Self {
        Self {
            trees: 100,
            max_depth: None,
            min_samples_split: 2,
            seed: 0,
            split: 0.7,
            std: StdConvention::Sample,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub epsilon: f64,
    pub x: f64,
    pub bits: Option<String>,
    pub layer_pattern: String,
    pub placement: PlacementStrategy,
    pub forest: ForestConfig,
    pub weights: Weights,
    pub perplexity: PerplexityConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            epsilon: 0.01,
            x: 1.0,
            bits: None,
            layer_pattern: DEFAULT_LAYER_PATTERN.to_owned(),
            placement: PlacementStrategy::FirstFitDecreasing,
            forest: ForestConfig::default(),
            weights: Weights::default(),
            perplexity: PerplexityConfig {
                all_missing: AllMissing::DirectProbability,
                ..PerplexityConfig::default()
            },
        }
    }
}

impl Config {
    pub fn from_file(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn precision_table(&self, flag: Option<&BitsSpec>) -> anyhow::Result<PrecisionTable> {
        let mut table = PrecisionTable::default();
        if let Some(bits) = &self.bits {
            let spec: BitsSpec = bits
                .parse()
                .map_err(|e| anyhow::anyhow!("config `bits`: {e}"))?;
            spec.apply(&mut table);
        }
        if let Some(spec) = flag {
            spec.apply(&mut table);
        }
        if table.validate().is_err() {
            bail!(
                "bit table must be positive and strictly decreasing raw > q8 > q4 > q1_58 (got {}/{}/{}/{})",
                table.raw,
                table.q8,
                table.q4,
                table.q1_58
            );
        }
        Ok(table)
    }
}
