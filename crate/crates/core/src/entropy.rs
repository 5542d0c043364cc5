//! Softmax-normalized Shannon entropy of weight tensors and size-weighted
//! block entropy.
//!
//! For a flattened tensor `w` of length `n` with `p = softmax(w)`:
//!
//! ```text
//! H(w)     = -Σ p_i ln(p_i + ε)
//! H_block  = Σ |W_i| H(W_i) / Σ |W_i|
//! ```
//!
//! All values are in nats. ε sits inside the logarithm only and the
//! probabilities are not renormalized, so a single-element tensor (p = 1)
//! has the slightly negative entropy `-ln(1 + ε)`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numeric::{compensated_sum, CompensatedSum};
use crate::tensor_io::{decode_elements, Container, ModelSchema, TensorIoError};

#[derive(Debug, Error)]
pub enum EntropyError {
    #[error("softmax of an empty sequence")]
    Empty,
    #[error("non-finite input at element {0}")]
    NonFinite(usize),
    #[error("exponential sum overflowed; enable stabilization")]
    Overflow,
    #[error("epsilon must be positive, got {0}")]
    BadEpsilon(f64),
    #[error("block has zero total size")]
    ZeroSize,
    #[error(transparent)]
    Io(#[from] TensorIoError),
    #[error("tensor `{name}`: {source}")]
    Tensor {
        name: String,
        #[source]
        source: Box<EntropyError>,
    },
}

pub type Result<T> = std::result::Result<T, EntropyError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntropyConfig {
    pub epsilon: f64,
    /// Subtract the maximum before exponentiating.
    pub stabilize: bool,
}

impl Default for EntropyConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.01,
            stabilize: true,
        }
    }
}

impl EntropyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epsilon > 0.0 && self.epsilon.is_finite() {
            Ok(())
        } else {
            Err(EntropyError::BadEpsilon(self.epsilon))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntropy {
    pub name: String,
    pub entropy: f64,
    pub size: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockEntropyReport {
    pub exec_index: u64,
    pub block_entropy: f64,
    pub num_parameters: u64,
    pub per_tensor: Vec<TensorEntropy>,
}

/// The document written by `analyze`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub model_name: String,
    pub unit: String,
    pub config: EntropyConfig,
    pub blocks: Vec<BlockEntropyReport>,
}

/// Shift and normalizer of a softmax: `p_i = exp(x_i - shift) / total`.
#[derive(Debug, Clone, Copy)]
struct Normalizer {
    shift: f64,
    total: f64,
}

/// First pass: running maximum and Σ exp(x - max), rescaling the partial sum
/// whenever the maximum moves.
fn normalizer<I, E>(values: I, stabilize: bool) -> Result<Normalizer>
where
    I: Iterator<Item = std::result::Result<f64, E>>,
    EntropyError: From<E>,
{
    let mut shift = if stabilize { f64::NEG_INFINITY } else { 0.0 };
    let mut total = CompensatedSum::new();
    let mut n = 0usize;
    for (i, v) in values.enumerate() {
        let v = v?;
        if !v.is_finite() {
            return Err(EntropyError::NonFinite(i));
        }
        if stabilize && v > shift {
            if n > 0 {
                total.scale((shift - v).exp());
            }
            shift = v;
        }
        total.add((v - shift).exp());
        n += 1;
    }
    if n == 0 {
        return Err(EntropyError::Empty);
    }
    let total = total.value();
    if !total.is_finite() || total <= 0.0 {
        return Err(EntropyError::Overflow);
    }
    Ok(Normalizer { shift, total })
}

pub fn softmax(values: &[f64]) -> Result<Vec<f64>> {
    softmax_with(values, true)
}

pub fn softmax_with(values: &[f64], stabilize: bool) -> Result<Vec<f64>> {
    let norm = normalizer(values.iter().map(|&v| Ok::<_, EntropyError>(v)), stabilize)?;
    Ok(values
        .iter()
        .map(|v| (v - norm.shift).exp() / norm.total)
        .collect())
}

/// `-Σ p_i ln(p_i + ε)` with `p = softmax(values)`.
pub fn weight_entropy(values: &[f64], cfg: &EntropyConfig) -> Result<f64> {
    streaming_entropy(|| values.iter().map(|&v| Ok::<_, EntropyError>(v)), cfg)
}

/// Two-pass entropy over a re-iterable source, so probabilities are never
/// materialized. `source` is called once per pass.
pub fn streaming_entropy<F, I, E>(source: F, cfg: &EntropyConfig) -> Result<f64>
where
    F: Fn() -> I,
    I: Iterator<Item = std::result::Result<f64, E>>,
    EntropyError: From<E>,
{
    cfg.validate()?;
    let norm = normalizer(source(), cfg.stabilize)?;
    let mut acc = CompensatedSum::new();
    for v in source() {
        let p = (v? - norm.shift).exp() / norm.total;
        acc.add(p * (p + cfg.epsilon).ln());
    }
    Ok(-acc.value())
}

/// Size-weighted mean of per-tensor entropies.
pub fn block_entropy(per_tensor: &[(f64, u64)]) -> Result<f64> {
    if per_tensor.is_empty() {
        return Err(EntropyError::ZeroSize);
    }
    let total: u64 = per_tensor.iter().map(|&(_, size)| size).sum();
    if total == 0 {
        return Err(EntropyError::ZeroSize);
    }
    let weighted = compensated_sum(per_tensor.iter().map(|&(h, size)| h * size as f64));
    Ok(weighted / total as f64)
}

/// Entropy report for every transformer block of `schema`, read from
/// `container`. Tensors are processed in parallel; output order follows the
/// schema.
pub fn analyze_model(
    schema: &ModelSchema,
    container: &Container,
    cfg: &EntropyConfig,
) -> Result<Vec<BlockEntropyReport>> {
    cfg.validate()?;
    let blocks: Vec<_> = schema.transformer_blocks().collect();
    let jobs: Vec<_> = blocks.iter().flat_map(|b| b.tensors.iter()).collect();
    let entropies: Vec<f64> = jobs
        .par_iter()
        .map(|meta| {
            let wrap = |source: EntropyError| EntropyError::Tensor {
                name: meta.name.clone(),
                source: Box::new(source),
            };
            let bytes = container.read_bytes(meta).map_err(|e| wrap(e.into()))?;
            // Length is checked here; NaN surfaces per element in either pass.
            let elements = decode_elements(meta, &bytes).map_err(|e| wrap(e.into()))?;
            streaming_entropy(|| elements.clone(), cfg).map_err(wrap)
        })
        .collect::<Result<_>>()?;

    let mut entropies = entropies.into_iter();
    blocks
        .into_iter()
        .map(|block| {
            let per_tensor: Vec<TensorEntropy> = block
                .tensors
                .iter()
                .map(|t| TensorEntropy {
                    name: t.name.clone(),
                    entropy: entropies.next().expect("one entropy per tensor"),
                    size: t.num_elements(),
                })
                .collect();
            let pairs: Vec<_> = per_tensor.iter().map(|t| (t.entropy, t.size)).collect();
            Ok(BlockEntropyReport {
                exec_index: block.exec_index,
                block_entropy: block_entropy(&pairs)?,
                num_parameters: block.num_parameters,
                per_tensor,
            })
        })
        .collect()
}
