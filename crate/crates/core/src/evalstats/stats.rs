//! Composite score and paired comparisons between two evaluation variants.

use std::fmt;

use serde::{Deserialize, Serialize};

use super::student_t::two_sided_p;
use super::{EvalError, Result};
use crate::numeric::{compensated_sum, mean, sample_variance};

/// `w1 * ln(perplexity) - w2 * accuracy`; lower is better.
pub fn composite_score(accuracy: f64, perplexity: f64, w1: f64, w2: f64) -> Result<f64> {
    if !(perplexity > 0.0) || !perplexity.is_finite() {
        return Err(EvalError::NonPositivePerplexity(perplexity));
    }
    Ok(w1 * perplexity.ln() - w2 * accuracy)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    #[serde(rename = "significant")]
    Significant,
    #[serde(rename = "marginally significant")]
    MarginallySignificant,
    #[serde(rename = "not significant")]
    NotSignificant,
}

impl Verdict {
    pub fn from_p(p: f64) -> Self {
        if p < 0.05 {
            Verdict::Significant
        } else if p < 0.10 {
            Verdict::MarginallySignificant
        } else {
            Verdict::NotSignificant
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Significant => "significant",
            Verdict::MarginallySignificant => "marginally significant",
            Verdict::NotSignificant => "not significant",
        }
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub p: f64,
    pub df: u64,
    pub mean_diff: f64,
    pub verdict: Verdict,
}

fn check_paired(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(EvalError::LengthMismatch(a.len(), b.len()));
    }
    if a.len() < 2 {
        return Err(EvalError::TooFewPairs(a.len()));
    }
    Ok(())
}

/// Paired t-test on `a - b`, sample standard deviation, two-sided p.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTest> {
    check_paired(a, b)?;
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = d.len() as f64;
    let s_d = sample_variance(&d).sqrt();
    if !(s_d > 0.0) {
        return Err(EvalError::ZeroVariance);
    }
    let mean_diff = mean(&d);
    let t = mean_diff / (s_d / n.sqrt());
    let df = d.len() as u64 - 1;
    let p = two_sided_p(t, df as f64);
    Ok(TTest {
        t,
        p,
        df,
        mean_diff,
        verdict: Verdict::from_p(p),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Effect {
    Negligible,
    Small,
    Medium,
    Large,
}

impl Effect {
    /// Bands on |d|; exactly 0.8 is still medium.
    pub fn from_d(d: f64) -> Self {
        let d = d.abs();
        if d < 0.2 {
            Effect::Negligible
        } else if d < 0.5 {
            Effect::Small
        } else if d <= 0.8 {
            Effect::Medium
        } else {
            Effect::Large
        }
    }
}

/// Cohen's d with pooled sample variance.
pub fn cohens_d(a: &[f64], b: &[f64]) -> Result<(f64, Effect)> {
    if a.len() < 2 || b.len() < 2 {
        return Err(EvalError::TooFewPairs(a.len().min(b.len())));
    }
    let (n1, n2) = (a.len() as f64, b.len() as f64);
    let pooled =
        ((n1 - 1.0) * sample_variance(a) + (n2 - 1.0) * sample_variance(b)) / (n1 + n2 - 2.0);
    if !(pooled > 0.0) {
        return Err(EvalError::ZeroVariance);
    }
    let d = (mean(a) - mean(b)) / pooled.sqrt();
    Ok((d, Effect::from_d(d)))
}

/// Mean absolute paired difference.
pub fn abs_diff(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(EvalError::LengthMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(EvalError::Empty);
    }
    Ok(compensated_sum(a.iter().zip(b).map(|(x, y)| (x - y).abs())) / a.len() as f64)
}

/// One model's result under one variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelResult {
    pub model: String,
    pub accuracy: f64,
    pub perplexity: f64,
}

/// All models evaluated under one variant (for example a quantization mode).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantResults {
    pub variant: String,
    pub results: Vec<ModelResult>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Weights {
    pub w1: f64,
    pub w2: f64,
}

impl Default for Weights {
    fn default() -> Self {
        Self { w1: 1.0, w2: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantScores {
    pub variant: String,
    pub composite: Vec<f64>,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub models: Vec<String>,
    pub weights: Weights,
    pub a: VariantScores,
    pub b: VariantScores,
    pub abs_diff: f64,
    /// Absent when the paired differences have no spread.
    pub t: Option<f64>,
    pub p: Option<f64>,
    pub verdict: String,
    pub cohens_d: Option<f64>,
    pub effect: Option<Effect>,
}

fn scores(v: &VariantResults, w: Weights) -> Result<VariantScores> {
    let composite = v
        .results
        .iter()
        .map(|r| composite_score(r.accuracy, r.perplexity, w.w1, w.w2))
        .collect::<Result<Vec<_>>>()?;
    Ok(VariantScores {
        variant: v.variant.clone(),
        mean: mean(&composite),
        composite,
    })
}

/// Pairs the two variants model by model and compares composite scores.
/// Differences without spread are reported as a verdict instead of an
/// error: "identical samples" when every pair is equal, "constant
/// difference" otherwise.
pub fn compare(
    a: &VariantResults,
    b: &VariantResults,
    weights: Weights,
) -> Result<ComparisonReport> {
    if a.results.len() != b.results.len() {
        return Err(EvalError::LengthMismatch(a.results.len(), b.results.len()));
    }
    if a.results.len() < 2 {
        return Err(EvalError::TooFewPairs(a.results.len()));
    }
    for (x, y) in a.results.iter().zip(&b.results) {
        if x.model != y.model {
            return Err(EvalError::Unpaired(x.model.clone(), y.model.clone()));
        }
    }
    let sa = scores(a, weights)?;
    let sb = scores(b, weights)?;
    let (t, p, verdict) = match paired_t_test(&sa.composite, &sb.composite) {
        Ok(r) => (Some(r.t), Some(r.p), r.verdict.to_string()),
        Err(EvalError::ZeroVariance) => {
            let same = sa.composite.iter().zip(&sb.composite).all(|(x, y)| x == y);
            let verdict = if same {
                "identical samples"
            } else {
                "constant difference"
            };
            (None, None, verdict.to_owned())
        }
        Err(e) => return Err(e),
    };
    let (cohens_d, effect) = match cohens_d(&sa.composite, &sb.composite) {
        Ok((d, e)) => (Some(d), Some(e)),
        Err(EvalError::ZeroVariance) => (None, None),
        Err(e) => return Err(e),
    };
    Ok(ComparisonReport {
        models: a.results.iter().map(|r| r.model.clone()).collect(),
        weights,
        abs_diff: abs_diff(&sa.composite, &sb.composite)?,
        a: sa,
        b: sb,
        t,
        p,
        verdict,
        cohens_d,
        effect,
    })
}
