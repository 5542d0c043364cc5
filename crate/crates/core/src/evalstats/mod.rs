//! Benchmark statistics from recorded answer log-probabilities.
//!
//! Each multiple-choice question carries the log-probabilities of its four
//! answer letters as seen among the top candidate tokens. Choices that did
//! not make the cut are missing and get a default log-probability.

pub mod stats;
pub mod student_t;

use std::collections::BTreeMap;
use std::io::BufRead;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numeric::compensated_sum;

pub use stats::{
    abs_diff, cohens_d, compare, composite_score, paired_t_test, ComparisonReport, Effect,
    ModelResult, TTest, VariantResults, VariantScores, Verdict, Weights,
};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no records")]
    Empty,
    #[error("line {line}: {message}")]
    BadRecord { line: usize, message: String },
    #[error("perplexity must be positive, got {0}")]
    NonPositivePerplexity(f64),
    #[error("paired samples differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least 2 pairs, got {0}")]
    TooFewPairs(usize),
    #[error("differences have zero variance")]
    ZeroVariance,
    #[error("pair mismatch: `{0}` vs `{1}`")]
    Unpaired(String, String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, EvalError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub id: String,
    pub subject: String,
    /// Index of the right answer, 0..=3.
    pub correct: u8,
    /// `None` when the choice was not among the recorded candidates.
    pub logprobs: [Option<f64>; 4],
    pub predicted: u8,
}

impl EvalRecord {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.correct > 3 || self.predicted > 3 {
            return Err(format!(
                "choice index out of range (correct {}, predicted {})",
                self.correct, self.predicted
            ));
        }
        if let Some(v) = self.logprobs.iter().flatten().find(|v| !v.is_finite()) {
            return Err(format!("non-finite log-probability {v}"));
        }
        Ok(())
    }
}

/// What to do when none of the four choices was recorded.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AllMissing {
    /// Use `all_missing_probability` as p(correct) directly.
    #[default]
    DirectProbability,
    /// Fill every slot with the default and take the softmax, which gives
    /// p = 1/4.
    Softmax,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerplexityConfig {
    pub missing_logprob: f64,
    pub all_missing_probability: f64,
    pub all_missing: AllMissing,
}

impl Default for PerplexityConfig {
    fn default() -> Self {
        Self {
            missing_logprob: -100.0,
            all_missing_probability: 1e-6,
            all_missing: AllMissing::DirectProbability,
        }
    }
}

/// `-ln p(correct)` with p the softmax over the four choices.
pub fn question_perplexity(record: &EvalRecord, cfg: &PerplexityConfig) -> f64 {
    if record.logprobs.iter().all(Option::is_none)
        && cfg.all_missing == AllMissing::DirectProbability
    {
        return -cfg.all_missing_probability.ln();
    }
    let l: [f64; 4] = std::array::from_fn(|i| record.logprobs[i].unwrap_or(cfg.missing_logprob));
    let m = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_z = compensated_sum(l.iter().map(|v| (v - m).exp())).ln();
    log_z - (l[record.correct as usize] - m)
}

/// Reads one JSON record per line; blank lines are skipped.
pub fn read_records<R: BufRead>(reader: R) -> Result<Vec<EvalRecord>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |message: String| EvalError::BadRecord {
            line: i + 1,
            message,
        };
        let record: EvalRecord = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        record.validate().map_err(bad)?;
        out.push(record);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionResult {
    pub id: String,
    pub subject: String,
    pub is_correct: bool,
    pub perplexity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectSummary {
    pub questions: usize,
    pub accuracy: f64,
    /// Mean question perplexity within the subject.
    pub perplexity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub subjects: BTreeMap<String, SubjectSummary>,
    pub questions: usize,
    pub accuracy: f64,
    pub mean_question_perplexity: f64,
    /// `exp` of the mean question perplexity.
    pub perplexity: f64,
    pub per_question: Vec<QuestionResult>,
}

fn mean_of(values: impl Iterator<Item = f64>, n: usize) -> f64 {
    compensated_sum(values) / n as f64
}

pub fn summarize(records: &[EvalRecord], cfg: &PerplexityConfig) -> Result<EvalSummary> {
    if records.is_empty() {
        return Err(EvalError::Empty);
    }
    let per_question: Vec<QuestionResult> = records
        .iter()
        .map(|r| QuestionResult {
            id: r.id.clone(),
            subject: r.subject.clone(),
            is_correct: r.predicted == r.correct,
            perplexity: question_perplexity(r, cfg),
        })
        .collect();

    let mut by_subject: BTreeMap<&str, Vec<&QuestionResult>> = BTreeMap::new();
    for q in &per_question {
        by_subject.entry(&q.subject).or_default().push(q);
    }
    let subjects = by_subject
        .into_iter()
        .map(|(name, qs)| {
            let n = qs.len();
            let summary = SubjectSummary {
                questions: n,
                accuracy: qs.iter().filter(|q| q.is_correct).count() as f64 / n as f64,
                perplexity: mean_of(qs.iter().map(|q| q.perplexity), n),
            };
            (name.to_owned(), summary)
        })
        .collect();

    let n = per_question.len();
    let mean_ppl = mean_of(per_question.iter().map(|q| q.perplexity), n);
    Ok(EvalSummary {
        subjects,
        questions: n,
        accuracy: per_question.iter().filter(|q| q.is_correct).count() as f64 / n as f64,
        mean_question_perplexity: mean_ppl,
        perplexity: mean_ppl.exp(),
        per_question,
    })
}
