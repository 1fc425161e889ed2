//! Accuracy/length summaries and the Accuracy-Efficiency Score (AES).
//!
//! AES trades relative length reduction against relative accuracy change:
//! gains in accuracy earn `eta` per unit, losses cost `theta` per unit, and
//! each unit of length reduction earns `phi`.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("no samples to summarize")]
    EmptyInput,
    #[error("baseline {0} is zero, relative change is undefined")]
    BaselineDegenerate(&'static str),
    #[error("invalid value: {0}")]
    InvalidValue(String),
}

/// Accuracy in percent and mean response length in tokens.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub accuracy: f64,
    pub mean_length: f64,
    #[serde(default)]
    pub sample_count: usize,
}

impl EvalSummary {
    pub fn new(accuracy: f64, mean_length: f64) -> Self {
        Self {
            accuracy,
            mean_length,
            sample_count: 0,
        }
    }
}

/// Summarizes `(correct, token_count)` pairs.
pub fn summarize<I>(samples: I) -> Result<EvalSummary, EvalError>
where
    I: IntoIterator<Item = (bool, usize)>,
{
    let (mut n, mut correct, mut tokens) = (0usize, 0usize, 0usize);
    for (c, t) in samples {
        n += 1;
        correct += c as usize;
        tokens += t;
    }
    if n == 0 {
        return Err(EvalError::EmptyInput);
    }
    Ok(EvalSummary {
        accuracy: 100.0 * correct as f64 / n as f64,
        mean_length: tokens as f64 / n as f64,
        sample_count: n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AesConfig {
    pub phi: f64,
    pub eta: f64,
    pub theta: f64,
}

impl Default for AesConfig {
    fn default() -> Self {
        Self {
            phi: 1.0,
            eta: 3.0,
            theta: 5.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AesReport {
    /// Relative length reduction, positive when shorter than baseline.
    pub delta_length: f64,
    /// Relative accuracy change, positive when more accurate than baseline.
    pub delta_acc: f64,
    pub score: f64,
}

impl fmt::Display for AesReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "AES {:.2} (length -{:.1}%, accuracy {:+.1}%)",
            self.score,
            100.0 * self.delta_length,
            100.0 * self.delta_acc
        )
    }
}

pub fn aes(
    baseline: &EvalSummary,
    model: &EvalSummary,
    cfg: &AesConfig,
) -> Result<AesReport, EvalError> {
    for v in [
        baseline.accuracy,
        baseline.mean_length,
        model.accuracy,
        model.mean_length,
    ] {
        if !v.is_finite() || v < 0.0 {
            return Err(EvalError::InvalidValue(format!("{v}")));
        }
    }
    if baseline.mean_length == 0.0 {
        return Err(EvalError::BaselineDegenerate("length"));
    }
    if baseline.accuracy == 0.0 {
        return Err(EvalError::BaselineDegenerate("accuracy"));
    }
    let delta_length = (baseline.mean_length - model.mean_length) / baseline.mean_length;
    let delta_acc = (model.accuracy - baseline.accuracy) / baseline.accuracy;
    let acc_term = if delta_acc >= 0.0 {
        cfg.eta * delta_acc.abs()
    } else {
        -cfg.theta * delta_acc.abs()
    };
    Ok(AesReport {
        delta_length,
        delta_acc,
        score: cfg.phi * delta_length + acc_term,
    })
}
