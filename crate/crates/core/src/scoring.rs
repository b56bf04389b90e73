//! Verdict scoring, aggregation and threshold classification.
//!
//! An original-prompt verdict scores +1 for `correct`, 0 for `undecidable`
//! and -1 for `incorrect`. The transformed prompt negates the oracle, so its
//! scoring is inverted. The consistency score is the sum over both sides
//! divided by the number of verdicts, giving a value in [-1, 1] where
//! negative means the documentation disagrees with the captured behavior.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prompt::{Label, LabelMode};

/// Which prompt sides feed the score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMode {
    #[default]
    Metamorphic,
    OriginalOnly,
    TransformedOnly,
}

impl ScoreMode {
    pub const ALL: [ScoreMode; 3] = [
        ScoreMode::Metamorphic,
        ScoreMode::OriginalOnly,
        ScoreMode::TransformedOnly,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ScoreMode::Metamorphic => "metamorphic",
            ScoreMode::OriginalOnly => "original_only",
            ScoreMode::TransformedOnly => "transformed_only",
        }
    }

    pub fn uses_original(self) -> bool {
        self != ScoreMode::TransformedOnly
    }

    pub fn uses_transformed(self) -> bool {
        self != ScoreMode::OriginalOnly
    }
}

impl fmt::Display for ScoreMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScoreMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "metamorphic" => Ok(ScoreMode::Metamorphic),
            "original_only" | "original" => Ok(ScoreMode::OriginalOnly),
            "transformed_only" | "transformed" => Ok(ScoreMode::TransformedOnly),
            other => Err(format!(
                "unknown mode {other:?} (expected metamorphic, original_only or transformed_only)"
            )),
        }
    }
}

/// Predicted class of a pair at a threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Prediction {
    Inconsistent,
    Consistent,
}

impl fmt::Display for Prediction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Prediction::Inconsistent => "inconsistent",
            Prediction::Consistent => "consistent",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreBreakdown {
    pub pair_id: String,
    /// Nominal repetitions per prompt side.
    pub n: usize,
    pub original_sum: i64,
    pub transformed_sum: i64,
    /// Verdicts actually counted per side; below `n` only when two-label
    /// unparseable responses were dropped, zero for an unused side.
    pub original_count: usize,
    pub transformed_count: usize,
    pub normalized: f64,
    pub mode: ScoreMode,
    pub label_mode: LabelMode,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ScoringError {
    #[error("{side} side has {got} verdicts, expected {expected}")]
    LengthMismatch {
        side: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("two-label scoring received an undecidable verdict")]
    UndecidableInTwoLabel,
    #[error("no verdicts to score")]
    NoVerdicts,
    #[error("n must be at least 1")]
    ZeroRepetitions,
}

pub fn f_orig(label: Label) -> i64 {
    match label {
        Label::Correct => 1,
        Label::Undecidable => 0,
        Label::Incorrect => -1,
    }
}

pub fn f_tran(label: Label) -> i64 {
    match label {
        Label::Incorrect => 1,
        Label::Undecidable => 0,
        Label::Correct => -1,
    }
}

fn check_side(
    side: &'static str,
    verdicts: &[Label],
    n: usize,
    label_mode: LabelMode,
) -> Result<(), ScoringError> {
    let ok = match label_mode {
        LabelMode::ThreeLabel => verdicts.len() == n,
        // dropped queries shrink a side below n
        LabelMode::TwoLabel => verdicts.len() <= n,
    };
    if !ok {
        return Err(ScoringError::LengthMismatch {
            side,
            got: verdicts.len(),
            expected: n,
        });
    }
    if label_mode == LabelMode::TwoLabel && verdicts.contains(&Label::Undecidable) {
        return Err(ScoringError::UndecidableInTwoLabel);
    }
    Ok(())
}

/// Sums both sides and normalizes by the number of counted verdicts.
///
/// In three-label mode each used side must hold exactly `n` verdicts. In
/// two-label mode a side may hold fewer (dropped unparseable answers); the
/// divisor is then the actual count. An unused side is ignored entirely.
pub fn aggregate(
    pair_id: &str,
    original: &[Label],
    transformed: &[Label],
    n: usize,
    mode: ScoreMode,
    label_mode: LabelMode,
) -> Result<ScoreBreakdown, ScoringError> {
    if n == 0 {
        return Err(ScoringError::ZeroRepetitions);
    }
    let (original, transformed) = (
        if mode.uses_original() { original } else { &[][..] },
        if mode.uses_transformed() { transformed } else { &[][..] },
    );
    if mode.uses_original() {
        check_side("original", original, n, label_mode)?;
    }
    if mode.uses_transformed() {
        check_side("transformed", transformed, n, label_mode)?;
    }
    let original_sum: i64 = original.iter().copied().map(f_orig).sum();
    let transformed_sum: i64 = transformed.iter().copied().map(f_tran).sum();
    let count = original.len() + transformed.len();
    if count == 0 {
        return Err(ScoringError::NoVerdicts);
    }
    Ok(ScoreBreakdown {
        pair_id: pair_id.to_string(),
        n,
        original_sum,
        transformed_sum,
        original_count: original.len(),
        transformed_count: transformed.len(),
        normalized: (original_sum + transformed_sum) as f64 / count as f64,
        mode,
        label_mode,
    })
}

/// Tolerance for comparing a score to a threshold; scores are ratios of
/// small integers so anything closer than this is the same value.
pub const SCORE_EPSILON: f64 = 1e-9;

/// Inconsistent iff the score is at or below the threshold.
pub fn classify(normalized: f64, threshold: f64) -> Prediction {
    if normalized <= threshold + SCORE_EPSILON {
        Prediction::Inconsistent
    } else {
        Prediction::Consistent
    }
}

/// `{-0.1, -0.2, ..., -1.0}`.
pub fn default_thresholds() -> Vec<f64> {
    (1..=10).map(|k| -(k as f64) / 10.0).collect()
}

pub fn validate_threshold(threshold: f64) -> Result<f64, String> {
    if threshold.is_finite() && (-1.0..0.0).contains(&threshold) {
        Ok(threshold)
    } else {
        Err(format!("threshold {threshold} outside [-1, 0)"))
    }
}
