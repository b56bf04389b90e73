//! Threshold sweeps, score-bin ratios and rank correlation over results.
//!
//! The positive class throughout is "inconsistent" (the test carries an
//! oracle that contradicts the documentation).

use std::fmt;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::corpus::{GroundTruth, SubjectPair};
use crate::gateway::Backend;
use crate::oracle::TransformRule;
use crate::pipeline::{self, PipelineConfig, PipelineError};
use crate::prompt::{Label, LabelMode, PromptTemplate};
use crate::scoring::{self, Prediction, ScoreBreakdown, ScoreMode, ScoringError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no labeled results to evaluate (every ground_truth is unknown); label the corpus or evaluate a labeled subset")]
    NoLabeledResults,
    #[error("sequences differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("correlation needs at least 3 points, got {0}")]
    TooFewPoints(usize),
    #[error("correlation undefined: {0} sequence is constant")]
    ConstantSequence(&'static str),
    #[error("non-finite value in input")]
    NonFinite,
    #[error("bin width {0} does not divide [-1, 1] into whole bins")]
    InvalidBinWidth(f64),
    #[error("results line {line}: {message}")]
    MalformedResults { line: usize, message: String },
    #[error(transparent)]
    Scoring(#[from] ScoringError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdPrediction {
    pub threshold: f64,
    pub predicted: Prediction,
}

/// Per-pair outcome: score breakdown plus the raw verdict sequences so a
/// result can be rescored under another mode or a smaller `n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyResult {
    pub pair_id: String,
    pub ground_truth: GroundTruth,
    pub applied_rule: TransformRule,
    pub breakdown: ScoreBreakdown,
    pub predictions: Vec<ThresholdPrediction>,
    /// One slot per query; `None` marks a dropped (unparseable) answer.
    pub original_verdicts: Vec<Option<Label>>,
    pub transformed_verdicts: Vec<Option<Label>>,
}

impl ConsistencyResult {
    pub fn new(
        ground_truth: GroundTruth,
        applied_rule: TransformRule,
        breakdown: ScoreBreakdown,
        thresholds: &[f64],
        original_verdicts: Vec<Option<Label>>,
        transformed_verdicts: Vec<Option<Label>>,
    ) -> Self {
        let predictions = predict(breakdown.normalized, thresholds);
        ConsistencyResult {
            pair_id: breakdown.pair_id.clone(),
            ground_truth,
            applied_rule,
            breakdown,
            predictions,
            original_verdicts,
            transformed_verdicts,
        }
    }

    pub fn score(&self) -> f64 {
        self.breakdown.normalized
    }

    /// Recomputes the breakdown from the first `n` verdict slots of each side.
    pub fn rescore(
        &self,
        mode: ScoreMode,
        n: usize,
        thresholds: &[f64],
    ) -> Result<ConsistencyResult, ScoringError> {
        for (side, used, slots) in [
            ("original", mode.uses_original(), &self.original_verdicts),
            ("transformed", mode.uses_transformed(), &self.transformed_verdicts),
        ] {
            if used && slots.len() < n {
                return Err(ScoringError::LengthMismatch {
                    side,
                    got: slots.len(),
                    expected: n,
                });
            }
        }
        let prefix = |v: &[Option<Label>]| -> Vec<Label> {
            v.iter().take(n).flatten().copied().collect()
        };
        let original = prefix(&self.original_verdicts);
        let transformed = prefix(&self.transformed_verdicts);
        let breakdown = scoring::aggregate(
            &self.pair_id,
            &original,
            &transformed,
            n,
            mode,
            self.breakdown.label_mode,
        )?;
        Ok(ConsistencyResult::new(
            self.ground_truth,
            self.applied_rule,
            breakdown,
            thresholds,
            self.original_verdicts.iter().take(n).copied().collect(),
            self.transformed_verdicts.iter().take(n).copied().collect(),
        ))
    }
}

pub fn predict(normalized: f64, thresholds: &[f64]) -> Vec<ThresholdPrediction> {
    thresholds
        .iter()
        .map(|&threshold| ThresholdPrediction {
            threshold,
            predicted: scoring::classify(normalized, threshold),
        })
        .collect()
}

pub fn read_results<R: BufRead>(reader: R) -> Result<Vec<ConsistencyResult>, EvalError> {
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let malformed = |message: String| EvalError::MalformedResults {
            line: idx + 1,
            message,
        };
        let line = line.map_err(|e| malformed(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))?);
    }
    Ok(out)
}

pub fn load_results(path: impl AsRef<Path>) -> Result<Vec<ConsistencyResult>, EvalError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| EvalError::Io {
        path: path.display().to_string(),
        source,
    })?;
    read_results(BufReader::new(file))
}

pub fn write_results_to<W: Write>(results: &[ConsistencyResult], mut w: W) -> io::Result<()> {
    for r in results {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

// ---------------------------------------------------------------------------
// threshold sweep

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdRow {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
    /// False when nothing was predicted inconsistent (precision reported as 0).
    pub precision_defined: bool,
}

impl ThresholdRow {
    pub fn from_counts(threshold: f64, tp: usize, fp: usize, fn_: usize, tn: usize) -> Self {
        let precision_defined = tp + fp > 0;
        let precision = if precision_defined {
            tp as f64 / (tp + fp) as f64
        } else {
            0.0
        };
        let recall = if tp + fn_ > 0 {
            tp as f64 / (tp + fn_) as f64
        } else {
            0.0
        };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        ThresholdRow {
            threshold,
            precision,
            recall,
            f1,
            tp,
            fp,
            fn_,
            tn,
            precision_defined,
        }
    }
}

/// `(score, is_inconsistent)` for every labeled result.
pub fn labeled_scores(results: &[ConsistencyResult]) -> Vec<(f64, bool)> {
    results
        .iter()
        .filter(|r| r.ground_truth.is_labeled())
        .map(|r| (r.score(), r.ground_truth == GroundTruth::Inconsistent))
        .collect()
}

pub fn sweep_scores(scores: &[(f64, bool)], thresholds: &[f64]) -> Result<Vec<ThresholdRow>, EvalError> {
    if scores.is_empty() {
        return Err(EvalError::NoLabeledResults);
    }
    Ok(thresholds
        .iter()
        .map(|&threshold| {
            let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
            for &(score, positive) in scores {
                let flagged = scoring::classify(score, threshold) == Prediction::Inconsistent;
                match (flagged, positive) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fn_ += 1,
                    (false, false) => tn += 1,
                }
            }
            ThresholdRow::from_counts(threshold, tp, fp, fn_, tn)
        })
        .collect())
}

/// Precision, recall and F1 at each threshold over the labeled results.
pub fn sweep_thresholds(
    results: &[ConsistencyResult],
    thresholds: &[f64],
) -> Result<Vec<ThresholdRow>, EvalError> {
    sweep_scores(&labeled_scores(results), thresholds)
}

// ---------------------------------------------------------------------------
// score bins

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinRow {
    /// Lower edge of the half-open bin `[score_bin, score_bin + width)`; the
    /// top bin also holds +1.0.
    pub score_bin: f64,
    pub count_incorrect: usize,
    pub count_correct: usize,
    /// `None` for an empty bin.
    pub ratio_incorrect: Option<f64>,
}

pub const DEFAULT_BIN_WIDTH: f64 = 0.1;

pub fn bin_count(bin_width: f64) -> Result<usize, EvalError> {
    if !(bin_width.is_finite() && bin_width > 0.0 && bin_width <= 2.0) {
        return Err(EvalError::InvalidBinWidth(bin_width));
    }
    let bins = 2.0 / bin_width;
    let rounded = bins.round();
    if (bins - rounded).abs() > 1e-6 {
        return Err(EvalError::InvalidBinWidth(bin_width));
    }
    Ok(rounded as usize)
}

/// Index of the bin holding `score`. Scores are snapped by a small epsilon so
/// that values like -0.8 computed as -4/5 land on their own edge.
pub fn bin_index(score: f64, bin_width: f64, bins: usize) -> usize {
    let pos = ((score + 1.0) / bin_width + scoring::SCORE_EPSILON).floor();
    (pos.max(0.0) as usize).min(bins - 1)
}

fn bin_edge(i: usize, bin_width: f64) -> f64 {
    let edge = -1.0 + i as f64 * bin_width;
    (edge * 1e9).round() / 1e9
}

pub fn bin_scores(scores: &[(f64, bool)], bin_width: f64) -> Result<Vec<BinRow>, EvalError> {
    let bins = bin_count(bin_width)?;
    let mut rows: Vec<BinRow> = (0..bins)
        .map(|i| BinRow {
            score_bin: bin_edge(i, bin_width),
            count_incorrect: 0,
            count_correct: 0,
            ratio_incorrect: None,
        })
        .collect();
    for &(score, inconsistent) in scores {
        let row = &mut rows[bin_index(score, bin_width, bins)];
        if inconsistent {
            row.count_incorrect += 1;
        } else {
            row.count_correct += 1;
        }
    }
    for row in &mut rows {
        let total = row.count_incorrect + row.count_correct;
        if total > 0 {
            row.ratio_incorrect = Some(row.count_incorrect as f64 / total as f64);
        }
    }
    Ok(rows)
}

/// Share of incorrect-oracle pairs in each score bin.
pub fn bin_ratios(results: &[ConsistencyResult], bin_width: f64) -> Result<Vec<BinRow>, EvalError> {
    bin_scores(&labeled_scores(results), bin_width)
}

/// Share of inconsistent pairs among negative scores minus the share among
/// positive scores. Larger means the score separates the classes better.
pub fn separation(scores: &[(f64, bool)]) -> f64 {
    let share = |keep: &dyn Fn(f64) -> bool| {
        let (hits, total) = scores
            .iter()
            .filter(|(s, _)| keep(*s))
            .fold((0usize, 0usize), |(h, t), &(_, pos)| (h + pos as usize, t + 1));
        if total == 0 {
            0.5
        } else {
            hits as f64 / total as f64
        }
    };
    share(&|s| s < -scoring::SCORE_EPSILON) - share(&|s| s > scoring::SCORE_EPSILON)
}

// ---------------------------------------------------------------------------
// rank correlation

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpearmanResult {
    pub rho: f64,
    pub p_value: f64,
    pub n: usize,
}

/// 1-based ranks; tied values share the mean of the ranks they span.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        // positions start..end hold ranks start+1 ..= end
        let rank = (start + end + 1) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = rank;
        }
        start = end;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0)
}

/// Spearman's rho as the Pearson correlation of average ranks, with a
/// two-sided p-value from the t approximation on `len - 2` degrees of
/// freedom.
pub fn spearman_rho(x: &[f64], y: &[f64]) -> Result<SpearmanResult, EvalError> {
    if x.len() != y.len() {
        return Err(EvalError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 3 {
        return Err(EvalError::TooFewPoints(x.len()));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(EvalError::NonFinite);
    }
    for (name, v) in [("x", x), ("y", y)] {
        if v.iter().all(|a| *a == v[0]) {
            return Err(EvalError::ConstantSequence(name));
        }
    }
    let rho = pearson(&average_ranks(x), &average_ranks(y));
    let n = x.len();
    let df = (n - 2) as f64;
    let p_value = if 1.0 - rho.abs() < 1e-15 {
        0.0
    } else {
        let t = rho * (df / (1.0 - rho * rho)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, df).expect("df is positive");
        (2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0)
    };
    Ok(SpearmanResult { rho, p_value, n })
}

/// Rank correlation between bin score and incorrect-oracle ratio over the
/// non-empty bins.
pub fn bin_spearman(bins: &[BinRow]) -> Result<SpearmanResult, EvalError> {
    let (x, y): (Vec<f64>, Vec<f64>) = bins
        .iter()
        .filter_map(|b| b.ratio_incorrect.map(|r| (b.score_bin, r)))
        .unzip();
    spearman_rho(&x, &y)
}

// ---------------------------------------------------------------------------
// reports

/// One evaluated configuration: which sides are scored, the label set, and
/// the repetitions per side.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModeSpec {
    pub score_mode: ScoreMode,
    pub label_mode: LabelMode,
    pub n: usize,
}

impl fmt::Display for ModeSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}/n={}", self.score_mode, self.label_mode, self.n)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub thresholds: Vec<f64>,
    pub bin_width: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            thresholds: scoring::default_thresholds(),
            bin_width: DEFAULT_BIN_WIDTH,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub mode: ModeSpec,
    pub labeled_count: usize,
    pub unlabeled_skipped: usize,
    pub thresholds: Vec<ThresholdRow>,
    pub bins: Vec<BinRow>,
    pub spearman: Option<SpearmanResult>,
    /// Why `spearman` is absent, if it is.
    pub spearman_note: Option<String>,
    pub config: EvalConfig,
}

pub fn evaluate(
    results: &[ConsistencyResult],
    mode: ModeSpec,
    config: &EvalConfig,
) -> Result<EvaluationReport, EvalError> {
    let scores = labeled_scores(results);
    let thresholds = sweep_scores(&scores, &config.thresholds)?;
    let bins = bin_scores(&scores, config.bin_width)?;
    let (spearman, spearman_note) = match bin_spearman(&bins) {
        Ok(s) => (Some(s), None),
        Err(e) => (None, Some(e.to_string())),
    };
    Ok(EvaluationReport {
        mode,
        labeled_count: scores.len(),
        unlabeled_skipped: results.len() - scores.len(),
        thresholds,
        bins,
        spearman,
        spearman_note,
        config: config.clone(),
    })
}

/// The mode a results set was produced under.
pub fn results_mode(results: &[ConsistencyResult]) -> Option<ModeSpec> {
    results.first().map(|r| ModeSpec {
        score_mode: r.breakdown.mode,
        label_mode: r.breakdown.label_mode,
        n: r.breakdown.n,
    })
}

/// Rescores stored verdicts under each requested mode and evaluates it. Only
/// modes sharing the results' label mode can be derived this way.
pub fn evaluate_rescored(
    results: &[ConsistencyResult],
    modes: &[ModeSpec],
    config: &EvalConfig,
) -> Result<Vec<EvaluationReport>, EvalError> {
    modes
        .iter()
        .map(|&mode| {
            let rescored = results
                .iter()
                .map(|r| r.rescore(mode.score_mode, mode.n, &config.thresholds))
                .collect::<Result<Vec<_>, _>>()?;
            evaluate(&rescored, mode, config)
        })
        .collect()
}

/// Runs the pipeline once per label mode at the largest requested `n`,
/// querying both prompt sides, then derives every requested mode from those
/// same transcripts.
pub fn run_ablation(
    corpus: &[SubjectPair],
    backend: &dyn Backend,
    template: &PromptTemplate,
    base: &PipelineConfig,
    modes: &[ModeSpec],
    config: &EvalConfig,
) -> Result<Vec<EvaluationReport>, EvalError> {
    let mut reports = Vec::with_capacity(modes.len());
    let mut label_modes: Vec<LabelMode> = modes.iter().map(|m| m.label_mode).collect();
    label_modes.dedup();
    label_modes.sort_by_key(|m| m.as_str());
    label_modes.dedup();
    let mut by_mode = std::collections::HashMap::new();
    for label_mode in label_modes {
        let n_max = modes
            .iter()
            .filter(|m| m.label_mode == label_mode)
            .map(|m| m.n)
            .max()
            .expect("label mode came from modes");
        let mut run_config = base.clone();
        run_config.label_mode = label_mode;
        run_config.score_mode = ScoreMode::Metamorphic;
        run_config.query.n_queries = n_max;
        let output = pipeline::run_corpus(corpus, template, &run_config, backend, false)?;
        by_mode.insert(label_mode, output.results);
    }
    for &mode in modes {
        let results = &by_mode[&mode.label_mode];
        reports.extend(evaluate_rescored(results, &[mode], config)?);
    }
    Ok(reports)
}

#[derive(Serialize)]
struct ThresholdCsvRow {
    mode: String,
    threshold: f64,
    precision: f64,
    recall: f64,
    f1: f64,
    tp: usize,
    fp: usize,
    #[serde(rename = "fn")]
    fn_: usize,
    tn: usize,
    precision_defined: bool,
}

#[derive(Serialize)]
struct BinCsvRow {
    mode: String,
    score_bin: f64,
    count_incorrect: usize,
    count_correct: usize,
    ratio_incorrect: Option<f64>,
}

#[derive(Serialize)]
struct SpearmanCsvRow {
    mode: String,
    rho: Option<f64>,
    p_value: Option<f64>,
    n: Option<usize>,
}

fn csv_error(path: &Path, e: csv::Error) -> EvalError {
    EvalError::Io {
        path: path.display().to_string(),
        source: io::Error::other(e),
    }
}

/// Writes `report.json`, `thresholds.csv`, `bins.csv` and `spearman.csv`.
/// Every CSV row carries the mode it belongs to.
pub fn write_reports(reports: &[EvaluationReport], dir: impl AsRef<Path>) -> Result<(), EvalError> {
    let dir = dir.as_ref();
    let io_err = |path: &Path, source| EvalError::Io {
        path: path.display().to_string(),
        source,
    };
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;

    let json_path = dir.join("report.json");
    let file = File::create(&json_path).map_err(|e| io_err(&json_path, e))?;
    let mut w = BufWriter::new(file);
    let doc = serde_json::json!({ "reports": reports });
    serde_json::to_writer_pretty(&mut w, &doc).map_err(|e| io_err(&json_path, e.into()))?;
    w.write_all(b"\n").and_then(|()| w.flush()).map_err(|e| io_err(&json_path, e))?;

    let path = dir.join("thresholds.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| csv_error(&path, e))?;
    for report in reports {
        for row in &report.thresholds {
            w.serialize(ThresholdCsvRow {
                mode: report.mode.to_string(),
                threshold: row.threshold,
                precision: row.precision,
                recall: row.recall,
                f1: row.f1,
                tp: row.tp,
                fp: row.fp,
                fn_: row.fn_,
                tn: row.tn,
                precision_defined: row.precision_defined,
            })
            .map_err(|e| csv_error(&path, e))?;
        }
    }
    w.flush().map_err(|e| io_err(&path, e))?;

    let path = dir.join("bins.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| csv_error(&path, e))?;
    for report in reports {
        for row in &report.bins {
            w.serialize(BinCsvRow {
                mode: report.mode.to_string(),
                score_bin: row.score_bin,
                count_incorrect: row.count_incorrect,
                count_correct: row.count_correct,
                ratio_incorrect: row.ratio_incorrect,
            })
            .map_err(|e| csv_error(&path, e))?;
        }
    }
    w.flush().map_err(|e| io_err(&path, e))?;

    let path = dir.join("spearman.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| csv_error(&path, e))?;
    for report in reports {
        w.serialize(SpearmanCsvRow {
            mode: report.mode.to_string(),
            rho: report.spearman.map(|s| s.rho),
            p_value: report.spearman.map(|s| s.p_value),
            n: report.spearman.map(|s| s.n),
        })
        .map_err(|e| csv_error(&path, e))?;
    }
    w.flush().map_err(|e| io_err(&path, e))?;
    Ok(())
}
