//! Per-pair orchestration: filter, transform, prompt, query, parse, score.

use std::fmt;
use std::io::{self, Write};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{self, SubjectPair};
use crate::evaluation::ConsistencyResult;
use crate::gateway::{self, Backend, GatewayError, QueryConfig, QueryContext, QueryTranscript, Side};
use crate::oracle::{self, OracleSelection, TransformError};
use crate::prompt::{self, Label, LabelMode, PromptSet, PromptTemplate};
use crate::scoring::{self, ScoreMode, ScoringError};

/// Which documentation-quality gate applies before a pair is queried.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DocFilter {
    #[default]
    Off,
    /// Requires both `@param` and `@return`.
    Strict,
    /// As strict, but methods without parameters need no `@param`.
    AllowNullary,
}

impl DocFilter {
    pub fn check(self, pair: &SubjectPair) -> Result<(), String> {
        let report = match self {
            DocFilter::Off => return Ok(()),
            DocFilter::Strict => corpus::assess_documentation(&pair.documentation),
            DocFilter::AllowNullary => corpus::assess_documentation_for_signature(
                &pair.documentation,
                &pair.method_signature,
            ),
        };
        if report.accepted {
            return Ok(());
        }
        let mut missing = Vec::new();
        if !report.has_param_tags {
            missing.push("@param");
        }
        if !report.has_return_tag {
            missing.push("@return");
        }
        Err(format!("documentation lacks {}", missing.join(" and ")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub query: QueryConfig,
    pub label_mode: LabelMode,
    pub score_mode: ScoreMode,
    pub thresholds: Vec<f64>,
    pub oracle_selection: OracleSelection,
    pub doc_filter: DocFilter,
    /// Extra queries issued for each unparseable answer before giving up on
    /// that slot.
    pub max_reparse: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            query: QueryConfig::default(),
            label_mode: LabelMode::ThreeLabel,
            score_mode: ScoreMode::Metamorphic,
            thresholds: scoring::default_thresholds(),
            oracle_selection: OracleSelection::Last,
            doc_filter: DocFilter::Off,
            max_reparse: 1,
        }
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("pair {pair_id}: {source}")]
    Gateway {
        pair_id: String,
        #[source]
        source: GatewayError,
    },
    #[error("pair {pair_id}: {source}")]
    Transform {
        pair_id: String,
        #[source]
        source: TransformError,
    },
    #[error("pair {pair_id}: {source}")]
    Scoring {
        pair_id: String,
        #[source]
        source: ScoringError,
    },
    #[error("pair {pair_id}: {message}")]
    Ineligible { pair_id: String, message: String },
    #[error("configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipReason {
    InvalidPair,
    DocQuality,
    NotTransformable,
    BackendError,
    ScoringError,
}

impl fmt::Display for SkipReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SkipReason::InvalidPair => "invalid_pair",
            SkipReason::DocQuality => "doc_quality",
            SkipReason::NotTransformable => "not_transformable",
            SkipReason::BackendError => "backend_error",
            SkipReason::ScoringError => "scoring_error",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkipEntry {
    pub pair_id: String,
    pub reason: SkipReason,
    pub detail: String,
}

impl SkipEntry {
    fn from_error(e: &PipelineError) -> (String, SkipReason) {
        match e {
            PipelineError::Gateway { pair_id, .. } => (pair_id.clone(), SkipReason::BackendError),
            PipelineError::Transform { pair_id, .. } => {
                (pair_id.clone(), SkipReason::NotTransformable)
            }
            PipelineError::Scoring { pair_id, .. } => (pair_id.clone(), SkipReason::ScoringError),
            PipelineError::Ineligible { pair_id, .. } => (pair_id.clone(), SkipReason::InvalidPair),
            PipelineError::Config(_) => (String::new(), SkipReason::InvalidPair),
        }
    }
}

/// Responses and parsed verdicts for one prompt side.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SideSample {
    pub transcript: QueryTranscript,
    /// One slot per nominal query; `None` when the answer was dropped.
    pub verdicts: Vec<Option<Label>>,
    /// Extra queries issued because an answer carried no label.
    pub requeries: usize,
}

impl SideSample {
    pub fn labels(&self) -> Vec<Label> {
        self.verdicts.iter().flatten().copied().collect()
    }
}

/// Issues `n` queries for one prompt and parses each answer.
///
/// An answer without a permitted label is re-asked up to `max_reparse`
/// times, using query indices `n`, `n + 1`, ... so replayed runs see the
/// same follow-ups. A slot that stays unparseable counts as undecidable in
/// three-label mode and is dropped in two-label mode.
pub fn sample_side(
    prompt: &str,
    ctx: &QueryContext,
    config: &QueryConfig,
    max_reparse: usize,
    backend: &dyn Backend,
) -> Result<SideSample, GatewayError> {
    let mut transcript = gateway::query(prompt, ctx, config, backend)?;
    let n = config.n_queries;
    let mut next_index = n;
    let mut verdicts = Vec::with_capacity(n);
    for slot in 0..n {
        let mut raw = transcript.responses[slot].clone();
        let mut attempts = 0;
        let verdict = loop {
            match prompt::parse_verdict(&raw, ctx.label_mode) {
                Ok(v) => break Some(v.label),
                Err(e) if attempts == max_reparse => {
                    log::warn!("{} {} query {slot}: {e}", ctx.pair_id, ctx.side.as_str());
                    break match ctx.label_mode {
                        LabelMode::ThreeLabel => Some(Label::Undecidable),
                        LabelMode::TwoLabel => None,
                    };
                }
                Err(_) => {
                    attempts += 1;
                    raw = backend.complete(prompt, ctx, next_index)?;
                    transcript.responses.push(raw.clone());
                    next_index += 1;
                }
            }
        };
        verdicts.push(verdict);
    }
    Ok(SideSample {
        transcript,
        verdicts,
        requeries: next_index - n,
    })
}

/// Everything produced while checking one pair.
#[derive(Debug, Clone)]
pub struct PairRun {
    pub prompts: PromptSet,
    pub original: Option<SideSample>,
    pub transformed: Option<SideSample>,
    pub result: ConsistencyResult,
}

fn eligibility(pair: &SubjectPair, config: &PipelineConfig) -> Result<(), (SkipReason, String)> {
    pair.validate().map_err(|m| (SkipReason::InvalidPair, m))?;
    config
        .doc_filter
        .check(pair)
        .map_err(|m| (SkipReason::DocQuality, m))
}

/// Checks one pair end to end. The doc filter is applied; ineligible pairs
/// come back as [`PipelineError::Ineligible`].
pub fn run_pair(
    pair: &SubjectPair,
    template: &PromptTemplate,
    config: &PipelineConfig,
    backend: &dyn Backend,
) -> Result<PairRun, PipelineError> {
    eligibility(pair, config).map_err(|(_, message)| PipelineError::Ineligible {
        pair_id: pair.id.clone(),
        message,
    })?;
    query_pair(pair, template, config, backend)
}

fn query_pair(
    pair: &SubjectPair,
    template: &PromptTemplate,
    config: &PipelineConfig,
    backend: &dyn Backend,
) -> Result<PairRun, PipelineError> {
    let transformed = oracle::transform_test(pair, config.oracle_selection).map_err(|source| {
        PipelineError::Transform {
            pair_id: pair.id.clone(),
            source,
        }
    })?;
    let prompts = prompt::build_prompt_set(pair, &transformed, config.label_mode, template);
    let sample = |side: Side, text: &str| -> Result<SideSample, PipelineError> {
        let ctx = QueryContext {
            pair_id: pair.id.clone(),
            side,
            ground_truth: pair.ground_truth,
            label_mode: config.label_mode,
        };
        sample_side(text, &ctx, &config.query, config.max_reparse, backend).map_err(|source| {
            PipelineError::Gateway {
                pair_id: pair.id.clone(),
                source,
            }
        })
    };
    let original = config
        .score_mode
        .uses_original()
        .then(|| sample(Side::Original, &prompts.original_prompt))
        .transpose()?;
    let transformed_side = config
        .score_mode
        .uses_transformed()
        .then(|| sample(Side::Transformed, &prompts.transformed_prompt))
        .transpose()?;

    let labels = |s: &Option<SideSample>| s.as_ref().map(SideSample::labels).unwrap_or_default();
    let slots = |s: &Option<SideSample>| s.as_ref().map(|s| s.verdicts.clone()).unwrap_or_default();
    let breakdown = scoring::aggregate(
        &pair.id,
        &labels(&original),
        &labels(&transformed_side),
        config.query.n_queries,
        config.score_mode,
        config.label_mode,
    )
    .map_err(|source| PipelineError::Scoring {
        pair_id: pair.id.clone(),
        source,
    })?;
    let result = ConsistencyResult::new(
        pair.ground_truth,
        transformed.applied_rule,
        breakdown,
        &config.thresholds,
        slots(&original),
        slots(&transformed_side),
    );
    Ok(PairRun {
        prompts,
        original,
        transformed: transformed_side,
        result,
    })
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunOutput {
    /// Sorted by pair id.
    pub results: Vec<ConsistencyResult>,
    /// Sorted by pair id.
    pub skipped: Vec<SkipEntry>,
}

/// Runs every pair of the corpus, up to `parallelism_limit` at a time.
///
/// Ineligible and non-transformable pairs are always skipped with a reason.
/// Backend and scoring failures abort the run unless `keep_going` is set,
/// in which case they are skipped too.
pub fn run_corpus(
    corpus: &[SubjectPair],
    template: &PromptTemplate,
    config: &PipelineConfig,
    backend: &dyn Backend,
    keep_going: bool,
) -> Result<RunOutput, PipelineError> {
    config
        .query
        .validate()
        .map_err(|e| PipelineError::Config(e.to_string()))?;
    let mut pairs: Vec<&SubjectPair> = corpus.iter().collect();
    pairs.sort_by(|a, b| a.id.cmp(&b.id));

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.query.parallelism_limit)
        .build()
        .map_err(|e| PipelineError::Config(e.to_string()))?;
    let outcomes: Vec<Result<ConsistencyResult, Result<SkipEntry, PipelineError>>> =
        pool.install(|| {
            pairs
                .par_iter()
                .map(|pair| {
                    if let Err((reason, detail)) = eligibility(pair, config) {
                        return Err(Ok(SkipEntry {
                            pair_id: pair.id.clone(),
                            reason,
                            detail,
                        }));
                    }
                    match query_pair(pair, template, config, backend) {
                        Ok(run) => Ok(run.result),
                        Err(e @ PipelineError::Transform { .. }) => {
                            Err(Ok(skip_entry(&e)))
                        }
                        Err(e) => Err(Err(e)),
                    }
                })
                .collect()
        });

    let mut out = RunOutput::default();
    for outcome in outcomes {
        match outcome {
            Ok(result) => out.results.push(result),
            Err(Ok(skip)) => {
                log::info!("skipping {}: {} ({})", skip.pair_id, skip.reason, skip.detail);
                out.skipped.push(skip);
            }
            Err(Err(e)) if keep_going => {
                log::warn!("{e}");
                out.skipped.push(skip_entry(&e));
            }
            Err(Err(e)) => return Err(e),
        }
    }
    Ok(out)
}

fn skip_entry(e: &PipelineError) -> SkipEntry {
    let (pair_id, reason) = SkipEntry::from_error(e);
    let detail = match e {
        PipelineError::Gateway { source, .. } => source.to_string(),
        PipelineError::Transform { source, .. } => source.to_string(),
        PipelineError::Scoring { source, .. } => source.to_string(),
        PipelineError::Ineligible { message, .. } => message.clone(),
        PipelineError::Config(m) => m.clone(),
    };
    SkipEntry {
        pair_id,
        reason,
        detail,
    }
}

pub fn write_skipped_to<W: Write>(skipped: &[SkipEntry], mut w: W) -> io::Result<()> {
    for s in skipped {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

impl FromStr for DocFilter {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "off" | "false" | "no" => Ok(DocFilter::Off),
            "strict" | "on" | "true" | "yes" => Ok(DocFilter::Strict),
            "allow_nullary" | "allow-nullary" => Ok(DocFilter::AllowNullary),
            other => Err(format!(
                "unknown doc-quality setting {other:?} (expected on, off or allow-nullary)"
            )),
        }
    }
}
