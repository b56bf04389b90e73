//! Command-line front end.

use std::collections::HashMap;
use std::error::Error;
use std::fs::File;
use std::io::{self, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};

use crate::corpus::{self, SubjectPair};
use crate::evaluation::{self, EvalConfig, EvaluationReport, ModeSpec};
use crate::gateway::{
    self, Backend, ChatCompletionsBackend, CassetteStore, MockBackend, QueryConfig,
    RecordingBackend, ReplayBackend, StochasticJudge,
};
use crate::oracle::{self, OracleSelection, TestRunner};
use crate::pipeline::{self, DocFilter, PipelineConfig};
use crate::prompt::{LabelMode, PromptTemplate};
use crate::scoring::{self, Prediction, ScoreMode};

type CliResult<T> = Result<T, Box<dyn Error>>;

/// Exit status for a consistent (or undecided) verdict and for success.
pub const EXIT_OK: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_INCONSISTENT: i32 = 2;

pub const DEFAULT_CHECK_THRESHOLD: f64 = -0.1;

#[derive(Debug, Parser)]
#[command(name = "docoracle", version, about = "Flags documentation that disagrees with the behavior a regression test captures")]
pub struct Cli {
    /// More logging; repeat for debug output. `check` also prints prompts.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    /// key=value settings file; command-line flags take precedence.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check a single pair and exit 2 if it looks inconsistent.
    Check(CheckArgs),
    /// Check every pair of a corpus and write results.jsonl.
    Run(RunArgs),
    /// Compute threshold, bin and correlation reports.
    Eval(EvalArgs),
    /// Print a test with its oracle negated.
    Transform(TransformArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct QueryArgs {
    /// live, replay[:PATH], mock:perfect, mock:constant:TEXT,
    /// mock:scripted:PATH or mock:stochastic[:accuracy=A,undecidable=U,blind=B]
    #[arg(long)]
    pub backend: Option<String>,
    /// Cassette to replay from, or to record into for live and mock backends.
    #[arg(long, value_name = "FILE")]
    pub cassette: Option<PathBuf>,
    /// Queries per prompt.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub temperature: Option<f64>,
    /// metamorphic, original_only or transformed_only
    #[arg(long)]
    pub mode: Option<ScoreMode>,
    /// three_label or two_label
    #[arg(long)]
    pub label_mode: Option<LabelMode>,
    /// on, off or allow-nullary (methods without parameters need no @param)
    #[arg(long, num_args = 0..=1, default_missing_value = "on")]
    pub enforce_doc_quality: Option<DocFilter>,
    /// Zero-based assertion to negate instead of the last transformable one.
    #[arg(long)]
    pub oracle_index: Option<usize>,
    #[arg(long, value_name = "FILE")]
    pub template: Option<PathBuf>,
    /// Seed for the stochastic mock.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub endpoint: Option<String>,
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub parallelism: Option<usize>,
    #[arg(long)]
    pub max_retries: Option<u32>,
}

#[derive(Debug, Args)]
pub struct CheckArgs {
    /// Pair as a JSON object or a one-line JSONL file; `-` or absent reads stdin.
    pub input: Option<PathBuf>,
    /// Read the pair from a corpus file instead (see --id).
    #[arg(long, value_name = "FILE", conflicts_with = "input")]
    pub corpus: Option<PathBuf>,
    /// Pair to pick when the input holds several.
    #[arg(long)]
    pub id: Option<String>,
    /// Score at or below which the pair is reported inconsistent.
    #[arg(long, allow_hyphen_values = true)]
    pub threshold: Option<f64>,
    #[command(flatten)]
    pub query: QueryArgs,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long, value_name = "FILE")]
    pub corpus: Option<PathBuf>,
    /// Output directory for results.jsonl and skipped.jsonl.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Comma-separated threshold grid recorded with each result.
    #[arg(long, allow_hyphen_values = true)]
    pub thresholds: Option<Thresholds>,
    /// Skip pairs whose queries fail instead of aborting.
    #[arg(long)]
    pub keep_going: bool,
    #[command(flatten)]
    pub query: QueryArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// results.jsonl written by `run`.
    #[arg(long, value_name = "FILE", required_unless_present = "corpus")]
    pub results: Option<PathBuf>,
    /// With --ablation, query this corpus under every mode instead.
    #[arg(long, value_name = "FILE", conflicts_with = "results", requires = "ablation")]
    pub corpus: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[arg(long, allow_hyphen_values = true)]
    pub thresholds: Option<Thresholds>,
    #[arg(long)]
    pub bin_width: Option<f64>,
    /// One report per score mode (and label mode when querying a corpus).
    #[arg(long)]
    pub ablation: bool,
    /// Repetition counts to compare under --ablation, e.g. 1,3,5.
    #[arg(long, value_delimiter = ',')]
    pub ablation_n: Vec<usize>,
    #[arg(long)]
    pub keep_going: bool,
    #[command(flatten)]
    pub query: QueryArgs,
}

#[derive(Debug, Args)]
pub struct TransformArgs {
    /// Test source file; `-` or absent reads stdin.
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub oracle_index: Option<usize>,
    /// Program that runs a test file and prints PASS or FAIL; used to confirm
    /// that exactly one of the two tests passes.
    #[arg(long, value_name = "PROGRAM")]
    pub runner: Option<PathBuf>,
}

/// Comma-separated list of thresholds in [-1, 0).
#[derive(Debug, Clone, PartialEq)]
pub struct Thresholds(pub Vec<f64>);

impl FromStr for Thresholds {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let values = s
            .split(',')
            .map(|t| {
                let v: f64 = t.trim().parse().map_err(|e| format!("threshold {t:?}: {e}"))?;
                scoring::validate_threshold(v)
            })
            .collect::<Result<Vec<_>, _>>()?;
        if values.is_empty() {
            return Err("empty threshold list".into());
        }
        Ok(Thresholds(values))
    }
}

const CONFIG_KEYS: &[&str] = &[
    "backend",
    "cassette",
    "n",
    "temperature",
    "mode",
    "label-mode",
    "enforce-doc-quality",
    "oracle-index",
    "template",
    "seed",
    "endpoint",
    "model",
    "parallelism",
    "max-retries",
    "threshold",
    "thresholds",
    "bin-width",
    "corpus",
    "out",
    "keep-going",
];

/// Flat `key=value` settings. Keys use the long flag names; `_` and `-` are
/// interchangeable and `#` starts a comment line.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfigFile {
    values: HashMap<String, String>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self, String> {
        let mut values = HashMap::new();
        for (idx, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| format!("line {}: expected key=value", idx + 1))?;
            let key = key.trim().replace('_', "-");
            if !CONFIG_KEYS.contains(&key.as_str()) {
                return Err(format!("line {}: unknown setting {key:?}", idx + 1));
            }
            values.insert(key, value.trim().to_string());
        }
        Ok(ConfigFile { values })
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("config {}: {e}", path.display()))?;
        Ok(Self::parse(&text).map_err(|e| format!("config {}: {e}", path.display()))?)
    }

    /// The flag value if given, else the file value parsed as `T`.
    pub fn pick<T: FromStr>(&self, flag: Option<T>, key: &str) -> CliResult<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        if flag.is_some() {
            return Ok(flag);
        }
        match self.values.get(key) {
            None => Ok(None),
            Some(raw) => raw
                .parse()
                .map(Some)
                .map_err(|e| format!("config setting {key}={raw}: {e}").into()),
        }
    }

    pub fn flag(&self, flag: bool, key: &str) -> CliResult<bool> {
        Ok(flag || self.pick::<bool>(None, key)?.unwrap_or(false))
    }
}

/// Everything a command needs to build a backend and run the pipeline.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub backend: String,
    pub cassette: Option<PathBuf>,
    pub seed: u64,
    pub endpoint: String,
    pub template: PromptTemplate,
    pub pipeline: PipelineConfig,
}

impl RunConfig {
    pub fn resolve(args: &QueryArgs, file: &ConfigFile, default_doc: DocFilter) -> CliResult<Self> {
        let defaults = QueryConfig::default();
        let query = QueryConfig {
            model_name: file.pick(args.model.clone(), "model")?.unwrap_or(defaults.model_name),
            temperature: file
                .pick(args.temperature, "temperature")?
                .unwrap_or(defaults.temperature),
            n_queries: file.pick(args.n, "n")?.unwrap_or(defaults.n_queries),
            max_retries: file
                .pick(args.max_retries, "max-retries")?
                .unwrap_or(defaults.max_retries),
            request_timeout: defaults.request_timeout,
            parallelism_limit: file
                .pick(args.parallelism, "parallelism")?
                .unwrap_or(defaults.parallelism_limit),
        };
        query.validate()?;
        let template = match file.pick(args.template.clone(), "template")? {
            Some(path) => PromptTemplate::from_file(path)?,
            None => PromptTemplate::builtin(),
        };
        let oracle_selection = match file.pick(args.oracle_index, "oracle-index")? {
            Some(i) => OracleSelection::Index(i),
            None => OracleSelection::Last,
        };
        let pipeline = PipelineConfig {
            query,
            label_mode: file.pick(args.label_mode, "label-mode")?.unwrap_or_default(),
            score_mode: file.pick(args.mode, "mode")?.unwrap_or_default(),
            thresholds: scoring::default_thresholds(),
            oracle_selection,
            doc_filter: file
                .pick(args.enforce_doc_quality, "enforce-doc-quality")?
                .unwrap_or(default_doc),
            max_reparse: 1,
        };
        Ok(RunConfig {
            backend: file
                .pick(args.backend.clone(), "backend")?
                .unwrap_or_else(|| "live".to_string()),
            cassette: file.pick(args.cassette.clone(), "cassette")?,
            seed: file.pick(args.seed, "seed")?.unwrap_or(0),
            endpoint: file
                .pick(args.endpoint.clone(), "endpoint")?
                .unwrap_or_else(|| gateway::DEFAULT_ENDPOINT.to_string()),
            template,
            pipeline,
        })
    }

    pub fn build_backend(&self) -> CliResult<Box<dyn Backend>> {
        let spec = self.backend.as_str();
        if spec == "replay" || spec.starts_with("replay:") {
            let path = match spec.strip_prefix("replay:") {
                Some(p) => PathBuf::from(p),
                None => self
                    .cassette
                    .clone()
                    .ok_or("replay backend needs --cassette or replay:PATH")?,
            };
            let store = CassetteStore::open(&path)?;
            return Ok(Box::new(ReplayBackend::new(Arc::new(store))));
        }
        let inner: Box<dyn Backend> = if spec == "live" {
            let key = gateway::api_key_from_env();
            if key.is_none() && self.endpoint == gateway::DEFAULT_ENDPOINT {
                return Err(format!(
                    "live backend needs credentials in {} (or {})",
                    gateway::API_KEY_ENV,
                    gateway::FALLBACK_API_KEY_ENV
                )
                .into());
            }
            Box::new(ChatCompletionsBackend::new(
                self.endpoint.clone(),
                key,
                &self.pipeline.query,
            ))
        } else if let Some(mock) = spec.strip_prefix("mock:") {
            Box::new(parse_mock(mock, self.seed)?)
        } else {
            return Err(format!("unknown backend {spec:?}").into());
        };
        match &self.cassette {
            Some(path) => {
                let store = CassetteStore::open_for_append(path)?;
                Ok(Box::new(RecordingBackend::new(inner, Arc::new(store))))
            }
            None => Ok(inner),
        }
    }
}

fn parse_mock(spec: &str, seed: u64) -> CliResult<MockBackend> {
    let (kind, rest) = spec.split_once(':').unwrap_or((spec, ""));
    match kind {
        "perfect" => Ok(MockBackend::PerfectOracle),
        "constant" => Ok(MockBackend::Constant(rest.to_string())),
        "scripted" if !rest.is_empty() => Ok(MockBackend::scripted_from_file(rest)?),
        "stochastic" => {
            let mut judge = StochasticJudge::new(0.8, 0.1, seed);
            for part in rest.split(',').filter(|p| !p.is_empty()) {
                let (key, value) = part
                    .split_once('=')
                    .ok_or_else(|| format!("stochastic mock setting {part:?} is not key=value"))?;
                let value: f64 = value
                    .parse()
                    .map_err(|e| format!("stochastic mock {key}: {e}"))?;
                match key {
                    "accuracy" => judge.accuracy = value,
                    "undecidable" => judge.undecidable_rate = value,
                    "blind" => judge.blind_rate = value,
                    other => return Err(format!("unknown stochastic mock setting {other:?}").into()),
                }
            }
            judge.validate()?;
            Ok(MockBackend::Stochastic(judge))
        }
        _ => Err(format!("unknown mock backend {spec:?}").into()),
    }
}

fn read_input(path: Option<&Path>) -> CliResult<String> {
    let mut text = String::new();
    match path {
        None => {
            io::stdin().read_to_string(&mut text)?;
        }
        Some(p) if p == Path::new("-") => {
            io::stdin().read_to_string(&mut text)?;
        }
        Some(p) => {
            text = std::fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?;
        }
    }
    Ok(text)
}

fn read_pair(text: &str, id: Option<&str>) -> CliResult<SubjectPair> {
    let pairs = match serde_json::from_str::<SubjectPair>(text) {
        Ok(pair) => vec![pair],
        Err(_) => corpus::read_corpus(text.as_bytes())?,
    };
    match (id, pairs.len()) {
        (Some(id), _) => pairs
            .into_iter()
            .find(|p| p.id == id)
            .ok_or_else(|| format!("no pair with id {id:?}").into()),
        (None, 1) => Ok(pairs.into_iter().next().unwrap()),
        (None, 0) => Err("input holds no pair".into()),
        (None, n) => Err(format!("input holds {n} pairs; pick one with --id").into()),
    }
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    let file = File::create(path).map_err(|e| format!("{}: {e}", path.display()))?;
    Ok(BufWriter::new(file))
}

fn load_config(cli_config: Option<&Path>) -> CliResult<ConfigFile> {
    match cli_config {
        Some(path) => ConfigFile::load(path),
        None => Ok(ConfigFile::default()),
    }
}

/// Runs a parsed command line and returns the process exit status.
pub fn run(cli: Cli) -> i32 {
    let outcome = load_config(cli.config.as_deref()).and_then(|file| match &cli.command {
        Command::Check(args) => cmd_check(args, &file, cli.verbose > 0),
        Command::Run(args) => cmd_run(args, &file).map(|()| EXIT_OK),
        Command::Eval(args) => cmd_eval(args, &file).map(|()| EXIT_OK),
        Command::Transform(args) => cmd_transform(args),
    });
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_ERROR
        }
    }
}

fn format_slots(slots: &[Option<crate::prompt::Label>]) -> String {
    slots
        .iter()
        .map(|s| s.map_or("dropped", |l| l.as_str()))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn cmd_check(args: &CheckArgs, file: &ConfigFile, verbose: bool) -> CliResult<i32> {
    let threshold = file
        .pick(args.threshold, "threshold")?
        .unwrap_or(DEFAULT_CHECK_THRESHOLD);
    scoring::validate_threshold(threshold)?;
    let input = args.corpus.as_deref().or(args.input.as_deref());
    let pair = read_pair(&read_input(input)?, args.id.as_deref())?;
    let mut config = RunConfig::resolve(&args.query, file, DocFilter::Off)?;
    config.pipeline.thresholds = vec![threshold];
    let backend = config.build_backend()?;
    let run = pipeline::run_pair(&pair, &config.template, &config.pipeline, backend.as_ref())?;

    let mut out = io::stdout().lock();
    if verbose {
        writeln!(out, "--- original prompt ---\n{}", run.prompts.original_prompt)?;
        writeln!(out, "--- transformed prompt ---\n{}", run.prompts.transformed_prompt)?;
    }
    let result = &run.result;
    let b = &result.breakdown;
    writeln!(out, "pair:        {}", result.pair_id)?;
    writeln!(out, "rule:        {}", result.applied_rule.name())?;
    if b.mode.uses_original() {
        writeln!(out, "original:    {}", format_slots(&result.original_verdicts))?;
    }
    if b.mode.uses_transformed() {
        writeln!(out, "transformed: {}", format_slots(&result.transformed_verdicts))?;
    }
    writeln!(
        out,
        "score:       {:.3} (original {:+}, transformed {:+}, {} verdicts)",
        b.normalized,
        b.original_sum,
        b.transformed_sum,
        b.original_count + b.transformed_count
    )?;
    let prediction = scoring::classify(b.normalized, threshold);
    writeln!(out, "verdict:     {prediction} at threshold {threshold}")?;
    Ok(match prediction {
        Prediction::Inconsistent => EXIT_INCONSISTENT,
        Prediction::Consistent => EXIT_OK,
    })
}

pub fn cmd_run(args: &RunArgs, file: &ConfigFile) -> CliResult<()> {
    let corpus_path = file
        .pick(args.corpus.clone(), "corpus")?
        .ok_or("run needs --corpus")?;
    let out_dir = file
        .pick(args.out.clone(), "out")?
        .unwrap_or_else(|| PathBuf::from("out"));
    let keep_going = file.flag(args.keep_going, "keep-going")?;
    let mut config = RunConfig::resolve(&args.query, file, DocFilter::Strict)?;
    if let Some(Thresholds(t)) = file.pick(args.thresholds.clone(), "thresholds")? {
        config.pipeline.thresholds = t;
    }
    let corpus = corpus::load_corpus(&corpus_path)?;
    let backend = config.build_backend()?;
    let output = pipeline::run_corpus(
        &corpus,
        &config.template,
        &config.pipeline,
        backend.as_ref(),
        keep_going,
    )?;

    std::fs::create_dir_all(&out_dir).map_err(|e| format!("{}: {e}", out_dir.display()))?;
    evaluation::write_results_to(&output.results, create(&out_dir.join("results.jsonl"))?)?;
    pipeline::write_skipped_to(&output.skipped, create(&out_dir.join("skipped.jsonl"))?)?;
    eprintln!(
        "{} results, {} skipped, written to {}",
        output.results.len(),
        output.skipped.len(),
        out_dir.display()
    );
    Ok(())
}

fn print_summary(reports: &[EvaluationReport]) -> io::Result<()> {
    let mut out = io::stdout().lock();
    for report in reports {
        writeln!(
            out,
            "{} ({} labeled, {} unlabeled skipped)",
            report.mode, report.labeled_count, report.unlabeled_skipped
        )?;
        writeln!(out, "  threshold  precision  recall  f1")?;
        for row in &report.thresholds {
            let flag = if row.precision_defined { "" } else { " (nothing flagged)" };
            writeln!(
                out,
                "  {:>9.2}  {:>9.3}  {:>6.3}  {:.3}{flag}",
                row.threshold, row.precision, row.recall, row.f1
            )?;
        }
        match (&report.spearman, &report.spearman_note) {
            (Some(s), _) => writeln!(out, "  spearman rho {:.3}, p {:.3e}", s.rho, s.p_value)?,
            (None, Some(note)) => writeln!(out, "  spearman unavailable: {note}")?,
            (None, None) => {}
        }
    }
    Ok(())
}

pub fn cmd_eval(args: &EvalArgs, file: &ConfigFile) -> CliResult<()> {
    let mut eval_config = EvalConfig::default();
    if let Some(Thresholds(t)) = file.pick(args.thresholds.clone(), "thresholds")? {
        eval_config.thresholds = t;
    }
    if let Some(w) = file.pick(args.bin_width, "bin-width")? {
        evaluation::bin_count(w)?;
        eval_config.bin_width = w;
    }
    let out_dir = file
        .pick(args.out.clone(), "out")?
        .unwrap_or_else(|| PathBuf::from("out"));

    let reports = if let Some(corpus_path) = &args.corpus {
        let config = RunConfig::resolve(&args.query, file, DocFilter::Strict)?;
        let label_modes = match args.query.label_mode {
            Some(m) => vec![m],
            None => vec![LabelMode::ThreeLabel, LabelMode::TwoLabel],
        };
        let n_values = if args.ablation_n.is_empty() {
            vec![config.pipeline.query.n_queries]
        } else {
            args.ablation_n.clone()
        };
        let modes = ablation_modes(&label_modes, &n_values);
        let corpus = corpus::load_corpus(corpus_path)?;
        let backend = config.build_backend()?;
        evaluation::run_ablation(
            &corpus,
            backend.as_ref(),
            &config.template,
            &config.pipeline,
            &modes,
            &eval_config,
        )?
    } else {
        let path = args.results.as_ref().ok_or("eval needs --results or --corpus")?;
        let results = evaluation::load_results(path)?;
        let stored = evaluation::results_mode(&results).ok_or(evaluation::EvalError::NoLabeledResults)?;
        if args.ablation {
            let n_values = if args.ablation_n.is_empty() {
                vec![stored.n]
            } else {
                args.ablation_n.clone()
            };
            let modes = ablation_modes(&[stored.label_mode], &n_values);
            evaluation::evaluate_rescored(&results, &modes, &eval_config)?
        } else {
            vec![evaluation::evaluate(&results, stored, &eval_config)?]
        }
    };
    evaluation::write_reports(&reports, &out_dir)?;
    print_summary(&reports)?;
    Ok(())
}

/// Every score mode for every label mode and `n`.
pub fn ablation_modes(label_modes: &[LabelMode], n_values: &[usize]) -> Vec<ModeSpec> {
    let mut modes = Vec::new();
    for &label_mode in label_modes {
        for &n in n_values {
            for score_mode in ScoreMode::ALL {
                modes.push(ModeSpec {
                    score_mode,
                    label_mode,
                    n,
                });
            }
        }
    }
    modes
}

pub fn cmd_transform(args: &TransformArgs) -> CliResult<i32> {
    let source = read_input(args.input.as_deref())?;
    let selection = match args.oracle_index {
        Some(i) => OracleSelection::Index(i),
        None => OracleSelection::Last,
    };
    let transformed = oracle::transform_source(&source, selection)?;
    log::info!(
        "{}: {} -> {}",
        transformed.applied_rule.name(),
        transformed.original_assertion.statement_text,
        transformed.transformed_assertion.statement_text
    );
    if let Some(program) = &args.runner {
        let runner = TestRunner::new(program);
        let check = oracle::verify_output_relation(&source, &transformed.source, Some(&runner));
        eprintln!(
            "output relation: {:?}{}",
            check.verdict,
            check.diagnostic.map(|d| format!(" ({d})")).unwrap_or_default()
        );
    }
    let mut out = io::stdout().lock();
    out.write_all(transformed.source.as_bytes())?;
    out.flush()?;
    Ok(EXIT_OK)
}
