//! Command-line pipeline: parse → extract → evaluate → analyze → report.
//!
//! Stages talk only through files. Every run writes the effective
//! `config.json` and `inputs.json` (SHA-256 of every input) next to its
//! outputs, and outputs depend only on inputs and config.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::{run_analysis, AnalysisOutput, AttendedMode};
use crate::corpus::{read_canonical, read_corpus, ParserMode, RecordError};
use crate::evaluate::{aggregate_rows, evaluate, AggregateEntry, EvalOptions, ExampleRow};
use crate::rationales::{build_rationale_dataset, read_rationales, ClassifyOptions, Dictionary, EditType};
use crate::scores::{read_score_records, Aggregation, MagnitudeMode, ReadOptions, SchemaViolation};

/// Default dictionary when `--dict` is not given.
pub const DICTIONARY_ENV: &str = "RATIONALE_EVAL_DICTIONARY";

pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const PARSE_ERRORS_FILE: &str = "parse_errors.jsonl";
pub const RATIONALES_FILE: &str = "rationales.jsonl";
pub const STATS_FILE: &str = "stats.json";
pub const PER_EXAMPLE_FILE: &str = "per_example.jsonl";
pub const AGGREGATES_FILE: &str = "aggregates.json";
pub const WARNINGS_FILE: &str = "warnings.jsonl";
pub const SCORE_ERRORS_FILE: &str = "score_errors.jsonl";
pub const CONFIG_FILE: &str = "config.json";
pub const INPUTS_FILE: &str = "inputs.json";
pub const ERROR_FILE: &str = "error.json";

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, missing files, invalid config. Exit code 1.
    Usage(String),
    /// Inputs were readable but their contents are unusable. Exit code 2.
    Data { kind: &'static str, message: String },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data { .. } => 2,
        }
    }

    pub fn report(&self) -> serde_json::Value {
        match self {
            CliError::Usage(message) => serde_json::json!({"error": "usage", "message": message}),
            CliError::Data { kind, message } => {
                serde_json::json!({"error": "data", "kind": kind, "message": message})
            }
        }
    }

    fn data(kind: &'static str, message: impl ToString) -> Self {
        CliError::Data {
            kind,
            message: message.to_string(),
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Data { kind, message } => write!(f, "data error ({kind}): {message}"),
        }
    }
}

impl std::error::Error for CliError {}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::data("io", format!("{}: {e}", path.display()))
}

#[derive(Debug, Parser)]
#[command(name = "rationale-eval", version, about = "Human rationale extraction and rationale plausibility evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parse a sentence-record corpus into canonical JSONL.
    Parse(ParseArgs),
    /// Classify edits and extract human rationales.
    Extract(ExtractArgs),
    /// Score model rankings against human rationales.
    Evaluate(EvaluateArgs),
    /// Compare groups, relate confidence to plausibility, sweep layers.
    Analyze(AnalyzeArgs),
    /// Bundle aggregates and analysis tables into one directory.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// Output directory.
    #[arg(long = "out")]
    pub out: Option<PathBuf>,
    /// JSON config file; fields present there override flags.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct ParseArgs {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub parser: Option<ParserMode>,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Clone, Args)]
pub struct ExtractArgs {
    /// Sentence-record corpus, or canonical `.jsonl` from `parse`.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Word list, one per line (defaults to $RATIONALE_EVAL_DICTIONARY).
    #[arg(long = "dict")]
    pub dictionary: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub parser: Option<ParserMode>,
    #[arg(long)]
    pub max_edit_distance: Option<usize>,
    /// Where to write extraction stats (default: <out>/stats.json).
    #[arg(long)]
    pub stats_out: Option<PathBuf>,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Clone, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub rationales: Option<PathBuf>,
    /// Score files (repeatable).
    #[arg(long = "scores", num_args = 1..)]
    pub scores: Vec<PathBuf>,
    #[arg(long = "edit-types", value_enum, value_delimiter = ',')]
    pub edit_types: Vec<EditType>,
    #[arg(long, value_enum, value_delimiter = ',')]
    pub aggregations: Vec<Aggregation>,
    /// Attention layers to keep, e.g. `12` or `1-12`.
    #[arg(long, value_parser = parse_layer_range)]
    pub layers: Option<LayerRange>,
    /// Number of layers L; attention layers outside 1..=L are rejected.
    #[arg(long)]
    pub num_layers: Option<u32>,
    #[arg(long, value_enum)]
    pub magnitude: Option<MagnitudeMode>,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Clone, Args)]
pub struct AnalyzeArgs {
    /// Output directories of `evaluate` (repeatable).
    #[arg(long = "metrics", num_args = 1..)]
    pub metrics: Vec<PathBuf>,
    #[arg(long, value_enum)]
    pub attended: Option<AttendedMode>,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Clone, Args)]
pub struct ReportArgs {
    #[arg(long = "metrics", num_args = 1..)]
    pub metrics: Vec<PathBuf>,
    /// Output directory of `analyze`; analysis is run in-process when absent.
    #[arg(long)]
    pub analysis: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub attended: Option<AttendedMode>,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "(u32, u32)", into = "(u32, u32)")]
pub struct LayerRange {
    pub first: u32,
    pub last: u32,
}

impl From<(u32, u32)> for LayerRange {
    fn from((first, last): (u32, u32)) -> Self {
        LayerRange { first, last }
    }
}

impl From<LayerRange> for (u32, u32) {
    fn from(r: LayerRange) -> Self {
        (r.first, r.last)
    }
}

pub fn parse_layer_range(s: &str) -> Result<LayerRange, String> {
    let parse = |v: &str| v.trim().parse::<u32>().map_err(|e| format!("bad layer {v:?}: {e}"));
    let (first, last) = match s.split_once(['-', ':']) {
        Some((a, b)) => (parse(a)?, parse(b)?),
        None => {
            let l = parse(s)?;
            (l, l)
        }
    };
    if first == 0 || first > last {
        return Err(format!("invalid layer range {s:?} (layers are 1-based, first <= last)"));
    }
    Ok(LayerRange { first, last })
}

/// Effective configuration of one run, persisted verbatim as `config.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub command: String,
    pub corpus_path: Option<PathBuf>,
    pub dictionary_path: Option<PathBuf>,
    pub rationales_path: Option<PathBuf>,
    pub score_paths: Vec<PathBuf>,
    pub metrics_dirs: Vec<PathBuf>,
    pub analysis_dir: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub stats_out: Option<PathBuf>,
    pub edit_types: Vec<EditType>,
    pub aggregations: Vec<Aggregation>,
    pub layer_range: Option<LayerRange>,
    pub num_layers: Option<u32>,
    pub tie_break: String,
    pub magnitude_mode: MagnitudeMode,
    pub attended_mode: AttendedMode,
    pub parser_mode: ParserMode,
    pub max_edit_distance: Option<usize>,
}

/// Config-file overrides; every field optional.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartialRunConfig {
    pub command: Option<String>,
    pub corpus_path: Option<PathBuf>,
    pub dictionary_path: Option<PathBuf>,
    pub rationales_path: Option<PathBuf>,
    pub score_paths: Option<Vec<PathBuf>>,
    pub metrics_dirs: Option<Vec<PathBuf>>,
    pub analysis_dir: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub stats_out: Option<PathBuf>,
    pub edit_types: Option<Vec<EditType>>,
    pub aggregations: Option<Vec<Aggregation>>,
    pub layer_range: Option<LayerRange>,
    pub num_layers: Option<u32>,
    pub tie_break: Option<String>,
    pub magnitude_mode: Option<MagnitudeMode>,
    pub attended_mode: Option<AttendedMode>,
    pub parser_mode: Option<ParserMode>,
    pub max_edit_distance: Option<usize>,
}

const TIE_BREAK: &str = "word_index";

impl RunConfig {
    fn new(command: &str) -> Self {
        RunConfig {
            command: command.into(),
            corpus_path: None,
            dictionary_path: None,
            rationales_path: None,
            score_paths: Vec::new(),
            metrics_dirs: Vec::new(),
            analysis_dir: None,
            output_dir: PathBuf::new(),
            stats_out: None,
            edit_types: vec![EditType::SpellingError, EditType::DeletedText],
            aggregations: vec![Aggregation::AttnSum, Aggregation::GradSigned, Aggregation::GradMagnitude],
            layer_range: None,
            num_layers: None,
            tie_break: TIE_BREAK.into(),
            magnitude_mode: MagnitudeMode::default(),
            attended_mode: AttendedMode::default(),
            parser_mode: ParserMode::default(),
            max_edit_distance: None,
        }
    }

    pub fn apply(&mut self, p: PartialRunConfig) {
        macro_rules! over {
            ($($field:ident),*) => {$(
                if let Some(v) = p.$field { self.$field = v; }
            )*};
        }
        macro_rules! over_opt {
            ($($field:ident),*) => {$(
                if p.$field.is_some() { self.$field = p.$field; }
            )*};
        }
        over!(score_paths, metrics_dirs, output_dir, edit_types, aggregations, tie_break, magnitude_mode, attended_mode, parser_mode);
        over_opt!(corpus_path, dictionary_path, rationales_path, analysis_dir, stats_out, layer_range, num_layers, max_edit_distance);
    }

    fn with_common(mut self, common: &CommonArgs) -> Result<Self, CliError> {
        if let Some(out) = &common.out {
            self.output_dir = out.clone();
        }
        if let Some(path) = &common.config {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
            let partial: PartialRunConfig = serde_json::from_str(&text)
                .map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))?;
            if let Some(cmd) = &partial.command {
                if cmd != &self.command {
                    return Err(CliError::Usage(format!(
                        "config is for command {cmd:?}, not {:?}",
                        self.command
                    )));
                }
            }
            self.apply(partial);
        }
        Ok(self)
    }

    /// Checks required paths and subsets for the configured command.
    pub fn validate(&self) -> Result<(), CliError> {
        let usage = |m: String| Err(CliError::Usage(m));
        if self.output_dir.as_os_str().is_empty() {
            return usage("--out is required".into());
        }
        if self.tie_break != TIE_BREAK {
            return usage(format!("tie_break must be {TIE_BREAK:?}"));
        }
        let require_file = |name: &str, p: &Option<PathBuf>| -> Result<(), CliError> {
            match p {
                None => Err(CliError::Usage(format!("{name} is required"))),
                Some(p) if !p.is_file() => Err(CliError::Usage(format!("{name} {} does not exist", p.display()))),
                Some(_) => Ok(()),
            }
        };
        match self.command.as_str() {
            "parse" => require_file("--corpus", &self.corpus_path)?,
            "extract" => {
                require_file("--corpus", &self.corpus_path)?;
                require_file("--dict", &self.dictionary_path)?;
            }
            "evaluate" => {
                require_file("--rationales", &self.rationales_path)?;
                if self.score_paths.is_empty() {
                    return usage("at least one --scores file is required".into());
                }
                for p in &self.score_paths {
                    require_file("--scores", &Some(p.clone()))?;
                }
                if self.edit_types.is_empty() || self.edit_types.contains(&EditType::Other) {
                    return usage("edit_types must be a non-empty subset of {spelling, deleted}".into());
                }
                if self.aggregations.is_empty() {
                    return usage("aggregations must be non-empty".into());
                }
                if let Some(r) = self.layer_range {
                    if r.first == 0 || r.first > r.last {
                        return usage("invalid layer range".into());
                    }
                }
            }
            "analyze" | "report" => {
                if self.metrics_dirs.is_empty() {
                    return usage("at least one --metrics directory is required".into());
                }
                for d in &self.metrics_dirs {
                    if !d.join(PER_EXAMPLE_FILE).is_file() {
                        return usage(format!("{} has no {PER_EXAMPLE_FILE}", d.display()));
                    }
                }
                if let Some(a) = &self.analysis_dir {
                    if !a.is_dir() {
                        return usage(format!("analysis dir {} does not exist", a.display()));
                    }
                }
            }
            other => return usage(format!("unknown command {other:?}")),
        }
        Ok(())
    }
}

/// Builds the effective config for a command line.
pub fn resolve_config(command: &Command) -> Result<RunConfig, CliError> {
    let config = match command {
        Command::Parse(a) => {
            let mut c = RunConfig::new("parse");
            c.corpus_path = a.corpus.clone();
            c.parser_mode = a.parser.unwrap_or_default();
            c.with_common(&a.common)?
        }
        Command::Extract(a) => {
            let mut c = RunConfig::new("extract");
            c.corpus_path = a.corpus.clone();
            c.dictionary_path = a
                .dictionary
                .clone()
                .or_else(|| std::env::var_os(DICTIONARY_ENV).map(PathBuf::from));
            c.parser_mode = a.parser.unwrap_or_default();
            c.max_edit_distance = a.max_edit_distance;
            c.stats_out = a.stats_out.clone();
            c.with_common(&a.common)?
        }
        Command::Evaluate(a) => {
            let mut c = RunConfig::new("evaluate");
            c.rationales_path = a.rationales.clone();
            c.score_paths = a.scores.clone();
            if !a.edit_types.is_empty() {
                c.edit_types = a.edit_types.clone();
            }
            if !a.aggregations.is_empty() {
                c.aggregations = a.aggregations.clone();
            }
            c.layer_range = a.layers;
            c.num_layers = a.num_layers;
            c.magnitude_mode = a.magnitude.unwrap_or_default();
            c.with_common(&a.common)?
        }
        Command::Analyze(a) => {
            let mut c = RunConfig::new("analyze");
            c.metrics_dirs = a.metrics.clone();
            c.attended_mode = a.attended.unwrap_or_default();
            c.with_common(&a.common)?
        }
        Command::Report(a) => {
            let mut c = RunConfig::new("report");
            c.metrics_dirs = a.metrics.clone();
            c.analysis_dir = a.analysis.clone();
            c.attended_mode = a.attended.unwrap_or_default();
            c.with_common(&a.common)?
        }
    };
    config.validate()?;
    Ok(config)
}

/// Summary printed after a successful run.
#[derive(Debug, Clone, Default, Serialize)]
pub struct RunSummary {
    pub command: String,
    pub counts: BTreeMap<String, usize>,
}

pub fn run(cli: Cli) -> Result<RunSummary, CliError> {
    let config = resolve_config(&cli.command)?;
    fs::create_dir_all(&config.output_dir).map_err(|e| io_err(&config.output_dir, e))?;
    let result = match config.command.as_str() {
        "parse" => cmd_parse(&config),
        "extract" => cmd_extract(&config),
        "evaluate" => cmd_evaluate(&config),
        "analyze" => cmd_analyze(&config),
        "report" => cmd_report(&config),
        _ => unreachable!("validated command"),
    };
    if let Err(err @ CliError::Data { .. }) = &result {
        let _ = write_json(&config.output_dir.join(ERROR_FILE), &err.report());
    }
    result
}

fn open(path: &Path) -> Result<BufReader<File>, CliError> {
    File::open(path).map(BufReader::new).map_err(|e| io_err(path, e))
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path).map(BufWriter::new).map_err(|e| io_err(path, e))
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), CliError> {
    let mut w = create(path)?;
    for item in items {
        let line = serde_json::to_string(item).map_err(|e| CliError::data("serialize", e))?;
        writeln!(w, "{line}").map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::data("serialize", e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T], header: &[&str]) -> Result<(), CliError> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| CliError::data("io", e))?;
    w.write_record(header).map_err(|e| CliError::data("io", e))?;
    for row in rows {
        w.serialize(row).map_err(|e| CliError::data("serialize", e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

fn sha256_file(path: &Path) -> Result<String, CliError> {
    let mut f = open(path)?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 64 * 1024];
    loop {
        let n = f.read(&mut buf).map_err(|e| io_err(path, e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

#[derive(Debug, Serialize)]
struct InputDigest {
    path: PathBuf,
    sha256: String,
}

fn write_provenance(config: &RunConfig, inputs: &[PathBuf]) -> Result<(), CliError> {
    write_json(&config.output_dir.join(CONFIG_FILE), config)?;
    let digests = inputs
        .iter()
        .map(|p| {
            Ok(InputDigest {
                path: p.clone(),
                sha256: sha256_file(p)?,
            })
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    write_json(&config.output_dir.join(INPUTS_FILE), &digests)
}

fn read_sentences(config: &RunConfig) -> Result<(Vec<crate::corpus::EditedSentence>, Vec<RecordError>), CliError> {
    let path = config.corpus_path.as_ref().expect("validated");
    let reader = open(path)?;
    if path.extension().is_some_and(|e| e == "jsonl") {
        let sentences = read_canonical(reader).map_err(|e| CliError::data("corpus", e))?;
        return Ok((sentences, Vec::new()));
    }
    let res = read_corpus(reader, config.parser_mode).map_err(|e| CliError::data("corpus", e))?;
    for e in &res.errors {
        log::warn!("line {}: {}", e.line, e.message);
    }
    Ok((res.sentences, res.errors))
}

pub fn cmd_parse(config: &RunConfig) -> Result<RunSummary, CliError> {
    let corpus = config.corpus_path.clone().expect("validated");
    write_provenance(config, &[corpus])?;
    let (sentences, errors) = read_sentences(config)?;
    write_jsonl(&config.output_dir.join(PARSE_ERRORS_FILE), &errors)?;
    write_jsonl(&config.output_dir.join(CORPUS_FILE), &sentences)?;
    if sentences.is_empty() {
        return Err(CliError::data(
            "no_records",
            format!("no parseable records ({} rejected)", errors.len()),
        ));
    }
    Ok(RunSummary {
        command: "parse".into(),
        counts: [("records".into(), sentences.len()), ("errors".into(), errors.len())].into(),
    })
}

pub fn cmd_extract(config: &RunConfig) -> Result<RunSummary, CliError> {
    let corpus = config.corpus_path.clone().expect("validated");
    let dict_path = config.dictionary_path.clone().expect("validated");
    write_provenance(config, &[corpus, dict_path.clone()])?;
    let dict = Dictionary::load(&dict_path).map_err(|e| CliError::data("dictionary", e))?;
    let (sentences, errors) = read_sentences(config)?;
    let opts = ClassifyOptions {
        max_edit_distance: config.max_edit_distance,
    };
    let (rationales, stats) = build_rationale_dataset(&sentences, errors.len(), &dict, &opts);
    write_jsonl(&config.output_dir.join(PARSE_ERRORS_FILE), &errors)?;
    write_jsonl(&config.output_dir.join(RATIONALES_FILE), &rationales)?;
    let stats_path = config
        .stats_out
        .clone()
        .unwrap_or_else(|| config.output_dir.join(STATS_FILE));
    write_json(&stats_path, &stats)?;
    Ok(RunSummary {
        command: "extract".into(),
        counts: [
            ("spelling".into(), stats.spelling),
            ("deleted".into(), stats.deleted),
            ("skipped".into(), stats.total_records - stats.emitted),
        ]
        .into(),
    })
}

pub fn cmd_evaluate(config: &RunConfig) -> Result<RunSummary, CliError> {
    let rationales_path = config.rationales_path.clone().expect("validated");
    let mut inputs = vec![rationales_path.clone()];
    inputs.extend(config.score_paths.iter().cloned());
    write_provenance(config, &inputs)?;

    let rationales = read_rationales(open(&rationales_path)?).map_err(|e| CliError::data("rationales", e))?;
    let read_opts = ReadOptions {
        num_layers: config.num_layers,
    };
    let mut records = Vec::new();
    let mut violations: Vec<(PathBuf, SchemaViolation)> = Vec::new();
    for path in &config.score_paths {
        let res = read_score_records(open(path)?, &read_opts).map_err(|e| CliError::data("scores", e))?;
        records.extend(res.records);
        violations.extend(res.violations.into_iter().map(|v| (path.clone(), v)));
    }
    if !violations.is_empty() {
        #[derive(Serialize)]
        struct Located<'a> {
            file: &'a Path,
            line: usize,
            message: &'a str,
        }
        let located: Vec<Located> = violations
            .iter()
            .map(|(p, v)| Located {
                file: p,
                line: v.line,
                message: &v.message,
            })
            .collect();
        write_jsonl(&config.output_dir.join(SCORE_ERRORS_FILE), &located)?;
        let (p, first) = &violations[0];
        return Err(CliError::data(
            "schema_violation",
            format!(
                "{} invalid score record(s); first at {}:{}: {}",
                violations.len(),
                p.display(),
                first.line,
                first.message
            ),
        ));
    }

    let opts = EvalOptions {
        edit_types: config.edit_types.iter().copied().collect(),
        aggregations: config.aggregations.iter().copied().collect(),
        layer_range: config.layer_range.map(Into::into),
        magnitude_mode: config.magnitude_mode,
    };
    let out = evaluate(&rationales, &records, &opts).map_err(|e| CliError::data("evaluate", e))?;
    for w in &out.warnings {
        log::warn!(
            "{} ({} {} layer {:?}): words without tokens {:?}",
            w.sid,
            w.model_id,
            w.method.as_str(),
            w.layer,
            w.words_without_tokens
        );
    }
    let aggregates = aggregate_rows(&out.rows);
    write_jsonl(&config.output_dir.join(PER_EXAMPLE_FILE), &out.rows)?;
    write_jsonl(&config.output_dir.join(WARNINGS_FILE), &out.warnings)?;
    write_json(&config.output_dir.join(AGGREGATES_FILE), &aggregates)?;
    Ok(RunSummary {
        command: "evaluate".into(),
        counts: [
            ("records".into(), records.len()),
            ("rows".into(), out.rows.len()),
            ("warnings".into(), out.warnings.len()),
        ]
        .into(),
    })
}

pub fn read_example_rows(dir: &Path) -> Result<Vec<ExampleRow>, CliError> {
    let path = dir.join(PER_EXAMPLE_FILE);
    let mut rows = Vec::new();
    for (idx, line) in open(&path)?.lines().enumerate() {
        let line = line.map_err(|e| io_err(&path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let row = serde_json::from_str(&line)
            .map_err(|e| CliError::data("metrics", format!("{}:{}: {e}", path.display(), idx + 1)))?;
        rows.push(row);
    }
    Ok(rows)
}

const COMPARISON_HEADER: &[&str] = &["comparison", "scope", "label", "edit_type", "metric", "value", "delta"];
const CONFIDENCE_HEADER: &[&str] = &[
    "model_id",
    "aggregation",
    "layer",
    "edit_type",
    "attended_mode",
    "n_attended",
    "n_other",
    "mean_conf_attended",
    "mean_conf_other",
    "relative_gain",
    "degenerate",
];
const LAYERS_HEADER: &[&str] = &["model_id", "edit_type", "layer", "metric", "value"];

#[derive(Serialize)]
struct ComparisonCsv<'a> {
    comparison: &'a str,
    scope: &'a str,
    label: &'a str,
    edit_type: &'a str,
    metric: &'a str,
    value: f64,
    delta: f64,
}

#[derive(Serialize)]
struct ConfidenceCsv<'a> {
    model_id: &'a str,
    aggregation: Aggregation,
    layer: Option<u32>,
    edit_type: &'a str,
    attended_mode: AttendedMode,
    n_attended: usize,
    n_other: usize,
    mean_conf_attended: Option<f64>,
    mean_conf_other: Option<f64>,
    relative_gain: Option<f64>,
    degenerate: bool,
}

/// Writes `comparison`, `confidence` and `layers` tables as CSV plus JSON mirrors.
pub fn write_analysis(dir: &Path, out: &AnalysisOutput) -> Result<(), CliError> {
    let comparison: Vec<ComparisonCsv> = out
        .comparison
        .iter()
        .map(|r| ComparisonCsv {
            comparison: &r.comparison,
            scope: &r.scope,
            label: &r.row.label,
            edit_type: &r.row.edit_type,
            metric: &r.row.metric,
            value: r.row.value,
            delta: r.row.delta,
        })
        .collect();
    write_csv(&dir.join("comparison.csv"), &comparison, COMPARISON_HEADER)?;
    write_json(&dir.join("comparison.json"), &out.comparison)?;

    let confidence: Vec<ConfidenceCsv> = out
        .confidence
        .iter()
        .map(|r| ConfidenceCsv {
            model_id: &r.model_id,
            aggregation: r.aggregation,
            layer: r.layer,
            edit_type: &r.report.edit_type,
            attended_mode: r.attended_mode,
            n_attended: r.report.n_attended,
            n_other: r.report.n_other,
            mean_conf_attended: r.report.mean_conf_attended,
            mean_conf_other: r.report.mean_conf_other,
            relative_gain: r.report.relative_gain,
            degenerate: r.report.degenerate,
        })
        .collect();
    write_csv(&dir.join("confidence.csv"), &confidence, CONFIDENCE_HEADER)?;
    write_json(&dir.join("confidence.json"), &out.confidence)?;

    let points: Vec<_> = out.layers.iter().flat_map(|s| s.points()).collect();
    write_csv(&dir.join("layers.csv"), &points, LAYERS_HEADER)?;
    write_json(&dir.join("layers.json"), &out.layers)
}

fn analyze_dirs(config: &RunConfig) -> Result<AnalysisOutput, CliError> {
    let mut rows = Vec::new();
    for dir in &config.metrics_dirs {
        rows.extend(read_example_rows(dir)?);
    }
    run_analysis(&rows, config.attended_mode).map_err(|e| CliError::data("analysis", e))
}

fn metrics_inputs(config: &RunConfig) -> Vec<PathBuf> {
    config.metrics_dirs.iter().map(|d| d.join(PER_EXAMPLE_FILE)).collect()
}

pub fn cmd_analyze(config: &RunConfig) -> Result<RunSummary, CliError> {
    write_provenance(config, &metrics_inputs(config))?;
    let out = analyze_dirs(config)?;
    write_analysis(&config.output_dir, &out)?;
    Ok(RunSummary {
        command: "analyze".into(),
        counts: [
            ("comparison_rows".into(), out.comparison.len()),
            ("confidence_rows".into(), out.confidence.len()),
            ("layer_sweeps".into(), out.layers.len()),
        ]
        .into(),
    })
}

const ANALYSIS_FILES: [&str; 6] = [
    "comparison.csv",
    "comparison.json",
    "confidence.csv",
    "confidence.json",
    "layers.csv",
    "layers.json",
];

pub fn cmd_report(config: &RunConfig) -> Result<RunSummary, CliError> {
    let mut inputs = metrics_inputs(config);
    for d in &config.metrics_dirs {
        inputs.push(d.join(AGGREGATES_FILE));
    }
    if let Some(a) = &config.analysis_dir {
        inputs.extend(ANALYSIS_FILES.iter().map(|f| a.join(f)));
    }
    write_provenance(config, &inputs)?;

    let mut aggregates: Vec<AggregateEntry> = Vec::new();
    for d in &config.metrics_dirs {
        let path = d.join(AGGREGATES_FILE);
        let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
        let entries: Vec<AggregateEntry> =
            serde_json::from_str(&text).map_err(|e| CliError::data("aggregates", format!("{}: {e}", path.display())))?;
        aggregates.extend(entries);
    }
    write_json(&config.output_dir.join(AGGREGATES_FILE), &aggregates)?;

    match &config.analysis_dir {
        Some(a) => {
            for f in ANALYSIS_FILES {
                fs::copy(a.join(f), config.output_dir.join(f)).map_err(|e| io_err(&a.join(f), e))?;
            }
        }
        None => write_analysis(&config.output_dir, &analyze_dirs(config)?)?,
    }

    let mut manifest = BTreeMap::new();
    for f in std::iter::once(AGGREGATES_FILE).chain(ANALYSIS_FILES) {
        manifest.insert(f.to_string(), sha256_file(&config.output_dir.join(f))?);
    }
    write_json(&config.output_dir.join("manifest.json"), &manifest)?;
    Ok(RunSummary {
        command: "report".into(),
        counts: [("aggregates".into(), aggregates.len())].into(),
    })
}
