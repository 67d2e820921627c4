//! Model score files and word-level relevance rankings.
//!
//! A score dumper writes one JSONL record per (example, model, method, layer)
//! holding per-token scalars with byte offsets into the pre-edit sentence.
//! Attention records carry the head-summed CLS attention of one layer;
//! gradient records carry one signed gradient×input value per token. Tokens
//! are summed into the whitespace words that contain them and the words are
//! ranked by descending score.

use std::cmp::Ordering;
use std::io::BufRead;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{ByteSpan, PreEditSentence};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "attention")]
    Attention,
    #[serde(rename = "grad_x_input")]
    GradientInput,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Attention => "attention",
            Method::GradientInput => "grad_x_input",
        }
    }
}

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, clap::ValueEnum,
)]
pub enum Aggregation {
    #[serde(rename = "attn")]
    #[value(name = "attn")]
    AttnSum,
    #[serde(rename = "grad_signed")]
    #[value(name = "grad_signed")]
    GradSigned,
    #[serde(rename = "grad_magnitude")]
    #[value(name = "grad_magnitude")]
    GradMagnitude,
}

impl Aggregation {
    pub fn as_str(self) -> &'static str {
        match self {
            Aggregation::AttnSum => "attn",
            Aggregation::GradSigned => "grad_signed",
            Aggregation::GradMagnitude => "grad_magnitude",
        }
    }

    pub fn method(self) -> Method {
        match self {
            Aggregation::AttnSum => Method::Attention,
            Aggregation::GradSigned | Aggregation::GradMagnitude => Method::GradientInput,
        }
    }

    pub fn for_method(method: Method) -> &'static [Aggregation] {
        match method {
            Method::Attention => &[Aggregation::AttnSum],
            Method::GradientInput => &[Aggregation::GradSigned, Aggregation::GradMagnitude],
        }
    }
}

/// Where the absolute value is taken for gradient magnitude rankings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum MagnitudeMode {
    /// `|sum of token scores|` per word.
    #[default]
    Word,
    /// `sum of |token score|` per word.
    Token,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenScore {
    pub surface: String,
    /// `None` for sequence delimiters and other synthetic tokens.
    pub span: Option<ByteSpan>,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRecord {
    pub sid: String,
    pub model_id: String,
    pub method: Method,
    /// 1-based; present for attention records only.
    pub layer: Option<u32>,
    pub prob_needs_edit: f64,
    pub predicted_label: bool,
    pub tokens: Vec<TokenScore>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RawToken {
    surface: String,
    #[serde(default)]
    start: Option<i64>,
    #[serde(default)]
    end: Option<i64>,
    score: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RawRecord {
    sid: String,
    model_id: String,
    method: Method,
    #[serde(default)]
    layer: Option<i64>,
    prob_needs_edit: f64,
    tokens: Vec<RawToken>,
}

impl ScoreRecord {
    pub fn new(
        sid: impl Into<String>,
        model_id: impl Into<String>,
        method: Method,
        layer: Option<u32>,
        prob_needs_edit: f64,
        tokens: Vec<TokenScore>,
    ) -> Self {
        ScoreRecord {
            sid: sid.into(),
            model_id: model_id.into(),
            method,
            layer,
            prob_needs_edit,
            predicted_label: prob_needs_edit >= 0.5,
            tokens,
        }
    }

    /// Serializes to one line of the score file format.
    pub fn to_json_line(&self) -> String {
        let raw = RawRecord {
            sid: self.sid.clone(),
            model_id: self.model_id.clone(),
            method: self.method,
            layer: self.layer.map(i64::from),
            prob_needs_edit: self.prob_needs_edit,
            tokens: self
                .tokens
                .iter()
                .map(|t| RawToken {
                    surface: t.surface.clone(),
                    start: t.span.map(|s| s.start as i64),
                    end: t.span.map(|s| s.end as i64),
                    score: t.score,
                })
                .collect(),
        };
        serde_json::to_string(&raw).expect("score records always serialize")
    }

    /// Copy with every token score multiplied by `c`.
    pub fn scaled(&self, c: f64) -> ScoreRecord {
        let mut out = self.clone();
        for t in &mut out.tokens {
            t.score *= c;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SchemaViolation {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Error)]
pub enum ScoreFileError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {}: {}", .0.line, .0.message)]
    SchemaViolation(SchemaViolation),
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ReadOptions {
    /// Number of layers L; attention layers must lie in `1..=L` when set.
    pub num_layers: Option<u32>,
}

#[derive(Debug, Default)]
pub struct ScoreReadResult {
    pub records: Vec<ScoreRecord>,
    pub violations: Vec<SchemaViolation>,
}

fn validate(raw: RawRecord, opts: &ReadOptions) -> Result<ScoreRecord, String> {
    if !(0.0..=1.0).contains(&raw.prob_needs_edit) {
        return Err(format!("prob_needs_edit {} outside [0, 1]", raw.prob_needs_edit));
    }
    let layer = match (raw.method, raw.layer) {
        (Method::Attention, None) => return Err("attention record without layer".into()),
        (Method::Attention, Some(l)) if l < 1 => {
            return Err(format!("layer {l} out of range (layers are 1-based)"))
        }
        (Method::Attention, Some(l)) => {
            let l = u32::try_from(l).map_err(|_| format!("layer {l} out of range"))?;
            if let Some(max) = opts.num_layers {
                if l > max {
                    return Err(format!("layer {l} out of range 1..={max}"));
                }
            }
            Some(l)
        }
        (Method::GradientInput, Some(l)) => {
            return Err(format!("grad_x_input record must have null layer, got {l}"))
        }
        (Method::GradientInput, None) => None,
    };
    let mut tokens = Vec::with_capacity(raw.tokens.len());
    for (i, t) in raw.tokens.into_iter().enumerate() {
        if !t.score.is_finite() {
            return Err(format!("token {i}: non-finite score"));
        }
        if raw.method == Method::Attention && t.score < 0.0 {
            return Err(format!("token {i}: negative attention score {}", t.score));
        }
        let span = match (t.start, t.end) {
            (None, None) => None,
            (Some(s), Some(e)) if 0 <= s && s < e => Some(ByteSpan::new(s as usize, e as usize)),
            (s, e) => return Err(format!("token {i}: invalid offsets {s:?}..{e:?}")),
        };
        tokens.push(TokenScore {
            surface: t.surface,
            span,
            score: t.score,
        });
    }
    Ok(ScoreRecord::new(
        raw.sid,
        raw.model_id,
        raw.method,
        layer,
        raw.prob_needs_edit,
        tokens,
    ))
}

/// Reads a score file, collecting every invalid line instead of stopping.
pub fn read_score_records<R: BufRead>(reader: R, opts: &ReadOptions) -> Result<ScoreReadResult, ScoreFileError> {
    let mut out = ScoreReadResult::default();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed = serde_json::from_str::<RawRecord>(&line)
            .map_err(|e| e.to_string())
            .and_then(|raw| validate(raw, opts));
        match parsed {
            Ok(r) => out.records.push(r),
            Err(message) => out.violations.push(SchemaViolation {
                line: idx + 1,
                message,
            }),
        }
    }
    Ok(out)
}

/// Reads a score file, failing on the first schema violation.
pub fn read_score_file<R: BufRead>(reader: R, opts: &ReadOptions) -> Result<Vec<ScoreRecord>, ScoreFileError> {
    let mut res = read_score_records(reader, opts)?;
    if !res.violations.is_empty() {
        return Err(ScoreFileError::SchemaViolation(res.violations.swap_remove(0)));
    }
    Ok(res.records)
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AlignError {
    #[error("token {position} ({surface:?}) span {span} outside sentence of {len} bytes")]
    SpanOutOfBounds {
        position: usize,
        surface: String,
        span: ByteSpan,
        len: usize,
    },
    #[error("token {position} ({surface:?}) span {span} is not inside a single word")]
    SpanCrossesWordBoundary {
        position: usize,
        surface: String,
        span: ByteSpan,
    },
    #[error("aggregation {aggregation} cannot use a {method} record")]
    MethodMismatch { aggregation: String, method: String },
    #[error("word {word} has a non-finite score")]
    NonFiniteScore { word: usize },
}

/// Assigns each offset-bearing token to the word containing it.
///
/// The result has one entry per word (possibly empty), holding token
/// positions in input order.
pub fn align_tokens_to_words(tokens: &[TokenScore], sentence: &PreEditSentence) -> Result<Vec<Vec<usize>>, AlignError> {
    let mut map = vec![Vec::new(); sentence.len()];
    let len = sentence.text.len();
    for (position, token) in tokens.iter().enumerate() {
        let Some(span) = token.span else { continue };
        if span.end > len {
            return Err(AlignError::SpanOutOfBounds {
                position,
                surface: token.surface.clone(),
                span,
                len,
            });
        }
        let word = sentence
            .word_at(span.start)
            .filter(|w| sentence.words[*w].span.contains(&span))
            .ok_or_else(|| AlignError::SpanCrossesWordBoundary {
                position,
                surface: token.surface.clone(),
                span,
            })?;
        map[word].push(position);
    }
    Ok(map)
}

/// Word indices ordered by descending score, ties by ascending index.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WordRanking {
    pub sid: String,
    pub aggregation: Aggregation,
    pub scores: Vec<f64>,
    pub order: Vec<usize>,
    /// Words that received no tokens and were scored 0.
    pub unscored_words: Vec<usize>,
}

pub fn order_by_score(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
}

impl WordRanking {
    pub fn from_scores(sid: impl Into<String>, aggregation: Aggregation, scores: Vec<f64>) -> Self {
        let order = order_by_score(&scores);
        WordRanking {
            sid: sid.into(),
            aggregation,
            scores,
            order,
            unscored_words: Vec::new(),
        }
    }

    /// 1-based rank of each word.
    pub fn ranks(&self) -> Vec<usize> {
        let mut ranks = vec![0; self.order.len()];
        for (pos, &w) in self.order.iter().enumerate() {
            ranks[w] = pos + 1;
        }
        ranks
    }
}

fn word_scores(
    record: &ScoreRecord,
    sentence: &PreEditSentence,
    token_value: impl Fn(f64) -> f64,
) -> Result<(Vec<f64>, Vec<usize>), AlignError> {
    let map = align_tokens_to_words(&record.tokens, sentence)?;
    let mut unscored = Vec::new();
    let scores = map
        .iter()
        .enumerate()
        .map(|(w, positions)| {
            if positions.is_empty() {
                unscored.push(w);
            }
            positions
                .iter()
                .map(|&p| token_value(record.tokens[p].score))
                .sum::<f64>()
        })
        .collect::<Vec<_>>();
    if let Some(word) = scores.iter().position(|s| !s.is_finite()) {
        return Err(AlignError::NonFiniteScore { word });
    }
    Ok((scores, unscored))
}

fn check_method(record: &ScoreRecord, aggregation: Aggregation) -> Result<(), AlignError> {
    if record.method != aggregation.method() {
        return Err(AlignError::MethodMismatch {
            aggregation: aggregation.as_str().into(),
            method: record.method.as_str().into(),
        });
    }
    Ok(())
}

fn build_ranking(
    record: &ScoreRecord,
    aggregation: Aggregation,
    (scores, unscored): (Vec<f64>, Vec<usize>),
) -> WordRanking {
    let mut ranking = WordRanking::from_scores(record.sid.clone(), aggregation, scores);
    ranking.unscored_words = unscored;
    ranking
}

/// Sums each word's head-summed CLS attention over its tokens.
pub fn aggregate_attention(record: &ScoreRecord, sentence: &PreEditSentence) -> Result<WordRanking, AlignError> {
    check_method(record, Aggregation::AttnSum)?;
    let scored = word_scores(record, sentence, |s| s)?;
    Ok(build_ranking(record, Aggregation::AttnSum, scored))
}

/// Signed or magnitude gradient×input word ranking, magnitude taken per word.
pub fn aggregate_gradient(
    record: &ScoreRecord,
    sentence: &PreEditSentence,
    magnitude: bool,
) -> Result<WordRanking, AlignError> {
    aggregate_gradient_with(record, sentence, magnitude, MagnitudeMode::Word)
}

pub fn aggregate_gradient_with(
    record: &ScoreRecord,
    sentence: &PreEditSentence,
    magnitude: bool,
    mode: MagnitudeMode,
) -> Result<WordRanking, AlignError> {
    let aggregation = if magnitude {
        Aggregation::GradMagnitude
    } else {
        Aggregation::GradSigned
    };
    check_method(record, aggregation)?;
    let (mut scores, unscored) = match (magnitude, mode) {
        (true, MagnitudeMode::Token) => word_scores(record, sentence, f64::abs)?,
        _ => word_scores(record, sentence, |s| s)?,
    };
    if magnitude && mode == MagnitudeMode::Word {
        scores.iter_mut().for_each(|s| *s = s.abs());
    }
    Ok(build_ranking(record, aggregation, (scores, unscored)))
}

pub fn rank_words(
    record: &ScoreRecord,
    sentence: &PreEditSentence,
    aggregation: Aggregation,
    mode: MagnitudeMode,
) -> Result<WordRanking, AlignError> {
    match aggregation {
        Aggregation::AttnSum => aggregate_attention(record, sentence),
        Aggregation::GradSigned => aggregate_gradient_with(record, sentence, false, mode),
        Aggregation::GradMagnitude => aggregate_gradient_with(record, sentence, true, mode),
    }
}
