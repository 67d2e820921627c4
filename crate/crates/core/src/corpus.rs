//! Edit-markup sentence parsing.
//!
//! A corpus sentence interleaves untouched text with `<del>…</del>` and
//! `<ins>…</ins>` spans. Parsing turns it into an ordered list of
//! [`EditSegment`]s from which the pre-edit (model input) and post-edit
//! sentences are rebuilt by plain concatenation.

use std::fmt;
use std::io::BufRead;

use quick_xml::events::Event;
use quick_xml::Reader;
use serde::{Deserialize, Serialize};
use thiserror::Error;

const DEL_OPEN: &str = "<del>";
const DEL_CLOSE: &str = "</del>";
const INS_OPEN: &str = "<ins>";
const INS_CLOSE: &str = "</ins>";

/// Placeholders substituted for LaTeX constructs in the corpus.
pub const PLACEHOLDER_TOKENS: [&str; 4] = ["_MATH_", "_MATHDISP_", "_CITE_", "_REF_"];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("empty input")]
    EmptyInput,
    #[error("unbalanced tag {tag} at byte {offset}")]
    UnbalancedTag { tag: String, offset: usize },
    #[error("tag {inner} nested inside {outer} at byte {offset}")]
    NestedTag {
        outer: String,
        inner: String,
        offset: usize,
    },
    #[error("empty {tag} span at byte {offset}")]
    EmptyTag { tag: String, offset: usize },
    #[error("malformed record: {0}")]
    MalformedRecord(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ReconstructError {
    #[error("reconstructed sentence is empty or whitespace-only")]
    EmptyResult,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SegmentKind {
    #[serde(rename = "kept")]
    Kept,
    #[serde(rename = "del")]
    Deleted,
    #[serde(rename = "ins")]
    Inserted,
}

impl SegmentKind {
    fn tags(self) -> Option<(&'static str, &'static str)> {
        match self {
            SegmentKind::Kept => None,
            SegmentKind::Deleted => Some((DEL_OPEN, DEL_CLOSE)),
            SegmentKind::Inserted => Some((INS_OPEN, INS_CLOSE)),
        }
    }

    fn tag_name(self) -> &'static str {
        match self {
            SegmentKind::Kept => "kept",
            SegmentKind::Deleted => "del",
            SegmentKind::Inserted => "ins",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditSegment {
    pub kind: SegmentKind,
    pub text: String,
}

impl EditSegment {
    pub fn is_whitespace_only(&self) -> bool {
        self.text.chars().all(char::is_whitespace)
    }
}

/// One aligned corpus sentence in canonical segment form.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditedSentence {
    pub sid: String,
    pub segments: Vec<EditSegment>,
}

/// Half-open byte range `[start, end)`. Serialized as a two-element array.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(from = "(usize, usize)", into = "(usize, usize)")]
pub struct ByteSpan {
    pub start: usize,
    pub end: usize,
}

impl ByteSpan {
    pub fn new(start: usize, end: usize) -> Self {
        debug_assert!(start <= end);
        ByteSpan { start, end }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }

    pub fn overlaps(&self, other: &ByteSpan) -> bool {
        self.start < other.end && other.start < self.end
    }

    pub fn contains(&self, other: &ByteSpan) -> bool {
        self.start <= other.start && other.end <= self.end
    }
}

impl From<(usize, usize)> for ByteSpan {
    fn from((start, end): (usize, usize)) -> Self {
        ByteSpan { start, end }
    }
}

impl From<ByteSpan> for (usize, usize) {
    fn from(span: ByteSpan) -> Self {
        (span.start, span.end)
    }
}

impl fmt::Display for ByteSpan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {})", self.start, self.end)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Word {
    pub index: usize,
    pub span: ByteSpan,
    pub surface: String,
}

/// The sentence the classifier sees: kept and deleted text, split on whitespace.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreEditSentence {
    pub text: String,
    pub words: Vec<Word>,
}

impl PreEditSentence {
    /// Segments `text` into maximal non-whitespace runs.
    pub fn from_text(text: impl Into<String>) -> Result<Self, ReconstructError> {
        let text = text.into();
        let words = split_words(&text);
        if words.is_empty() {
            return Err(ReconstructError::EmptyResult);
        }
        Ok(PreEditSentence { text, words })
    }

    /// Index of the word whose span contains byte `offset`, if any.
    pub fn word_at(&self, offset: usize) -> Option<usize> {
        let idx = self.words.partition_point(|w| w.span.end <= offset);
        self.words
            .get(idx)
            .filter(|w| w.span.start <= offset)
            .map(|w| w.index)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

pub fn split_words(text: &str) -> Vec<Word> {
    let mut words = Vec::new();
    let mut start: Option<usize> = None;
    for (pos, ch) in text.char_indices() {
        match (ch.is_whitespace(), start) {
            (true, Some(s)) => {
                words.push(make_word(text, words.len(), s, pos));
                start = None;
            }
            (false, None) => start = Some(pos),
            _ => {}
        }
    }
    if let Some(s) = start {
        words.push(make_word(text, words.len(), s, text.len()));
    }
    words
}

fn make_word(text: &str, index: usize, start: usize, end: usize) -> Word {
    Word {
        index,
        span: ByteSpan::new(start, end),
        surface: text[start..end].to_string(),
    }
}

/// Accumulates segments in canonical form: adjacent same-kind text merges.
#[derive(Debug, Default)]
struct SegmentBuilder {
    segments: Vec<EditSegment>,
}

impl SegmentBuilder {
    fn push(&mut self, kind: SegmentKind, text: &str) {
        if text.is_empty() {
            return;
        }
        match self.segments.last_mut() {
            Some(last) if last.kind == kind => last.text.push_str(text),
            _ => self.segments.push(EditSegment {
                kind,
                text: text.to_string(),
            }),
        }
    }

    fn finish(self) -> Vec<EditSegment> {
        self.segments
    }
}

fn match_tag(rest: &str) -> Option<(SegmentKind, bool, usize)> {
    [
        (DEL_OPEN, SegmentKind::Deleted, true),
        (DEL_CLOSE, SegmentKind::Deleted, false),
        (INS_OPEN, SegmentKind::Inserted, true),
        (INS_CLOSE, SegmentKind::Inserted, false),
    ]
    .into_iter()
    .find(|(tag, _, _)| rest.starts_with(tag))
    .map(|(tag, kind, open)| (kind, open, tag.len()))
}

/// Parses the inner markup of one sentence record.
///
/// Only the exact tags `<del>`, `</del>`, `<ins>` and `</ins>` are markup;
/// any other `<` is ordinary text.
pub fn parse_sentence(raw_markup: &str) -> Result<Vec<EditSegment>, ParseError> {
    if raw_markup.is_empty() {
        return Err(ParseError::EmptyInput);
    }
    let mut builder = SegmentBuilder::default();
    // (kind, byte offset of the open tag, byte offset where content starts)
    let mut open: Option<(SegmentKind, usize, usize)> = None;
    let mut text_start = 0;
    let mut pos = 0;

    while let Some(rel) = raw_markup[pos..].find('<') {
        let at = pos + rel;
        let Some((kind, is_open, tag_len)) = match_tag(&raw_markup[at..]) else {
            pos = at + 1;
            continue;
        };
        let current = open.map_or(SegmentKind::Kept, |(k, _, _)| k);
        match (is_open, open) {
            (true, None) => {
                builder.push(SegmentKind::Kept, &raw_markup[text_start..at]);
                open = Some((kind, at, at + tag_len));
            }
            (true, Some((outer, _, _))) => {
                return Err(ParseError::NestedTag {
                    outer: outer.tag_name().to_string(),
                    inner: kind.tag_name().to_string(),
                    offset: at,
                });
            }
            (false, Some((outer, open_at, content_start))) if outer == kind => {
                let content = &raw_markup[content_start..at];
                if content.is_empty() {
                    return Err(ParseError::EmptyTag {
                        tag: kind.tag_name().to_string(),
                        offset: open_at,
                    });
                }
                builder.push(current, content);
                open = None;
            }
            (false, _) => {
                return Err(ParseError::UnbalancedTag {
                    tag: format!("</{}>", kind.tag_name()),
                    offset: at,
                });
            }
        }
        pos = at + tag_len;
        text_start = pos;
    }

    if let Some((kind, open_at, _)) = open {
        return Err(ParseError::UnbalancedTag {
            tag: format!("<{}>", kind.tag_name()),
            offset: open_at,
        });
    }
    builder.push(SegmentKind::Kept, &raw_markup[text_start..]);
    Ok(builder.finish())
}

impl EditedSentence {
    pub fn parse(sid: impl Into<String>, raw_markup: &str) -> Result<Self, ParseError> {
        Ok(EditedSentence {
            sid: sid.into(),
            segments: parse_sentence(raw_markup)?,
        })
    }

    /// Serializes the segments back to inline markup.
    pub fn to_markup(&self) -> String {
        let mut out = String::new();
        for seg in &self.segments {
            match seg.kind.tags() {
                None => out.push_str(&seg.text),
                Some((open, close)) => {
                    out.push_str(open);
                    out.push_str(&seg.text);
                    out.push_str(close);
                }
            }
        }
        out
    }

    pub fn has_edits(&self) -> bool {
        self.segments.iter().any(|s| s.kind != SegmentKind::Kept)
    }

    fn concat(&self, keep: SegmentKind) -> String {
        self.segments
            .iter()
            .filter(|s| s.kind == SegmentKind::Kept || s.kind == keep)
            .map(|s| s.text.as_str())
            .collect()
    }

    pub fn pre_edit_text(&self) -> String {
        self.concat(SegmentKind::Deleted)
    }

    pub fn post_edit_text(&self) -> String {
        self.concat(SegmentKind::Inserted)
    }

    /// Byte spans of each deleted segment within the pre-edit text.
    pub fn deleted_spans(&self) -> Vec<ByteSpan> {
        let mut offset = 0;
        let mut spans = Vec::new();
        for seg in &self.segments {
            match seg.kind {
                SegmentKind::Inserted => {}
                SegmentKind::Kept => offset += seg.text.len(),
                SegmentKind::Deleted => {
                    spans.push(ByteSpan::new(offset, offset + seg.text.len()));
                    offset += seg.text.len();
                }
            }
        }
        spans
    }
}

pub fn reconstruct_pre_edit(s: &EditedSentence) -> Result<PreEditSentence, ReconstructError> {
    PreEditSentence::from_text(s.pre_edit_text())
}

pub fn reconstruct_post_edit(s: &EditedSentence) -> Result<String, ReconstructError> {
    let text = s.post_edit_text();
    if text.chars().all(char::is_whitespace) {
        return Err(ReconstructError::EmptyResult);
    }
    Ok(text)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ParserMode {
    /// Line-oriented: one `<sentence sid="…">…</sentence>` record per line,
    /// inner text taken verbatim.
    #[default]
    Lenient,
    /// Full XML parse with entity decoding; any malformed XML fails the file.
    Strict,
}

/// A record the reader could not turn into a sentence.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecordError {
    /// 1-based line of the record start.
    pub line: usize,
    pub sid: Option<String>,
    pub message: String,
}

#[derive(Debug, Default)]
pub struct CorpusReadResult {
    pub sentences: Vec<EditedSentence>,
    pub errors: Vec<RecordError>,
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("xml error at byte {position}: {message}")]
    Xml { position: u64, message: String },
    #[error("line {line}: invalid canonical record: {message}")]
    Canonical { line: usize, message: String },
}

/// Reads a sentence-record corpus in the given mode.
pub fn read_corpus<R: BufRead>(reader: R, mode: ParserMode) -> Result<CorpusReadResult, CorpusError> {
    match mode {
        ParserMode::Lenient => read_lenient(reader),
        ParserMode::Strict => read_strict(reader),
    }
}

const SENTENCE_OPEN: &str = "<sentence";
const SENTENCE_CLOSE: &str = "</sentence>";

fn read_lenient<R: BufRead>(reader: R) -> Result<CorpusReadResult, CorpusError> {
    let mut result = CorpusReadResult::default();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let line_no = idx + 1;
        let Some(open_at) = line.find(SENTENCE_OPEN) else {
            continue;
        };
        match lenient_record(&line[open_at..]) {
            Ok((sid, inner)) => match EditedSentence::parse(sid.clone(), inner) {
                Ok(s) => result.sentences.push(s),
                Err(e) => result.errors.push(RecordError {
                    line: line_no,
                    sid: Some(sid),
                    message: e.to_string(),
                }),
            },
            Err(e) => result.errors.push(RecordError {
                line: line_no,
                sid: None,
                message: e.to_string(),
            }),
        }
    }
    Ok(result)
}

fn lenient_record(record: &str) -> Result<(String, &str), ParseError> {
    let head_end = record
        .find('>')
        .ok_or_else(|| ParseError::MalformedRecord("unterminated <sentence> tag".into()))?;
    let head = &record[SENTENCE_OPEN.len()..head_end];
    let sid = attribute(head, "sid")
        .ok_or_else(|| ParseError::MalformedRecord("missing sid attribute".into()))?;
    let body = &record[head_end + 1..];
    let close = body
        .rfind(SENTENCE_CLOSE)
        .ok_or_else(|| ParseError::MalformedRecord("missing </sentence>".into()))?;
    Ok((sid.to_string(), &body[..close]))
}

fn attribute<'a>(head: &'a str, name: &str) -> Option<&'a str> {
    let needle = format!("{name}=");
    let at = head.find(&needle)? + needle.len();
    let rest = &head[at..];
    let quote = rest.chars().next().filter(|c| *c == '"' || *c == '\'')?;
    let value = &rest[1..];
    value.find(quote).map(|end| &value[..end])
}

/// A `<sentence>` element being read by the strict reader.
struct OpenRecord {
    sid: String,
    builder: SegmentBuilder,
    /// Edit tag currently open inside the sentence.
    open: Option<SegmentKind>,
    /// First problem found in this record.
    error: Option<String>,
    start_line: usize,
}

fn read_strict<R: BufRead>(reader: R) -> Result<CorpusReadResult, CorpusError> {
    let mut xml = Reader::from_reader(reader);
    xml.config_mut().check_end_names = true;
    let mut buf = Vec::new();
    let mut result = CorpusReadResult::default();
    let mut line = 1usize;

    let mut current: Option<OpenRecord> = None;

    let xml_err = |xml: &Reader<R>, e: &dyn fmt::Display| CorpusError::Xml {
        position: xml.buffer_position(),
        message: e.to_string(),
    };

    loop {
        let event = xml.read_event_into(&mut buf).map_err(|e| xml_err(&xml, &e))?;
        match event {
            Event::Eof => break,
            Event::Start(start) => {
                let name = start.name();
                let name = std::str::from_utf8(name.as_ref()).unwrap_or("").to_string();
                match (&mut current, name.as_str()) {
                    (None, "sentence") => {
                        let mut sid = None;
                        for attr in start.attributes() {
                            let attr = attr.map_err(|e| xml_err(&xml, &e))?;
                            if attr.key.as_ref() == b"sid" {
                                sid = Some(
                                    attr.unescape_value()
                                        .map_err(|e| xml_err(&xml, &e))?
                                        .into_owned(),
                                );
                            }
                        }
                        let error = sid.is_none().then(|| "missing sid attribute".to_string());
                        current = Some(OpenRecord {
                            sid: sid.unwrap_or_default(),
                            builder: SegmentBuilder::default(),
                            open: None,
                            error,
                            start_line: line,
                        });
                    }
                    (Some(OpenRecord { open, error, .. }), "del" | "ins") => {
                        let kind = if name == "del" {
                            SegmentKind::Deleted
                        } else {
                            SegmentKind::Inserted
                        };
                        if let Some(outer) = open {
                            error.get_or_insert_with(|| {
                                format!("tag {} nested inside {}", name, outer.tag_name())
                            });
                        }
                        *open = Some(kind);
                    }
                    (Some(OpenRecord { error, .. }), other) => {
                        error.get_or_insert_with(|| format!("unexpected element <{other}>"));
                    }
                    (None, _) => {}
                }
            }
            Event::End(end) => {
                let name = end.name();
                let name = std::str::from_utf8(name.as_ref()).unwrap_or("").to_string();
                match name.as_str() {
                    "sentence" => {
                        if let Some(OpenRecord { sid, builder, error, start_line, .. }) = current.take() {
                            let segments = builder.finish();
                            let error = error.or_else(|| {
                                segments.is_empty().then(|| ParseError::EmptyInput.to_string())
                            });
                            match error {
                                None => result.sentences.push(EditedSentence { sid, segments }),
                                Some(message) => result.errors.push(RecordError {
                                    line: start_line,
                                    sid: (!sid.is_empty()).then_some(sid),
                                    message,
                                }),
                            }
                        }
                    }
                    "del" | "ins" => {
                        if let Some(OpenRecord { open, .. }) = &mut current {
                            *open = None;
                        }
                    }
                    _ => {}
                }
            }
            Event::Text(text) => {
                if let Some(OpenRecord { builder, open, .. }) = &mut current {
                    let text = text.unescape().map_err(|e| xml_err(&xml, &e))?;
                    builder.push(open.unwrap_or(SegmentKind::Kept), &text);
                }
            }
            Event::CData(data) => {
                if let Some(OpenRecord { builder, open, .. }) = &mut current {
                    let text = String::from_utf8_lossy(&data).into_owned();
                    builder.push(open.unwrap_or(SegmentKind::Kept), &text);
                }
            }
            Event::Empty(empty) => {
                if let Some(OpenRecord { error, .. }) = &mut current {
                    let name = String::from_utf8_lossy(empty.name().as_ref()).into_owned();
                    error.get_or_insert_with(|| format!("empty element <{name}/>"));
                }
            }
            _ => {}
        }
        line += buf.iter().filter(|b| **b == b'\n').count();
        buf.clear();
    }
    Ok(result)
}

/// Reads canonical JSONL, one serialized [`EditedSentence`] per line (the output of `parse`).
pub fn read_canonical<R: BufRead>(reader: R) -> Result<Vec<EditedSentence>, CorpusError> {
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let s: EditedSentence = serde_json::from_str(&line).map_err(|e| CorpusError::Canonical {
            line: idx + 1,
            message: e.to_string(),
        })?;
        out.push(s);
    }
    Ok(out)
}
