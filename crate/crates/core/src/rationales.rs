//! Edit classification and human rationale extraction.
//!
//! Two kinds of edit yield rationales that are both faithful and sufficient:
//! a misspelled word replaced by a correctly spelled one, and edits that only
//! remove text. In both cases the deleted text, promoted to whole words of the
//! pre-edit sentence, is the rationale.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::io::BufRead;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{
    reconstruct_pre_edit, ByteSpan, EditSegment, EditedSentence, PreEditSentence, SegmentKind,
    PLACEHOLDER_TOKENS,
};

const STRIP_PUNCT: &[char] = &['.', ',', ';', ':', '!', '?', '\'', '"', '(', ')', '[', ']', '{', '}'];

/// Lists of rejected words in the stats output are capped at this length.
const MAX_REPORTED_WORDS: usize = 100;

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, clap::ValueEnum,
)]
pub enum EditType {
    #[serde(rename = "spelling")]
    #[value(name = "spelling")]
    SpellingError,
    #[serde(rename = "deleted")]
    #[value(name = "deleted")]
    DeletedText,
    #[serde(rename = "other")]
    #[value(skip)]
    Other,
}

impl EditType {
    pub fn as_str(self) -> &'static str {
        match self {
            EditType::SpellingError => "spelling",
            EditType::DeletedText => "deleted",
            EditType::Other => "other",
        }
    }
}

#[derive(Debug, Error)]
pub enum DictionaryError {
    #[error("cannot read dictionary {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("dictionary {0} has no entries")]
    Empty(String),
}

#[derive(Debug, Clone)]
pub struct Dictionary {
    entries: HashSet<String>,
    source_path: String,
}

/// Lowercases and strips surrounding punctuation.
pub fn normalize_word(word: &str) -> String {
    word.trim_matches(STRIP_PUNCT).to_lowercase()
}

fn is_placeholder(word: &str) -> bool {
    let core = word.trim_matches(STRIP_PUNCT);
    PLACEHOLDER_TOKENS.contains(&core)
}

impl Dictionary {
    pub fn from_words<I, S>(words: I, source_path: impl Into<String>) -> Result<Self, DictionaryError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let source_path = source_path.into();
        let entries: HashSet<String> = words
            .into_iter()
            .map(|w| normalize_word(w.as_ref()))
            .filter(|w| !w.is_empty())
            .collect();
        if entries.is_empty() {
            return Err(DictionaryError::Empty(source_path));
        }
        Ok(Dictionary {
            entries,
            source_path,
        })
    }

    /// One word per line; blank lines and lines starting with `#` are skipped.
    pub fn from_reader<R: BufRead>(reader: R, source_path: impl Into<String>) -> Result<Self, DictionaryError> {
        let source_path = source_path.into();
        let mut words = Vec::new();
        for line in reader.lines() {
            let line = line.map_err(|source| DictionaryError::Io {
                path: source_path.clone(),
                source,
            })?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            words.push(line.to_string());
        }
        Self::from_words(words, source_path)
    }

    pub fn load(path: &Path) -> Result<Self, DictionaryError> {
        let display = path.display().to_string();
        let file = std::fs::File::open(path).map_err(|source| DictionaryError::Io {
            path: display.clone(),
            source,
        })?;
        Self::from_reader(std::io::BufReader::new(file), display)
    }

    /// Placeholder tokens always count as correctly spelled.
    pub fn is_correct(&self, word: &str) -> bool {
        if is_placeholder(word) {
            return true;
        }
        let norm = normalize_word(word);
        !norm.is_empty() && self.entries.contains(&norm)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn source_path(&self) -> &str {
        &self.source_path
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassifyOptions {
    /// Optional Damerau-Levenshtein cap between a deleted and its replacing word.
    pub max_edit_distance: Option<usize>,
}

/// Why a sentence whose edits all look like single-word replacements was
/// nevertheless not classified as a spelling correction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SpellingRejection {
    DeletedWordInDictionary(String),
    InsertedWordNotInDictionary(String),
    EditDistanceExceeded {
        deleted: String,
        inserted: String,
        distance: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Classification {
    pub edit_type: EditType,
    pub has_edits: bool,
    pub rejections: Vec<SpellingRejection>,
}

fn single_word(text: &str) -> Option<&str> {
    let trimmed = text.trim();
    (!trimmed.is_empty() && !trimmed.contains(char::is_whitespace)).then_some(trimmed)
}

/// A deleted segment followed (across whitespace only) by an inserted one.
struct Replacement<'a> {
    deleted: &'a EditSegment,
    inserted: &'a EditSegment,
}

/// Pairs each deletion with an immediately following insertion. Returns
/// `None` when any edit is left unpaired.
fn replacement_pairs(segments: &[EditSegment]) -> Option<Vec<Replacement<'_>>> {
    let edits: Vec<usize> = segments
        .iter()
        .enumerate()
        .filter(|(_, s)| s.kind != SegmentKind::Kept)
        .map(|(i, _)| i)
        .collect();
    let mut pairs = Vec::new();
    let mut k = 0;
    while k < edits.len() {
        let i = edits[k];
        let next = edits.get(k + 1).copied();
        let paired = segments[i].kind == SegmentKind::Deleted
            && next.is_some_and(|j| {
                segments[j].kind == SegmentKind::Inserted
                    && segments[i + 1..j].iter().all(EditSegment::is_whitespace_only)
            });
        if !paired {
            return None;
        }
        let j = next.unwrap();
        pairs.push(Replacement {
            deleted: &segments[i],
            inserted: &segments[j],
        });
        k += 2;
    }
    Some(pairs)
}

pub fn classify_detailed(s: &EditedSentence, dict: &Dictionary, opts: &ClassifyOptions) -> Classification {
    let n_del = s.segments.iter().filter(|x| x.kind == SegmentKind::Deleted).count();
    let n_ins = s.segments.iter().filter(|x| x.kind == SegmentKind::Inserted).count();
    let mut out = Classification {
        edit_type: EditType::Other,
        has_edits: n_del + n_ins > 0,
        rejections: Vec::new(),
    };
    if n_del > 0 && n_ins == 0 {
        out.edit_type = EditType::DeletedText;
        return out;
    }
    if n_del == 0 {
        return out;
    }
    let Some(pairs) = replacement_pairs(&s.segments) else {
        return out;
    };
    let mut words = Vec::with_capacity(pairs.len());
    for pair in &pairs {
        match (single_word(&pair.deleted.text), single_word(&pair.inserted.text)) {
            (Some(d), Some(i)) => words.push((d, i)),
            _ => return out,
        }
    }
    for (deleted, inserted) in words {
        if dict.is_correct(deleted) {
            out.rejections
                .push(SpellingRejection::DeletedWordInDictionary(normalize_word(deleted)));
        }
        if !dict.is_correct(inserted) {
            out.rejections
                .push(SpellingRejection::InsertedWordNotInDictionary(normalize_word(inserted)));
        }
        if let Some(cap) = opts.max_edit_distance {
            let distance = strsim::damerau_levenshtein(deleted, inserted);
            if distance > cap {
                out.rejections.push(SpellingRejection::EditDistanceExceeded {
                    deleted: deleted.to_string(),
                    inserted: inserted.to_string(),
                    distance,
                });
            }
        }
    }
    if out.rejections.is_empty() {
        out.edit_type = EditType::SpellingError;
    }
    out
}

/// Spelling correction, pure deletion, or neither.
pub fn classify_edit(s: &EditedSentence, dict: &Dictionary, opts: &ClassifyOptions) -> EditType {
    classify_detailed(s, dict, opts).edit_type
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ExtractError {
    #[error("edit type {0:?} does not yield a rationale")]
    NotExtractable(EditType),
    #[error("pre-edit sentence is empty")]
    EmptyPreEdit,
    #[error("all deleted spans are whitespace-only")]
    EmptyRationale,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HumanRationale {
    pub sid: String,
    pub edit_type: EditType,
    pub pre_edit_text: String,
    #[serde(rename = "rationale_word_indices")]
    pub word_indices: Vec<usize>,
    #[serde(rename = "rationale_char_spans")]
    pub char_spans: Vec<ByteSpan>,
}

impl HumanRationale {
    pub fn word_set(&self) -> BTreeSet<usize> {
        self.word_indices.iter().copied().collect()
    }

    pub fn pre_edit(&self) -> Result<PreEditSentence, crate::corpus::ReconstructError> {
        PreEditSentence::from_text(self.pre_edit_text.clone())
    }
}

/// Words of `sentence` touched by any of `spans` on a non-whitespace byte.
pub fn words_overlapping(sentence: &PreEditSentence, spans: &[ByteSpan]) -> Vec<usize> {
    let mut out = BTreeSet::new();
    for span in spans {
        let first = sentence.words.partition_point(|w| w.span.end <= span.start);
        for word in &sentence.words[first..] {
            if word.span.start >= span.end {
                break;
            }
            out.insert(word.index);
        }
    }
    out.into_iter().collect()
}

pub fn extract_rationale(s: &EditedSentence, et: EditType) -> Result<HumanRationale, ExtractError> {
    if et == EditType::Other {
        return Err(ExtractError::NotExtractable(et));
    }
    let pre = reconstruct_pre_edit(s).map_err(|_| ExtractError::EmptyPreEdit)?;
    let char_spans = s.deleted_spans();
    let word_indices = words_overlapping(&pre, &char_spans);
    if word_indices.is_empty() {
        return Err(ExtractError::EmptyRationale);
    }
    Ok(HumanRationale {
        sid: s.sid.clone(),
        edit_type: et,
        pre_edit_text: pre.text,
        word_indices,
        char_spans,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct WordCount {
    pub word: String,
    pub count: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SpellingRejectionStats {
    /// Sentences whose edits were all single-word replacements but failed a
    /// dictionary or distance check.
    pub candidates_rejected: usize,
    pub deleted_word_in_dictionary: usize,
    pub inserted_word_not_in_dictionary: usize,
    pub edit_distance_exceeded: usize,
    /// Dictionary entries that turned deleted words into "correct" ones.
    pub top_deleted_words_in_dictionary: Vec<WordCount>,
    /// Inserted words missing from the dictionary.
    pub top_inserted_words_missing: Vec<WordCount>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExtractionStats {
    pub dictionary_path: String,
    pub dictionary_size: usize,
    pub max_edit_distance: Option<usize>,
    pub total_records: usize,
    pub parse_errors: usize,
    pub unedited: usize,
    pub spelling: usize,
    pub deleted: usize,
    pub other: usize,
    pub empty_rationale: usize,
    pub emitted: usize,
    pub spelling_rejections: SpellingRejectionStats,
}

/// Outcome for one input sentence.
#[derive(Debug, Clone, PartialEq)]
pub enum SentenceOutcome {
    Rationale(HumanRationale),
    Unedited,
    Other(Vec<SpellingRejection>),
    Skipped { sid: String, reason: ExtractError },
}

pub fn process_sentence(s: &EditedSentence, dict: &Dictionary, opts: &ClassifyOptions) -> SentenceOutcome {
    let c = classify_detailed(s, dict, opts);
    if !c.has_edits {
        return SentenceOutcome::Unedited;
    }
    if c.edit_type == EditType::Other {
        return SentenceOutcome::Other(c.rejections);
    }
    match extract_rationale(s, c.edit_type) {
        Ok(r) => SentenceOutcome::Rationale(r),
        Err(reason) => SentenceOutcome::Skipped {
            sid: s.sid.clone(),
            reason,
        },
    }
}

fn top_words(counts: BTreeMap<String, usize>) -> Vec<WordCount> {
    let mut v: Vec<WordCount> = counts
        .into_iter()
        .map(|(word, count)| WordCount { word, count })
        .collect();
    v.sort_by(|a, b| b.count.cmp(&a.count).then_with(|| a.word.cmp(&b.word)));
    v.truncate(MAX_REPORTED_WORDS);
    v
}

/// Classifies every sentence and extracts rationales, preserving input order.
///
/// `parse_errors` is the number of records the reader already rejected; it is
/// folded into the totals.
pub fn build_rationale_dataset(
    sentences: &[EditedSentence],
    parse_errors: usize,
    dict: &Dictionary,
    opts: &ClassifyOptions,
) -> (Vec<HumanRationale>, ExtractionStats) {
    let outcomes: Vec<SentenceOutcome> = sentences
        .par_iter()
        .map(|s| process_sentence(s, dict, opts))
        .collect();

    let mut stats = ExtractionStats {
        dictionary_path: dict.source_path().to_string(),
        dictionary_size: dict.len(),
        max_edit_distance: opts.max_edit_distance,
        total_records: sentences.len() + parse_errors,
        parse_errors,
        ..Default::default()
    };
    let mut in_dict = BTreeMap::new();
    let mut missing = BTreeMap::new();
    let mut rationales = Vec::new();

    for outcome in outcomes {
        match outcome {
            SentenceOutcome::Rationale(r) => {
                match r.edit_type {
                    EditType::SpellingError => stats.spelling += 1,
                    EditType::DeletedText => stats.deleted += 1,
                    EditType::Other => unreachable!("rationales are never extracted for Other"),
                }
                rationales.push(r);
            }
            SentenceOutcome::Unedited => stats.unedited += 1,
            SentenceOutcome::Other(rejections) => {
                stats.other += 1;
                if rejections.is_empty() {
                    continue;
                }
                let rs = &mut stats.spelling_rejections;
                rs.candidates_rejected += 1;
                for r in rejections {
                    match r {
                        SpellingRejection::DeletedWordInDictionary(w) => {
                            rs.deleted_word_in_dictionary += 1;
                            *in_dict.entry(w).or_insert(0) += 1;
                        }
                        SpellingRejection::InsertedWordNotInDictionary(w) => {
                            rs.inserted_word_not_in_dictionary += 1;
                            *missing.entry(w).or_insert(0) += 1;
                        }
                        SpellingRejection::EditDistanceExceeded { .. } => {
                            rs.edit_distance_exceeded += 1;
                        }
                    }
                }
            }
            SentenceOutcome::Skipped { sid, reason } => {
                log::warn!("skipping {sid}: {reason}");
                stats.empty_rationale += 1;
            }
        }
    }
    stats.emitted = rationales.len();
    stats.spelling_rejections.top_deleted_words_in_dictionary = top_words(in_dict);
    stats.spelling_rejections.top_inserted_words_missing = top_words(missing);
    (rationales, stats)
}

#[derive(Debug, Error)]
pub enum RationaleReadError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Invalid { line: usize, message: String },
}

/// Reads and validates a rationale dataset.
pub fn read_rationales<R: BufRead>(reader: R) -> Result<Vec<HumanRationale>, RationaleReadError> {
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let invalid = |message: String| RationaleReadError::Invalid {
            line: idx + 1,
            message,
        };
        let r: HumanRationale = serde_json::from_str(&line).map_err(|e| invalid(e.to_string()))?;
        validate_rationale(&r).map_err(invalid)?;
        out.push(r);
    }
    Ok(out)
}

pub fn validate_rationale(r: &HumanRationale) -> Result<(), String> {
    if r.edit_type == EditType::Other {
        return Err(format!("{}: edit_type other carries no rationale", r.sid));
    }
    if r.word_indices.is_empty() {
        return Err(format!("{}: empty rationale", r.sid));
    }
    let pre = r
        .pre_edit()
        .map_err(|e| format!("{}: {e}", r.sid))?;
    if let Some(bad) = r.word_indices.iter().find(|i| **i >= pre.len()) {
        return Err(format!(
            "{}: word index {bad} out of range for {} words",
            r.sid,
            pre.len()
        ));
    }
    if let Some(bad) = r
        .char_spans
        .iter()
        .find(|s| s.start > s.end || s.end > r.pre_edit_text.len())
    {
        return Err(format!("{}: char span {bad} out of bounds", r.sid));
    }
    Ok(())
}
