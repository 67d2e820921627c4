//! Joins score records with the rationale dataset and computes per-example
//! metrics and their aggregates.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::PreEditSentence;
use crate::metrics::{evaluate_order, top_k_equals_rationale, AggregateMetrics, MetricSums, MetricsError};
use crate::rationales::{EditType, HumanRationale};
use crate::scores::{rank_words, AlignError, Aggregation, MagnitudeMode, Method, ScoreRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub edit_types: BTreeSet<EditType>,
    pub aggregations: BTreeSet<Aggregation>,
    /// Inclusive range of attention layers to evaluate.
    pub layer_range: Option<(u32, u32)>,
    pub magnitude_mode: MagnitudeMode,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            edit_types: [EditType::SpellingError, EditType::DeletedText].into(),
            aggregations: [Aggregation::AttnSum, Aggregation::GradSigned, Aggregation::GradMagnitude].into(),
            layer_range: None,
            magnitude_mode: MagnitudeMode::Word,
        }
    }
}

/// One line of the per-example metrics output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleRow {
    pub sid: String,
    pub model_id: String,
    pub method: Method,
    pub aggregation: Aggregation,
    pub layer: Option<u32>,
    pub edit_type: EditType,
    pub rr: f64,
    pub auprc: f64,
    pub top1: u8,
    pub predicted_label: bool,
    pub prob_needs_edit: f64,
    pub rationale_size: usize,
    /// Top-|H| ranked words equal the rationale.
    pub top_k_match: bool,
    /// Highest-ranked word belongs to the rationale.
    pub top_word_in_rationale: bool,
}

impl ExampleRow {
    pub fn metrics(&self) -> crate::metrics::ExampleMetrics {
        crate::metrics::ExampleMetrics {
            sid: self.sid.clone(),
            reciprocal_rank: self.rr,
            auprc: self.auprc,
            top1: self.top1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalWarning {
    pub sid: String,
    pub model_id: String,
    pub method: Method,
    pub layer: Option<u32>,
    pub words_without_tokens: Vec<usize>,
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("score record for unknown sid {0}")]
    UnknownSid(String),
    #[error("duplicate score record for sid {sid}, model {model_id}, method {method}, layer {layer:?}")]
    DuplicateRecord {
        sid: String,
        model_id: String,
        method: String,
        layer: Option<u32>,
    },
    #[error("{sid} ({model_id}): {source}")]
    Align {
        sid: String,
        model_id: String,
        source: AlignError,
    },
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{0}: pre-edit text has no words")]
    EmptySentence(String),
}

#[derive(Debug, Default)]
pub struct EvalOutput {
    pub rows: Vec<ExampleRow>,
    pub warnings: Vec<EvalWarning>,
}

struct Prepared<'a> {
    rationale: &'a HumanRationale,
    sentence: PreEditSentence,
    words: BTreeSet<usize>,
}

fn evaluate_record(
    record: &ScoreRecord,
    prepared: &Prepared<'_>,
    opts: &EvalOptions,
) -> Result<(Vec<ExampleRow>, Option<EvalWarning>), EvalError> {
    let mut rows = Vec::new();
    let mut unscored = None;
    for &aggregation in Aggregation::for_method(record.method) {
        if !opts.aggregations.contains(&aggregation) {
            continue;
        }
        let ranking = rank_words(record, &prepared.sentence, aggregation, opts.magnitude_mode).map_err(|source| {
            EvalError::Align {
                sid: record.sid.clone(),
                model_id: record.model_id.clone(),
                source,
            }
        })?;
        let m = evaluate_order(&ranking.order, &prepared.words, &record.sid)?;
        if !ranking.unscored_words.is_empty() {
            unscored = Some(ranking.unscored_words.clone());
        }
        rows.push(ExampleRow {
            sid: record.sid.clone(),
            model_id: record.model_id.clone(),
            method: record.method,
            aggregation,
            layer: record.layer,
            edit_type: prepared.rationale.edit_type,
            rr: m.reciprocal_rank,
            auprc: m.auprc,
            top1: m.top1,
            predicted_label: record.predicted_label,
            prob_needs_edit: record.prob_needs_edit,
            rationale_size: prepared.words.len(),
            top_k_match: top_k_equals_rationale(&ranking.order, &prepared.words),
            top_word_in_rationale: ranking.order.first().is_some_and(|w| prepared.words.contains(w)),
        });
    }
    let warning = unscored.map(|words| EvalWarning {
        sid: record.sid.clone(),
        model_id: record.model_id.clone(),
        method: record.method,
        layer: record.layer,
        words_without_tokens: words,
    });
    Ok((rows, warning))
}

/// Scores every record against its rationale. Output follows record order.
pub fn evaluate(
    rationales: &[HumanRationale],
    records: &[ScoreRecord],
    opts: &EvalOptions,
) -> Result<EvalOutput, EvalError> {
    let mut by_sid: HashMap<&str, Prepared<'_>> = HashMap::new();
    for r in rationales {
        let sentence = r
            .pre_edit()
            .map_err(|_| EvalError::EmptySentence(r.sid.clone()))?;
        by_sid.insert(
            r.sid.as_str(),
            Prepared {
                rationale: r,
                sentence,
                words: r.word_set(),
            },
        );
    }

    let mut seen = HashSet::new();
    for rec in records {
        if !seen.insert((rec.sid.as_str(), rec.model_id.as_str(), rec.method, rec.layer)) {
            return Err(EvalError::DuplicateRecord {
                sid: rec.sid.clone(),
                model_id: rec.model_id.clone(),
                method: rec.method.as_str().into(),
                layer: rec.layer,
            });
        }
        if !by_sid.contains_key(rec.sid.as_str()) {
            return Err(EvalError::UnknownSid(rec.sid.clone()));
        }
    }

    let selected: Vec<(&ScoreRecord, &Prepared<'_>)> = records
        .iter()
        .filter(|rec| match (rec.layer, opts.layer_range) {
            (Some(l), Some((lo, hi))) => (lo..=hi).contains(&l),
            _ => true,
        })
        .map(|rec| (rec, &by_sid[rec.sid.as_str()]))
        .filter(|(_, p)| opts.edit_types.contains(&p.rationale.edit_type))
        .collect();

    let results: Vec<_> = selected
        .par_iter()
        .map(|(rec, prepared)| evaluate_record(rec, prepared, opts))
        .collect::<Result<_, _>>()?;

    let mut out = EvalOutput::default();
    for (rows, warning) in results {
        out.rows.extend(rows);
        out.warnings.extend(warning);
    }
    Ok(out)
}

/// Which predictions an aggregate covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassSlice {
    All,
    /// Predicted "needs edit" (every rationale example truly needs editing).
    Correct,
    Wrong,
}

impl ClassSlice {
    pub fn contains(self, row: &ExampleRow) -> bool {
        match self {
            ClassSlice::All => true,
            ClassSlice::Correct => row.predicted_label,
            ClassSlice::Wrong => !row.predicted_label,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EditSlice {
    Spelling,
    Deleted,
    All,
}

impl EditSlice {
    pub const ALL: [EditSlice; 3] = [EditSlice::Spelling, EditSlice::Deleted, EditSlice::All];

    pub fn contains(self, edit_type: EditType) -> bool {
        match self {
            EditSlice::Spelling => edit_type == EditType::SpellingError,
            EditSlice::Deleted => edit_type == EditType::DeletedText,
            EditSlice::All => true,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            EditSlice::Spelling => "spelling",
            EditSlice::Deleted => "deleted",
            EditSlice::All => "all",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateEntry {
    pub model_id: String,
    pub method: Method,
    pub aggregation: Aggregation,
    pub layer: Option<u32>,
    pub edit_type: EditSlice,
    pub slice: ClassSlice,
    #[serde(flatten)]
    pub metrics: AggregateMetrics,
}

type GroupKey = (String, Method, Aggregation, Option<u32>, EditSlice, ClassSlice);

/// Aggregates keyed by model, method, aggregation, layer, edit type and
/// classification slice. Empty groups are omitted; output is sorted by key.
pub fn aggregate_rows(rows: &[ExampleRow]) -> Vec<AggregateEntry> {
    let mut groups: BTreeMap<GroupKey, MetricSums> = BTreeMap::new();
    for row in rows {
        for edit in EditSlice::ALL {
            if !edit.contains(row.edit_type) {
                continue;
            }
            for slice in [ClassSlice::All, ClassSlice::Correct, ClassSlice::Wrong] {
                if !slice.contains(row) {
                    continue;
                }
                let key = (row.model_id.clone(), row.method, row.aggregation, row.layer, edit, slice);
                groups.entry(key).or_default().add(&row.metrics());
            }
        }
    }
    groups
        .into_iter()
        .map(|((model_id, method, aggregation, layer, edit_type, slice), sums)| AggregateEntry {
            model_id,
            method,
            aggregation,
            layer,
            edit_type,
            slice,
            metrics: sums.finish().expect("groups are never empty"),
        })
        .collect()
}
