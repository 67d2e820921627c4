//! Analyses over per-example metric rows: group comparisons, the
//! confidence/plausibility relation and per-layer sweeps.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evaluate::{EditSlice, ExampleRow};
use crate::metrics::{top_k_equals_rationale, AggregateMetrics, MetricSums};
use crate::rationales::HumanRationale;
use crate::scores::{Aggregation, Method, ScoreRecord, WordRanking};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AnalysisError {
    #[error("comparison needs at least two groups, got {0}")]
    TooFewGroups(usize),
    #[error("group {label} covers a different example set than {baseline} for edit type {edit_type}")]
    MismatchedExampleSets {
        baseline: String,
        label: String,
        edit_type: String,
    },
    #[error("model {model_id}: no attention scores for layer {layer} (layers 1..={max})")]
    MissingLayer { model_id: String, layer: u32, max: u32 },
    #[error("layer sweep for {model_id} has no attention rows")]
    NoLayers { model_id: String },
}

/// Aggregate plus the example ids it covers, for one edit type.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupSummary {
    pub metrics: AggregateMetrics,
    pub sids: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonGroup {
    pub label: String,
    pub per_edit_type: BTreeMap<String, GroupSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub label: String,
    pub edit_type: String,
    pub metric: String,
    pub value: f64,
    /// Difference from the first group's value.
    pub delta: f64,
}

fn metric_values(m: &AggregateMetrics) -> [(&'static str, f64); 3] {
    [
        ("mrr", m.mean_reciprocal_rank),
        ("auprc", m.mean_auprc),
        ("top1", m.mean_top1),
    ]
}

/// Tabulates every group's metrics with deltas against the first group.
pub fn compare(groups: &[ComparisonGroup]) -> Result<Vec<ComparisonRow>, AnalysisError> {
    if groups.len() < 2 {
        return Err(AnalysisError::TooFewGroups(groups.len()));
    }
    let baseline = &groups[0];
    for group in &groups[1..] {
        let edit_types: BTreeSet<_> = group.per_edit_type.keys().chain(baseline.per_edit_type.keys()).collect();
        for edit_type in edit_types {
            let same = match (baseline.per_edit_type.get(edit_type), group.per_edit_type.get(edit_type)) {
                (Some(a), Some(b)) => a.sids == b.sids,
                _ => false,
            };
            if !same {
                return Err(AnalysisError::MismatchedExampleSets {
                    baseline: baseline.label.clone(),
                    label: group.label.clone(),
                    edit_type: edit_type.clone(),
                });
            }
        }
    }
    let mut rows = Vec::new();
    for group in groups {
        for (edit_type, summary) in &group.per_edit_type {
            let base = metric_values(&baseline.per_edit_type[edit_type].metrics);
            for ((metric, value), (_, base_value)) in metric_values(&summary.metrics).into_iter().zip(base) {
                rows.push(ComparisonRow {
                    label: group.label.clone(),
                    edit_type: edit_type.clone(),
                    metric: metric.into(),
                    value,
                    delta: value - base_value,
                });
            }
        }
    }
    Ok(rows)
}

/// How an example qualifies as "attended".
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum AttendedMode {
    /// The top-|H| ranked words are exactly the rationale.
    #[default]
    Strict,
    /// The single top-ranked word is in the rationale.
    Top1,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConfidenceExample {
    pub prob_needs_edit: f64,
    pub predicted_label: bool,
    pub attended: bool,
}

impl ConfidenceExample {
    pub fn from_row(row: &ExampleRow, mode: AttendedMode) -> Self {
        ConfidenceExample {
            prob_needs_edit: row.prob_needs_edit,
            predicted_label: row.predicted_label,
            attended: match mode {
                AttendedMode::Strict => row.top_k_match,
                AttendedMode::Top1 => row.top_word_in_rationale,
            },
        }
    }

    pub fn from_parts(ranking: &WordRanking, rationale: &HumanRationale, record: &ScoreRecord, mode: AttendedMode) -> Self {
        let words = rationale.word_set();
        let attended = match mode {
            AttendedMode::Strict => top_k_equals_rationale(&ranking.order, &words),
            AttendedMode::Top1 => ranking.order.first().is_some_and(|w| words.contains(w)),
        };
        ConfidenceExample {
            prob_needs_edit: record.prob_needs_edit,
            predicted_label: record.predicted_label,
            attended,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceReport {
    pub edit_type: String,
    pub n_attended: usize,
    pub n_other: usize,
    pub mean_conf_attended: Option<f64>,
    pub mean_conf_other: Option<f64>,
    /// `(attended - other) / other`; `None` when either group is empty.
    pub relative_gain: Option<f64>,
    /// Set when one partition is empty.
    pub degenerate: bool,
}

fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

/// Mean confidence of correctly classified examples split by whether the
/// model's top words are the human rationale.
pub fn confidence_correlation<'a, I>(edit_type: &str, examples: I) -> ConfidenceReport
where
    I: IntoIterator<Item = &'a ConfidenceExample>,
{
    let (mut attended, mut other) = (Vec::new(), Vec::new());
    for ex in examples.into_iter().filter(|e| e.predicted_label) {
        if ex.attended {
            attended.push(ex.prob_needs_edit);
        } else {
            other.push(ex.prob_needs_edit);
        }
    }
    let mean_conf_attended = mean(&attended);
    let mean_conf_other = mean(&other);
    let relative_gain = match (mean_conf_attended, mean_conf_other) {
        (Some(a), Some(o)) if o > 0.0 => Some((a - o) / o),
        _ => None,
    };
    ConfidenceReport {
        edit_type: edit_type.to_string(),
        n_attended: attended.len(),
        n_other: other.len(),
        mean_conf_attended,
        mean_conf_other,
        relative_gain,
        degenerate: attended.is_empty() || other.is_empty(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSweep {
    pub model_id: String,
    pub edit_type: String,
    pub per_layer: BTreeMap<u32, AggregateMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerPoint {
    pub model_id: String,
    pub edit_type: String,
    pub layer: u32,
    pub metric: String,
    pub value: f64,
}

impl LayerSweep {
    pub fn points(&self) -> Vec<LayerPoint> {
        self.per_layer
            .iter()
            .flat_map(|(&layer, m)| {
                metric_values(m).into_iter().map(move |(metric, value)| LayerPoint {
                    model_id: self.model_id.clone(),
                    edit_type: self.edit_type.clone(),
                    layer,
                    metric: metric.into(),
                    value,
                })
            })
            .collect()
    }
}

/// Per-layer aggregates for one model's attention rows.
pub fn layer_sweep<'a, I>(model_id: &str, edit_type: &str, rows: I) -> Result<LayerSweep, AnalysisError>
where
    I: IntoIterator<Item = &'a ExampleRow>,
{
    let mut sums: BTreeMap<u32, (MetricSums, BTreeSet<&str>)> = BTreeMap::new();
    for row in rows {
        let Some(layer) = row.layer else { continue };
        let entry = sums.entry(layer).or_default();
        entry.0.add(&row.metrics());
        entry.1.insert(row.sid.as_str());
    }
    let Some(&max) = sums.keys().next_back() else {
        return Err(AnalysisError::NoLayers {
            model_id: model_id.into(),
        });
    };
    if let Some(layer) = (1..=max).find(|l| !sums.contains_key(l)) {
        return Err(AnalysisError::MissingLayer {
            model_id: model_id.into(),
            layer,
            max,
        });
    }
    let first = &sums[&1].1;
    if let Some((&layer, _)) = sums.iter().find(|(_, (_, sids))| sids != first) {
        return Err(AnalysisError::MismatchedExampleSets {
            baseline: format!("{model_id} layer 1"),
            label: format!("{model_id} layer {layer}"),
            edit_type: edit_type.into(),
        });
    }
    Ok(LayerSweep {
        model_id: model_id.into(),
        edit_type: edit_type.into(),
        per_layer: sums
            .into_iter()
            .map(|(l, (s, _))| (l, s.finish().expect("layer groups are never empty")))
            .collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTableRow {
    /// "model" compares models under one aggregation; "method" compares
    /// aggregations within one model.
    pub comparison: String,
    pub scope: String,
    #[serde(flatten)]
    pub row: ComparisonRow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceTableRow {
    pub model_id: String,
    pub aggregation: Aggregation,
    pub layer: Option<u32>,
    pub attended_mode: AttendedMode,
    #[serde(flatten)]
    pub report: ConfidenceReport,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AnalysisOutput {
    pub comparison: Vec<ComparisonTableRow>,
    pub confidence: Vec<ConfidenceTableRow>,
    pub layers: Vec<LayerSweep>,
}

/// Final-layer rows per (model, aggregation), in first-seen order.
fn final_layer_groups(rows: &[ExampleRow]) -> Vec<((String, Aggregation), Vec<&ExampleRow>)> {
    let mut max_layer: BTreeMap<(&str, Aggregation), Option<u32>> = BTreeMap::new();
    for row in rows {
        let entry = max_layer.entry((row.model_id.as_str(), row.aggregation)).or_insert(row.layer);
        *entry = (*entry).max(row.layer);
    }
    let mut order: Vec<(String, Aggregation)> = Vec::new();
    let mut groups: BTreeMap<(String, Aggregation), Vec<&ExampleRow>> = BTreeMap::new();
    for row in rows {
        if max_layer[&(row.model_id.as_str(), row.aggregation)] != row.layer {
            continue;
        }
        let key = (row.model_id.clone(), row.aggregation);
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        groups.entry(key).or_default().push(row);
    }
    order
        .into_iter()
        .map(|k| {
            let v = groups.remove(&k).unwrap_or_default();
            (k, v)
        })
        .collect()
}

fn summarize(label: String, rows: &[&ExampleRow]) -> ComparisonGroup {
    let mut per_edit_type = BTreeMap::new();
    for edit in EditSlice::ALL {
        let mut sums = MetricSums::default();
        let mut sids = BTreeSet::new();
        for row in rows.iter().filter(|r| edit.contains(r.edit_type)) {
            sums.add(&row.metrics());
            sids.insert(row.sid.clone());
        }
        if let Ok(metrics) = sums.finish() {
            per_edit_type.insert(edit.as_str().to_string(), GroupSummary { metrics, sids });
        }
    }
    ComparisonGroup { label, per_edit_type }
}

/// Runs every analysis over evaluation rows (possibly from several models).
pub fn run_analysis(rows: &[ExampleRow], mode: AttendedMode) -> Result<AnalysisOutput, AnalysisError> {
    let finals = final_layer_groups(rows);
    let mut out = AnalysisOutput::default();

    let aggregations: BTreeSet<Aggregation> = finals.iter().map(|((_, a), _)| *a).collect();
    for aggregation in &aggregations {
        let groups: Vec<ComparisonGroup> = finals
            .iter()
            .filter(|((_, a), _)| a == aggregation)
            .map(|((model, _), rows)| summarize(model.clone(), rows))
            .collect();
        if groups.len() >= 2 {
            for row in compare(&groups)? {
                out.comparison.push(ComparisonTableRow {
                    comparison: "model".into(),
                    scope: aggregation.as_str().into(),
                    row,
                });
            }
        }
    }

    let mut models: Vec<&str> = Vec::new();
    for ((model, _), _) in &finals {
        if !models.contains(&model.as_str()) {
            models.push(model);
        }
    }
    for model in &models {
        let groups: Vec<ComparisonGroup> = finals
            .iter()
            .filter(|((m, _), _)| m == model)
            .map(|((_, a), rows)| summarize(a.as_str().to_string(), rows))
            .collect();
        if groups.len() >= 2 {
            for row in compare(&groups)? {
                out.comparison.push(ComparisonTableRow {
                    comparison: "method".into(),
                    scope: model.to_string(),
                    row,
                });
            }
        }
    }

    for ((model, aggregation), group_rows) in &finals {
        for edit in EditSlice::ALL {
            let examples: Vec<ConfidenceExample> = group_rows
                .iter()
                .filter(|r| edit.contains(r.edit_type))
                .map(|r| ConfidenceExample::from_row(r, mode))
                .collect();
            if examples.is_empty() {
                continue;
            }
            out.confidence.push(ConfidenceTableRow {
                model_id: model.clone(),
                aggregation: *aggregation,
                layer: group_rows.first().and_then(|r| r.layer),
                attended_mode: mode,
                report: confidence_correlation(edit.as_str(), &examples),
            });
        }
    }

    for model in &models {
        let attention: Vec<&ExampleRow> = rows
            .iter()
            .filter(|r| r.model_id == *model && r.method == Method::Attention)
            .collect();
        if attention.is_empty() {
            continue;
        }
        for edit in EditSlice::ALL {
            let slice: Vec<&ExampleRow> = attention.iter().copied().filter(|r| edit.contains(r.edit_type)).collect();
            if slice.is_empty() {
                continue;
            }
            out.layers.push(layer_sweep(model, edit.as_str(), slice)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rationales::EditType;

    fn agg(mrr: f64) -> AggregateMetrics {
        AggregateMetrics {
            n_examples: 2,
            mean_reciprocal_rank: mrr,
            mean_auprc: mrr,
            mean_top1: 0.0,
        }
    }

    fn group(label: &str, mrr: f64, sids: &[&str]) -> ComparisonGroup {
        let summary = GroupSummary {
            metrics: agg(mrr),
            sids: sids.iter().map(|s| s.to_string()).collect(),
        };
        ComparisonGroup {
            label: label.into(),
            per_edit_type: [("all".to_string(), summary)].into(),
        }
    }

    #[test]
    fn identical_groups_have_zero_delta() {
        let rows = compare(&[group("a", 0.5, &["1"]), group("b", 0.5, &["1"])]).unwrap();
        assert!(rows.iter().all(|r| r.delta == 0.0));
        assert_eq!(rows.len(), 6);
    }

    #[test]
    fn delta_against_first_group() {
        let rows = compare(&[group("bert", 0.841, &["1"]), group("roberta", 0.834, &["1"])]).unwrap();
        let r = rows.iter().find(|r| r.label == "roberta" && r.metric == "mrr").unwrap();
        assert!((r.delta - -0.007).abs() < 1e-12);
    }

    #[test]
    fn three_hand_set_groups() {
        let rows = compare(&[group("a", 0.2, &["1"]), group("b", 0.5, &["1"]), group("c", 0.9, &["1"])]).unwrap();
        let mrr: Vec<(String, f64, f64)> = rows
            .iter()
            .filter(|r| r.metric == "mrr")
            .map(|r| (r.label.clone(), r.value, r.delta))
            .collect();
        assert_eq!(mrr[0], ("a".into(), 0.2, 0.0));
        assert_eq!(mrr[1], ("b".into(), 0.5, 0.5 - 0.2));
        assert_eq!(mrr[2], ("c".into(), 0.9, 0.9 - 0.2));
    }

    #[test]
    fn comparison_errors() {
        assert_eq!(compare(&[group("a", 0.5, &["1"])]), Err(AnalysisError::TooFewGroups(1)));
        assert!(matches!(
            compare(&[group("a", 0.5, &["1"]), group("b", 0.5, &["2"])]),
            Err(AnalysisError::MismatchedExampleSets { .. })
        ));
    }

    fn ex(prob: f64, attended: bool) -> ConfidenceExample {
        ConfidenceExample {
            prob_needs_edit: prob,
            predicted_label: prob >= 0.5,
            attended,
        }
    }

    #[test]
    fn confidence_gain() {
        let exs = [ex(0.9, true), ex(0.8, true), ex(0.7, false), ex(0.8, false), ex(0.2, true)];
        let r = confidence_correlation("all", &exs);
        assert_eq!((r.n_attended, r.n_other), (2, 2));
        assert!((r.mean_conf_attended.unwrap() - 0.85).abs() < 1e-12);
        assert!((r.mean_conf_other.unwrap() - 0.75).abs() < 1e-12);
        assert!((r.relative_gain.unwrap() - 0.1 / 0.75).abs() < 1e-12);
        assert!(!r.degenerate);
    }

    #[test]
    fn degenerate_partition_is_flagged() {
        let r = confidence_correlation("all", &[ex(0.9, true), ex(0.9, true)]);
        assert!(r.degenerate);
        assert_eq!(r.relative_gain, None);
        assert_eq!(r.n_other, 0);
    }

    fn row(sid: &str, layer: u32, rr: f64) -> ExampleRow {
        ExampleRow {
            sid: sid.into(),
            model_id: "m".into(),
            method: Method::Attention,
            aggregation: Aggregation::AttnSum,
            layer: Some(layer),
            edit_type: EditType::SpellingError,
            rr,
            auprc: rr,
            top1: u8::from(rr == 1.0),
            predicted_label: true,
            prob_needs_edit: 0.9,
            rationale_size: 1,
            top_k_match: rr == 1.0,
            top_word_in_rationale: rr == 1.0,
        }
    }

    #[test]
    fn sweep_checks_layers() {
        let rows = [row("a", 1, 1.0), row("a", 2, 0.5), row("b", 1, 1.0), row("b", 2, 0.25)];
        let sweep = layer_sweep("m", "spelling", &rows).unwrap();
        assert_eq!(sweep.per_layer[&1].mean_reciprocal_rank, 1.0);
        assert_eq!(sweep.per_layer[&2].mean_reciprocal_rank, 0.375);
        assert_eq!(sweep.points().len(), 6);

        let gap = [row("a", 1, 1.0), row("a", 3, 1.0)];
        assert_eq!(
            layer_sweep("m", "spelling", &gap),
            Err(AnalysisError::MissingLayer { model_id: "m".into(), layer: 2, max: 3 })
        );
        let uneven = [row("a", 1, 1.0), row("b", 2, 1.0)];
        assert!(matches!(
            layer_sweep("m", "spelling", &uneven),
            Err(AnalysisError::MismatchedExampleSets { .. })
        ));
    }

    #[test]
    fn run_analysis_uses_final_layer() {
        let mut rows = vec![row("a", 1, 0.5), row("a", 2, 1.0)];
        let mut other = row("a", 2, 0.25);
        other.model_id = "n".into();
        other.layer = Some(1);
        rows.push(other.clone());
        other.layer = Some(2);
        rows.push(other);
        let out = run_analysis(&rows, AttendedMode::Strict).unwrap();
        let model_rows: Vec<_> = out
            .comparison
            .iter()
            .filter(|r| r.row.metric == "mrr" && r.row.edit_type == "all")
            .collect();
        assert_eq!(model_rows.len(), 2);
        assert_eq!(model_rows[0].row.value, 1.0);
        assert_eq!(model_rows[1].row.delta, 0.25 - 1.0);
        assert_eq!(out.layers.len(), 4);
        assert!(out.confidence.iter().all(|c| c.layer == Some(2)));
    }
}
