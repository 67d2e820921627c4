//! Plausibility metrics comparing a model's word ranking with a human rationale.
//!
//! All metrics consume only the total order of words, so they are unchanged by
//! any positive rescaling of the underlying scores.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rationales::HumanRationale;
use crate::scores::WordRanking;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricsError {
    #[error("{sid}: rationale word {word} is not in the ranking")]
    RationaleNotInRanking { sid: String, word: usize },
    #[error("{sid}: empty rationale")]
    EmptyRationale { sid: String },
    #[error("no examples to aggregate")]
    EmptyInput,
}

/// 1-based positions of the rationale words in `order`, ascending.
fn rationale_positions(order: &[usize], rationale: &BTreeSet<usize>, sid: &str) -> Result<Vec<usize>, MetricsError> {
    if rationale.is_empty() {
        return Err(MetricsError::EmptyRationale { sid: sid.into() });
    }
    let mut rank_of = vec![usize::MAX; order.len()];
    for (pos, &w) in order.iter().enumerate() {
        if w < rank_of.len() {
            rank_of[w] = pos + 1;
        }
    }
    let mut positions = rationale
        .iter()
        .map(|&w| match rank_of.get(w) {
            Some(&r) if r != usize::MAX => Ok(r),
            _ => Err(MetricsError::RationaleNotInRanking {
                sid: sid.into(),
                word: w,
            }),
        })
        .collect::<Result<Vec<_>, _>>()?;
    positions.sort_unstable();
    Ok(positions)
}

/// Reciprocal of the mean rank under iterative removal.
///
/// Each rationale word is ranked within the list left after removing the
/// rationale words found before it, so the `i`-th found word (0-based) at
/// original position `p` has rank `p - i`.
pub fn reciprocal_rank_of(order: &[usize], rationale: &BTreeSet<usize>, sid: &str) -> Result<f64, MetricsError> {
    let positions = rationale_positions(order, rationale, sid)?;
    let total: usize = positions.iter().enumerate().map(|(i, p)| p - i).sum();
    Ok(positions.len() as f64 / total as f64)
}

/// Average precision of the rationale words along the ranking.
pub fn auprc_of(order: &[usize], rationale: &BTreeSet<usize>, sid: &str) -> Result<f64, MetricsError> {
    let positions = rationale_positions(order, rationale, sid)?;
    let sum: f64 = positions
        .iter()
        .enumerate()
        .map(|(i, &p)| (i + 1) as f64 / p as f64)
        .sum();
    Ok(sum / positions.len() as f64)
}

pub fn top1_match_of(order: &[usize], rationale: &BTreeSet<usize>) -> u8 {
    match (rationale.len(), order.first()) {
        (1, Some(top)) if rationale.contains(top) => 1,
        _ => 0,
    }
}

/// True when the top-|H| ranked words are exactly the rationale.
pub fn top_k_equals_rationale(order: &[usize], rationale: &BTreeSet<usize>) -> bool {
    rationale.len() <= order.len() && order[..rationale.len()].iter().all(|w| rationale.contains(w))
}

pub fn reciprocal_rank(ranking: &WordRanking, rationale: &HumanRationale) -> Result<f64, MetricsError> {
    reciprocal_rank_of(&ranking.order, &rationale.word_set(), &rationale.sid)
}

pub fn auprc(ranking: &WordRanking, rationale: &HumanRationale) -> Result<f64, MetricsError> {
    auprc_of(&ranking.order, &rationale.word_set(), &rationale.sid)
}

pub fn top1_match(ranking: &WordRanking, rationale: &HumanRationale) -> u8 {
    top1_match_of(&ranking.order, &rationale.word_set())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleMetrics {
    pub sid: String,
    pub reciprocal_rank: f64,
    pub auprc: f64,
    pub top1: u8,
}

pub fn evaluate_order(order: &[usize], rationale: &BTreeSet<usize>, sid: &str) -> Result<ExampleMetrics, MetricsError> {
    Ok(ExampleMetrics {
        sid: sid.to_string(),
        reciprocal_rank: reciprocal_rank_of(order, rationale, sid)?,
        auprc: auprc_of(order, rationale, sid)?,
        top1: top1_match_of(order, rationale),
    })
}

pub fn evaluate_example(ranking: &WordRanking, rationale: &HumanRationale) -> Result<ExampleMetrics, MetricsError> {
    evaluate_order(&ranking.order, &rationale.word_set(), &rationale.sid)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregateMetrics {
    pub n_examples: usize,
    pub mean_reciprocal_rank: f64,
    pub mean_auprc: f64,
    pub mean_top1: f64,
}

/// Running sums; merging is order-independent up to float rounding.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MetricSums {
    pub n: usize,
    pub rr: f64,
    pub auprc: f64,
    pub top1: usize,
}

impl MetricSums {
    pub fn add(&mut self, m: &ExampleMetrics) {
        self.n += 1;
        self.rr += m.reciprocal_rank;
        self.auprc += m.auprc;
        self.top1 += usize::from(m.top1);
    }

    pub fn merge(mut self, other: MetricSums) -> MetricSums {
        self.n += other.n;
        self.rr += other.rr;
        self.auprc += other.auprc;
        self.top1 += other.top1;
        self
    }

    pub fn finish(&self) -> Result<AggregateMetrics, MetricsError> {
        if self.n == 0 {
            return Err(MetricsError::EmptyInput);
        }
        let n = self.n as f64;
        Ok(AggregateMetrics {
            n_examples: self.n,
            mean_reciprocal_rank: self.rr / n,
            mean_auprc: self.auprc / n,
            mean_top1: self.top1 as f64 / n,
        })
    }
}

pub fn aggregate<'a, I>(examples: I) -> Result<AggregateMetrics, MetricsError>
where
    I: IntoIterator<Item = &'a ExampleMetrics>,
{
    let mut sums = MetricSums::default();
    examples.into_iter().for_each(|m| sums.add(m));
    sums.finish()
}
