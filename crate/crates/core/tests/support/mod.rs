// Brute-force reference implementations used to cross-check the library.
// Nothing here calls into the library's metric or ranking code.
#![allow(dead_code)]

use std::collections::BTreeSet;
use std::path::PathBuf;

use rationale_eval::corpus::{ByteSpan, PreEditSentence};
use rationale_eval::scores::{Method, ScoreRecord, TokenScore};

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

/// Removal procedure done literally: find the best-ranked remaining rationale
/// word, note its 1-based position in the current list, delete it, repeat.
pub fn oracle_rr(order: &[usize], h: &BTreeSet<usize>) -> f64 {
    let mut list: Vec<usize> = order.to_vec();
    let mut remaining = h.clone();
    let mut total = 0usize;
    while !remaining.is_empty() {
        let pos = list.iter().position(|w| remaining.contains(w)).expect("rationale word in list");
        total += pos + 1;
        remaining.remove(&list[pos]);
        list.remove(pos);
    }
    h.len() as f64 / total as f64
}

/// Mean rank without removal.
pub fn no_removal_rr(order: &[usize], h: &BTreeSet<usize>) -> f64 {
    let total: usize = order
        .iter()
        .enumerate()
        .filter(|(_, w)| h.contains(w))
        .map(|(p, _)| p + 1)
        .sum();
    h.len() as f64 / total as f64
}

/// Area under the step precision-recall curve, sweeping the cut-off over
/// every prefix of the ranking.
pub fn oracle_ap(order: &[usize], h: &BTreeSet<usize>) -> f64 {
    let mut area = 0.0;
    let mut prev_recall = 0.0;
    for k in 1..=order.len() {
        let hits = order[..k].iter().filter(|w| h.contains(w)).count();
        let precision = hits as f64 / k as f64;
        let recall = hits as f64 / h.len() as f64;
        area += precision * (recall - prev_recall);
        prev_recall = recall;
    }
    area
}

pub fn oracle_top1(order: &[usize], h: &BTreeSet<usize>) -> u8 {
    if h.len() == 1 && h.iter().next() == order.first() {
        1
    } else {
        0
    }
}

/// Selection sort: highest score first, lowest index among equals.
pub fn oracle_order(scores: &[f64]) -> Vec<usize> {
    let mut left: Vec<usize> = (0..scores.len()).collect();
    let mut out = Vec::new();
    while !left.is_empty() {
        let mut best = 0;
        for i in 1..left.len() {
            if scores[left[i]] > scores[left[best]] {
                best = i;
            }
        }
        out.push(left.remove(best));
    }
    out
}

/// Word index containing a byte offset, by scanning characters.
pub fn oracle_word_at(text: &str, offset: usize) -> Option<usize> {
    let mut word = None;
    let mut count = 0;
    let mut in_word = false;
    for (i, c) in text.char_indices() {
        if c.is_whitespace() {
            in_word = false;
        } else if !in_word {
            in_word = true;
            word = Some(count);
            count += 1;
        }
        if i == offset {
            return if in_word { word } else { None };
        }
    }
    None
}

/// Whitespace words with byte spans, by a character scan.
pub fn oracle_words(text: &str) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let mut start = None;
    for (i, c) in text.char_indices() {
        match (c.is_whitespace(), start) {
            (true, Some(s)) => {
                spans.push((s, i));
                start = None;
            }
            (false, None) => start = Some(i),
            _ => {}
        }
    }
    if let Some(s) = start {
        spans.push((s, text.len()));
    }
    spans
}

/// Record with one token per word (split in two when `split` is set) and
/// unscored delimiter tokens at both ends.
pub fn record_for(
    sentence: &PreEditSentence,
    sid: &str,
    method: Method,
    layer: Option<u32>,
    word_scores: &[f64],
    split: bool,
) -> ScoreRecord {
    let mut tokens = vec![TokenScore {
        surface: "[CLS]".into(),
        span: None,
        score: 0.5,
    }];
    for (w, &s) in sentence.words.iter().zip(word_scores) {
        let mid = w.surface.char_indices().nth(1).map(|(i, _)| i);
        match (split, mid) {
            (true, Some(mid)) => {
                let cut = w.span.start + mid;
                tokens.push(TokenScore {
                    surface: w.surface[..mid].into(),
                    span: Some(ByteSpan::new(w.span.start, cut)),
                    score: s * 0.25,
                });
                tokens.push(TokenScore {
                    surface: format!("##{}", &w.surface[mid..]),
                    span: Some(ByteSpan::new(cut, w.span.end)),
                    score: s * 0.75,
                });
            }
            _ => tokens.push(TokenScore {
                surface: w.surface.clone(),
                span: Some(w.span),
                score: s,
            }),
        }
    }
    tokens.push(TokenScore {
        surface: "[SEP]".into(),
        span: None,
        score: 0.5,
    });
    ScoreRecord::new(sid, "toy", method, layer, 0.9, tokens)
}

/// All permutations of 0..n (Heap's algorithm).
pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    fn heap(k: usize, a: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if k <= 1 {
            out.push(a.clone());
            return;
        }
        for i in 0..k {
            heap(k - 1, a, out);
            if k.is_multiple_of(2) {
                a.swap(i, k - 1);
            } else {
                a.swap(0, k - 1);
            }
        }
    }
    let mut a: Vec<usize> = (0..n).collect();
    let mut out = Vec::new();
    heap(n, &mut a, &mut out);
    out
}

fn gcd(a: u128, b: u128) -> u128 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// The precision-recall sweep in exact rational arithmetic, as (num, den).
pub fn oracle_ap_exact(order: &[usize], h: &BTreeSet<usize>) -> (u128, u128) {
    let (mut num, mut den) = (0u128, 1u128);
    let mut hits = 0u128;
    for (k, w) in order.iter().enumerate() {
        if h.contains(w) {
            hits += 1;
            // precision hits/(k+1) times a recall step of 1/|H|
            let (n2, d2) = (hits, (k as u128 + 1) * h.len() as u128);
            num = num * d2 + n2 * den;
            den *= d2;
            let g = gcd(num, den);
            num /= g;
            den /= g;
        }
    }
    (num, den)
}
