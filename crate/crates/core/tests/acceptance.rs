// Acceptance checks, one PASS/FAIL/SKIPPED line each. Runs without the test
// harness so the lines are always visible in `cargo test` output.

mod support;

use std::collections::BTreeSet;
use std::fs::File;
use std::io::BufReader;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rationale_eval::corpus::{read_corpus, EditedSentence, ParserMode, PreEditSentence};
use rationale_eval::metrics::{auprc_of, evaluate_order, reciprocal_rank_of, top1_match_of};
use rationale_eval::rationales::{
    build_rationale_dataset, classify_edit, extract_rationale, ClassifyOptions, Dictionary, EditType,
};
use rationale_eval::scores::{rank_words, Aggregation, MagnitudeMode, Method};

use support::*;

type Check = fn() -> Outcome;

enum Outcome {
    Pass(String),
    Fail(String),
    Skipped(String),
}

fn removal_worked_example() -> Outcome {
    let s = EditedSentence::parse("d.1", "The boy <del>ate the</del><ins>found his</ins> ball.").unwrap();
    let r = extract_rationale(&s, EditType::DeletedText).unwrap();
    let pre = r.pre_edit().unwrap();
    if pre.text != "The boy ate the ball." || r.word_indices != vec![2, 3] {
        return Outcome::Fail(format!("unexpected fixture: {:?} {:?}", pre.text, r.word_indices));
    }
    // Model ranks "ate" first and "the" second.
    let record = record_for(&pre, "d.1", Method::Attention, Some(1), &[0.1, 0.2, 0.9, 0.8, 0.05], true);
    let ranking = rank_words(&record, &pre, Aggregation::AttnSum, MagnitudeMode::Word).unwrap();
    let h = r.word_set();
    let with_removal = reciprocal_rank_of(&ranking.order, &h, "d.1").unwrap();
    let without = no_removal_rr(&ranking.order, &h);
    let ok = (with_removal - 1.0).abs() < 1e-9 && (without - 1.0 / 1.5).abs() < 1e-9;
    let msg = format!("order={:?} removal={with_removal} no-removal={without:.6}", ranking.order);
    if ok {
        Outcome::Pass(msg)
    } else {
        Outcome::Fail(msg)
    }
}

fn exhaustive_oracle() -> Outcome {
    let start = Instant::now();
    let mut cases = 0usize;
    let mut ap_bit_exact = 0usize;
    let mut worst_ap = 0.0f64;
    for n in 1..=6usize {
        let text: Vec<String> = (0..n).map(|i| format!("w{i}")).collect();
        let pre = PreEditSentence::from_text(text.join(" ")).unwrap();
        for perm in permutations(n) {
            // perm[k] is the word that should land at position k.
            let mut scores = vec![0.0; n];
            for (k, &w) in perm.iter().enumerate() {
                scores[w] = (n - k) as f64;
            }
            let record = record_for(&pre, "x", Method::Attention, Some(1), &scores, false);
            let order = rank_words(&record, &pre, Aggregation::AttnSum, MagnitudeMode::Word)
                .unwrap()
                .order;
            if order != perm || order != oracle_order(&scores) {
                return Outcome::Fail(format!("ranking mismatch for {perm:?}: {order:?}"));
            }
            for mask in 1u32..(1 << n) {
                let h: BTreeSet<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
                let m = evaluate_order(&order, &h, "x").unwrap();
                let (num, den) = oracle_ap_exact(&order, &h);
                let exact_ap = num as f64 / den as f64;
                if m.reciprocal_rank.to_bits() != oracle_rr(&order, &h).to_bits() || m.top1 != oracle_top1(&order, &h) {
                    return Outcome::Fail(format!("rr/top1 mismatch: order={order:?} h={h:?}"));
                }
                let err = (m.auprc - exact_ap).abs();
                worst_ap = worst_ap.max(err);
                if err > 4.0 * f64::EPSILON {
                    return Outcome::Fail(format!("auprc mismatch: order={order:?} h={h:?} {} vs {num}/{den}", m.auprc));
                }
                ap_bit_exact += usize::from(m.auprc.to_bits() == exact_ap.to_bits());
                cases += 1;
            }
        }
    }
    let elapsed = start.elapsed();
    let msg = format!(
        "{cases} cases in {:.2}s; rr/top1 bit-identical, auprc bit-identical in {ap_bit_exact}, max |err| {worst_ap:.1e}",
        elapsed.as_secs_f64()
    );
    if elapsed < Duration::from_secs(60) {
        Outcome::Pass(msg)
    } else {
        Outcome::Fail(msg)
    }
}

const WORDS: [&str; 12] = [
    "the", "model", "erroneous", "_MATH_", "señal", "is", "of", "and,", "résumé", "_CITE_.", "x", "lemma",
];

fn random_sentence(rng: &mut ChaCha8Rng) -> PreEditSentence {
    let n = rng.gen_range(1..=15);
    let text: Vec<&str> = (0..n).map(|_| WORDS[rng.gen_range(0..WORDS.len())]).collect();
    PreEditSentence::from_text(text.join(" ")).unwrap()
}

/// Per-word scores; about a third of the draws come from a small discrete set
/// so exact ties occur. Returns whether tokens may be split: an exact tie
/// between a split and an unsplit word is not stable under float rescaling.
fn random_scores(rng: &mut ChaCha8Rng, n: usize, signed: bool) -> (Vec<f64>, bool) {
    let discrete = rng.gen_bool(0.3);
    let scores = (0..n)
        .map(|_| {
            let v = if discrete {
                rng.gen_range(0..4) as f64 * 0.125
            } else {
                rng.gen::<f64>()
            };
            if signed && rng.gen_bool(0.5) {
                -v
            } else {
                v
            }
        })
        .collect();
    (scores, !discrete)
}

fn scale_invariance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let aggregations = [Aggregation::AttnSum, Aggregation::GradSigned, Aggregation::GradMagnitude];
    for case in 0..1000 {
        let pre = random_sentence(&mut rng);
        let agg = aggregations[case % 3];
        let mode = if rng.gen_bool(0.5) { MagnitudeMode::Word } else { MagnitudeMode::Token };
        let (scores, splittable) = random_scores(&mut rng, pre.len(), agg != Aggregation::AttnSum);
        let layer = (agg == Aggregation::AttnSum).then_some(1);
        let split = splittable && rng.gen_bool(0.5);
        let record = record_for(&pre, "r", agg.method(), layer, &scores, split);
        let c = 10f64.powf(rng.gen_range(-6.0..6.0));
        let base = rank_words(&record, &pre, agg, mode).unwrap();
        let scaled = rank_words(&record.scaled(c), &pre, agg, mode).unwrap();
        if base.order != scaled.order {
            return Outcome::Fail(format!("case {case}: c={c} order {:?} vs {:?}", base.order, scaled.order));
        }
        let k = rng.gen_range(1..=pre.len());
        let h: BTreeSet<usize> = (0..k).map(|_| rng.gen_range(0..pre.len())).collect();
        let a = evaluate_order(&base.order, &h, "r").unwrap();
        let b = evaluate_order(&scaled.order, &h, "r").unwrap();
        if a.reciprocal_rank.to_bits() != b.reciprocal_rank.to_bits()
            || a.auprc.to_bits() != b.auprc.to_bits()
            || a.top1 != b.top1
        {
            return Outcome::Fail(format!("case {case}: metrics changed under c={c}"));
        }
    }
    Outcome::Pass("1000 seeded (record, c) pairs; orders and metrics bit-identical".into())
}

fn head_mean_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut checked = 0;
    for case in 0..200 {
        let pre = random_sentence(&mut rng);
        let h: BTreeSet<usize> = (0..rng.gen_range(1..=3)).map(|_| rng.gen_range(0..pre.len())).collect();
        for layer in 1..=12u32 {
            let (scores, split) = random_scores(&mut rng, pre.len(), false);
            let summed = record_for(&pre, "h", Method::Attention, Some(layer), &scores, split);
            let base = rank_words(&summed, &pre, Aggregation::AttnSum, MagnitudeMode::Word).unwrap();
            let mb = evaluate_order(&base.order, &h, "h").unwrap();
            for heads in [1u32, 2, 3, 7, 12, 16] {
                let mut mean = summed.clone();
                mean.tokens.iter_mut().for_each(|t| t.score /= heads as f64);
                let r = rank_words(&mean, &pre, Aggregation::AttnSum, MagnitudeMode::Word).unwrap();
                let mr = evaluate_order(&r.order, &h, "h").unwrap();
                if r.order != base.order || mr != mb {
                    return Outcome::Fail(format!("case {case} layer {layer} H={heads}"));
                }
                checked += 1;
            }
        }
    }
    Outcome::Pass(format!("{checked} (record, layer, H) combinations identical"))
}

fn inner_markup(line: &str) -> Option<(&str, &str)> {
    let rest = line.split_once("<sentence sid=\"")?.1;
    let (sid, rest) = rest.split_once("\">")?;
    let inner = rest.strip_suffix("</sentence>")?;
    Some((sid, inner))
}

fn mini_corpus_round_trip() -> Outcome {
    let path = fixture("mini_corpus.xml");
    let text = std::fs::read_to_string(&path).unwrap();
    let expected: Vec<(&str, &str)> = text.lines().filter_map(inner_markup).collect();
    let res = read_corpus(text.as_bytes(), ParserMode::Lenient).unwrap();
    if !res.errors.is_empty() || res.sentences.len() != expected.len() || expected.len() < 25 {
        return Outcome::Fail(format!(
            "{} sentences, {} errors, {} records in file",
            res.sentences.len(),
            res.errors.len(),
            expected.len()
        ));
    }
    for (s, (sid, inner)) in res.sentences.iter().zip(&expected) {
        if s.sid != *sid || s.to_markup() != *inner {
            return Outcome::Fail(format!("round-trip differs for {sid}: {:?}", s.to_markup()));
        }
    }
    let dict = Dictionary::load(&fixture("mini_dictionary.txt")).unwrap();
    let labels = [
        ("8447.0", EditType::SpellingError),
        ("256.4", EditType::SpellingError),
        ("49.2", EditType::Other),
        ("662.3", EditType::DeletedText),
        ("519.5", EditType::DeletedText),
    ];
    for (sid, want) in labels {
        let s = res.sentences.iter().find(|s| s.sid == sid).unwrap();
        let got = classify_edit(s, &dict, &ClassifyOptions::default());
        if got != want {
            return Outcome::Fail(format!("{sid}: {got:?}, expected {want:?}"));
        }
    }
    Outcome::Pass(format!("{} records byte-identical; 5 example labels match", expected.len()))
}

fn aesw_counts() -> Outcome {
    let (Ok(corpus), Ok(dict)) = (std::env::var("AESW_VALIDATION_PATH"), std::env::var("AESW_DICTIONARY")) else {
        return Outcome::Skipped("set AESW_VALIDATION_PATH and AESW_DICTIONARY to run".into());
    };
    let dict = match Dictionary::load(dict.as_ref()) {
        Ok(d) => d,
        Err(e) => return Outcome::Fail(format!("dictionary: {e}")),
    };
    let file = match File::open(&corpus) {
        Ok(f) => f,
        Err(e) => return Outcome::Fail(format!("{corpus}: {e}")),
    };
    let res = match read_corpus(BufReader::new(file), ParserMode::Lenient) {
        Ok(r) => r,
        Err(e) => return Outcome::Fail(e.to_string()),
    };
    let (_, stats) = build_rationale_dataset(&res.sentences, res.errors.len(), &dict, &ClassifyOptions::default());
    let within = |got: usize, want: f64| ((got as f64 - want) / want).abs() <= 0.02;
    let msg = format!(
        "spelling {} (1321), deleted {} (6741); rejections: {} deleted-in-dict, {} inserted-missing",
        stats.spelling,
        stats.deleted,
        stats.spelling_rejections.deleted_word_in_dictionary,
        stats.spelling_rejections.inserted_word_not_in_dictionary
    );
    if within(stats.spelling, 1321.0) && within(stats.deleted, 6741.0) {
        Outcome::Pass(msg)
    } else {
        Outcome::Fail(msg)
    }
}

fn multiword_top1() -> Outcome {
    let mut checked = 0;
    for n in 2..=6usize {
        for perm in permutations(n) {
            for mask in 1u32..(1 << n) {
                if mask.count_ones() < 2 {
                    continue;
                }
                let h: BTreeSet<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
                if top1_match_of(&perm, &h) != 0 {
                    return Outcome::Fail(format!("order {perm:?} h {h:?}"));
                }
                // Sanity: the metrics themselves still see a perfect ranking.
                if h.iter().all(|w| perm[..h.len()].contains(w)) {
                    let rr = reciprocal_rank_of(&perm, &h, "t").unwrap();
                    let ap = auprc_of(&perm, &h, "t").unwrap();
                    if rr != 1.0 || ap != 1.0 {
                        return Outcome::Fail(format!("perfect ranking scored {rr}/{ap}"));
                    }
                }
                checked += 1;
            }
        }
    }
    Outcome::Pass(format!("{checked} multi-word cases score top1 = 0"))
}

fn main() -> ExitCode {
    let criteria: [(&str, Check); 7] = [
        ("worked removal example", removal_worked_example),
        ("exhaustive oracle equivalence", exhaustive_oracle),
        ("rank invariance under scaling", scale_invariance),
        ("head mean vs head sum", head_mean_equivalence),
        ("mini-corpus round-trip and labels", mini_corpus_round_trip),
        ("corpus rationale counts", aesw_counts),
        ("multi-word top-1 rule", multiword_top1),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        match check() {
            Outcome::Pass(m) => println!("PASS    {name}: {m}"),
            Outcome::Skipped(m) => println!("SKIPPED {name}: {m}"),
            Outcome::Fail(m) => {
                failed += 1;
                println!("FAIL    {name}: {m}");
            }
        }
    }
    if failed > 0 {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
