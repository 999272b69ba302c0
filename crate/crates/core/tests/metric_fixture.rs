//! Corpus metrics against values frozen from the COCO caption toolkit, and
//! METEOR-lite against an exhaustive alignment search.

use lgcap_core::metrics::{bleu, cider, meteor_lite, rouge_l, EvalPair, PluralStemmer, Stemmer};
use proptest::prelude::*;
use serde::Deserialize;

const FIXTURE_TOL: f64 = 1e-4;
const METEOR_TOL: f64 = 1e-6;

#[derive(Deserialize)]
struct Pair {
    hypothesis: String,
    references: Vec<String>,
}

#[derive(Deserialize)]
struct Scores {
    bleu1: f64,
    bleu4: f64,
    #[serde(rename = "rougeL")]
    rouge_l: f64,
    cider: f64,
}

#[derive(Deserialize)]
struct Fixture {
    scores: Scores,
    pairs: Vec<Pair>,
}

fn fixture() -> (Scores, Vec<EvalPair>) {
    let text = include_str!("fixtures/coco_caption_50.json");
    let f: Fixture = serde_json::from_str(text).unwrap();
    let pairs = f.pairs.into_iter().map(|p| EvalPair::new(p.hypothesis, p.references)).collect();
    (f.scores, pairs)
}

#[test]
fn fixture_has_fifty_pairs() {
    assert_eq!(fixture().1.len(), 50);
}

#[test]
fn bleu_matches_toolkit() {
    let (s, pairs) = fixture();
    assert!((bleu(&pairs, 1).unwrap() - s.bleu1).abs() < FIXTURE_TOL);
    assert!((bleu(&pairs, 4).unwrap() - s.bleu4).abs() < FIXTURE_TOL);
}

#[test]
fn rouge_matches_toolkit() {
    let (s, pairs) = fixture();
    assert!((rouge_l(&pairs).unwrap() - s.rouge_l).abs() < FIXTURE_TOL);
}

#[test]
fn cider_matches_toolkit() {
    let (s, pairs) = fixture();
    assert!((cider(&pairs).unwrap() - s.cider).abs() < FIXTURE_TOL);
}

/// Tries every partial injective map from hypothesis to reference positions.
fn brute_meteor(hyp: &[&str], reference: &[&str], stem: &dyn Stemmer) -> f64 {
    fn walk(i: usize, hyp: &[&str], reference: &[&str], stem: &dyn Stemmer, used: &mut Vec<bool>, pairs: &mut Vec<(usize, usize, bool)>, best: &mut (usize, usize, i64)) {
        if i == hyp.len() {
            let m = pairs.len();
            let exact = pairs.iter().filter(|p| p.2).count();
            let mut chunks = 0i64;
            for (k, p) in pairs.iter().enumerate() {
                if k == 0 || !(pairs[k - 1].0 + 1 == p.0 && pairs[k - 1].1 + 1 == p.1) {
                    chunks += 1;
                }
            }
            if (m, exact, -chunks) > *best {
                *best = (m, exact, -chunks);
            }
            return;
        }
        walk(i + 1, hyp, reference, stem, used, pairs, best);
        for j in 0..reference.len() {
            if used[j] {
                continue;
            }
            let exact = hyp[i] == reference[j];
            if exact || stem.stem(hyp[i]) == stem.stem(reference[j]) {
                used[j] = true;
                pairs.push((i, j, exact));
                walk(i + 1, hyp, reference, stem, used, pairs, best);
                pairs.pop();
                used[j] = false;
            }
        }
    }
    let mut best = (0, 0, 0);
    walk(0, hyp, reference, stem, &mut vec![false; reference.len()], &mut Vec::new(), &mut best);
    let (m, _, neg_chunks) = best;
    if m == 0 {
        return 0.0;
    }
    let (m, ch) = (m as f64, -neg_chunks as f64);
    let p = m / hyp.len() as f64;
    let r = m / reference.len() as f64;
    let fmean = 10.0 * p * r / (r + 9.0 * p);
    fmean * (1.0 - 0.5 * (ch / m).powi(3))
}

const WORDS: [&str; 8] = ["cat", "cats", "dog", "dogs", "a", "the", "bus", "buses"];

fn sentence() -> impl Strategy<Value = Vec<&'static str>> {
    prop::collection::vec(prop::sample::select(&WORDS[..]), 1..7)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn meteor_lite_matches_brute_force(hyp in sentence(), refs in prop::collection::vec(sentence(), 1..4)) {
        let stem = PluralStemmer;
        let expected = refs.iter().map(|r| brute_meteor(&hyp, r, &stem)).fold(0.0, f64::max);
        let pair = EvalPair::new(hyp.join(" "), refs.iter().map(|r| r.join(" ")).collect());
        let got = meteor_lite(&[pair], &stem).unwrap();
        prop_assert!((got - expected).abs() < METEOR_TOL, "{} vs {}", got, expected);
    }
}
