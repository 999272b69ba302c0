//! Caption metrics: corpus BLEU, ROUGE-L, METEOR-lite, CIDEr-D and an
//! embedding-based CLIPScore.
//!
//! Formulas follow the COCO caption evaluation toolkit so that scores agree
//! with it on identically tokenized input. All values are in `[0, 1]` except
//! CIDEr (already ×10) and CLIPScore (`[0, 2.5]`); reports multiply by 100.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::cosine;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalPair {
    pub hypothesis: String,
    pub references: Vec<String>,
}

impl EvalPair {
    pub fn new(hypothesis: impl Into<String>, references: Vec<String>) -> Self {
        Self { hypothesis: hypothesis.into(), references }
    }
}

/// Lowercases and splits into word tokens. Alphanumeric runs form words; an
/// apostrophe starts a clitic token (`man's` → `man`, `'s`); every other
/// character separates.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            cur.extend(ch.to_lowercase());
        } else {
            if !cur.is_empty() && cur != "'" {
                out.push(core::mem::take(&mut cur));
            }
            cur.clear();
            if ch == '\'' {
                cur.push('\'');
            }
        }
    }
    if !cur.is_empty() && cur != "'" {
        out.push(cur);
    }
    out
}

struct Tokenized {
    hyp: Vec<String>,
    refs: Vec<Vec<String>>,
}

fn prepare(pairs: &[EvalPair]) -> Result<Vec<Tokenized>> {
    if pairs.is_empty() {
        return Err(Error::Empty("evaluation corpus"));
    }
    pairs
        .iter()
        .map(|p| {
            if p.references.is_empty() {
                return Err(Error::InvalidSample("pair without references".into()));
            }
            Ok(Tokenized { hyp: tokenize(&p.hypothesis), refs: p.references.iter().map(|r| tokenize(r)).collect() })
        })
        .collect()
}

fn ngram_counts(tokens: &[String], n: usize) -> BTreeMap<&[String], usize> {
    let mut m = BTreeMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

const TINY: f64 = 1e-15;
const SMALL: f64 = 1e-9;

/// Corpus BLEU-`n` with add-epsilon smoothing.
pub fn bleu(pairs: &[EvalPair], n: usize) -> Result<f64> {
    bleu_with(pairs, n, true)
}

/// `smoothed = false` uses exact precisions, so any order without a match
/// gives 0.
pub fn bleu_with(pairs: &[EvalPair], n: usize, smoothed: bool) -> Result<f64> {
    if n == 0 {
        return Err(Error::Config("bleu order must be >= 1".into()));
    }
    let data = prepare(pairs)?;
    let mut correct = vec![0usize; n];
    let mut guess = vec![0usize; n];
    let (mut test_len, mut ref_len) = (0usize, 0usize);
    for t in &data {
        let h = t.hyp.len();
        test_len += h;
        // Closest reference length; ties go to the shorter one.
        ref_len += t.refs.iter().map(|r| (r.len().abs_diff(h), r.len())).min().map_or(0, |x| x.1);
        for k in 1..=n {
            let hyp_counts = ngram_counts(&t.hyp, k);
            let mut max_ref: BTreeMap<&[String], usize> = BTreeMap::new();
            for r in &t.refs {
                for (g, c) in ngram_counts(r, k) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(c);
                }
            }
            guess[k - 1] += (h + 1).saturating_sub(k);
            correct[k - 1] += hyp_counts.iter().map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0))).sum::<usize>();
        }
    }
    let mut log_sum = 0.0;
    for k in 0..n {
        let p = if smoothed {
            (correct[k] as f64 + TINY) / (guess[k] as f64 + SMALL)
        } else if guess[k] == 0 || correct[k] == 0 {
            return Ok(0.0);
        } else {
            correct[k] as f64 / guess[k] as f64
        };
        log_sum += libm::log(p);
    }
    let mut score = libm::exp(log_sum / n as f64);
    let ratio = if smoothed { (test_len as f64 + TINY) / (ref_len as f64 + SMALL) } else { test_len as f64 / ref_len.max(1) as f64 };
    if ratio < 1.0 {
        score *= if ratio == 0.0 { 0.0 } else { libm::exp(1.0 - 1.0 / ratio) };
    }
    Ok(score)
}

pub(crate) fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        core::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub const ROUGE_BETA: f64 = 1.2;

/// Mean LCS F-measure. Precision and recall are each maximized over the
/// references before combining.
pub fn rouge_l(pairs: &[EvalPair]) -> Result<f64> {
    let data = prepare(pairs)?;
    let b2 = ROUGE_BETA * ROUGE_BETA;
    let mut total = 0.0;
    for t in &data {
        let (mut p, mut r) = (0.0f64, 0.0f64);
        for reference in &t.refs {
            let l = lcs_len(reference, &t.hyp) as f64;
            if !t.hyp.is_empty() {
                p = p.max(l / t.hyp.len() as f64);
            }
            if !reference.is_empty() {
                r = r.max(l / reference.len() as f64);
            }
        }
        if p > 0.0 && r > 0.0 {
            total += (1.0 + b2) * p * r / (r + b2 * p);
        }
    }
    Ok(total / data.len() as f64)
}

pub trait Stemmer {
    fn stem(&self, word: &str) -> String;
}

/// Strips a plural `s` (but not `ss`). Enough for tests; real runs plug in a
/// Porter stemmer.
#[derive(Debug, Clone, Copy, Default)]
pub struct PluralStemmer;

impl Stemmer for PluralStemmer {
    fn stem(&self, word: &str) -> String {
        if word.len() > 3 && word.ends_with('s') && !word.ends_with("ss") {
            word[..word.len() - 1].to_string()
        } else {
            word.to_string()
        }
    }
}

pub const METEOR_ALPHA: f64 = 0.9;
pub const METEOR_GAMMA: f64 = 0.5;
pub const METEOR_BETA: f64 = 3.0;

/// Best one-to-one alignment of hypothesis and reference tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Alignment {
    pub matches: usize,
    pub exact: usize,
    pub chunks: usize,
}

impl Alignment {
    /// `true` when `self` beats `other`: more matches, then more exact
    /// matches, then fewer chunks.
    pub fn better_than(&self, other: &Alignment) -> bool {
        (self.matches, self.exact, core::cmp::Reverse(self.chunks)) > (other.matches, other.exact, core::cmp::Reverse(other.chunks))
    }
}

/// 0 = no match, 1 = stem match, 2 = exact match.
fn match_table(hyp: &[String], reference: &[String], stemmer: &dyn Stemmer) -> Vec<Vec<u8>> {
    let hs: Vec<String> = hyp.iter().map(|w| stemmer.stem(w)).collect();
    let rs: Vec<String> = reference.iter().map(|w| stemmer.stem(w)).collect();
    hyp.iter()
        .enumerate()
        .map(|(i, h)| {
            reference
                .iter()
                .enumerate()
                .map(|(j, r)| if h == r { 2 } else if hs[i] == rs[j] { 1 } else { 0 })
                .collect()
        })
        .collect()
}

struct Search<'a> {
    table: &'a [Vec<u8>],
    /// Suffix counts of hypothesis tokens with any / an exact candidate.
    any_left: Vec<usize>,
    exact_left: Vec<usize>,
    used: Vec<bool>,
    best: Alignment,
}

impl Search<'_> {
    fn run(&mut self, i: usize, prev: Option<(usize, usize)>, cur: Alignment) {
        if cur.better_than(&self.best) {
            self.best = cur;
        }
        if i == self.table.len() {
            return;
        }
        let max_matches = cur.matches + self.any_left[i];
        if max_matches < self.best.matches {
            return;
        }
        if max_matches == self.best.matches && cur.exact + self.exact_left[i] < self.best.exact {
            return;
        }
        for j in 0..self.table[i].len() {
            let kind = self.table[i][j];
            if kind == 0 || self.used[j] {
                continue;
            }
            let continues = prev == Some((i.wrapping_sub(1), j.wrapping_sub(1)));
            let next = Alignment {
                matches: cur.matches + 1,
                exact: cur.exact + usize::from(kind == 2),
                chunks: cur.chunks + usize::from(!continues),
            };
            self.used[j] = true;
            self.run(i + 1, Some((i, j)), next);
            self.used[j] = false;
        }
        self.run(i + 1, prev, cur);
    }
}

/// Exhaustive branch-and-bound alignment search.
pub fn align(hyp: &[String], reference: &[String], stemmer: &dyn Stemmer) -> Alignment {
    let table = match_table(hyp, reference, stemmer);
    let n = hyp.len();
    let mut any_left = vec![0; n + 1];
    let mut exact_left = vec![0; n + 1];
    for i in (0..n).rev() {
        any_left[i] = any_left[i + 1] + usize::from(table[i].iter().any(|&k| k > 0));
        exact_left[i] = exact_left[i + 1] + usize::from(table[i].iter().any(|&k| k == 2));
    }
    let zero = Alignment { matches: 0, exact: 0, chunks: 0 };
    let mut s = Search { table: &table, any_left, exact_left, used: vec![false; reference.len()], best: zero };
    s.run(0, None, zero);
    s.best
}

/// Score of one hypothesis against one reference given an alignment.
pub fn meteor_from_alignment(a: &Alignment, hyp_len: usize, ref_len: usize) -> f64 {
    if a.matches == 0 {
        return 0.0;
    }
    let m = a.matches as f64;
    let p = m / hyp_len as f64;
    let r = m / ref_len as f64;
    let fmean = p * r / (METEOR_ALPHA * p + (1.0 - METEOR_ALPHA) * r);
    let penalty = METEOR_GAMMA * libm::pow(a.chunks as f64 / m, METEOR_BETA);
    fmean * (1.0 - penalty)
}

/// Mean over pairs of the best score across references.
pub fn meteor_lite(pairs: &[EvalPair], stemmer: &dyn Stemmer) -> Result<f64> {
    let data = prepare(pairs)?;
    let mut total = 0.0;
    for t in &data {
        let best = t
            .refs
            .iter()
            .map(|r| meteor_from_alignment(&align(&t.hyp, r, stemmer), t.hyp.len(), r.len()))
            .fold(0.0, f64::max);
        total += best;
    }
    Ok(total / data.len() as f64)
}

pub const CIDER_SIGMA: f64 = 6.0;
const CIDER_N: usize = 4;

type Grams<'a> = BTreeMap<&'a [String], usize>;

fn all_grams(tokens: &[String]) -> Vec<Grams<'_>> {
    (1..=CIDER_N).map(|k| ngram_counts(tokens, k)).collect()
}

struct TfIdf {
    vec: Vec<BTreeMap<Vec<String>, f64>>,
    norm: Vec<f64>,
    length: f64,
}

fn tfidf(grams: &[Grams<'_>], df: &BTreeMap<Vec<String>, usize>, log_docs: f64) -> TfIdf {
    let mut vec_out = Vec::with_capacity(CIDER_N);
    let mut norm = Vec::with_capacity(CIDER_N);
    let mut length = 0.0;
    for (n, g) in grams.iter().enumerate() {
        let mut v = BTreeMap::new();
        let mut s = 0.0;
        for (&gram, &tf) in g {
            let d = df.get(gram).copied().unwrap_or(0).max(1) as f64;
            let w = tf as f64 * (log_docs - libm::log(d));
            s += w * w;
            v.insert(gram.to_vec(), w);
            // The toolkit measures length in bigrams.
            if n == 1 {
                length += tf as f64;
            }
        }
        vec_out.push(v);
        norm.push(libm::sqrt(s));
    }
    TfIdf { vec: vec_out, norm, length }
}

fn cider_sim(h: &TfIdf, r: &TfIdf) -> f64 {
    let delta = h.length - r.length;
    let mut total = 0.0;
    for n in 0..CIDER_N {
        let mut val = 0.0;
        for (g, &hv) in &h.vec[n] {
            if let Some(&rv) = r.vec[n].get(g) {
                val += hv.min(rv) * rv;
            }
        }
        if h.norm[n] != 0.0 && r.norm[n] != 0.0 {
            val /= h.norm[n] * r.norm[n];
        }
        val *= libm::exp(-(delta * delta) / (2.0 * CIDER_SIGMA * CIDER_SIGMA));
        total += val;
    }
    total / CIDER_N as f64
}

/// CIDEr-D with document frequencies taken from the pairs' own references.
pub fn cider(pairs: &[EvalPair]) -> Result<f64> {
    let corpus: Vec<Vec<String>> = pairs.iter().map(|p| p.references.clone()).collect();
    cider_with_corpus(pairs, &corpus)
}

/// CIDEr-D with document frequencies from `corpus_refs` (one reference set
/// per image).
pub fn cider_with_corpus(pairs: &[EvalPair], corpus_refs: &[Vec<String>]) -> Result<f64> {
    let data = prepare(pairs)?;
    let distinct: BTreeSet<&Vec<String>> = corpus_refs.iter().collect();
    if distinct.len() < 2 {
        return Err(Error::DegenerateCorpus("CIDEr needs at least two distinct reference sets"));
    }
    let mut df: BTreeMap<Vec<String>, usize> = BTreeMap::new();
    for refs in corpus_refs {
        let toks: Vec<Vec<String>> = refs.iter().map(|r| tokenize(r)).collect();
        let mut seen: BTreeSet<&[String]> = BTreeSet::new();
        for t in &toks {
            for k in 1..=CIDER_N {
                if t.len() >= k {
                    seen.extend(t.windows(k));
                }
            }
        }
        for g in seen {
            *df.entry(g.to_vec()).or_insert(0) += 1;
        }
    }
    let log_docs = libm::log(corpus_refs.len() as f64);
    let mut total = 0.0;
    for t in &data {
        let h = tfidf(&all_grams(&t.hyp), &df, log_docs);
        let mut s = 0.0;
        for r in &t.refs {
            s += cider_sim(&h, &tfidf(&all_grams(r), &df, log_docs));
        }
        total += s / t.refs.len() as f64 * 10.0;
    }
    Ok(total / data.len() as f64)
}

pub const CLIP_SCORE_WEIGHT: f64 = 2.5;

/// Image and text embeddings in one space.
pub trait ClipScorer {
    fn embed_image(&self, index: usize) -> Result<Vec<f64>>;
    fn embed_text(&self, text: &str) -> Result<Vec<f64>>;
}

/// `mean_i w · max(cos(img_i, text_i), 0)`; `scorer` resolves image `i`.
pub fn clip_score(n_images: usize, hypotheses: &[String], scorer: Option<&dyn ClipScorer>) -> Result<f64> {
    let scorer = scorer.ok_or(Error::Config("clip_score needs an embedding scorer".into()))?;
    if n_images != hypotheses.len() {
        return Err(Error::DimensionMismatch { expected: n_images, got: hypotheses.len() });
    }
    if hypotheses.is_empty() {
        return Err(Error::Empty("evaluation corpus"));
    }
    let mut total = 0.0;
    for (i, h) in hypotheses.iter().enumerate() {
        total += clip_pair(&scorer.embed_image(i)?, &scorer.embed_text(h)?)?;
    }
    Ok(total / hypotheses.len() as f64)
}

/// `w · max(cos(a, b), 0)`.
pub fn clip_pair(image: &[f64], text: &[f64]) -> Result<f64> {
    if image.len() != text.len() {
        return Err(Error::DimensionMismatch { expected: image.len(), got: text.len() });
    }
    let c = cosine(image, text)?;
    Ok(CLIP_SCORE_WEIGHT * c.max(0.0))
}

/// One row of results, stored unscaled.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricScores {
    pub bleu1: f64,
    pub bleu4: f64,
    #[serde(rename = "rougeL")]
    pub rouge_l: f64,
    pub meteor_lite: f64,
    pub cider: f64,
    pub clip_score: Option<f64>,
}

pub const METRIC_NAMES: [&str; 6] = ["bleu1", "bleu4", "rougeL", "meteor_lite", "cider", "clip_score"];

impl MetricScores {
    pub fn get(&self, name: &str) -> Option<f64> {
        match name {
            "bleu1" => Some(self.bleu1),
            "bleu4" => Some(self.bleu4),
            "rougeL" => Some(self.rouge_l),
            "meteor_lite" => Some(self.meteor_lite),
            "cider" => Some(self.cider),
            "clip_score" => self.clip_score,
            _ => None,
        }
    }

    /// Every value multiplied by 100, as printed in tables.
    pub fn scaled(&self) -> MetricScores {
        MetricScores {
            bleu1: self.bleu1 * 100.0,
            bleu4: self.bleu4 * 100.0,
            rouge_l: self.rouge_l * 100.0,
            meteor_lite: self.meteor_lite * 100.0,
            cider: self.cider * 100.0,
            clip_score: self.clip_score.map(|c| c * 100.0),
        }
    }
}

/// All text metrics; CLIPScore is filled in only when a scorer is given.
pub fn score_all(pairs: &[EvalPair], stemmer: &dyn Stemmer, scorer: Option<&dyn ClipScorer>) -> Result<MetricScores> {
    let hyps: Vec<String> = pairs.iter().map(|p| p.hypothesis.clone()).collect();
    Ok(MetricScores {
        bleu1: bleu(pairs, 1)?,
        bleu4: bleu(pairs, 4)?,
        rouge_l: rouge_l(pairs)?,
        meteor_lite: meteor_lite(pairs, stemmer)?,
        cider: cider(pairs)?,
        clip_score: match scorer {
            Some(s) => Some(clip_score(pairs.len(), &hyps, Some(s))?),
            None => None,
        },
    })
}
