//! Salient-token prompts and the positive/negative prompt pools.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::autograd::Mat;
use crate::error::{Error, Result};
use crate::rng;

pub const LEXICON: &str = include_str!("../data/lexicon.txt");

/// Prompt template pieces. Empty sections are omitted.
pub const TEMPLATE_NOUNS: &str = "An image of ";
pub const TEMPLATE_BARE: &str = "An image";
pub const TEMPLATE_ATTRIBUTES: &str = "attributes: ";
pub const TEMPLATE_ACTIONS: &str = "actions: ";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Pos {
    Noun,
    Adj,
    Verb,
    Function,
}

impl Pos {
    fn parse(tag: &str) -> Option<Self> {
        match tag {
            "NOUN" => Some(Pos::Noun),
            "ADJ" => Some(Pos::Adj),
            "VERB" => Some(Pos::Verb),
            "FUNC" => Some(Pos::Function),
            _ => None,
        }
    }
}

/// Part-of-speech tagging backend. `None` marks a non-content token.
pub trait PosTagger: Send + Sync {
    fn tag(&self, words: &[&str]) -> Vec<Option<Pos>>;
}

/// Lexicon lookup with suffix rules for unknown words.
#[derive(Debug, Clone)]
pub struct LexiconTagger {
    lexicon: BTreeMap<String, Vec<Pos>>,
}

impl Default for LexiconTagger {
    fn default() -> Self {
        Self::from_text(LEXICON).expect("bundled lexicon parses")
    }
}

const ADJ_SUFFIXES: [&str; 8] = ["ful", "ous", "ive", "able", "ible", "ish", "less", "ic"];

impl LexiconTagger {
    /// Parses `word TAG` lines; a word may appear once per tag.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut lexicon: BTreeMap<String, Vec<Pos>> = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut it = line.split_whitespace();
            let (Some(word), Some(tag), None) = (it.next(), it.next(), it.next()) else {
                return Err(Error::Config(alloc::format!("lexicon line {}: expected `word TAG`", n + 1)));
            };
            let pos = Pos::parse(tag).ok_or_else(|| Error::Config(alloc::format!("lexicon line {}: unknown tag `{tag}`", n + 1)))?;
            let tags = lexicon.entry(word.to_lowercase()).or_default();
            if !tags.contains(&pos) {
                tags.push(pos);
            }
        }
        Ok(Self { lexicon })
    }

    fn lookup(&self, word: &str) -> Option<&[Pos]> {
        self.lexicon.get(word).map(|v| v.as_slice())
    }

    /// Lexicon tags, trying singular/base forms of `-s`, `-es`, `-ies` words.
    fn known(&self, word: &str) -> Option<&[Pos]> {
        if let Some(t) = self.lookup(word) {
            return Some(t);
        }
        if let Some(stem) = word.strip_suffix("ies") {
            if let Some(t) = self.lookup(&alloc::format!("{stem}y")) {
                return Some(t);
            }
        }
        if let Some(stem) = word.strip_suffix("es") {
            if let Some(t) = self.lookup(stem) {
                return Some(t);
            }
        }
        word.strip_suffix('s').filter(|s| s.len() > 1).and_then(|s| self.lookup(s))
    }

    fn guess(word: &str) -> Option<Pos> {
        if !word.chars().all(|c| c.is_alphabetic() || c == '-') || word.chars().count() < 3 {
            return None;
        }
        if word.len() >= 5 && (word.ends_with("ing") || word.ends_with("ed")) {
            return Some(Pos::Verb);
        }
        if word.ends_with("ly") {
            return None;
        }
        if ADJ_SUFFIXES.iter().any(|s| word.len() > s.len() + 2 && word.ends_with(s)) {
            return Some(Pos::Adj);
        }
        Some(Pos::Noun)
    }

    fn primary(&self, word: &str) -> Option<Pos> {
        match self.known(word) {
            Some(tags) => tags.first().copied(),
            None => Self::guess(word),
        }
    }
}

impl PosTagger for LexiconTagger {
    fn tag(&self, words: &[&str]) -> Vec<Option<Pos>> {
        let mut out = Vec::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            let pos = match self.known(w) {
                None => Self::guess(w),
                Some(tags) if tags.len() == 1 => Some(tags[0]),
                Some(tags) => {
                    // attributive reading when the next word is a noun ("orange circle")
                    let next_is_noun = words.get(i + 1).is_some_and(|n| self.primary(n) == Some(Pos::Noun));
                    if tags.contains(&Pos::Adj) && next_is_noun {
                        Some(Pos::Adj)
                    } else {
                        tags.iter().copied().find(|&t| t == Pos::Noun).or(Some(tags[0]))
                    }
                }
            };
            out.push(pos.filter(|&p| p != Pos::Function));
        }
        out
    }
}

/// Nouns, adjectives and verbs of one caption plus the rendered prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub nouns: Vec<String>,
    pub adjectives: Vec<String>,
    pub verbs: Vec<String>,
    pub source: String,
    pub rendered: String,
}

fn words(caption: &str) -> Vec<String> {
    caption
        .split(|c: char| !(c.is_alphanumeric() || c == '-' || c == '\''))
        .map(|w| w.trim_matches(|c| c == '\'' || c == '-').to_lowercase())
        .filter(|w| !w.is_empty())
        .collect()
}

/// Tags the caption's words and collects content tokens (lowercase,
/// deduplicated, first-occurrence order).
pub fn extract_salient_with(tagger: &dyn PosTagger, caption: &str) -> PromptRecord {
    let ws = words(caption);
    let refs: Vec<&str> = ws.iter().map(|s| s.as_str()).collect();
    let tags = tagger.tag(&refs);
    let (mut nouns, mut adjectives, mut verbs) = (Vec::new(), Vec::new(), Vec::new());
    for (w, t) in refs.iter().zip(tags) {
        let list: &mut Vec<String> = match t {
            Some(Pos::Noun) => &mut nouns,
            Some(Pos::Adj) => &mut adjectives,
            Some(Pos::Verb) => &mut verbs,
            _ => continue,
        };
        if !list.iter().any(|x| x == w) {
            list.push(w.to_string());
        }
    }
    let mut rec = PromptRecord { nouns, adjectives, verbs, source: caption.to_string(), rendered: String::new() };
    rec.rendered = render_prompt(&rec);
    rec
}

pub fn extract_salient(caption: &str) -> PromptRecord {
    extract_salient_with(&LexiconTagger::default(), caption)
}

/// `An image of {nouns}; attributes: {adjectives}; actions: {verbs}`, with
/// empty sections left out. A record with no content tokens renders as its
/// source caption.
pub fn render_prompt(rec: &PromptRecord) -> String {
    if rec.nouns.is_empty() && rec.adjectives.is_empty() && rec.verbs.is_empty() {
        return rec.source.clone();
    }
    let mut out = if rec.nouns.is_empty() {
        TEMPLATE_BARE.to_string()
    } else {
        let mut s = TEMPLATE_NOUNS.to_string();
        s.push_str(&rec.nouns.join(", "));
        s
    };
    for (label, list) in [(TEMPLATE_ATTRIBUTES, &rec.adjectives), (TEMPLATE_ACTIONS, &rec.verbs)] {
        if !list.is_empty() {
            out.push_str("; ");
            out.push_str(label);
            out.push_str(&list.join(", "));
        }
    }
    out
}

/// A stored prompt embedding tagged with the task that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolEntry {
    pub task: usize,
    pub vector: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeMode {
    /// Least similar pool entry per image (`argmin`).
    #[default]
    MostDissimilar,
    /// Most similar pool entry per image (`argmax`), conventional hard negatives.
    MostSimilar,
}

/// Positive prompts of the task in progress and negatives from earlier tasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptPools {
    pub current_task_pool: Vec<PoolEntry>,
    pub neg_prompt_pool: Vec<PoolEntry>,
    pub cap: usize,
    pub seed: u64,
    pub current_seen: u64,
    pub commits: u64,
}

impl PromptPools {
    pub fn new(cap: usize, seed: u64) -> Self {
        Self { current_task_pool: Vec::new(), neg_prompt_pool: Vec::new(), cap: cap.max(1), seed, current_seen: 0, commits: 0 }
    }

    /// Appends a unit-norm embedding to the current pool, reservoir-sampling
    /// once the pool is at capacity.
    pub fn push_current(&mut self, task: usize, vector: Vec<f64>) -> Result<()> {
        let norm = crate::types::l2_norm(&vector);
        if (norm - 1.0).abs() > 1e-5 {
            return Err(Error::NotNormalized { row: self.current_seen as usize, norm });
        }
        if let Some(first) = self.current_task_pool.first().or(self.neg_prompt_pool.first()) {
            if first.vector.len() != vector.len() {
                return Err(Error::DimensionMismatch { expected: first.vector.len(), got: vector.len() });
            }
        }
        let entry = PoolEntry { task, vector };
        if self.current_task_pool.len() < self.cap {
            self.current_task_pool.push(entry);
        } else {
            let mut r = rng::seeded(&[self.seed, 0xC0, self.commits, self.current_seen]);
            let j = rng::below(&mut r, self.current_seen as usize + 1);
            if j < self.cap {
                self.current_task_pool[j] = entry;
            }
        }
        self.current_seen += 1;
        Ok(())
    }

    /// Task boundary: the current pool joins the negatives (reservoir
    /// subsampled to `cap`) and is cleared.
    pub fn commit_task(&mut self) {
        let mut merged = core::mem::take(&mut self.neg_prompt_pool);
        merged.append(&mut self.current_task_pool);
        if merged.len() > self.cap {
            let mut r = rng::seeded(&[self.seed, 0xC1, self.commits]);
            let mut keep: Vec<PoolEntry> = Vec::with_capacity(self.cap);
            for (i, e) in merged.into_iter().enumerate() {
                if i < self.cap {
                    keep.push(e);
                } else {
                    let j = rng::below(&mut r, i + 1);
                    if j < self.cap {
                        keep[j] = e;
                    }
                }
            }
            merged = keep;
        }
        self.neg_prompt_pool = merged;
        self.current_seen = 0;
        self.commits += 1;
    }
}

/// Negative prompt embedding per image row.
#[derive(Debug, Clone, PartialEq)]
pub struct NegativeSelection {
    /// Index into `neg_prompt_pool` per row.
    pub indices: Vec<usize>,
    pub vectors: Mat,
}

/// Picks one negative per image embedding row.
///
/// With at least `threshold` negatives, row `i` gets the pool entry with the
/// lowest (or, in [`NegativeMode::MostSimilar`], highest) dot product; ties go
/// to the lowest index. Smaller pools broadcast entry 0. An empty pool yields
/// `None` so the caller can skip the triplet term.
pub fn select_negative(e_img: &Mat, pools: &PromptPools, threshold: usize, mode: NegativeMode) -> Result<Option<NegativeSelection>> {
    let pool = &pools.neg_prompt_pool;
    let Some(first) = pool.first() else { return Ok(None) };
    let d = e_img.cols;
    if first.vector.len() != d {
        return Err(Error::DimensionMismatch { expected: first.vector.len(), got: d });
    }
    let n = e_img.rows;
    let indices: Vec<usize> = if pool.len() >= threshold {
        (0..n)
            .map(|i| {
                let row = e_img.row(i);
                let mut best = 0;
                let mut best_s = f64::NAN;
                for (j, p) in pool.iter().enumerate() {
                    let s: f64 = row.iter().zip(&p.vector).map(|(a, b)| a * b).sum();
                    let better = match mode {
                        NegativeMode::MostDissimilar => s < best_s,
                        NegativeMode::MostSimilar => s > best_s,
                    };
                    if j == 0 || better {
                        best = j;
                        best_s = s;
                    }
                }
                best
            })
            .collect()
    } else {
        alloc::vec![0; n]
    };
    let mut vectors = Mat::zeros(n, d);
    for (i, &j) in indices.iter().enumerate() {
        vectors.row_mut(i).copy_from_slice(&pool[j].vector);
    }
    Ok(Some(NegativeSelection { indices, vectors }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use alloc::vec::Vec;

    fn strs(v: &[String]) -> Vec<&str> {
        v.iter().map(|s| s.as_str()).collect()
    }

    #[test]
    fn salient_extraction_examples() {
        let r = extract_salient("A man riding a red bike");
        assert_eq!(strs(&r.nouns), ["man", "bike"]);
        assert_eq!(strs(&r.adjectives), ["red"]);
        assert_eq!(strs(&r.verbs), ["riding"]);

        let r = extract_salient("The the a an");
        assert!(r.nouns.is_empty() && r.adjectives.is_empty() && r.verbs.is_empty());
        assert_eq!(r.rendered, "The the a an");

        let r = extract_salient("zebras standing near a wall");
        assert_eq!(strs(&r.nouns), ["zebras", "wall"]);
        assert!(r.adjectives.is_empty());
        assert_eq!(strs(&r.verbs), ["standing"]);
    }

    #[test]
    fn ambiguous_colour_words_and_dedup() {
        let r = extract_salient("an orange circle sitting above an orange, and a red red square");
        assert_eq!(strs(&r.nouns), ["circle", "orange", "square"]);
        assert_eq!(strs(&r.adjectives), ["orange", "red"]);
        assert_eq!(strs(&r.verbs), ["sitting"]);
    }

    #[test]
    fn render_examples() {
        let rec = |n: &[&str], a: &[&str], v: &[&str]| PromptRecord {
            nouns: n.iter().map(|s| s.to_string()).collect(),
            adjectives: a.iter().map(|s| s.to_string()).collect(),
            verbs: v.iter().map(|s| s.to_string()).collect(),
            source: "c".into(),
            rendered: String::new(),
        };
        assert_eq!(render_prompt(&rec(&["man", "bike"], &["red"], &["riding"])), "An image of man, bike; attributes: red; actions: riding");
        assert_eq!(render_prompt(&rec(&[], &[], &[])), "c");
        assert_eq!(render_prompt(&rec(&["zebra"], &[], &[])), "An image of zebra");
        assert_eq!(render_prompt(&rec(&[], &["red"], &[])), "An image; attributes: red");
    }

    #[test]
    fn lexicon_format_errors() {
        assert!(LexiconTagger::from_text("cat NOUN extra").is_err());
        assert!(LexiconTagger::from_text("cat THING").is_err());
        assert!(LexiconTagger::from_text("# c\n\ncat NOUN\n").is_ok());
    }

    fn pools_with(neg: &[&[f64]]) -> PromptPools {
        let mut p = PromptPools::new(100, 0);
        p.neg_prompt_pool = neg.iter().map(|v| PoolEntry { task: 0, vector: v.to_vec() }).collect();
        p
    }

    #[test]
    fn select_negative_examples() {
        let pools = pools_with(&[&[1.0, 0.0], &[0.0, 1.0], &[-1.0, 0.0]]);
        let e = Mat::from_rows(&[vec![1.0, 0.0]]);
        let sel = select_negative(&e, &pools, 2, NegativeMode::MostDissimilar).unwrap().unwrap();
        assert_eq!(sel.indices, vec![2]);
        assert_eq!(sel.vectors.row(0), &[-1.0, 0.0]);
        let sel = select_negative(&e, &pools, 2, NegativeMode::MostSimilar).unwrap().unwrap();
        assert_eq!(sel.indices, vec![0]);

        let single = pools_with(&[&[0.0, 1.0]]);
        let e2 = Mat::from_rows(&[vec![1.0, 0.0], vec![0.6, 0.8]]);
        let sel = select_negative(&e2, &single, 32, NegativeMode::MostDissimilar).unwrap().unwrap();
        assert_eq!(sel.indices, vec![0, 0]);
        // B = 1 with one entry: both branches agree
        let sel1 = select_negative(&e2, &single, 1, NegativeMode::MostDissimilar).unwrap().unwrap();
        assert_eq!(sel, sel1);

        assert!(select_negative(&e, &PromptPools::new(4, 0), 1, NegativeMode::MostDissimilar).unwrap().is_none());
        let e3 = Mat::from_rows(&[vec![1.0, 0.0, 0.0]]);
        assert!(select_negative(&e3, &pools, 1, NegativeMode::MostDissimilar).is_err());
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let pools = pools_with(&[&[0.0, 1.0], &[0.0, -1.0], &[0.0, 1.0]]);
        let e = Mat::from_rows(&[vec![1.0, 0.0]]);
        let sel = select_negative(&e, &pools, 1, NegativeMode::MostDissimilar).unwrap().unwrap();
        assert_eq!(sel.indices, vec![0]);
    }

    fn unit(i: usize, d: usize) -> Vec<f64> {
        let mut v = vec![0.0; d];
        v[i % d] = 1.0;
        v
    }

    #[test]
    fn commit_merges_and_clears() {
        let mut p = PromptPools::new(10, 1);
        p.push_current(0, unit(0, 3)).unwrap();
        p.push_current(0, unit(1, 3)).unwrap();
        p.commit_task();
        assert_eq!(p.neg_prompt_pool.len(), 2);
        assert!(p.current_task_pool.is_empty());
        let before = p.neg_prompt_pool.clone();
        p.commit_task();
        assert_eq!(p.neg_prompt_pool, before);
        assert!(p.push_current(1, vec![2.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn reservoir_is_seeded_and_bounded() {
        let run = || {
            let mut p = PromptPools::new(100, 42);
            for i in 0..200 {
                let mut v = unit(i, 200);
                v[i] = 1.0;
                p.push_current(0, v).unwrap();
            }
            p.commit_task();
            for i in 0..150 {
                p.push_current(1, unit(i, 200)).unwrap();
            }
            p.commit_task();
            p
        };
        let (a, b) = (run(), run());
        assert_eq!(a.neg_prompt_pool.len(), 100);
        assert_eq!(a, b);
        assert!(a.neg_prompt_pool.iter().any(|e| e.task == 0) && a.neg_prompt_pool.iter().any(|e| e.task == 1));
    }

    #[test]
    fn negatives_only_come_from_earlier_tasks() {
        let mut p = PromptPools::new(50, 3);
        for task in 0..3 {
            assert!(p.neg_prompt_pool.iter().all(|e| e.task < task));
            for i in 0..20 {
                p.push_current(task, unit(i + task, 8)).unwrap();
            }
            assert!(p.neg_prompt_pool.iter().all(|e| e.task < task));
            p.commit_task();
        }
    }
}
