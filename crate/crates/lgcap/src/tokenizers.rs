//! Tokenizer selection and vocabulary files.

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use lgcap_core::prompt::{TEMPLATE_ACTIONS, TEMPLATE_ATTRIBUTES, TEMPLATE_NOUNS};
use lgcap_core::split::Manifest;
use lgcap_core::synthetic;
use lgcap_core::tokenizer::{BpeTokenizer, DeskTokenizer, Tokenizer};
use serde::{Deserialize, Serialize};

use crate::error::AppResult;
use crate::io::{read_json, read_text};

/// How to rebuild the tokenizer of a run; stored in checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TokenizerSpec {
    Desk { words: Vec<String> },
    Bpe { vocab: PathBuf, merges: PathBuf },
}

impl TokenizerSpec {
    pub fn build(&self) -> AppResult<Box<dyn Tokenizer>> {
        Ok(match self {
            TokenizerSpec::Desk { words } => Box::new(DeskTokenizer::new(words.iter().map(String::as_str))),
            TokenizerSpec::Bpe { vocab, merges } => {
                let map: BTreeMap<String, u32> = read_json(vocab)?;
                Box::new(BpeTokenizer::from_parts(map, &read_text(merges)?)?)
            }
        })
    }
}

/// Word list for the desk tokenizer: the synthetic vocabulary, the prompt
/// template words and every alphanumeric run in the training captions.
pub fn desk_words(manifest: &Manifest) -> Vec<String> {
    let mut words: BTreeSet<String> = synthetic::vocabulary_words().into_iter().map(String::from).collect();
    let mut add = |text: &str| {
        for w in text.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()) {
            if w.chars().count() > 1 {
                words.insert(w.to_string());
            }
        }
    };
    for t in [TEMPLATE_NOUNS, TEMPLATE_ATTRIBUTES, TEMPLATE_ACTIONS] {
        add(t);
    }
    for task in &manifest.tasks {
        for e in &task.train {
            e.captions.iter().for_each(|c| add(c));
        }
    }
    words.into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_round_trip_on_captions() {
        let m = synthetic::build_synthetic_stream(2, 8, 2).unwrap();
        let spec = TokenizerSpec::Desk { words: desk_words(&m) };
        let tok = spec.build().unwrap();
        for c in &m.tasks[1].test[0].captions {
            let ids = tok.encode(c).ids;
            assert_eq!(tok.decode(&ids).unwrap(), *c);
            assert!(ids.len() <= c.split(' ').count() * 2);
        }
    }

    #[test]
    fn bpe_files_load() {
        let dir = tempfile::tempdir().unwrap();
        let v = dir.path().join("vocab.json");
        let mg = dir.path().join("merges.txt");
        let mut vocab = serde_json::Map::new();
        for (i, t) in ["a", "b", "ab", "<|endoftext|>"].iter().enumerate() {
            vocab.insert(t.to_string(), (i as u64).into());
        }
        std::fs::write(&v, serde_json::to_vec(&vocab).unwrap()).unwrap();
        std::fs::write(&mg, "#version: 0.2\na b\n").unwrap();
        let tok = TokenizerSpec::Bpe { vocab: v, merges: mg }.build().unwrap();
        assert_eq!(tok.encode("ab").ids, vec![2]);
        assert_eq!(tok.bos_id(), 3);
    }
}
