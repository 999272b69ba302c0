//! Fixed-vocabulary tokenizers behind one interface.
//!
//! [`BpeTokenizer`] reads the standard byte-level BPE `vocab.json` +
//! `merges.txt` pair (50,257 tokens for the published GPT-2 files).
//! [`DeskTokenizer`] is a word + character vocabulary small enough for tests
//! and desk-scale runs.

mod bpe;
mod desk;

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;
pub use bpe::{BpeTokenizer, END_OF_TEXT};
pub use desk::DeskTokenizer;

use crate::error::{Error, Result};
use crate::types::TokenSeq;

pub trait Tokenizer: Send + Sync {
    fn vocabulary(&self) -> &Vocabulary;

    /// Encodes text without adding control tokens.
    fn encode(&self, text: &str) -> TokenSeq;

    /// Decodes ids, dropping BOS/EOS/PAD.
    fn decode(&self, ids: &[u32]) -> Result<String>;

    fn vocab_size(&self) -> usize {
        self.vocabulary().size()
    }
    fn bos_id(&self) -> u32 {
        self.vocabulary().bos_id
    }
    fn eos_id(&self) -> u32 {
        self.vocabulary().eos_id
    }
    fn pad_id(&self) -> u32 {
        self.vocabulary().pad_id
    }

    fn is_control(&self, id: u32) -> bool {
        let v = self.vocabulary();
        id == v.bos_id || id == v.eos_id || id == v.pad_id
    }

    /// `[BOS] + encode(text) + [EOS]`.
    fn encode_with_specials(&self, text: &str) -> TokenSeq {
        let mut ids = Vec::new();
        ids.push(self.bos_id());
        ids.extend(self.encode(text).ids);
        ids.push(self.eos_id());
        TokenSeq { ids, has_bos: true, has_eos: true }
    }
}

/// Bijective token ↔ id table with reserved control ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    pub token_to_id: BTreeMap<String, u32>,
    id_to_token: Vec<Option<String>>,
    pub bos_id: u32,
    pub eos_id: u32,
    pub pad_id: u32,
}

impl Vocabulary {
    /// Builds the inverse table and checks the map is a bijection, larger than
    /// three entries, and contains the reserved ids.
    pub fn new(token_to_id: BTreeMap<String, u32>, bos_id: u32, eos_id: u32, pad_id: u32) -> Result<Self> {
        let size = token_to_id.values().copied().max().map_or(0, |m| m as usize + 1);
        if token_to_id.len() <= 3 {
            return Err(Error::InvalidVocabulary("vocabulary must hold more than 3 tokens".into()));
        }
        let mut id_to_token = alloc::vec![None; size];
        for (tok, &id) in &token_to_id {
            let slot = &mut id_to_token[id as usize];
            if slot.is_some() {
                return Err(Error::InvalidVocabulary(alloc::format!("id {id} assigned twice")));
            }
            *slot = Some(tok.clone());
        }
        for id in [bos_id, eos_id, pad_id] {
            if id as usize >= size || id_to_token[id as usize].is_none() {
                return Err(Error::InvalidVocabulary(alloc::format!("reserved id {id} has no token")));
            }
        }
        Ok(Self { token_to_id, id_to_token, bos_id, eos_id, pad_id })
    }

    pub fn size(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Result<&str> {
        match self.id_to_token.get(id as usize) {
            Some(Some(t)) => Ok(t),
            _ => Err(Error::TokenOutOfRange { id, size: self.size() }),
        }
    }
}
