use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use super::{Tokenizer, Vocabulary};
use crate::error::{Error, Result};
use crate::types::TokenSeq;

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const UNK: &str = "<unk>";

/// Word-level vocabulary with a per-character fallback.
///
/// Text is segmented into alphanumeric runs and single other characters
/// (whitespace and punctuation). A run found in the vocabulary is one token;
/// otherwise it is spelled out character by character. Characters outside the
/// vocabulary map to `<unk>`, so round-tripping holds only on the vocabulary's
/// character domain.
#[derive(Debug, Clone, PartialEq)]
pub struct DeskTokenizer {
    vocab: Vocabulary,
    unk_id: u32,
}

impl DeskTokenizer {
    /// Reserved control tokens, every printable ASCII character, then `words`.
    pub fn new<'a>(words: impl IntoIterator<Item = &'a str>) -> Self {
        let mut map = BTreeMap::new();
        for (i, t) in [PAD, BOS, EOS, UNK].iter().enumerate() {
            map.insert(t.to_string(), i as u32);
        }
        let mut next = 4u32;
        for c in ' '..='~' {
            map.insert(c.to_string(), next);
            next += 1;
        }
        let mut extra: Vec<&str> = words.into_iter().filter(|w| !w.is_empty()).collect();
        extra.sort_unstable();
        extra.dedup();
        for w in extra {
            if !map.contains_key(w) {
                map.insert(w.to_string(), next);
                next += 1;
            }
        }
        Self::from_map(map).expect("constructed desk vocabulary is valid")
    }

    /// Explicit vocabulary. Control tokens take ids 0..=3 unless the map
    /// already names them.
    pub fn from_symbols(symbols: &[(&str, u32)]) -> Result<Self> {
        let mut map: BTreeMap<String, u32> = symbols.iter().map(|(s, i)| (s.to_string(), *i)).collect();
        for (i, t) in [PAD, BOS, EOS, UNK].iter().enumerate() {
            map.entry(t.to_string()).or_insert(i as u32);
        }
        Self::from_map(map)
    }

    pub fn from_map(map: BTreeMap<String, u32>) -> Result<Self> {
        let get = |t: &str| map.get(t).copied().ok_or_else(|| Error::InvalidVocabulary(alloc::format!("missing {t}")));
        let (pad, bos, eos, unk) = (get(PAD)?, get(BOS)?, get(EOS)?, get(UNK)?);
        let mut reserved = [pad, bos, eos, unk];
        reserved.sort_unstable();
        if reserved.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidVocabulary("reserved ids must be distinct".into()));
        }
        let vocab = Vocabulary::new(map, bos, eos, pad)?;
        Ok(Self { vocab, unk_id: unk })
    }

    pub fn unk_id(&self) -> u32 {
        self.unk_id
    }

    fn push_char(&self, c: char, out: &mut Vec<u32>) {
        let mut buf = [0u8; 4];
        out.push(self.vocab.id(c.encode_utf8(&mut buf)).unwrap_or(self.unk_id));
    }
}

impl Tokenizer for DeskTokenizer {
    fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    fn encode(&self, text: &str) -> TokenSeq {
        let mut ids = Vec::new();
        let mut rest = text;
        while let Some(c) = rest.chars().next() {
            if c.is_alphanumeric() {
                let end = rest.find(|ch: char| !ch.is_alphanumeric()).unwrap_or(rest.len());
                let word = &rest[..end];
                match self.vocab.id(word) {
                    Some(id) if id != self.unk_id && !self.is_control(id) => ids.push(id),
                    _ => word.chars().for_each(|ch| self.push_char(ch, &mut ids)),
                }
                rest = &rest[end..];
            } else {
                self.push_char(c, &mut ids);
                rest = &rest[c.len_utf8()..];
            }
        }
        TokenSeq::plain(ids)
    }

    fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut out = String::new();
        for &id in ids {
            let tok = self.vocab.token(id)?;
            if self.is_control(id) {
                continue;
            }
            if id == self.unk_id {
                out.push('\u{FFFD}');
            } else {
                out.push_str(tok);
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;

    #[test]
    fn constructed_vocabulary_example() {
        let t = DeskTokenizer::from_symbols(&[("a", 5), (" ", 6)]).unwrap();
        assert_eq!(t.encode("a a").ids, vec![5, 6, 5]);
        assert!(t.encode("").ids.is_empty());
    }

    #[test]
    fn decode_strips_control_and_checks_range() {
        let t = DeskTokenizer::new(["zebra"]);
        assert_eq!(t.decode(&[t.bos_id()]).unwrap(), "");
        let z = t.encode("zebra");
        assert_eq!(z.ids.len(), 1);
        assert_eq!(t.decode(&z.ids).unwrap(), "zebra");
        let v = t.vocab_size() as u32;
        assert!(matches!(t.decode(&[v + 10]), Err(Error::TokenOutOfRange { .. })));
        let full = t.encode_with_specials("zebra");
        assert_eq!(t.decode(&full.ids).unwrap(), "zebra");
    }

    #[test]
    fn unknown_words_fall_back_to_characters() {
        let t = DeskTokenizer::new(["red"]);
        let ids = t.encode("red rod, ok").ids;
        assert_eq!(ids.len(), 1 + 1 + 3 + 1 + 1 + 2);
        assert_eq!(t.decode(&ids).unwrap(), "red rod, ok");
        assert_eq!(t.encode("é").ids, vec![t.unk_id()]);
    }

    #[test]
    fn reserved_ids_must_be_distinct() {
        assert!(DeskTokenizer::from_symbols(&[("<pad>", 1), ("x", 7)]).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn round_trip_on_character_domain(s in "[ -~]{0,40}") {
            let t = DeskTokenizer::new(["a", "red", "circle", "above"]);
            let first = t.encode(&s);
            prop_assert_eq!(&first, &t.encode(&s));
            prop_assert!(first.ids.iter().all(|&i| (i as usize) < t.vocab_size()));
            prop_assert_eq!(t.decode(&first.ids).unwrap(), s);
        }
    }
}
