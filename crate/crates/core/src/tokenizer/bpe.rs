use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use super::{Tokenizer, Vocabulary};
use crate::error::{Error, Result};
use crate::types::TokenSeq;

/// End-of-text marker of the published byte-level BPE vocabulary. It has no
/// dedicated BOS, so this id doubles as BOS, EOS and PAD.
pub const END_OF_TEXT: &str = "<|endoftext|>";

/// Byte-level BPE compatible with the standard `vocab.json` / `merges.txt`.
#[derive(Debug, Clone)]
pub struct BpeTokenizer {
    vocab: Vocabulary,
    ranks: BTreeMap<(String, String), usize>,
    byte_to_char: [char; 256],
    char_to_byte: BTreeMap<char, u8>,
}

fn bytes_to_unicode() -> [char; 256] {
    let mut table = ['\0'; 256];
    let printable = |b: u32| (b'!' as u32..=b'~' as u32).contains(&b) || (0xA1..=0xAC).contains(&b) || (0xAE..=0xFF).contains(&b);
    let mut n = 0u32;
    for b in 0u32..256 {
        let cp = if printable(b) {
            b
        } else {
            n += 1;
            255 + n
        };
        table[b as usize] = char::from_u32(cp).expect("valid code point");
    }
    table
}

impl BpeTokenizer {
    /// `vocab` is the parsed token→id map; `merges` the raw merges file.
    pub fn from_parts(vocab: BTreeMap<String, u32>, merges: &str) -> Result<Self> {
        let eot = *vocab
            .get(END_OF_TEXT)
            .ok_or_else(|| Error::InvalidVocabulary(alloc::format!("missing {END_OF_TEXT}")))?;
        let vocab = Vocabulary::new(vocab, eot, eot, eot)?;
        let mut ranks = BTreeMap::new();
        for line in merges.lines() {
            let line = line.trim_end_matches('\r');
            if line.starts_with("#version") || line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split(' ');
            match (parts.next(), parts.next(), parts.next()) {
                (Some(a), Some(b), None) => {
                    let rank = ranks.len();
                    ranks.entry((a.to_string(), b.to_string())).or_insert(rank);
                }
                _ => return Err(Error::InvalidVocabulary(alloc::format!("bad merge rule `{line}`"))),
            }
        }
        let byte_to_char = bytes_to_unicode();
        let char_to_byte = byte_to_char.iter().enumerate().map(|(b, &c)| (c, b as u8)).collect();
        Ok(Self { vocab, ranks, byte_to_char, char_to_byte })
    }

    fn bpe(&self, word: &str) -> Vec<String> {
        let mut symbols: Vec<String> = word.chars().map(|c| c.to_string()).collect();
        while symbols.len() > 1 {
            let best = symbols
                .windows(2)
                .enumerate()
                .filter_map(|(i, w)| self.ranks.get(&(w[0].clone(), w[1].clone())).map(|&r| (r, i)))
                .min();
            let Some((rank, _)) = best else { break };
            let mut merged = Vec::with_capacity(symbols.len());
            let mut i = 0;
            while i < symbols.len() {
                if i + 1 < symbols.len() && self.ranks.get(&(symbols[i].clone(), symbols[i + 1].clone())) == Some(&rank) {
                    let mut s = symbols[i].clone();
                    s.push_str(&symbols[i + 1]);
                    merged.push(s);
                    i += 2;
                } else {
                    merged.push(symbols[i].clone());
                    i += 1;
                }
            }
            symbols = merged;
        }
        symbols
    }
}

/// Splits text the way the GPT-2 pattern
/// `'s|'t|'re|'ve|'m|'ll|'d| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+(?!\S)|\s+` does.
pub(crate) fn pretokenize(text: &str) -> Vec<&str> {
    #[derive(PartialEq, Clone, Copy)]
    enum Class {
        Letter,
        Number,
        Space,
        Other,
    }
    fn class(c: char) -> Class {
        if c.is_alphabetic() {
            Class::Letter
        } else if c.is_numeric() {
            Class::Number
        } else if c.is_whitespace() {
            Class::Space
        } else {
            Class::Other
        }
    }
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let byte_at = |i: usize| if i < chars.len() { chars[i].0 } else { text.len() };
    let run = |from: usize, cls: Class| {
        let mut j = from;
        while j < chars.len() && class(chars[j].1) == cls {
            j += 1;
        }
        j
    };
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i].1;
        if c == '\'' {
            let rest = &text[chars[i].0..];
            if let Some(len) = ["'s", "'t", "'re", "'ve", "'m", "'ll", "'d"].iter().find(|p| rest.starts_with(**p)).map(|p| p.len()) {
                out.push(&rest[..len]);
                i += len;
                continue;
            }
        }
        let (start, body) = if c == ' ' && i + 1 < chars.len() && class(chars[i + 1].1) != Class::Space {
            (i, i + 1)
        } else {
            (i, i)
        };
        let cls = class(chars[body].1);
        let end = if cls == Class::Space {
            let j = run(i, Class::Space);
            if j == chars.len() || j - i == 1 {
                j
            } else {
                j - 1
            }
        } else {
            run(body, cls)
        };
        out.push(&text[byte_at(start)..byte_at(end)]);
        i = end;
    }
    out
}

impl Tokenizer for BpeTokenizer {
    fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    fn encode(&self, text: &str) -> TokenSeq {
        let mut ids = Vec::new();
        for piece in pretokenize(text) {
            let mapped: String = piece.bytes().map(|b| self.byte_to_char[b as usize]).collect();
            for sym in self.bpe(&mapped) {
                match self.vocab.id(&sym) {
                    Some(id) => ids.push(id),
                    // Incomplete vocabularies: fall back to single byte symbols.
                    None => ids.extend(sym.chars().filter_map(|c| self.vocab.id(c.encode_utf8(&mut [0u8; 4])))),
                }
            }
        }
        TokenSeq::plain(ids)
    }

    fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut bytes = Vec::new();
        for &id in ids {
            let tok = self.vocab.token(id)?;
            if self.is_control(id) {
                continue;
            }
            for c in tok.chars() {
                match self.char_to_byte.get(&c) {
                    Some(&b) => bytes.push(b),
                    None => bytes.extend_from_slice(c.encode_utf8(&mut [0u8; 4]).as_bytes()),
                }
            }
        }
        Ok(String::from_utf8_lossy(&bytes).into_owned())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;

    fn tiny() -> BpeTokenizer {
        let table = bytes_to_unicode();
        let mut vocab: BTreeMap<String, u32> = table.iter().enumerate().map(|(i, c)| (c.to_string(), i as u32)).collect();
        let merges = "#version: 0.2\nĠ c\nĠc a\nĠca t\nz e\nze b\n";
        for (i, t) in ["Ġc", "Ġca", "Ġcat", "ze", "zeb"].iter().enumerate() {
            vocab.insert(t.to_string(), 256 + i as u32);
        }
        vocab.insert(END_OF_TEXT.to_string(), 261);
        BpeTokenizer::from_parts(vocab, merges).unwrap()
    }

    #[test]
    fn pretokenizer_matches_reference_pattern() {
        assert_eq!(pretokenize("Hello world"), vec!["Hello", " world"]);
        assert_eq!(pretokenize("it's  2 cats!\n"), vec!["it", "'s", " ", " 2", " cats", "!", "\n"]);
        assert_eq!(pretokenize("a   b"), vec!["a", "  ", " b"]);
        assert_eq!(pretokenize("x \n"), vec!["x", " \n"]);
    }

    #[test]
    fn merges_apply_by_rank() {
        let t = tiny();
        assert_eq!(t.encode(" cat").ids, vec![258]);
        let z = t.encode("zebra");
        assert_eq!(z.ids[0], 260);
        assert_eq!(t.decode(&z.ids).unwrap(), "zebra");
        assert_eq!(t.bos_id(), t.eos_id());
        assert_eq!(t.decode(&[261]).unwrap(), "");
        assert!(t.decode(&[999]).is_err());
        assert!(t.encode("").ids.is_empty());
    }

    #[test]
    fn missing_end_of_text_is_rejected() {
        let vocab: BTreeMap<String, u32> = (0..5).map(|i| (alloc::format!("t{i}"), i)).collect();
        assert!(BpeTokenizer::from_parts(vocab, "").is_err());
    }

    proptest! {
        #[test]
        fn byte_level_round_trip(s in "\\PC{0,30}") {
            let t = tiny();
            let ids = t.encode(&s).ids;
            prop_assert!(ids.iter().all(|&i| (i as usize) < t.vocab_size()));
            prop_assert_eq!(t.decode(&ids).unwrap(), s);
        }
    }
}
