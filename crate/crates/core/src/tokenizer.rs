// SPDX-License-Identifier: MIT OR Apache-2.0

//! Byte-level BPE tokenizer (GPT-2 scheme).
//!
//! Files: `vocab.json` maps token string to id; `merges.txt` holds one
//! space-separated pair per line, earlier lines merge first. A leading
//! `#version` line is ignored. Token strings are written in the GPT-2
//! byte-to-unicode alphabet (see `bytes_to_unicode`): printable Latin-1
//! bytes map to themselves, the remaining 68 bytes map to U+0100 onwards
//! in byte order. `Ġ` (U+0120) therefore stands for a space.

use std::collections::HashMap;
use std::path::Path;
use std::sync::OnceLock;

use fancy_regex::Regex;

use crate::error::{Error, Result};

/// GPT-2 pre-tokenization pattern.
pub const PRETOKENIZE_PATTERN: &str =
    r"'s|'t|'re|'ve|'m|'ll|'d| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+(?!\S)|\s+";

pub type TokenId = u32;

/// GPT-2 byte to unicode table. Index is the byte value.
pub fn bytes_to_unicode() -> &'static [char; 256] {
    static TABLE: OnceLock<[char; 256]> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut table = ['\0'; 256];
        let printable = |b: u32| {
            (b'!' as u32..=b'~' as u32).contains(&b)
                || (0xA1..=0xAC).contains(&b)
                || (0xAE..=0xFF).contains(&b)
        };
        let mut next = 0u32;
        for b in 0u32..256 {
            table[b as usize] = if printable(b) {
                char::from_u32(b).expect("latin-1")
            } else {
                let c = char::from_u32(256 + next).expect("valid code point");
                next += 1;
                c
            };
        }
        table
    })
}

fn unicode_to_bytes() -> &'static HashMap<char, u8> {
    static TABLE: OnceLock<HashMap<char, u8>> = OnceLock::new();
    TABLE.get_or_init(|| {
        bytes_to_unicode()
            .iter()
            .enumerate()
            .map(|(b, &c)| (c, b as u8))
            .collect()
    })
}

fn pretokenizer() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(PRETOKENIZE_PATTERN).expect("static pattern"))
}

/// Split text into GPT-2 pre-tokens.
pub fn pretokenize(text: &str) -> Vec<&str> {
    pretokenizer()
        .find_iter(text)
        .map(|m| m.expect("pattern cannot fail on backtracking limits").as_str())
        .collect()
}

/// Map raw bytes into the byte-level alphabet.
pub fn encode_bytes(s: &str) -> String {
    let table = bytes_to_unicode();
    s.bytes().map(|b| table[b as usize]).collect()
}

#[derive(Debug, Clone)]
pub struct Tokenizer {
    vocab: HashMap<String, TokenId>,
    id_to_token: Vec<String>,
    merge_ranks: HashMap<(String, String), usize>,
    merges: Vec<(String, String)>,
}

impl Tokenizer {
    pub fn new(vocab: HashMap<String, TokenId>, merges: Vec<(String, String)>) -> Result<Self> {
        let size = vocab.values().map(|&id| id as usize + 1).max().unwrap_or(0);
        let mut id_to_token = vec![String::new(); size];
        let mut seen = vec![false; size];
        for (tok, &id) in &vocab {
            if seen[id as usize] {
                return Err(Error::Tokenizer(format!("id {id} assigned to more than one token")));
            }
            seen[id as usize] = true;
            id_to_token[id as usize] = tok.clone();
        }
        if let Some(gap) = seen.iter().position(|s| !s) {
            return Err(Error::Tokenizer(format!("vocabulary ids are not contiguous: {gap} missing")));
        }
        let merge_ranks = merges
            .iter()
            .enumerate()
            .map(|(rank, pair)| (pair.clone(), rank))
            .collect();
        Ok(Self {
            vocab,
            id_to_token,
            merge_ranks,
            merges,
        })
    }

    pub fn load(vocab_path: impl AsRef<Path>, merges_path: impl AsRef<Path>) -> Result<Self> {
        let vocab_path = vocab_path.as_ref();
        let merges_path = merges_path.as_ref();
        let vocab_text = std::fs::read_to_string(vocab_path).map_err(|e| Error::io(vocab_path, e))?;
        let vocab: HashMap<String, TokenId> = serde_json::from_str(&vocab_text)?;
        let merges_text =
            std::fs::read_to_string(merges_path).map_err(|e| Error::io(merges_path, e))?;
        Self::new(vocab, parse_merges(&merges_text)?)
    }

    pub fn save(&self, vocab_path: impl AsRef<Path>, merges_path: impl AsRef<Path>) -> Result<()> {
        let vocab_path = vocab_path.as_ref();
        let merges_path = merges_path.as_ref();
        // id order keeps the file stable
        let mut map = serde_json::Map::new();
        for (id, tok) in self.id_to_token.iter().enumerate() {
            map.insert(tok.clone(), serde_json::Value::from(id));
        }
        let vocab = serde_json::to_string(&map)?;
        std::fs::write(vocab_path, vocab).map_err(|e| Error::io(vocab_path, e))?;
        let mut merges = String::from("#version: 0.2\n");
        for (a, b) in &self.merges {
            merges.push_str(a);
            merges.push(' ');
            merges.push_str(b);
            merges.push('\n');
        }
        std::fs::write(merges_path, merges).map_err(|e| Error::io(merges_path, e))
    }

    pub fn vocab_size(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn token_id(&self, token: &str) -> Option<TokenId> {
        self.vocab.get(token).copied()
    }

    /// Raw vocabulary entry (byte-level alphabet).
    pub fn token_str(&self, id: TokenId) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    /// Byte sequence a token stands for.
    pub fn token_bytes(&self, id: TokenId) -> Vec<u8> {
        let back = unicode_to_bytes();
        match self.token_str(id) {
            Some(s) => s
                .chars()
                .map(|c| back.get(&c).copied().unwrap_or(b'?'))
                .collect(),
            None => Vec::new(),
        }
    }

    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>> {
        let mut ids = Vec::new();
        for piece in pretokenize(text) {
            for symbol in self.bpe(&encode_bytes(piece)) {
                let id = self.vocab.get(&symbol).copied().ok_or_else(|| {
                    Error::Tokenizer(format!("symbol `{symbol}` is not in the vocabulary"))
                })?;
                ids.push(id);
            }
        }
        Ok(ids)
    }

    /// Decode to text; invalid UTF-8 sequences are replaced.
    pub fn decode(&self, ids: &[TokenId]) -> String {
        let bytes: Vec<u8> = ids.iter().flat_map(|&id| self.token_bytes(id)).collect();
        String::from_utf8_lossy(&bytes).into_owned()
    }

    /// Decoded surface form of a single token.
    pub fn decode_token(&self, id: TokenId) -> String {
        self.decode(&[id])
    }

    fn bpe(&self, word: &str) -> Vec<String> {
        let mut symbols: Vec<String> = word.chars().map(String::from).collect();
        while symbols.len() > 1 {
            let best = symbols
                .windows(2)
                .enumerate()
                .filter_map(|(i, w)| {
                    self.merge_ranks
                        .get(&(w[0].clone(), w[1].clone()))
                        .map(|&rank| (rank, i))
                })
                .min();
            let Some((rank, _)) = best else { break };
            let (left, right) = &self.merges[rank];
            let mut merged = Vec::with_capacity(symbols.len());
            let mut i = 0;
            while i < symbols.len() {
                if i + 1 < symbols.len() && &symbols[i] == left && &symbols[i + 1] == right {
                    merged.push(format!("{left}{right}"));
                    i += 2;
                } else {
                    merged.push(std::mem::take(&mut symbols[i]));
                    i += 1;
                }
            }
            symbols = merged;
        }
        symbols
    }
}

pub fn parse_merges(text: &str) -> Result<Vec<(String, String)>> {
    let mut merges = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.starts_with("#version") || line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split(' ');
        match (parts.next(), parts.next(), parts.next()) {
            (Some(a), Some(b), None) if !a.is_empty() && !b.is_empty() => {
                merges.push((a.to_string(), b.to_string()))
            }
            _ => {
                return Err(Error::Tokenizer(format!(
                    "merges line {}: expected two space-separated symbols",
                    lineno + 1
                )))
            }
        }
    }
    Ok(merges)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn byte_tokenizer(extra: &[(&str, &str)]) -> Tokenizer {
        let mut vocab: HashMap<String, TokenId> = bytes_to_unicode()
            .iter()
            .enumerate()
            .map(|(i, c)| (c.to_string(), i as TokenId))
            .collect();
        let mut merges = Vec::new();
        for (a, b) in extra {
            let id = vocab.len() as TokenId;
            vocab.insert(format!("{a}{b}"), id);
            merges.push((a.to_string(), b.to_string()));
        }
        Tokenizer::new(vocab, merges).unwrap()
    }

    #[test]
    fn byte_table_matches_gpt2() {
        let t = bytes_to_unicode();
        assert_eq!(t[b'A' as usize], 'A');
        assert_eq!(t[b' ' as usize], 'Ġ');
        assert_eq!(t[b'\n' as usize], 'Ċ');
        assert_eq!(t[0], 'Ā');
        let mut uniq: Vec<char> = t.to_vec();
        uniq.sort();
        uniq.dedup();
        assert_eq!(uniq.len(), 256);
    }

    #[test]
    fn empty_text() {
        assert!(byte_tokenizer(&[]).encode("").unwrap().is_empty());
    }

    #[test]
    fn single_merge() {
        let vocab: HashMap<String, TokenId> = [("A".to_string(), 0), ("AA".to_string(), 1)].into();
        let tok = Tokenizer::new(vocab, vec![("A".into(), "A".into())]).unwrap();
        assert_eq!(tok.encode("AA").unwrap(), vec![1]);
    }

    #[test]
    fn merge_priority_follows_line_order() {
        let tok = byte_tokenizer(&[("b", "c"), ("a", "b")]);
        // (b,c) has priority, so "abc" -> a + bc
        let ids = tok.encode("abc").unwrap();
        assert_eq!(ids.len(), 2);
        assert_eq!(tok.token_str(ids[1]), Some("bc"));
    }

    #[test]
    fn pretokenizer_splits_like_gpt2() {
        assert_eq!(
            pretokenize("Honda Civic, produced by Honda."),
            vec!["Honda", " Civic", ",", " produced", " by", " Honda", "."]
        );
        assert_eq!(pretokenize("X's  label"), vec!["X", "'s", " ", " label"]);
    }

    #[test]
    fn merges_file_parsing() {
        let m = parse_merges("#version: 0.2\nĠ t\nh e\n").unwrap();
        assert_eq!(m, vec![("Ġ".into(), "t".into()), ("h".into(), "e".into())]);
        assert!(parse_merges("abc\n").is_err());
    }

    #[test]
    fn unknown_symbol_is_reported() {
        let vocab: HashMap<String, TokenId> = [("A".to_string(), 0)].into();
        let tok = Tokenizer::new(vocab, vec![]).unwrap();
        assert!(tok.encode("B").is_err());
    }

    proptest::proptest! {
        #[test]
        fn roundtrip_valid_utf8(s in "\\PC{0,40}") {
            let tok = byte_tokenizer(&[("Ġ", "t"), ("h", "e"), ("Ġt", "he")]);
            let ids = tok.encode(&s).unwrap();
            proptest::prop_assert_eq!(tok.decode(&ids), s);
        }
    }
}
