//! Character-level vocabulary and the token cache.

use std::collections::HashMap;
use std::path::Path;

use serde::Deserialize;
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::checkpoint::Container;
use crate::error::{bail, Result};

/// Most characters kept in a vocabulary; the rest map to the unknown id.
pub const MAX_CHARS: usize = 511;

/// Placeholder printed for the unknown id.
pub const UNK_TEXT: char = '\u{FFFD}';

/// Characters by descending corpus frequency (ties by code point), then
/// the unknown id, then the end-of-text id.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    pub chars: Vec<char>,
    index: HashMap<char, u32>,
}

impl Vocab {
    pub fn from_chars(chars: Vec<char>) -> Result<Self> {
        let index: HashMap<char, u32> = chars.iter().enumerate().map(|(i, &c)| (c, i as u32)).collect();
        if index.len() != chars.len() {
            bail!(Format, "vocabulary lists a character twice");
        }
        if chars.len() > MAX_CHARS {
            bail!(Format, "vocabulary of {} characters exceeds {MAX_CHARS}", chars.len());
        }
        Ok(Self { chars, index })
    }

    pub fn build(text: &str) -> Self {
        let mut counts: HashMap<char, u64> = HashMap::new();
        for c in text.chars() {
            *counts.entry(c).or_default() += 1;
        }
        let mut chars: Vec<(char, u64)> = counts.into_iter().collect();
        chars.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        chars.truncate(MAX_CHARS);
        Self::from_chars(chars.into_iter().map(|(c, _)| c).collect()).expect("distinct characters")
    }

    pub fn unk(&self) -> u32 {
        self.chars.len() as u32
    }

    pub fn eot(&self) -> u32 {
        self.chars.len() as u32 + 1
    }

    pub fn size(&self) -> usize {
        self.chars.len() + 2
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        text.chars().map(|c| self.index.get(&c).copied().unwrap_or(self.unk())).collect()
    }

    /// Text of `ids`; the end-of-text id ends the text.
    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .take_while(|&&i| i != self.eot())
            .map(|&i| self.chars.get(i as usize).copied().unwrap_or(UNK_TEXT))
            .collect()
    }

    pub fn to_json(&self) -> String {
        let chars: Vec<String> = self.chars.iter().map(|c| c.to_string()).collect();
        let mut s = serde_json::to_string_pretty(&json!({ "chars": chars, "unk": self.unk(), "eot": self.eot() }))
            .expect("serializable");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Raw {
            chars: Vec<String>,
            unk: u32,
            eot: u32,
        }
        let raw: Raw = serde_json::from_str(text)?;
        let mut chars = Vec::with_capacity(raw.chars.len());
        for s in &raw.chars {
            let mut it = s.chars();
            match (it.next(), it.next()) {
                (Some(c), None) => chars.push(c),
                _ => bail!(Format, "vocabulary entry {s:?} is not a single character"),
            }
        }
        let v = Self::from_chars(chars)?;
        if raw.unk != v.unk() || raw.eot != v.eot() {
            bail!(Format, "vocabulary special ids {}/{} do not follow {} characters", raw.unk, raw.eot, v.chars.len());
        }
        Ok(v)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Encoded corpus with its vocabulary and a held-out tail.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenCorpus {
    pub vocab: Vocab,
    pub tokens: Vec<u32>,
    pub source_sha256: String,
}

pub const TOKENS_KIND: &str = "tokens";

/// Fraction of the corpus held out for validation and benchmark prompts.
pub const HELD_OUT_FRACTION: f64 = 0.1;

impl TokenCorpus {
    pub fn from_text(text: &str) -> Self {
        let vocab = Vocab::build(text);
        let tokens = vocab.encode(text);
        Self { vocab, tokens, source_sha256: sha256_hex(text.as_bytes()) }
    }

    /// Reads a UTF-8 text file.
    pub fn from_file(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let text = String::from_utf8(bytes).map_err(|e| crate::HassError::Data(format!("{}: {e}", path.display())))?;
        Ok(Self::from_text(&text))
    }

    pub fn split_point(&self) -> usize {
        self.tokens.len() - (self.tokens.len() as f64 * HELD_OUT_FRACTION).round() as usize
    }

    pub fn train(&self) -> &[u32] {
        &self.tokens[..self.split_point()]
    }

    pub fn held_out(&self) -> &[u32] {
        &self.tokens[self.split_point()..]
    }

    /// Writes `vocab.json` and `tokens.bin` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.vocab.save(&dir.join("vocab.json"))?;
        let meta = json!({ "source_sha256": self.source_sha256, "vocab_size": self.vocab.size() });
        let mut c = Container::new(TOKENS_KIND, meta);
        c.push_u32("tokens", &[self.tokens.len()], self.tokens.clone());
        c.save(&dir.join("tokens.bin"))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let vocab = Vocab::load(&dir.join("vocab.json"))?;
        let c = Container::load(&dir.join("tokens.bin"))?;
        if c.kind != TOKENS_KIND {
            bail!(Format, "expected a token cache, found {:?}", c.kind);
        }
        let tokens = c.u32_data("tokens")?.to_vec();
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= vocab.size()) {
            bail!(Format, "token {bad} outside a vocabulary of {}", vocab.size());
        }
        let source_sha256 = c.meta.get("source_sha256").and_then(|v| v.as_str()).unwrap_or_default().to_string();
        Ok(Self { vocab, tokens, source_sha256 })
    }
}

/// `count` prompts of `len` tokens spread evenly over `tokens`.
pub fn prompts(tokens: &[u32], count: usize, len: usize) -> Result<Vec<Vec<u32>>> {
    if tokens.len() < len || count == 0 {
        bail!(Data, "cannot cut {count} prompts of {len} tokens from {} tokens", tokens.len());
    }
    let span = tokens.len() - len;
    Ok((0..count).map(|i| tokens[i * span / count..][..len].to_vec()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_corpus() {
        let c = TokenCorpus::from_text("abab");
        assert_eq!(c.vocab.chars, vec!['a', 'b']);
        assert_eq!((c.vocab.unk(), c.vocab.eot(), c.vocab.size()), (2, 3, 4));
        assert_eq!(c.tokens, vec![0, 1, 0, 1]);
        assert_eq!(c.vocab.encode("abc"), vec![0, 1, 2]);
        assert_eq!(c.vocab.decode(&[1, 0, 2, 3, 0]), "ba\u{FFFD}");
    }

    #[test]
    fn frequency_then_code_point_order() {
        let v = Vocab::build("ccbbbaad");
        assert_eq!(v.chars, vec!['b', 'a', 'c', 'd']);
    }

    #[test]
    fn rare_characters_become_unknown() {
        // 600 distinct characters; character i occurs 600 - i times, so the
        // 511 most frequent are exactly the first 511.
        let alphabet: Vec<char> = (0..600u32).map(|i| char::from_u32(0x4E00 + i).unwrap()).collect();
        let mut text = String::new();
        for (i, &c) in alphabet.iter().enumerate() {
            text.extend(std::iter::repeat_n(c, 600 - i));
        }
        let v = Vocab::build(&text);
        assert_eq!(v.chars.len(), 511);
        assert_eq!(v.chars, alphabet[..511].to_vec());
        assert_eq!(v.encode(&alphabet[599].to_string()), vec![v.unk()]);
        assert_eq!(v.size(), 513);
    }

    #[test]
    fn saved_files_are_reproducible() {
        let dir = tempfile::tempdir().unwrap();
        let c = TokenCorpus::from_text("the cat sat on the mat\n");
        c.save(&dir.path().join("a")).unwrap();
        c.save(&dir.path().join("b")).unwrap();
        for f in ["vocab.json", "tokens.bin"] {
            let a = std::fs::read(dir.path().join("a").join(f)).unwrap();
            let b = std::fs::read(dir.path().join("b").join(f)).unwrap();
            assert_eq!(a, b, "{f}");
        }
        assert_eq!(TokenCorpus::load(&dir.path().join("a")).unwrap(), c);
    }

    #[test]
    fn vocab_json_round_trip_and_errors() {
        let v = Vocab::build("hello\n\"world\"");
        assert_eq!(Vocab::from_json(&v.to_json()).unwrap(), v);
        assert!(Vocab::from_json(r#"{"chars":["ab"],"unk":1,"eot":2}"#).is_err());
        assert!(Vocab::from_json(r#"{"chars":["a"],"unk":5,"eot":2}"#).is_err());
        assert!(Vocab::from_json(r#"{"chars":["a"],"unk":1,"eot":2,"x":0}"#).is_err());
    }

    #[test]
    fn prompts_are_evenly_spaced() {
        let toks: Vec<u32> = (0..100).collect();
        let p = prompts(&toks, 3, 10).unwrap();
        assert_eq!(p[0][0], 0);
        assert_eq!(p[1][0], 30);
        assert_eq!(p[2][0], 60);
        assert!(prompts(&toks, 1, 200).is_err());
    }
}
