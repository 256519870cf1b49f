use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const MASK_TOKEN: &str = "[MASK]";
pub const UNK_TOKEN: &str = "[UNK]";
pub const MASK_ID: TokenId = 0;
pub const UNK_ID: TokenId = 1;

/// Maps strings to token ids and back. Implementations must be pure.
pub trait Tokenizer {
    fn encode(&self, text: &str) -> Vec<TokenId>;
    fn decode(&self, ids: &[TokenId]) -> String;
}

/// Token list where the line number in the manifest is the id.
/// Ids 0 and 1 are always `[MASK]` and `[UNK]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocab {
    pub fn from_tokens<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut vocab = Self {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        vocab.push(MASK_TOKEN);
        vocab.push(UNK_TOKEN);
        for w in words {
            vocab.push(w.as_ref());
        }
        vocab
    }

    /// Builds a vocabulary from whitespace-separated corpus text, in order of
    /// first appearance.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        Self::from_tokens(texts.into_iter().flat_map(str::split_whitespace))
    }

    fn push(&mut self, token: &str) {
        if !self.index.contains_key(token) {
            self.index.insert(token.to_string(), self.tokens.len() as TokenId);
            self.tokens.push(token.to_string());
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        for t in &self.tokens {
            writeln!(f, "{t}").map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut tokens = Vec::new();
        for line in BufReader::new(f).lines() {
            tokens.push(line.map_err(|e| Error::io(path, e))?);
        }
        if tokens.len() < 2 || tokens[0] != MASK_TOKEN || tokens[1] != UNK_TOKEN {
            return Err(Error::invalid(format!(
                "{} is not a vocabulary manifest (missing special tokens)",
                path.display()
            )));
        }
        let vocab = Self::from_tokens(tokens.iter().skip(2));
        if vocab.len() != tokens.len() {
            return Err(Error::invalid(format!(
                "{} contains duplicate tokens",
                path.display()
            )));
        }
        Ok(vocab)
    }
}

/// Whitespace tokenizer over a fixed vocabulary; unknown words map to `[UNK]`.
#[derive(Debug, Clone)]
pub struct WhitespaceTokenizer {
    vocab: Vocab,
}

impl WhitespaceTokenizer {
    pub fn new(vocab: Vocab) -> Self {
        Self { vocab }
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }
}

impl Tokenizer for WhitespaceTokenizer {
    fn encode(&self, text: &str) -> Vec<TokenId> {
        text.split_whitespace()
            .map(|w| self.vocab.id(w).unwrap_or(UNK_ID))
            .collect()
    }

    fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .map(|&i| self.vocab.token(i).unwrap_or(UNK_TOKEN))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn specials_come_first() {
        let v = Vocab::build(["b a", "a c"]);
        assert_eq!(v.tokens(), &["[MASK]", "[UNK]", "b", "a", "c"]);
        assert_eq!(v.id("[MASK]"), Some(MASK_ID));
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let v = Vocab::build(["x y z"]);
        v.save(&path).unwrap();
        assert_eq!(Vocab::load(&path).unwrap(), v);
        std::fs::write(&path, "x\ny\n").unwrap();
        assert!(Vocab::load(&path).is_err());
    }

    #[test]
    fn unknown_words() {
        let tok = WhitespaceTokenizer::new(Vocab::build(["a b"]));
        let ids = tok.encode("a  q b");
        assert_eq!(ids, vec![2, UNK_ID, 3]);
        assert_eq!(tok.decode(&ids), "a [UNK] b");
    }
}
