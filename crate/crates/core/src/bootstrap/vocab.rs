use std::collections::HashMap;
use std::path::Path;

use crate::{Error, Result, TokenId};

pub const BOS: &str = "<bos>";

/// Word-level vocabulary. Text is split on whitespace and every word must be
/// in the vocabulary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocab {
    pub fn new(words: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if w.is_empty() || w.chars().any(char::is_whitespace) {
                return Err(Error::Input(format!("invalid vocabulary entry {w:?}")));
            }
            if index.insert(w.clone(), i as TokenId).is_some() {
                return Err(Error::Input(format!("duplicate vocabulary entry {w:?}")));
            }
        }
        Ok(Vocab { words, index })
    }

    /// One word per line.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::new(text.lines().filter(|l| !l.trim().is_empty()).map(|l| l.trim().to_string()).collect())
    }

    pub fn to_text(&self) -> String {
        let mut s = self.words.join("\n");
        s.push('\n');
        s
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<TokenId> {
        self.index.get(word).copied()
    }

    pub fn bos(&self) -> Option<TokenId> {
        self.id(BOS)
    }

    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>> {
        text.split_whitespace()
            .map(|w| self.id(w).ok_or_else(|| Error::Input(format!("word {w:?} is not in the vocabulary"))))
            .collect()
    }

    pub fn decode(&self, tokens: &[TokenId]) -> String {
        tokens.iter().map(|&t| self.words.get(t as usize).map_or("<unk>", String::as_str)).collect::<Vec<_>>().join(" ")
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let v = Vocab::new(vec![BOS.into(), "a".into(), "b".into()]).unwrap();
        assert_eq!(v.encode("b  a\tb").unwrap(), vec![2, 1, 2]);
        assert_eq!(v.decode(&[2, 1]), "b a");
        assert_eq!(v.bos(), Some(0));
        assert!(v.encode("c").is_err());
        assert_eq!(Vocab::new(v.to_text().lines().map(String::from).collect()).unwrap(), v);
        assert!(Vocab::new(vec!["a".into(), "a".into()]).is_err());
    }
}
