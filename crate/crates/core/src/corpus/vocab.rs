use std::collections::HashMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::TokenId;
use crate::error::{Error, Result};
use crate::matcher::params::hex;

pub const PAD: TokenId = 0;
pub const UNK: TokenId = 1;
const PAD_TOKEN: &str = "<pad>";
const UNK_TOKEN: &str = "<unk>";

/// Lowercase, whitespace-split tokenization.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(|t| t.to_lowercase()).collect()
}

/// Token/id mapping. Ids 0 and 1 are reserved for padding and unknown tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    to_id: HashMap<String, TokenId>,
    tokens: Vec<String>,
}

impl Vocab {
    fn from_tokens(tokens: Vec<String>) -> Self {
        let to_id = tokens
            .iter()
            .enumerate()
            .skip(2)
            .map(|(i, t)| (t.clone(), i as TokenId))
            .collect();
        Self { to_id, tokens }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() <= 2
    }

    pub fn contains(&self, token: &str) -> bool {
        self.to_id.contains_key(token)
    }

    pub fn id(&self, token: &str) -> TokenId {
        self.to_id.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(|s| s.as_str())
    }

    /// Tokenizes and maps `text`, keeping at most `max_len` leading tokens.
    pub fn encode(&self, text: &str, max_len: usize) -> Vec<TokenId> {
        tokenize(text)
            .iter()
            .take(max_len)
            .map(|t| self.id(t))
            .collect()
    }

    /// One token per line; line number minus one is the id.
    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn checksum(&self) -> String {
        hex(&Sha256::digest(self.to_file_string().as_bytes()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_file_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        if tokens.len() < 2 || tokens[0] != PAD_TOKEN || tokens[1] != UNK_TOKEN {
            return Err(Error::Record {
                path: path.display().to_string(),
                line: 1,
                message: format!("vocab must start with {PAD_TOKEN} and {UNK_TOKEN}"),
            });
        }
        let mut seen = HashMap::new();
        for (i, t) in tokens.iter().enumerate().skip(2) {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::Record {
                    path: path.display().to_string(),
                    line: i + 1,
                    message: "vocab entries must be single non-empty tokens".into(),
                });
            }
            if seen.insert(t.clone(), i).is_some() {
                return Err(Error::Record {
                    path: path.display().to_string(),
                    line: i + 1,
                    message: format!("duplicate token {t:?}"),
                });
            }
        }
        Ok(Self::from_tokens(tokens))
    }
}

/// Builds a vocabulary from raw utterance texts.
///
/// Tokens seen at least `min_freq` times get ids in descending-frequency
/// order, ties broken lexicographically; everything else maps to unknown.
pub fn build_vocab<'a, I>(texts: I, min_freq: usize) -> Result<Vocab>
where
    I: IntoIterator<Item = &'a str>,
{
    if min_freq < 1 {
        return Err(Error::Config("min_freq must be at least 1".into()));
    }
    let mut counts: HashMap<String, usize> = HashMap::new();
    let mut any = false;
    for text in texts {
        any = true;
        for tok in tokenize(text) {
            *counts.entry(tok).or_default() += 1;
        }
    }
    if !any || counts.is_empty() {
        return Err(Error::Data("cannot build a vocabulary from an empty corpus".into()));
    }
    let mut kept: Vec<(String, usize)> = counts
        .into_iter()
        .filter(|(t, c)| *c >= min_freq && t != PAD_TOKEN && t != UNK_TOKEN)
        .collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let mut tokens = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
    tokens.extend(kept.into_iter().map(|(t, _)| t));
    Ok(Vocab::from_tokens(tokens))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn min_freq_filters_rare_tokens() {
        let v = build_vocab(["a a a b"], 2).unwrap();
        assert!(v.contains("a"));
        assert!(!v.contains("b"));
        assert_eq!(v.id("b"), UNK);
    }

    #[test]
    fn min_freq_one_keeps_everything() {
        let v = build_vocab(["x y", "z Y"], 1).unwrap();
        for t in ["x", "y", "z"] {
            assert!(v.contains(t), "{t}");
        }
        assert_eq!(v.len(), 5);
    }

    #[test]
    fn ties_break_lexicographically() {
        let v = build_vocab(["beta alpha alpha beta gamma"], 1).unwrap();
        assert_eq!(v.id("alpha"), 2);
        assert_eq!(v.id("beta"), 3);
        assert_eq!(v.id("gamma"), 4);
    }

    #[test]
    fn frequency_orders_ids() {
        let v = build_vocab(["b b b a a c"], 1).unwrap();
        assert_eq!(v.id("b"), 2);
        assert_eq!(v.id("a"), 3);
        assert_eq!(v.id("c"), 4);
    }

    #[test]
    fn empty_corpus_is_rejected() {
        assert!(build_vocab(std::iter::empty::<&str>(), 1).is_err());
        assert!(build_vocab(["   "], 1).is_err());
        assert!(build_vocab(["a"], 0).is_err());
    }

    #[test]
    fn encode_lowercases_and_truncates() {
        let v = build_vocab(["hello world"], 1).unwrap();
        assert_eq!(v.encode("Hello WORLD again", 50), vec![v.id("hello"), v.id("world"), UNK]);
        assert_eq!(v.encode("hello world hello", 2).len(), 2);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let v = build_vocab(["c b a a"], 1).unwrap();
        v.save(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "<pad>\n<unk>\na\nb\nc\n");
        assert_eq!(Vocab::load(&path).unwrap(), v);
    }
}
