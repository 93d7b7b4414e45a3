use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const MASK: TokenId = 3;
pub const UNK: TokenId = 4;
/// Number of reserved ids; content tokens start here.
pub const RESERVED: usize = 5;

pub const RESERVED_TOKENS: [&str; RESERVED] = ["<pad>", "<s>", "</s>", "<mask>", "<unk>"];

/// Shared word-level vocabulary. Ids `0..5` are always
/// `<pad> <s> </s> <mask> <unk>`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocab {
    /// Builds a vocabulary from content tokens (reserved tokens are
    /// prepended). Duplicates and reserved spellings are rejected.
    pub fn from_content<I, S>(content: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut tokens: Vec<String> = RESERVED_TOKENS.iter().map(|s| s.to_string()).collect();
        tokens.extend(content.into_iter().map(Into::into));
        Self::from_tokens(tokens)
    }

    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        for (i, r) in RESERVED_TOKENS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*r) {
                return Err(Error::invalid(format!("vocab id {i} must be `{r}`")));
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.contains(char::is_whitespace) {
                return Err(Error::invalid(format!("invalid vocab token {t:?}")));
            }
            if index.insert(t.clone(), i as TokenId).is_some() {
                return Err(Error::invalid(format!("duplicate vocab token `{t}`")));
            }
        }
        Ok(Vocab { tokens, index })
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

    pub fn id_or_unk(&self, token: &str) -> TokenId {
        self.id(token).unwrap_or(UNK)
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, words: &[&str]) -> Vec<TokenId> {
        words.iter().map(|w| self.id_or_unk(w)).collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> Vec<&str> {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or(RESERVED_TOKENS[UNK as usize]))
            .collect()
    }

    pub fn is_content(id: TokenId) -> bool {
        id as usize >= RESERVED
    }

    /// One token per line; the line number is the id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for t in &self.tokens {
            writeln!(f, "{t}")?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = BufReader::new(std::fs::File::open(path)?);
        let mut tokens = Vec::new();
        for (i, line) in f.lines().enumerate() {
            let line = line?;
            if line.is_empty() || line.contains(char::is_whitespace) {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: format!("invalid vocab entry {line:?}"),
                });
            }
            tokens.push(line);
        }
        Self::from_tokens(tokens)
    }
}

/// Frequency-sorted vocabulary over whitespace tokens of `text`; ties are
/// broken lexicographically. `max_size` bounds the number of content
/// tokens (reserved ids are not counted).
pub fn build_vocab(text: &str, max_size: usize) -> Result<Vocab> {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for tok in text.split_whitespace() {
        if RESERVED_TOKENS.contains(&tok) {
            continue;
        }
        *counts.entry(tok).or_default() += 1;
    }
    if counts.is_empty() {
        return Err(Error::invalid("build_vocab: corpus has no tokens"));
    }
    let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    ranked.truncate(max_size);
    Vocab::from_content(ranked.into_iter().map(|(t, _)| t.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn content(v: &Vocab) -> Vec<&str> {
        v.tokens()[RESERVED..].iter().map(String::as_str).collect()
    }

    #[test]
    fn frequency_order() {
        let v = build_vocab("a b a", 10).unwrap();
        assert_eq!(content(&v), ["a", "b"]);
        assert_eq!(v.token(0), Some("<pad>"));
        assert_eq!(v.id("a"), Some(5));
    }

    #[test]
    fn truncation_keeps_most_frequent() {
        let v = build_vocab("x y y z z z", 2).unwrap();
        assert_eq!(content(&v), ["z", "y"]);
    }

    #[test]
    fn ties_are_lexicographic() {
        let v = build_vocab("q c m c q m", 10).unwrap();
        assert_eq!(content(&v), ["c", "m", "q"]);
    }

    #[test]
    fn id_token_round_trip() {
        let v = build_vocab("hello world hello", 10).unwrap();
        for id in 0..v.len() as TokenId {
            assert_eq!(v.id(v.token(id).unwrap()), Some(id));
        }
        assert_eq!(v.encode(&["nope"]), vec![UNK]);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let v = build_vocab("b a c a", 10).unwrap();
        v.save(&path).unwrap();
        assert_eq!(Vocab::load(&path).unwrap(), v);
    }

    #[test]
    fn empty_corpus_rejected() {
        assert!(build_vocab("  \n ", 5).is_err());
    }
}
