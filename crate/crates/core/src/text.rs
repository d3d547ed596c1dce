//! Tokenizer and vocabulary.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

/// Token every URL collapses to.
pub const URL_TOKEN: &str = "<url>";
/// Out-of-vocabulary token, always at index 0.
pub const UNK_TOKEN: &str = "<unk>";
/// Bumped whenever [`tokenize`] changes behavior.
pub const TOKENIZER_VERSION: u32 = 1;

fn is_url(word: &str) -> bool {
    let w = word.to_ascii_lowercase();
    w.starts_with("http://") || w.starts_with("https://") || w.starts_with("www.")
}

/// Lowercases, maps URLs to [`URL_TOKEN`] and splits on whitespace and
/// punctuation.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        if word == URL_TOKEN || is_url(word) {
            out.push(URL_TOKEN.to_string());
            continue;
        }
        let mut current = String::new();
        for ch in word.chars() {
            if ch.is_alphanumeric() {
                current.extend(ch.to_lowercase());
            } else if !current.is_empty() {
                out.push(std::mem::take(&mut current));
            }
        }
        if !current.is_empty() {
            out.push(current);
        }
    }
    out
}

/// Bidirectional token/index map with `<unk>` at index 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocabulary {
    fn from(tokens: Vec<String>) -> Self {
        let mut v = Vocabulary {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        v.insert(UNK_TOKEN);
        for t in tokens {
            v.insert(&t);
        }
        v
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

impl Vocabulary {
    /// Collects tokens in first-seen order.
    pub fn build<'a, I, D>(docs: I) -> Self
    where
        I: IntoIterator<Item = D>,
        D: IntoIterator<Item = &'a String>,
    {
        let mut v = Vocabulary::from(Vec::new());
        for doc in docs {
            for t in doc {
                v.insert(t);
            }
        }
        v
    }

    fn insert(&mut self, token: &str) -> usize {
        if let Some(&i) = self.index.get(token) {
            return i;
        }
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), self.tokens.len() - 1);
        self.tokens.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(0)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}
