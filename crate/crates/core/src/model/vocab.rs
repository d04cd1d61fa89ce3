use std::collections::HashMap;

use serde::{Deserialize, Serialize};

pub const UNK_TOKEN: &str = "[UNK]";
pub const MASK_TOKEN: &str = "[MASK]";

/// Word-level vocabulary. A word is a single piece iff it has an entry;
/// anything else maps to `[UNK]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocabulary {
    fn from(tokens: Vec<String>) -> Self {
        Self::new(tokens)
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

impl Vocabulary {
    /// Vocabulary over exactly `tokens`. Special tokens that are missing are
    /// appended.
    pub fn new(mut tokens: Vec<String>) -> Self {
        for special in [UNK_TOKEN, MASK_TOKEN] {
            if !tokens.iter().any(|t| t == special) {
                tokens.push(special.to_string());
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        let mut unique = Vec::with_capacity(tokens.len());
        for t in tokens {
            if !index.contains_key(&t) {
                index.insert(t.clone(), unique.len());
                unique.push(t);
            }
        }
        Self { tokens: unique, index }
    }

    /// Specials first, then the given words (lowercased, deduplicated).
    pub fn from_words<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut tokens = vec![UNK_TOKEN.to_string(), MASK_TOKEN.to_string()];
        tokens.extend(words.into_iter().map(|w| w.as_ref().to_lowercase()));
        Self::new(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn unk_id(&self) -> usize {
        self.index[UNK_TOKEN]
    }

    pub fn mask_id(&self) -> usize {
        self.index[MASK_TOKEN]
    }

    /// Lowercased words and single punctuation marks, with literal
    /// `[MASK]` kept as the mask token.
    pub fn tokenize(&self, text: &str) -> Vec<(String, usize)> {
        let mut out = Vec::new();
        for (i, chunk) in text.split(MASK_TOKEN).enumerate() {
            if i > 0 {
                out.push((MASK_TOKEN.to_string(), self.mask_id()));
            }
            let mut word = String::new();
            let flush = |word: &mut String, out: &mut Vec<(String, usize)>| {
                if !word.is_empty() {
                    let w = std::mem::take(word).to_lowercase();
                    let id = self.id(&w).unwrap_or_else(|| self.unk_id());
                    out.push((w, id));
                }
            };
            for c in chunk.chars() {
                if c.is_alphanumeric() {
                    word.push(c);
                } else {
                    flush(&mut word, &mut out);
                    if !c.is_whitespace() {
                        let p = c.to_string();
                        let id = self.id(&p).unwrap_or_else(|| self.unk_id());
                        out.push((p, id));
                    }
                }
            }
            flush(&mut word, &mut out);
        }
        out
    }
}
