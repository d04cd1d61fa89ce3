//! Word-boundary scanning shared by the lexicon, corpus harvesting and the
//! downstream interventions.
//!
//! A *word* is a maximal run of alphanumeric characters. Everything else is
//! either whitespace or punctuation, so `"mother's"` yields the words
//! `mother` and `s`.

/// Byte ranges of every word in `text`.
pub fn word_spans(text: &str) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let mut start = None;
    for (i, c) in text.char_indices() {
        if c.is_alphanumeric() {
            if start.is_none() {
                start = Some(i);
            }
        } else if let Some(s) = start.take() {
            spans.push((s, i));
        }
    }
    if let Some(s) = start {
        spans.push((s, text.len()));
    }
    spans
}

/// Lowercased words of `text`, in order.
pub fn words_lower(text: &str) -> Vec<String> {
    word_spans(text)
        .into_iter()
        .map(|(s, e)| text[s..e].to_lowercase())
        .collect()
}

/// Capitalization pattern of a source token, reapplied to its replacement.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CasePattern {
    Lower,
    Capitalized,
    Upper,
}

impl CasePattern {
    pub fn of(token: &str) -> Self {
        let mut letters = token.chars().filter(|c| c.is_alphabetic());
        let Some(first) = letters.next() else {
            return CasePattern::Lower;
        };
        let rest: Vec<char> = letters.collect();
        if first.is_uppercase() {
            if !rest.is_empty() && rest.iter().all(|c| c.is_uppercase()) {
                CasePattern::Upper
            } else {
                CasePattern::Capitalized
            }
        } else {
            CasePattern::Lower
        }
    }

    pub fn apply(self, word: &str) -> String {
        match self {
            CasePattern::Lower => word.to_lowercase(),
            CasePattern::Upper => word.to_uppercase(),
            CasePattern::Capitalized => {
                let lower = word.to_lowercase();
                let mut chars = lower.chars();
                match chars.next() {
                    Some(c) => c.to_uppercase().chain(chars).collect(),
                    None => String::new(),
                }
            }
        }
    }
}

/// Rewrites every word of `text` through `f`. Words for which `f` returns
/// `None` are kept verbatim; `Some("")` deletes the word.
pub fn rewrite_words<F>(text: &str, mut f: F) -> String
where
    F: FnMut(&str) -> Option<String>,
{
    let mut out = String::with_capacity(text.len());
    let mut last = 0;
    for (s, e) in word_spans(text) {
        out.push_str(&text[last..s]);
        match f(&text[s..e]) {
            Some(replacement) => out.push_str(&replacement),
            None => out.push_str(&text[s..e]),
        }
        last = e;
    }
    out.push_str(&text[last..]);
    out
}

/// Collapses whitespace runs to one space and trims the ends.
pub fn normalize_whitespace(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// 64-bit FNV-1a, used to derive named RNG substreams.
pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for b in bytes {
        hash ^= u64::from(*b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Seed for the substream `name` of a root seed.
pub fn substream_seed(root: u64, name: &str) -> u64 {
    fnv1a(name.as_bytes()) ^ root.rotate_left(17) ^ 0x9e37_79b9_7f4a_7c15
}

/// Hex SHA-256 of a byte slice.
pub fn content_hash(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(bytes))
}
