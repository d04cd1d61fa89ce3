//! Sentence harvesting and per-word embedding banks.
//!
//! A corpus is one sentence per line. Banks persist as a JSON index next to
//! a flat little-endian `f32` array; both record the corpus content hash.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{embed_occurrences, ContextualEmbedding, MaskedLanguageModel};
use crate::text::{content_hash, substream_seed, words_lower};

pub const DEFAULT_CAP: usize = 1000;
pub const LOW_COVERAGE: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentenceOccurrence {
    pub sentence: String,
    pub word: String,
    pub sentence_id: u64,
}

/// Matching-sentence counts per requested word, before capping.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub matches: BTreeMap<String, usize>,
    pub missing: Vec<String>,
    pub low_coverage: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Harvest {
    /// Ordered by `(word, sentence_id)`.
    pub occurrences: Vec<SentenceOccurrence>,
    pub coverage: CoverageReport,
}

/// Reads a line-oriented corpus, dropping blank lines.
pub fn read_corpus(path: impl AsRef<Path>) -> Result<Vec<String>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().filter(|l| !l.trim().is_empty()).map(str::to_string).collect())
}

/// Content hash of a corpus as a sequence of lines.
pub fn corpus_hash<S: AsRef<str>>(lines: &[S]) -> String {
    let mut joined = String::new();
    for l in lines {
        joined.push_str(l.as_ref());
        joined.push('\n');
    }
    content_hash(joined.as_bytes())
}

/// Samples up to `cap` sentences per word. Sentences holding any token of
/// `exclusion` are skipped entirely; matching is case-insensitive on word
/// boundaries.
pub fn harvest_sentences<S: AsRef<str>>(
    corpus: &[S],
    words: &BTreeSet<String>,
    exclusion: &BTreeSet<String>,
    cap: usize,
    seed: u64,
) -> Result<Harvest> {
    if cap == 0 {
        return Err(Error::Config("occurrence cap must be at least 1".into()));
    }
    let words: BTreeSet<String> = words.iter().map(|w| w.to_lowercase()).collect();
    let exclusion: BTreeSet<String> = exclusion.iter().map(|w| w.to_lowercase()).collect();
    let mut hits: BTreeMap<&str, Vec<usize>> = words.iter().map(|w| (w.as_str(), Vec::new())).collect();
    for (i, line) in corpus.iter().enumerate() {
        let tokens: BTreeSet<String> = words_lower(line.as_ref()).into_iter().collect();
        if tokens.iter().any(|t| exclusion.contains(t)) {
            continue;
        }
        for t in &tokens {
            if let Some(list) = hits.get_mut(t.as_str()) {
                list.push(i);
            }
        }
    }

    let mut coverage = CoverageReport::default();
    let mut occurrences = Vec::new();
    for (word, ids) in hits {
        coverage.matches.insert(word.to_string(), ids.len());
        if ids.is_empty() {
            coverage.missing.push(word.to_string());
            continue;
        }
        if ids.len() < LOW_COVERAGE {
            coverage.low_coverage.push(word.to_string());
        }
        let mut chosen: Vec<usize> = if ids.len() > cap {
            let mut rng = ChaCha8Rng::seed_from_u64(substream_seed(seed, word));
            rand::seq::index::sample(&mut rng, ids.len(), cap).into_iter().map(|k| ids[k]).collect()
        } else {
            ids
        };
        chosen.sort_unstable();
        occurrences.extend(chosen.into_iter().map(|i| SentenceOccurrence {
            sentence: corpus[i].as_ref().to_string(),
            word: word.to_string(),
            sentence_id: i as u64,
        }));
    }
    if !coverage.missing.is_empty() {
        log::warn!("no sentences found for: {}", coverage.missing.join(", "));
    }
    Ok(Harvest { occurrences, coverage })
}

/// Fails if any harvested sentence contains an excluded token.
pub fn check_exclusion(occurrences: &[SentenceOccurrence], exclusion: &BTreeSet<String>) -> Result<()> {
    for occ in occurrences {
        if let Some(t) = words_lower(&occ.sentence).into_iter().find(|t| exclusion.contains(t)) {
            return Err(Error::Validation(format!(
                "sentence {} for `{}` contains excluded term `{t}`",
                occ.sentence_id, occ.word
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BankMetadata {
    pub corpus_hash: String,
    pub cap: usize,
    pub seed: u64,
}

/// Contextual embeddings grouped by word.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingBank {
    model_id: String,
    hidden_size: usize,
    metadata: BankMetadata,
    entries: BTreeMap<String, Vec<ContextualEmbedding>>,
}

impl EmbeddingBank {
    pub fn new(model_id: impl Into<String>, hidden_size: usize, metadata: BankMetadata) -> Self {
        Self {
            model_id: model_id.into(),
            hidden_size,
            metadata,
            entries: BTreeMap::new(),
        }
    }

    pub fn model_id(&self) -> &str {
        &self.model_id
    }

    pub fn hidden_size(&self) -> usize {
        self.hidden_size
    }

    pub fn metadata(&self) -> &BankMetadata {
        &self.metadata
    }

    pub fn insert(&mut self, embedding: ContextualEmbedding) -> Result<()> {
        if embedding.vector.len() != self.hidden_size {
            return Err(Error::Dimension {
                expected: self.hidden_size,
                got: embedding.vector.len(),
            });
        }
        self.entries.entry(embedding.word.clone()).or_default().push(embedding);
        Ok(())
    }

    /// Adds a bare vector for `word`.
    pub fn push_vector(&mut self, word: &str, vector: Vec<f32>) -> Result<()> {
        let sentence_id = self.entries.get(word).map_or(0, |v| v.len() as u64);
        self.insert(ContextualEmbedding {
            vector,
            word: word.to_string(),
            sentence_id,
            position: 0,
        })
    }

    pub fn get(&self, word: &str) -> Option<&[ContextualEmbedding]> {
        self.entries.get(word).map(Vec::as_slice)
    }

    pub fn contains(&self, word: &str) -> bool {
        self.entries.get(word).is_some_and(|v| !v.is_empty())
    }

    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn entries(&self) -> &BTreeMap<String, Vec<ContextualEmbedding>> {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut BTreeMap<String, Vec<ContextualEmbedding>> {
        &mut self.entries
    }

    pub fn vector_count(&self) -> usize {
        self.entries.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.vector_count() == 0
    }

    /// Words of `required` that have no vectors.
    pub fn missing<'a>(&self, required: impl IntoIterator<Item = &'a String>) -> Vec<String> {
        required.into_iter().filter(|w| !self.contains(w)).cloned().collect()
    }

    /// Mean of a word's occurrence vectors.
    pub fn word_mean(&self, word: &str) -> Option<Vec<f64>> {
        let list = self.entries.get(word).filter(|l| !l.is_empty())?;
        let mut mean = vec![0.0; self.hidden_size];
        for e in list {
            mean.iter_mut().zip(&e.vector).for_each(|(m, &v)| *m += f64::from(v));
        }
        mean.iter_mut().for_each(|m| *m /= list.len() as f64);
        Some(mean)
    }

    /// Restriction to `words`.
    pub fn subset(&self, words: &BTreeSet<String>) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .filter(|(w, _)| words.contains(*w))
                .map(|(w, v)| (w.clone(), v.clone()))
                .collect(),
            ..self.without_entries()
        }
    }

    fn without_entries(&self) -> Self {
        Self::new(self.model_id.clone(), self.hidden_size, self.metadata.clone())
    }

    /// Applies `f` to every vector.
    pub fn map_vectors(&self, mut f: impl FnMut(&mut [f64])) -> Self {
        let mut out = self.clone();
        for e in out.entries.values_mut().flatten() {
            let mut v: Vec<f64> = e.vector.iter().map(|&x| f64::from(x)).collect();
            f(&mut v);
            e.vector = v.into_iter().map(|x| x as f32).collect();
        }
        out
    }

    /// Union of two banks built with the same model.
    pub fn merge(mut self, other: EmbeddingBank) -> Result<Self> {
        if other.hidden_size != self.hidden_size {
            return Err(Error::Dimension {
                expected: self.hidden_size,
                got: other.hidden_size,
            });
        }
        for (w, list) in other.entries {
            self.entries.entry(w).or_default().extend(list);
        }
        Ok(self)
    }
}

/// Embeds every occurrence with `model`. Words that are not single
/// vocabulary pieces are dropped with a warning.
pub fn build_embedding_bank(
    model: &dyn MaskedLanguageModel,
    occurrences: &[SentenceOccurrence],
    metadata: BankMetadata,
) -> Result<EmbeddingBank> {
    let mut bank = EmbeddingBank::new(model.identifier(), model.hidden_size(), metadata);
    if occurrences.is_empty() {
        log::warn!("no occurrences to embed; bank is empty");
        return Ok(bank);
    }
    let mut dropped = BTreeSet::new();
    for occ in occurrences {
        if dropped.contains(&occ.word) {
            continue;
        }
        match embed_occurrences(model, &occ.sentence, &occ.word, occ.sentence_id) {
            Ok(list) => {
                for e in list {
                    bank.insert(e)?;
                }
            }
            Err(Error::MultiPiece(w)) => {
                log::warn!("`{w}` is not a single vocabulary piece; dropped from the bank");
                dropped.insert(occ.word.clone());
            }
            Err(e) => return Err(e),
        }
    }
    Ok(bank)
}

const ARRAY_MAGIC: &[u8; 8] = b"BPF32LE\0";

/// Writes a flat little-endian `f32` array preceded by a fixed header:
/// magic, 64 ASCII bytes of content hash, and the element count.
pub fn write_f32_array(path: impl AsRef<Path>, hash: &str, values: &[f32]) -> Result<()> {
    let path = path.as_ref();
    let mut bytes = Vec::with_capacity(80 + values.len() * 4);
    bytes.extend_from_slice(ARRAY_MAGIC);
    let mut h = [b' '; 64];
    let hb = hash.as_bytes();
    h[..hb.len().min(64)].copy_from_slice(&hb[..hb.len().min(64)]);
    bytes.extend_from_slice(&h);
    bytes.extend_from_slice(&(values.len() as u64).to_le_bytes());
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    write_atomic(path, &bytes)
}

/// Reads an array written by [`write_f32_array`]; returns the hash and values.
pub fn read_f32_array(path: impl AsRef<Path>) -> Result<(String, Vec<f32>)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 80 || &bytes[..8] != ARRAY_MAGIC {
        return Err(Error::Format(format!("{} is not a float array file", path.display())));
    }
    let hash = String::from_utf8_lossy(&bytes[8..72]).trim_end().to_string();
    let n = u64::from_le_bytes(bytes[72..80].try_into().expect("8 bytes")) as usize;
    let body = &bytes[80..];
    if body.len() != n * 4 {
        return Err(Error::Format(format!(
            "{}: header declares {n} floats, body holds {} bytes",
            path.display(),
            body.len()
        )));
    }
    let values = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok((hash, values))
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    static COUNTER: std::sync::atomic::AtomicU64 = std::sync::atomic::AtomicU64::new(0);
    let n = COUNTER.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
    let tmp = path.with_extension(format!(
        "{}.{}-{n}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or(""),
        std::process::id()
    ));
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Serialize, Deserialize)]
struct BankIndex {
    format: String,
    model_id: String,
    hidden_size: usize,
    metadata: BankMetadata,
    array_file: String,
    words: BTreeMap<String, Vec<IndexEntry>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexEntry {
    sentence_id: u64,
    position: usize,
    offset: usize,
}

/// Paths of the index and array files for a bank stored at `stem`.
pub fn bank_paths(stem: impl AsRef<Path>) -> (PathBuf, PathBuf) {
    let stem = stem.as_ref();
    let name = stem.file_name().and_then(|n| n.to_str()).unwrap_or("bank");
    (
        stem.with_file_name(format!("{name}.index.json")),
        stem.with_file_name(format!("{name}.f32")),
    )
}

/// Writes `<stem>.index.json` and `<stem>.f32`.
pub fn save_bank(bank: &EmbeddingBank, stem: impl AsRef<Path>) -> Result<()> {
    let (index_path, array_path) = bank_paths(stem);
    let mut values = Vec::with_capacity(bank.vector_count() * bank.hidden_size);
    let mut words = BTreeMap::new();
    for (w, list) in &bank.entries {
        let entries = list
            .iter()
            .map(|e| {
                let offset = values.len();
                values.extend_from_slice(&e.vector);
                IndexEntry {
                    sentence_id: e.sentence_id,
                    position: e.position,
                    offset,
                }
            })
            .collect();
        words.insert(w.clone(), entries);
    }
    write_f32_array(&array_path, &bank.metadata.corpus_hash, &values)?;
    let index = BankIndex {
        format: "biasprobe-bank-1".into(),
        model_id: bank.model_id.clone(),
        hidden_size: bank.hidden_size,
        metadata: bank.metadata.clone(),
        array_file: array_path.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string(),
        words,
    };
    let json = serde_json::to_vec_pretty(&index).map_err(|e| Error::Format(e.to_string()))?;
    write_atomic(&index_path, &json)
}

/// Reads a bank written by [`save_bank`].
pub fn load_bank(stem: impl AsRef<Path>) -> Result<EmbeddingBank> {
    let (index_path, _) = bank_paths(&stem);
    let text = fs::read_to_string(&index_path).map_err(|e| Error::io(&index_path, e))?;
    let index: BankIndex =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", index_path.display())))?;
    let array_path = index_path.with_file_name(&index.array_file);
    let (hash, values) = read_f32_array(&array_path)?;
    if hash != index.metadata.corpus_hash {
        return Err(Error::Format(format!(
            "corpus hash mismatch between {} and {}",
            index_path.display(),
            array_path.display()
        )));
    }
    let d = index.hidden_size;
    let mut bank = EmbeddingBank::new(index.model_id, d, index.metadata);
    for (word, entries) in index.words {
        for e in entries {
            let vector = values
                .get(e.offset..e.offset + d)
                .ok_or_else(|| Error::Format(format!("offset {} out of range for `{word}`", e.offset)))?
                .to_vec();
            bank.insert(ContextualEmbedding {
                vector,
                word: word.clone(),
                sentence_id: e.sentence_id,
                position: e.position,
            })?;
        }
    }
    Ok(bank)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ContextualEncoder, Vocabulary};
    use proptest::prelude::*;
    use std::sync::Arc;

    fn set(words: &[&str]) -> BTreeSet<String> {
        words.iter().map(|w| w.to_string()).collect()
    }

    #[test]
    fn exclusion_skips_whole_sentence() {
        let corpus = ["the nurse smiled", "she is a nurse"];
        let h = harvest_sentences(&corpus, &set(&["nurse"]), &set(&["she", "he"]), 10, 0).unwrap();
        assert_eq!(h.occurrences.len(), 1);
        assert_eq!(h.occurrences[0].sentence, "the nurse smiled");
        check_exclusion(&h.occurrences, &set(&["she", "he"])).unwrap();
    }

    #[test]
    fn cap_and_determinism() {
        let corpus: Vec<String> = (0..500).map(|i| format!("engineer number {i} arrived")).collect();
        let a = harvest_sentences(&corpus, &set(&["engineer"]), &BTreeSet::new(), 100, 9).unwrap();
        let b = harvest_sentences(&corpus, &set(&["engineer"]), &BTreeSet::new(), 100, 9).unwrap();
        assert_eq!(a.occurrences.len(), 100);
        assert_eq!(a, b);
        let c = harvest_sentences(&corpus, &set(&["engineer"]), &BTreeSet::new(), 100, 10).unwrap();
        assert_ne!(a.occurrences, c.occurrences);
    }

    #[test]
    fn matching_is_case_insensitive_on_word_boundaries() {
        let corpus = ["The Nurse smiled.", "nurses are here", "a NURSE!"];
        let h = harvest_sentences(&corpus, &set(&["nurse"]), &BTreeSet::new(), 10, 0).unwrap();
        assert_eq!(h.occurrences.iter().map(|o| o.sentence_id).collect::<Vec<_>>(), vec![0, 2]);
    }

    #[test]
    fn coverage_report() {
        let corpus = ["the nurse smiled"];
        let h = harvest_sentences(&corpus, &set(&["nurse", "pilot"]), &BTreeSet::new(), 10, 0).unwrap();
        assert_eq!(h.coverage.missing, vec!["pilot"]);
        assert_eq!(h.coverage.low_coverage, vec!["nurse"]);
    }

    fn stub() -> ContextualEncoder {
        let vocab = Vocabulary::from_words(["she", "said", "left", "the", "nurse", "smiled", "is", "a"]);
        ContextualEncoder::stub("stub", Arc::new(vocab), 8, 1)
    }

    #[test]
    fn bank_counts_every_occurrence() {
        let occ = vec![
            SentenceOccurrence { sentence: "the nurse smiled".into(), word: "nurse".into(), sentence_id: 0 },
            SentenceOccurrence { sentence: "a nurse is a nurse".into(), word: "nurse".into(), sentence_id: 1 },
            SentenceOccurrence { sentence: "she said she left".into(), word: "she".into(), sentence_id: 2 },
            SentenceOccurrence { sentence: "the surgeon left".into(), word: "surgeon".into(), sentence_id: 3 },
        ];
        let bank = build_embedding_bank(&stub(), &occ, BankMetadata::default()).unwrap();
        assert_eq!(bank.get("nurse").unwrap().len(), 3);
        assert_eq!(bank.get("she").unwrap().len(), 2);
        assert!(!bank.contains("surgeon"));
        assert!(bank.entries().values().flatten().all(|e| e.vector.len() == 8));
        assert!(build_embedding_bank(&stub(), &[], BankMetadata::default()).unwrap().is_empty());
    }

    #[test]
    fn array_file_rejects_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.f32");
        write_f32_array(&p, "abc", &[1.0, 2.0]).unwrap();
        assert_eq!(read_f32_array(&p).unwrap(), ("abc".to_string(), vec![1.0, 2.0]));
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 2]).unwrap();
        assert!(matches!(read_f32_array(&p), Err(Error::Format(_))));
    }

    proptest! {
        #[test]
        fn bank_round_trips(
            words in prop::collection::btree_map("[a-z]{1,6}", prop::collection::vec(prop::collection::vec(any::<f32>().prop_filter("finite", |x| x.is_finite()), 3), 1..4), 0..5),
            hash in "[0-9a-f]{64}",
            seed in any::<u64>(),
        ) {
            let mut bank = EmbeddingBank::new("m", 3, BankMetadata { corpus_hash: hash, cap: 7, seed });
            for (w, vs) in &words {
                for v in vs {
                    bank.push_vector(w, v.clone()).unwrap();
                }
            }
            let dir = tempfile::tempdir().unwrap();
            let stem = dir.path().join("bank");
            save_bank(&bank, &stem).unwrap();
            let back = load_bank(&stem).unwrap();
            prop_assert_eq!(&back, &bank);
            save_bank(&back, &stem).unwrap();
            prop_assert_eq!(load_bank(&stem).unwrap(), bank);
        }
    }
}
