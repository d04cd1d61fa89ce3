use std::collections::HashMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{MaskedLanguageModel, Vocabulary};

/// Deterministic test model: a fixed per-token embedding table and masked
/// distributions read from a lookup table keyed by the token sequence and
/// mask position. Unlisted queries get all-zero logits (uniform).
#[derive(Debug, Clone)]
pub struct TableStub {
    vocab: Arc<Vocabulary>,
    hidden_size: usize,
    embeddings: Vec<Vec<f64>>,
    table: HashMap<(Vec<usize>, usize), Vec<f64>>,
}

impl TableStub {
    pub fn new(vocab: Arc<Vocabulary>, hidden_size: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
        let embeddings = (0..vocab.len())
            .map(|_| (0..hidden_size).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        Self {
            vocab,
            hidden_size,
            embeddings,
            table: HashMap::new(),
        }
    }

    /// Overrides the embedding of `token`.
    pub fn set_embedding(&mut self, token: &str, vector: Vec<f64>) {
        let id = self.vocab.id(token).expect("token in stub vocabulary");
        self.embeddings[id] = vector;
    }

    /// Fixes the distribution at mask slot `which` of `template`. Listed
    /// tokens get the given probabilities; the remaining mass is spread
    /// evenly over every other token.
    pub fn set_distribution(&mut self, template: &str, which: usize, probs: &[(&str, f64)]) {
        let pieces = self.vocab.tokenize(template);
        let ids: Vec<usize> = pieces.iter().map(|p| p.1).collect();
        let pos = ids
            .iter()
            .enumerate()
            .filter(|(_, &id)| id == self.vocab.mask_id())
            .map(|(i, _)| i)
            .nth(which)
            .expect("template has the requested mask slot");
        let listed: f64 = probs.iter().map(|p| p.1).sum();
        let rest = (self.vocab.len() - probs.len()) as f64;
        let fill = ((1.0 - listed) / rest).max(1e-300);
        let mut logits = vec![fill.ln(); self.vocab.len()];
        for (tok, p) in probs {
            let id = self.vocab.id(tok).expect("token in stub vocabulary");
            logits[id] = p.ln();
        }
        self.table.insert((ids, pos), logits);
    }
}

impl MaskedLanguageModel for TableStub {
    fn identifier(&self) -> &str {
        "table-stub"
    }

    fn hidden_size(&self) -> usize {
        self.hidden_size
    }

    fn max_sequence_length(&self) -> usize {
        512
    }

    fn vocabulary(&self) -> &Arc<Vocabulary> {
        &self.vocab
    }

    fn encode(&self, ids: &[usize]) -> Vec<Vec<f64>> {
        ids.iter().map(|&id| self.embeddings[id].clone()).collect()
    }

    fn mask_logits(&self, ids: &[usize], pos: usize) -> Vec<f64> {
        self.table
            .get(&(ids.to_vec(), pos))
            .cloned()
            .unwrap_or_else(|| vec![0.0; self.vocab.len()])
    }
}
