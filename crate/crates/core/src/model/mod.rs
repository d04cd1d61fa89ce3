//! Model-agnostic access to a contextualized masked language model.
//!
//! Every other module talks to a model through [`MaskedLanguageModel`]:
//! final-layer token vectors and masked-position vocabulary distributions.
//! Training-time capabilities (cloning, gradient access, classification
//! heads) live on the concrete [`ContextualEncoder`].

mod classifier;
mod encoder;
pub(crate) mod registry;
mod stub;
mod vocab;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use classifier::{ClassifierConfig, SequenceClassifier, TextClassifier};
pub use encoder::{Adam, ContextualEncoder, EncoderConfig, ForwardCache, MlmConfig};
pub use registry::ModelRegistry;
pub use stub::TableStub;
pub use vocab::{Vocabulary, MASK_TOKEN, UNK_TOKEN};

/// Contextualized masked language model, inference side.
pub trait MaskedLanguageModel: Send + Sync {
    fn identifier(&self) -> &str;
    fn hidden_size(&self) -> usize;
    fn max_sequence_length(&self) -> usize;
    fn vocabulary(&self) -> &Arc<Vocabulary>;
    /// Final-layer vector for every token of `ids`.
    fn encode(&self, ids: &[usize]) -> Vec<Vec<f64>>;
    /// Unnormalized scores over the vocabulary at position `pos` of `ids`.
    fn mask_logits(&self, ids: &[usize], pos: usize) -> Vec<f64>;
}

/// One occurrence of a word in a sentence, embedded by the final layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextualEmbedding {
    pub vector: Vec<f32>,
    pub word: String,
    pub sentence_id: u64,
    pub position: usize,
}

/// Normalized distribution over a model's full vocabulary.
#[derive(Debug, Clone)]
pub struct VocabDistribution {
    vocab: Arc<Vocabulary>,
    probabilities: Vec<f64>,
}

impl VocabDistribution {
    pub fn from_logits(vocab: Arc<Vocabulary>, logits: &[f64]) -> Self {
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        Self {
            vocab,
            probabilities: exps.into_iter().map(|e| e / total).collect(),
        }
    }

    /// Probability of `token`, or `None` if it is not a vocabulary entry.
    pub fn get(&self, token: &str) -> Option<f64> {
        self.vocab.id(token).map(|id| self.probabilities[id])
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probabilities
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }
}

/// Tokenizes `text` for `model`, truncating to its maximum length.
pub fn tokenize_for(model: &dyn MaskedLanguageModel, text: &str) -> Vec<(String, usize)> {
    let mut pieces = model.vocabulary().tokenize(text);
    let max = model.max_sequence_length();
    if pieces.len() > max {
        log::warn!("sequence of {} tokens truncated to {max}", pieces.len());
        pieces.truncate(max);
    }
    pieces
}

/// One embedding per occurrence of `target` in `sentence`.
pub fn embed_occurrences(
    model: &dyn MaskedLanguageModel,
    sentence: &str,
    target: &str,
    sentence_id: u64,
) -> Result<Vec<ContextualEmbedding>> {
    let target = target.to_lowercase();
    if model.vocabulary().id(&target).is_none() {
        return Err(Error::MultiPiece(target));
    }
    let pieces = tokenize_for(model, sentence);
    let positions: Vec<usize> = pieces
        .iter()
        .enumerate()
        .filter(|(_, (t, _))| *t == target)
        .map(|(i, _)| i)
        .collect();
    if positions.is_empty() {
        return Ok(Vec::new());
    }
    let ids: Vec<usize> = pieces.iter().map(|(_, id)| *id).collect();
    let hidden = model.encode(&ids);
    Ok(positions
        .into_iter()
        .map(|p| ContextualEmbedding {
            vector: hidden[p].iter().map(|&v| v as f32).collect(),
            word: target.clone(),
            sentence_id,
            position: p,
        })
        .collect())
}

/// Distribution at the single mask slot of `template`.
pub fn masked_distribution(model: &dyn MaskedLanguageModel, template: &str) -> Result<VocabDistribution> {
    let pieces = tokenize_for(model, template);
    let masks: Vec<usize> = mask_positions(&pieces);
    if masks.len() != 1 {
        return Err(Error::Template(format!(
            "expected exactly one {MASK_TOKEN} slot, found {} in `{template}`",
            masks.len()
        )));
    }
    let ids: Vec<usize> = pieces.iter().map(|(_, id)| *id).collect();
    Ok(VocabDistribution::from_logits(
        model.vocabulary().clone(),
        &model.mask_logits(&ids, masks[0]),
    ))
}

/// Distribution at the `which`-th mask slot of a template that may hold
/// several masks. Used for prior probabilities.
pub fn masked_distribution_at(
    model: &dyn MaskedLanguageModel,
    template: &str,
    which: usize,
) -> Result<VocabDistribution> {
    let pieces = tokenize_for(model, template);
    let masks = mask_positions(&pieces);
    let pos = *masks.get(which).ok_or_else(|| {
        Error::Template(format!("mask slot {which} requested, `{template}` has {}", masks.len()))
    })?;
    let ids: Vec<usize> = pieces.iter().map(|(_, id)| *id).collect();
    Ok(VocabDistribution::from_logits(
        model.vocabulary().clone(),
        &model.mask_logits(&ids, pos),
    ))
}

fn mask_positions(pieces: &[(String, usize)]) -> Vec<usize> {
    pieces
        .iter()
        .enumerate()
        .filter(|(_, (t, _))| t == MASK_TOKEN)
        .map(|(i, _)| i)
        .collect()
}

/// Independent trainable copy of `model`.
pub fn clone_for_training(model: &ContextualEncoder) -> ContextualEncoder {
    model.clone()
}

/// Mean of a set of vectors.
pub(crate) fn mean_vector(vectors: &[Vec<f64>]) -> Vec<f64> {
    let d = vectors.first().map_or(0, Vec::len);
    let mut out = vec![0.0; d];
    for v in vectors {
        for (o, x) in out.iter_mut().zip(v) {
            *o += x;
        }
    }
    let n = vectors.len().max(1) as f64;
    out.iter_mut().for_each(|o| *o /= n);
    out
}
