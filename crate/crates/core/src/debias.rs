//! Intrinsic mitigation: projection removal of a gender subspace,
//! orthogonality-constrained retraining, and counterfactual corpora.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::corpus::{read_f32_array, write_atomic, write_f32_array};
use crate::error::{Error, Result};
use crate::lexicon::{counterfactual_text, Lexicon};
use crate::model::{ContextualEncoder, MaskedLanguageModel, MlmConfig};
use crate::text::words_lower;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasSubspace {
    /// `k` orthonormal directions.
    pub basis: Vec<Vec<f64>>,
    pub k: usize,
    /// Sample variance along each direction.
    pub explained_variance: Vec<f64>,
}

/// Top-`k` principal directions of the pooled, per-set centered vectors.
/// Each definition set (typically a sentence and its counterfactual) is
/// centered on its own mean before pooling.
pub fn compute_bias_subspace(definition_sets: &[Vec<Vec<f64>>], k: usize) -> Result<BiasSubspace> {
    if k == 0 {
        return Err(Error::Config("subspace rank k must be positive".into()));
    }
    let d = definition_sets
        .iter()
        .flatten()
        .next()
        .map(Vec::len)
        .ok_or_else(|| Error::InsufficientData("no definition vectors".into()))?;
    let mut rows = Vec::new();
    for set in definition_sets {
        if set.is_empty() {
            continue;
        }
        let mut mu = vec![0.0; d];
        for v in set {
            if v.len() != d {
                return Err(Error::Dimension { expected: d, got: v.len() });
            }
            mu.iter_mut().zip(v).for_each(|(m, x)| *m += x);
        }
        mu.iter_mut().for_each(|m| *m /= set.len() as f64);
        for v in set {
            rows.push(v.iter().zip(&mu).map(|(x, m)| x - m).collect::<Vec<f64>>());
        }
    }
    if rows.len() < k + 1 {
        return Err(Error::Rank {
            requested: k,
            achievable: rows.len().saturating_sub(1),
        });
    }
    let n = rows.len();
    let x = DMatrix::from_fn(n, d, |i, j| rows[i][j]);
    let cov = (x.transpose() * &x) / (n as f64 - 1.0);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let top = eig.eigenvalues[order[0]].max(0.0);
    let achievable = order
        .iter()
        .filter(|&&i| eig.eigenvalues[i] > top * 1e-10 && eig.eigenvalues[i] > 1e-300)
        .count();
    if k > achievable {
        return Err(Error::Rank { requested: k, achievable });
    }
    let basis: Vec<Vec<f64>> = order[..k]
        .iter()
        .map(|&i| {
            let mut v: Vec<f64> = eig.eigenvectors.column(i).iter().copied().collect();
            canonical_sign(&mut v);
            v
        })
        .collect();
    Ok(BiasSubspace {
        explained_variance: order[..k].iter().map(|&i| eig.eigenvalues[i]).collect(),
        basis: orthonormalize(basis),
        k,
    })
}

/// Flips `v` so that its largest-magnitude entry is positive.
fn canonical_sign(v: &mut [f64]) {
    let big = v.iter().copied().fold(0.0, |acc: f64, x| if x.abs() > acc.abs() { x } else { acc });
    if big < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Gram-Schmidt, twice for numerical stability.
fn orthonormalize(mut basis: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    for _ in 0..2 {
        for i in 0..basis.len() {
            for j in 0..i {
                let dot: f64 = basis[i].iter().zip(&basis[j]).map(|(a, b)| a * b).sum();
                let (head, tail) = basis.split_at_mut(i);
                tail[0].iter_mut().zip(&head[j]).for_each(|(a, b)| *a -= dot * b);
            }
            let norm = basis[i].iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm > 0.0 {
                basis[i].iter_mut().for_each(|a| *a /= norm);
            }
        }
    }
    basis
}

/// Removes the subspace component: `h − Σ ⟨h, v_j⟩ v_j`.
pub fn sent_debias(h: &[f64], subspace: &BiasSubspace) -> Vec<f64> {
    let mut out = h.to_vec();
    for v in &subspace.basis {
        let dot: f64 = h.iter().zip(v).map(|(a, b)| a * b).sum();
        out.iter_mut().zip(v).for_each(|(o, b)| *o -= dot * b);
    }
    out
}

/// Optional equalization of an attribute pair: both members lose their
/// shared in-subspace component, so they sit symmetrically about the
/// subspace's orthogonal complement.
pub fn equalize_pair(a: &[f64], b: &[f64], subspace: &BiasSubspace) -> (Vec<f64>, Vec<f64>) {
    let mu: Vec<f64> = a.iter().zip(b).map(|(x, y)| (x + y) / 2.0).collect();
    let nu = sent_debias(&mu, subspace);
    let shared: Vec<f64> = mu.iter().zip(&nu).map(|(m, n)| m - n).collect();
    let shift = |v: &[f64]| v.iter().zip(&shared).map(|(x, s)| x - s).collect();
    (shift(a), shift(b))
}

impl BiasSubspace {
    /// Writes `<stem>.subspace.json` and `<stem>.f32`.
    pub fn save(&self, stem: impl AsRef<Path>) -> Result<()> {
        let stem = stem.as_ref();
        let name = stem.file_name().and_then(|n| n.to_str()).unwrap_or("subspace");
        let flat: Vec<f32> = self.basis.iter().flatten().map(|&x| x as f32).collect();
        let meta = SubspaceMetadata {
            k: self.k,
            hidden_size: self.basis.first().map_or(0, Vec::len),
            explained_variance: self.explained_variance.clone(),
        };
        let json = serde_json::to_vec_pretty(&meta).map_err(|e| Error::Format(e.to_string()))?;
        write_f32_array(stem.with_file_name(format!("{name}.f32")), "", &flat)?;
        write_atomic(&stem.with_file_name(format!("{name}.subspace.json")), &json)
    }

    /// Reads a saved subspace and re-orthonormalizes the `f32` basis.
    pub fn load(stem: impl AsRef<Path>) -> Result<Self> {
        let stem = stem.as_ref();
        let name = stem.file_name().and_then(|n| n.to_str()).unwrap_or("subspace");
        let meta_path = stem.with_file_name(format!("{name}.subspace.json"));
        let text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: SubspaceMetadata = serde_json::from_str(&text).map_err(|e| Error::Format(e.to_string()))?;
        let (_, flat) = read_f32_array(stem.with_file_name(format!("{name}.f32")))?;
        if flat.len() != meta.k * meta.hidden_size {
            return Err(Error::Format("subspace array does not match its metadata".into()));
        }
        let basis = flat
            .chunks(meta.hidden_size.max(1))
            .map(|c| c.iter().map(|&x| f64::from(x)).collect())
            .collect();
        Ok(Self {
            basis: orthonormalize(basis),
            k: meta.k,
            explained_variance: meta.explained_variance,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct SubspaceMetadata {
    k: usize,
    hidden_size: usize,
    explained_variance: Vec<f64>,
}

/// Mean-pooled final-layer representation of a sentence.
pub fn sentence_embedding(model: &dyn MaskedLanguageModel, sentence: &str) -> Vec<f64> {
    let ids: Vec<usize> = crate::model::tokenize_for(model, sentence).into_iter().map(|t| t.1).collect();
    crate::model::mean_vector(&model.encode(&ids))
}

/// Definition sets from corpus lines holding swappable attribute terms:
/// each set is the pooled embedding of a line and of its counterfactual.
pub fn definition_sets(
    model: &dyn MaskedLanguageModel,
    lines: &[String],
    lexicon: &Lexicon,
    max_pairs: usize,
) -> Vec<Vec<Vec<f64>>> {
    lines
        .iter()
        .filter_map(|l| counterfactual_text(l, lexicon, false).map(|cf| (l, cf)))
        .take(max_pairs)
        .map(|(l, cf)| vec![sentence_embedding(model, l), sentence_embedding(model, &cf)])
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContextDebiasConfig {
    pub alpha: f64,
    pub beta: f64,
    /// Hidden-state layers (0 = embedding layer) that carry both terms;
    /// `None` means every layer.
    pub layers: Option<Vec<usize>>,
    pub epochs: usize,
    /// Initial step size of the backtracking line search.
    pub learning_rate: f64,
}

impl Default for ContextDebiasConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            layers: None,
            epochs: 30,
            learning_rate: 1e-3,
        }
    }
}

impl ContextDebiasConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 || self.beta < 0.0 || self.alpha + self.beta <= 0.0 {
            return Err(Error::Config(format!(
                "context-debias needs alpha, beta >= 0 with alpha + beta > 0 (got {}, {})",
                self.alpha, self.beta
            )));
        }
        Ok(())
    }

    fn layer_set(&self, available: usize) -> Vec<usize> {
        match &self.layers {
            Some(l) => l.iter().copied().filter(|&i| i < available).collect(),
            None => (0..available).collect(),
        }
    }
}

/// `α L_i + β L_reg`.
///
/// * `stereotype_embeddings[o][l]`: layer-`l` vector of stereotype occurrence `o`.
/// * `attribute_vectors[l]`: fixed attribute vectors at layer `l`.
/// * `attribute_token_embeddings[t][l]` / `original_embeddings[t][l]`: current
///   and frozen vectors of every token of the attribute sentences.
pub fn context_debias_loss(
    stereotype_embeddings: &[Vec<Vec<f64>>],
    attribute_vectors: &[Vec<Vec<f64>>],
    attribute_token_embeddings: &[Vec<Vec<f64>>],
    original_embeddings: &[Vec<Vec<f64>>],
    config: &ContextDebiasConfig,
) -> f64 {
    let layers = config.layer_set(attribute_vectors.len());
    let mut l_i = 0.0;
    for occ in stereotype_embeddings {
        for &l in &layers {
            for v in &attribute_vectors[l] {
                let dot: f64 = v.iter().zip(&occ[l]).map(|(a, b)| a * b).sum();
                l_i += dot * dot;
            }
        }
    }
    let mut l_reg = 0.0;
    for (cur, orig) in attribute_token_embeddings.iter().zip(original_embeddings) {
        for &l in &layers {
            l_reg += cur[l].iter().zip(&orig[l]).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        }
    }
    config.alpha * l_i + config.beta * l_reg
}

/// Token ids and stereotype positions of the training sentences, the fixed
/// attribute vectors, and the frozen attribute-sentence embeddings.
#[derive(Debug, Clone)]
pub struct ContextDebiasProblem {
    stereotype_sentences: Vec<(Vec<usize>, Vec<usize>)>,
    attribute_sentences: Vec<Vec<usize>>,
    /// `[layer][attribute]`.
    attribute_vectors: Vec<Vec<Vec<f64>>>,
    /// `[sentence][token][layer]`.
    original: Vec<Vec<Vec<Vec<f64>>>>,
    pub attribute_words: Vec<String>,
}

fn token_layers(hidden: &[Vec<Vec<f64>>], t: usize) -> Vec<Vec<f64>> {
    hidden.iter().map(|layer| layer[t].clone()).collect()
}

impl ContextDebiasProblem {
    pub fn new(
        model: &ContextualEncoder,
        lexicon: &Lexicon,
        attribute_sentences: &[String],
        stereotype_sentences: &[String],
    ) -> Result<Self> {
        let vocab = model.vocabulary().clone();
        let ids_of = |s: &str| -> Vec<usize> {
            crate::model::tokenize_for(model, s).into_iter().map(|t| t.1).collect()
        };
        let attributes = lexicon.attribute_terms();
        let stereotypes = lexicon.stereotype_terms();
        let n_layers = model.config().layers + 1;

        let mut sums: BTreeMap<String, (Vec<Vec<f64>>, usize)> = BTreeMap::new();
        let mut attr_ids = Vec::new();
        let mut original = Vec::new();
        for s in attribute_sentences {
            let ids = ids_of(s);
            if ids.is_empty() {
                continue;
            }
            let cache = model.forward(&ids);
            for (t, &id) in ids.iter().enumerate() {
                let w = vocab.token(id);
                if attributes.contains(w) {
                    let entry = sums
                        .entry(w.to_string())
                        .or_insert_with(|| (vec![vec![0.0; model.hidden_size()]; n_layers], 0));
                    for (acc, layer) in entry.0.iter_mut().zip(&cache.hidden) {
                        acc.iter_mut().zip(&layer[t]).for_each(|(a, b)| *a += b);
                    }
                    entry.1 += 1;
                }
            }
            original.push((0..ids.len()).map(|t| token_layers(&cache.hidden, t)).collect());
            attr_ids.push(ids);
        }
        if sums.is_empty() {
            return Err(Error::InsufficientData("no attribute terms found in the attribute sentences".into()));
        }
        let attribute_words: Vec<String> = sums.keys().cloned().collect();
        let attribute_vectors = (0..n_layers)
            .map(|l| {
                sums.values()
                    .map(|(acc, n)| acc[l].iter().map(|x| x / *n as f64).collect())
                    .collect()
            })
            .collect();

        let stereo: Vec<(Vec<usize>, Vec<usize>)> = stereotype_sentences
            .iter()
            .filter_map(|s| {
                let ids = ids_of(s);
                let pos: Vec<usize> = ids
                    .iter()
                    .enumerate()
                    .filter(|(_, &id)| stereotypes.contains(vocab.token(id)))
                    .map(|(i, _)| i)
                    .collect();
                (!pos.is_empty()).then_some((ids, pos))
            })
            .collect();
        if stereo.is_empty() {
            return Err(Error::InsufficientData("no stereotype occurrences in the stereotype sentences".into()));
        }
        Ok(Self {
            stereotype_sentences: stereo,
            attribute_sentences: attr_ids,
            attribute_vectors,
            original,
            attribute_words,
        })
    }

    /// Objective value for the current parameters of `model`.
    pub fn loss(&self, model: &ContextualEncoder, config: &ContextDebiasConfig) -> f64 {
        let mut stereo = Vec::new();
        for (ids, pos) in &self.stereotype_sentences {
            let cache = model.forward(ids);
            stereo.extend(pos.iter().map(|&p| token_layers(&cache.hidden, p)));
        }
        let mut current = Vec::new();
        let mut frozen = Vec::new();
        for (ids, orig) in self.attribute_sentences.iter().zip(&self.original) {
            let cache = model.forward(ids);
            current.extend((0..ids.len()).map(|t| token_layers(&cache.hidden, t)));
            frozen.extend(orig.iter().cloned());
        }
        context_debias_loss(&stereo, &self.attribute_vectors, &current, &frozen, config)
    }

    /// Objective and its gradient with respect to all parameters of `model`
    /// (the masked-LM head entries stay zero).
    pub fn loss_and_grad(&self, model: &ContextualEncoder, config: &ContextDebiasConfig) -> (f64, Vec<f64>) {
        let layers = config.layer_set(self.attribute_vectors.len());
        let mut grad = vec![0.0; model.param_count()];
        let mut loss = 0.0;
        for (ids, pos) in &self.stereotype_sentences {
            let cache = model.forward(ids);
            let mut lg = model.zero_layer_grads(&cache);
            for &p in pos {
                for &l in &layers {
                    let e = &cache.hidden[l][p];
                    for v in &self.attribute_vectors[l] {
                        let dot: f64 = v.iter().zip(e).map(|(a, b)| a * b).sum();
                        loss += config.alpha * dot * dot;
                        lg[l][p].iter_mut().zip(v).for_each(|(g, vk)| *g += 2.0 * config.alpha * dot * vk);
                    }
                }
            }
            model.backward(&cache, &lg, &mut grad);
        }
        for (ids, orig) in self.attribute_sentences.iter().zip(&self.original) {
            let cache = model.forward(ids);
            let mut lg = model.zero_layer_grads(&cache);
            for t in 0..ids.len() {
                for &l in &layers {
                    for k in 0..model.hidden_size() {
                        let diff = cache.hidden[l][t][k] - orig[t][l][k];
                        loss += config.beta * diff * diff;
                        lg[l][t][k] += 2.0 * config.beta * diff;
                    }
                }
            }
            model.backward(&cache, &lg, &mut grad);
        }
        (loss, grad)
    }
}

#[derive(Debug, Clone)]
pub struct ContextDebiasOutcome {
    pub model: ContextualEncoder,
    /// Objective at the start of every epoch, then after the last one.
    pub loss_history: Vec<f64>,
}

/// Retrains a clone of `model`'s encoder on the orthogonality objective
/// with full-batch gradient descent and a backtracking line search, so
/// the recorded loss never increases.
pub fn run_context_debias(
    model: &ContextualEncoder,
    lexicon: &Lexicon,
    attribute_sentences: &[String],
    stereotype_sentences: &[String],
    config: &ContextDebiasConfig,
) -> Result<ContextDebiasOutcome> {
    config.validate()?;
    let problem = ContextDebiasProblem::new(model, lexicon, attribute_sentences, stereotype_sentences)?;
    let mut current = model.clone();
    let n_enc = current.encoder_param_count();
    let mut step = config.learning_rate;
    let mut history = Vec::with_capacity(config.epochs + 1);
    for epoch in 0..config.epochs {
        let (loss, grad) = problem.loss_and_grad(&current, config);
        if !loss.is_finite() {
            return Err(Error::Training {
                epoch,
                reason: "context-debias loss is not finite".into(),
            });
        }
        history.push(loss);
        let g2: f64 = grad[..n_enc].iter().map(|g| g * g).sum();
        if g2 == 0.0 {
            break;
        }
        let mut accepted = false;
        for _ in 0..40 {
            let mut trial = current.clone();
            trial.params_mut()[..n_enc]
                .iter_mut()
                .zip(&grad[..n_enc])
                .for_each(|(p, g)| *p -= step * g);
            let trial_loss = problem.loss(&trial, config);
            if trial_loss.is_finite() && trial_loss <= loss - 1e-4 * step * g2 {
                current = trial;
                step *= 1.5;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            log::info!("context-debias line search stalled after epoch {epoch}");
            break;
        }
    }
    history.push(problem.loss(&current, config));
    Ok(ContextDebiasOutcome {
        model: current,
        loss_history: history,
    })
}

/// Every input line, followed by the swapped counterfactual of each line
/// holding at least one swappable term.
pub fn generate_cda_corpus<S: AsRef<str>>(corpus: &[S], lexicon: &Lexicon, use_names: bool) -> Vec<String> {
    let mut out: Vec<String> = corpus.iter().map(|l| l.as_ref().to_string()).collect();
    out.extend(corpus.iter().filter_map(|l| counterfactual_text(l.as_ref(), lexicon, use_names)));
    out
}

/// Continues masked-LM training of a clone on the counterfactually
/// augmented corpus.
pub fn run_cda_pretraining(
    model: &ContextualEncoder,
    corpus: &[String],
    lexicon: &Lexicon,
    use_names: bool,
    config: &MlmConfig,
) -> Result<ContextualEncoder> {
    let augmented = generate_cda_corpus(corpus, lexicon, use_names);
    let mut m = model.clone();
    m.train_mlm(&augmented, config)?;
    Ok(m)
}

/// Lines that contain at least one term of `words`.
pub fn lines_containing<'a>(lines: &'a [String], words: &std::collections::BTreeSet<String>) -> Vec<&'a String> {
    lines
        .iter()
        .filter(|l| words_lower(l).iter().any(|w| words.contains(w)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{EncoderConfig, Vocabulary};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeSet;
    use std::sync::Arc;

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn single_axis_subspace() {
        let sets: Vec<Vec<Vec<f64>>> = (0..5)
            .map(|i| {
                let base = vec![i as f64, 2.0 * i as f64, -1.0];
                let mut other = base.clone();
                other[0] += 1.0 + i as f64 * 0.1;
                vec![base, other]
            })
            .collect();
        let s = compute_bias_subspace(&sets, 1).unwrap();
        assert!((s.basis[0][0] - 1.0).abs() < 1e-9);
        assert!(s.basis[0][1].abs() < 1e-9 && s.basis[0][2].abs() < 1e-9);
        assert!(matches!(compute_bias_subspace(&sets, 2), Err(Error::Rank { requested: 2, achievable: 1 })));
    }

    #[test]
    fn projection_examples() {
        let s = BiasSubspace { basis: vec![vec![1.0, 0.0]], k: 1, explained_variance: vec![1.0] };
        assert_eq!(sent_debias(&[1.0, 1.0], &s), vec![0.0, 1.0]);
        assert_eq!(sent_debias(&[0.0, 3.0], &s), vec![0.0, 3.0]);
    }

    #[test]
    fn equalized_pair_is_symmetric_in_subspace() {
        let s = BiasSubspace { basis: vec![vec![1.0, 0.0]], k: 1, explained_variance: vec![1.0] };
        let (a, b) = equalize_pair(&[3.0, 1.0], &[1.0, 2.0], &s);
        assert!((a[0] + b[0]).abs() < 1e-12);
        assert_eq!((a[1], b[1]), (1.0, 2.0));
    }

    #[test]
    fn subspace_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let sets: Vec<Vec<Vec<f64>>> = (0..10)
            .map(|_| (0..2).map(|_| (0..6).map(|_| rng.random_range(-1.0..1.0)).collect()).collect())
            .collect();
        let s = compute_bias_subspace(&sets, 2).unwrap();
        s.save(dir.path().join("sub")).unwrap();
        let back = BiasSubspace::load(dir.path().join("sub")).unwrap();
        for (u, v) in s.basis.iter().zip(&back.basis) {
            assert!((dot(u, v) - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn loss_hand_example() {
        let cfg = ContextDebiasConfig { alpha: 1.0, beta: 0.0, ..Default::default() };
        let loss = context_debias_loss(&[vec![vec![1.0, 1.0]]], &[vec![vec![1.0, 0.0]]], &[], &[], &cfg);
        assert_eq!(loss, 1.0);
        let orth = context_debias_loss(&[vec![vec![0.0, 2.0]]], &[vec![vec![1.0, 0.0]]], &[vec![vec![1.0, 2.0]]], &[vec![vec![1.0, 2.0]]], &ContextDebiasConfig::default());
        assert_eq!(orth, 0.0);
    }

    fn toy() -> (ContextualEncoder, Lexicon, Vec<String>, Vec<String>) {
        let vocab = Vocabulary::from_words(["she", "he", "nurse", "pilot", "is", "a"]);
        let m = ContextualEncoder::new("toy", Arc::new(vocab), EncoderConfig { hidden_size: 4, layers: 2, max_sequence_length: 8 }, 5);
        let lex = Lexicon::from_json(r#"{"attribute_pairs": [["she","he"]], "stereotypes_female": ["nurse"], "stereotypes_male": ["pilot"]}"#).unwrap();
        let attr = vec!["she is a".to_string(), "he is a".to_string()];
        let stereo = vec!["a nurse is".to_string(), "a pilot is a pilot".to_string()];
        (m, lex, attr, stereo)
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (m, lex, attr, stereo) = toy();
        let p = ContextDebiasProblem::new(&m, &lex, &attr, &stereo).unwrap();
        let mut moved = m.clone();
        moved.params_mut().iter_mut().enumerate().for_each(|(i, x)| *x += 0.01 * ((i % 7) as f64 - 3.0));
        let cfg = ContextDebiasConfig::default();
        let (_, g) = p.loss_and_grad(&moved, &cfg);
        let h = 1e-6;
        for i in 0..moved.encoder_param_count() {
            let (mut a, mut b) = (moved.clone(), moved.clone());
            a.params_mut()[i] += h;
            b.params_mut()[i] -= h;
            let fd = (p.loss(&a, &cfg) - p.loss(&b, &cfg)) / (2.0 * h);
            assert!((fd - g[i]).abs() <= 1e-4 * fd.abs().max(1e-3), "{i}: {} vs {fd}", g[i]);
        }
    }

    #[test]
    fn training_is_monotone_and_leaves_original() {
        let (m, lex, attr, stereo) = toy();
        let before = m.params().to_vec();
        let out = run_context_debias(&m, &lex, &attr, &stereo, &ContextDebiasConfig { epochs: 15, ..Default::default() }).unwrap();
        assert!(out.loss_history.windows(2).all(|w| w[1] <= w[0]));
        assert!(out.loss_history.last() < out.loss_history.first());
        assert_eq!(m.params(), &before[..]);
    }

    #[test]
    fn regularizer_only_is_a_no_op() {
        let (m, lex, attr, stereo) = toy();
        let cfg = ContextDebiasConfig { alpha: 0.0, beta: 1.0, epochs: 5, ..Default::default() };
        let out = run_context_debias(&m, &lex, &attr, &stereo, &cfg).unwrap();
        assert_eq!(out.loss_history[0], 0.0);
        assert_eq!(out.model.params(), m.params());
        assert!(ContextDebiasConfig { alpha: 0.0, beta: 0.0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn cda_examples() {
        let lex = Lexicon::builtin();
        let out = generate_cda_corpus(&["she is a nurse", "the data is ready"], &lex, false);
        assert_eq!(out, vec!["she is a nurse", "the data is ready", "he is a nurse"]);
        let again: BTreeSet<String> = generate_cda_corpus(&out, &lex, false).into_iter().collect();
        assert_eq!(again, out.into_iter().collect());
    }

    proptest! {
        #[test]
        fn projection_is_orthogonal_idempotent_and_shrinking(
            h in prop::collection::vec(-10.0f64..10.0, 5),
            seed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let sets: Vec<Vec<Vec<f64>>> = (0..8)
                .map(|_| (0..2).map(|_| (0..5).map(|_| rng.random_range(-1.0..1.0)).collect()).collect())
                .collect();
            let s = compute_bias_subspace(&sets, 2).unwrap();
            let p = sent_debias(&h, &s);
            for v in &s.basis {
                prop_assert!(dot(&p, v).abs() < 1e-6);
            }
            let pp = sent_debias(&p, &s);
            prop_assert!(p.iter().zip(&pp).all(|(a, b)| (a - b).abs() < 1e-9));
            prop_assert!(dot(&p, &p).sqrt() <= dot(&h, &h).sqrt() + 1e-12);
        }

        #[test]
        fn cda_size(lines in prop::collection::vec("(she|he|the|nurse|data|mary| ){0,6}", 0..10)) {
            let lex = Lexicon::builtin();
            let swappable = lines.iter().filter(|l| counterfactual_text(l, &lex, false).is_some()).count();
            prop_assert_eq!(generate_cda_corpus(&lines, &lex, false).len(), lines.len() + swappable);
        }
    }
}
