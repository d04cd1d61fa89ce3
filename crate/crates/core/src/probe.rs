//! Linear gender probe over contextual embeddings.
//!
//! The probe is trained on attribute-word occurrences and then applied to
//! stereotype-word occurrences. Its score is the probability of the female
//! class; the male score is its complement.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::corpus::{read_f32_array, write_atomic, write_f32_array, EmbeddingBank};
use crate::error::{Error, Result};
use crate::lexicon::{AttributeSplit, Gender, Lexicon};
use crate::model::Adam;
use crate::text::substream_seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// L2 penalty on the non-bias weights.
    pub l2: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            learning_rate: 0.05,
            batch_size: 32,
            l2: 0.3,
            seed: 0,
        }
    }
}

/// Logistic classifier: `hidden_size` weights followed by a bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeModel {
    pub weights: Vec<f64>,
    pub config: ProbeConfig,
    pub split: Option<AttributeSplit>,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl ProbeModel {
    /// Probe with the given weights (last entry is the bias).
    pub fn from_weights(weights: Vec<f64>) -> Self {
        Self {
            weights,
            config: ProbeConfig::default(),
            split: None,
        }
    }

    pub fn hidden_size(&self) -> usize {
        self.weights.len() - 1
    }

    /// Probability that `v` belongs to the female class.
    pub fn score(&self, v: &[f32]) -> f64 {
        let d = self.hidden_size();
        let z = self.weights[d] + self.weights[..d].iter().zip(v).map(|(w, &x)| w * f64::from(x)).sum::<f64>();
        sigmoid(z)
    }

    fn check_dim(&self, bank: &EmbeddingBank) -> Result<()> {
        if bank.hidden_size() != self.hidden_size() {
            return Err(Error::Dimension {
                expected: self.hidden_size(),
                got: bank.hidden_size(),
            });
        }
        Ok(())
    }

    /// Writes `<stem>.probe.json` (metadata) and `<stem>.f32` (weights).
    pub fn save(&self, stem: impl AsRef<Path>, hash: &str) -> Result<()> {
        let stem = stem.as_ref();
        let name = stem.file_name().and_then(|n| n.to_str()).unwrap_or("probe");
        let weights: Vec<f32> = self.weights.iter().map(|&w| w as f32).collect();
        write_f32_array(stem.with_file_name(format!("{name}.f32")), hash, &weights)?;
        let meta = ProbeMetadata {
            config: self.config,
            split: self.split.clone(),
            hash: hash.to_string(),
        };
        let json = serde_json::to_vec_pretty(&meta).map_err(|e| Error::Format(e.to_string()))?;
        write_atomic(&stem.with_file_name(format!("{name}.probe.json")), &json)
    }

    /// Reads a probe written by [`ProbeModel::save`]. Weights come back at
    /// `f32` precision.
    pub fn load(stem: impl AsRef<Path>) -> Result<Self> {
        let stem = stem.as_ref();
        let name = stem.file_name().and_then(|n| n.to_str()).unwrap_or("probe");
        let meta_path = stem.with_file_name(format!("{name}.probe.json"));
        let text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: ProbeMetadata = serde_json::from_str(&text).map_err(|e| Error::Format(e.to_string()))?;
        let (hash, weights) = read_f32_array(stem.with_file_name(format!("{name}.f32")))?;
        if hash != meta.hash {
            return Err(Error::Format("probe weight file does not match its metadata".into()));
        }
        Ok(Self {
            weights: weights.into_iter().map(f64::from).collect(),
            config: meta.config,
            split: meta.split,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct ProbeMetadata {
    config: ProbeConfig,
    split: Option<AttributeSplit>,
    hash: String,
}

/// Labeled occurrence vectors for `words`; label 1 is female.
fn labeled_occurrences(
    bank: &EmbeddingBank,
    words: &BTreeSet<String>,
    gender_of: impl Fn(&str) -> Option<Gender>,
) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let missing = bank.missing(words);
    if !missing.is_empty() {
        return Err(Error::Coverage(missing));
    }
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for w in words {
        let g = gender_of(w).ok_or_else(|| Error::Label(format!("`{w}` has no gender label")))?;
        for e in bank.get(w).unwrap_or_default() {
            xs.push(e.vector.iter().map(|&v| f64::from(v)).collect());
            ys.push(if g == Gender::Female { 1.0 } else { 0.0 });
        }
    }
    Ok((xs, ys))
}

/// Fits a logistic probe on labeled vectors (label 1 = female).
pub fn fit_probe(xs: &[Vec<f64>], ys: &[f64], config: &ProbeConfig) -> Result<ProbeModel> {
    let positives = ys.iter().filter(|&&y| y > 0.5).count();
    if positives == 0 || positives == ys.len() {
        return Err(Error::Label("probe training data holds a single class".into()));
    }
    let d = xs[0].len();
    let mut w = vec![0.0; d + 1];
    let mut opt = Adam::new(d + 1, config.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..xs.len()).collect();
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size.max(1)) {
            let mut g = vec![0.0; d + 1];
            for &i in batch {
                let z = w[d] + w[..d].iter().zip(&xs[i]).map(|(a, b)| a * b).sum::<f64>();
                let err = sigmoid(z) - ys[i];
                g[..d].iter_mut().zip(&xs[i]).for_each(|(gk, x)| *gk += err * x);
                g[d] += err;
            }
            g.iter_mut().for_each(|gk| *gk /= batch.len() as f64);
            g[..d].iter_mut().zip(&w[..d]).for_each(|(gk, wk)| *gk += config.l2 * wk);
            opt.step(&mut w, &g);
        }
    }
    if w.iter().any(|x| !x.is_finite()) {
        return Err(Error::Training {
            epoch: config.epochs,
            reason: "probe weights diverged".into(),
        });
    }
    Ok(ProbeModel {
        weights: w,
        config: *config,
        split: None,
    })
}

/// Trains on every occurrence of the split's training words.
pub fn train_probe(
    bank: &EmbeddingBank,
    split: &AttributeSplit,
    lexicon: &Lexicon,
    config: &ProbeConfig,
) -> Result<ProbeModel> {
    let (xs, ys) = labeled_occurrences(bank, &split.train_words, |w| lexicon.attribute_gender(w))?;
    let mut probe = fit_probe(&xs, &ys, config)?;
    probe.split = Some(split.clone());
    Ok(probe)
}

/// Majority-vote prediction per word. Ties go to female.
fn word_predictions<'a>(
    probe: &ProbeModel,
    bank: &EmbeddingBank,
    words: impl IntoIterator<Item = &'a String>,
) -> BTreeMap<String, (Gender, f64)> {
    let mut out = BTreeMap::new();
    for w in words {
        let Some(list) = bank.get(w).filter(|l| !l.is_empty()) else { continue };
        let scores: Vec<f64> = list.iter().map(|e| probe.score(&e.vector)).collect();
        let f = scores.iter().filter(|&&s| s > 0.5).count();
        let m = scores.iter().filter(|&&s| s < 0.5).count();
        if f == m {
            log::debug!("tie in majority vote for `{w}` broken toward f");
        }
        let g = if f >= m { Gender::Female } else { Gender::Male };
        let conf = scores.iter().map(|s| (s - 0.5).abs()).sum::<f64>() / scores.len() as f64;
        out.insert(w.clone(), (g, conf));
    }
    out
}

fn covered_stereotypes(bank: &EmbeddingBank, lexicon: &Lexicon) -> Result<(Vec<String>, Vec<String>)> {
    let f: Vec<String> = lexicon.stereotypes_female().iter().filter(|w| bank.contains(w)).cloned().collect();
    let m: Vec<String> = lexicon.stereotypes_male().iter().filter(|w| bank.contains(w)).cloned().collect();
    if f.is_empty() && m.is_empty() {
        return Err(Error::Coverage(lexicon.stereotype_terms().into_iter().collect()));
    }
    let missing = lexicon.stereotype_terms().len() - f.len() - m.len();
    if missing > 0 {
        log::warn!("{missing} stereotype terms have no embeddings and are skipped");
    }
    Ok((f, m))
}

/// Fraction of stereotype words whose majority-vote prediction matches the
/// set they belong to.
pub fn bias_accuracy(probe: &ProbeModel, bank: &EmbeddingBank, lexicon: &Lexicon) -> Result<f64> {
    probe.check_dim(bank)?;
    let (f, m) = covered_stereotypes(bank, lexicon)?;
    let preds = word_predictions(probe, bank, f.iter().chain(&m));
    let correct = f.iter().filter(|w| preds[*w].0 == Gender::Female).count()
        + m.iter().filter(|w| preds[*w].0 == Gender::Male).count();
    Ok(correct as f64 / (f.len() + m.len()) as f64)
}

/// Mean over all occurrence vectors of `|score − 0.5|`.
pub fn mean_bias_confidence(probe: &ProbeModel, bank: &EmbeddingBank) -> Result<f64> {
    probe.check_dim(bank)?;
    if bank.is_empty() {
        return Err(Error::Coverage(Vec::new()));
    }
    let (sum, n) = bank
        .entries()
        .values()
        .flatten()
        .fold((0.0, 0usize), |(s, n), e| (s + (probe.score(&e.vector) - 0.5).abs(), n + 1));
    Ok(sum / n as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomizationResult {
    pub p_value: f64,
    pub original_accuracy: f64,
    pub random_mean: f64,
    pub random_std: f64,
    pub t_statistic: Option<f64>,
    /// Supplementary two-sided permutation p-value: share of random
    /// accuracies at least as far from their mean as the original.
    pub permutation_p_value: f64,
    pub iterations: usize,
}

/// Two-sided one-sample t-test of bias accuracies under random
/// size-preserving relabelings of the stereotype words, against the
/// accuracy under the true labels.
pub fn randomization_test(
    probe: &ProbeModel,
    bank: &EmbeddingBank,
    lexicon: &Lexicon,
    iterations: usize,
    seed: u64,
) -> Result<RandomizationResult> {
    if iterations < 2 {
        return Err(Error::Config("randomization test needs at least 2 iterations".into()));
    }
    probe.check_dim(bank)?;
    let (f, m) = covered_stereotypes(bank, lexicon)?;
    let preds = word_predictions(probe, bank, f.iter().chain(&m));
    let words: Vec<&String> = f.iter().chain(&m).collect();
    let predicted_f: Vec<bool> = words.iter().map(|w| preds[*w].0 == Gender::Female).collect();
    let accuracy = |labels_f: &[bool]| -> f64 {
        let hits = predicted_f.iter().zip(labels_f).filter(|(p, l)| p == l).count();
        hits as f64 / words.len() as f64
    };
    let truth: Vec<bool> = (0..words.len()).map(|i| i < f.len()).collect();
    let original = accuracy(&truth);
    let random: Vec<f64> = (0..iterations)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(substream_seed(seed, &format!("randomization-{i}")));
            let mut labels = truth.clone();
            labels.shuffle(&mut rng);
            accuracy(&labels)
        })
        .collect();
    let n = iterations as f64;
    let mean = random.iter().sum::<f64>() / n;
    let var = random.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let std = var.sqrt();
    let (p_value, t_statistic) = if std == 0.0 {
        let all_equal = random.iter().all(|&a| a == original);
        log::info!("randomization accuracies have zero variance; degenerate p-value policy applied");
        (if all_equal { 1.0 } else { 0.0 }, None)
    } else {
        let t = (mean - original) / (std / n.sqrt());
        let dist = StudentsT::new(0.0, 1.0, n - 1.0).map_err(|e| Error::Config(e.to_string()))?;
        ((2.0 * dist.sf(t.abs())).clamp(0.0, 1.0), Some(t))
    };
    let extreme = random.iter().filter(|&&a| (a - mean).abs() >= (original - mean).abs() - 1e-12).count();
    Ok(RandomizationResult {
        p_value,
        permutation_p_value: (extreme + 1) as f64 / (n + 1.0),
        original_accuracy: original,
        random_mean: mean,
        random_std: std,
        t_statistic,
        iterations,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WordScore {
    pub predicted: Gender,
    pub mean_confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    /// Per-word majority-vote accuracy on held-out attribute words.
    pub gender_accuracy: f64,
    pub gender_accuracy_occurrences: f64,
    pub stereotype_accuracy: f64,
    pub mean_bias_confidence: f64,
    pub randomization_p_value: f64,
    pub randomization: RandomizationResult,
    pub per_word_scores: BTreeMap<String, WordScore>,
}

/// Held-out gender accuracy: (per word, per occurrence).
pub fn gender_accuracy(probe: &ProbeModel, bank: &EmbeddingBank, words: &BTreeSet<String>, lexicon: &Lexicon) -> Result<(f64, f64)> {
    probe.check_dim(bank)?;
    let (xs, ys) = labeled_occurrences(bank, words, |w| lexicon.attribute_gender(w))?;
    if xs.is_empty() {
        return Err(Error::EmptyEvaluation("no held-out attribute occurrences".into()));
    }
    let occ_hits = xs
        .iter()
        .zip(&ys)
        .filter(|(x, y)| {
            let v: Vec<f32> = x.iter().map(|&a| a as f32).collect();
            (probe.score(&v) > 0.5) == (**y > 0.5)
        })
        .count();
    let preds = word_predictions(probe, bank, words);
    let word_hits = preds
        .iter()
        .filter(|(w, (g, _))| lexicon.attribute_gender(w) == Some(*g))
        .count();
    Ok((word_hits as f64 / preds.len() as f64, occ_hits as f64 / xs.len() as f64))
}

/// Trains the probe and evaluates every probe statistic.
pub fn run_probe(
    attribute_bank: &EmbeddingBank,
    stereotype_bank: &EmbeddingBank,
    lexicon: &Lexicon,
    split: &AttributeSplit,
    config: &ProbeConfig,
    iterations: usize,
) -> Result<(ProbeModel, ProbeReport)> {
    let probe = train_probe(attribute_bank, split, lexicon, config)?;
    let report = evaluate_probe(&probe, attribute_bank, stereotype_bank, lexicon, iterations)?;
    Ok((probe, report))
}

/// Evaluates a trained probe; used for mitigated banks with a shared probe.
pub fn evaluate_probe(
    probe: &ProbeModel,
    attribute_bank: &EmbeddingBank,
    stereotype_bank: &EmbeddingBank,
    lexicon: &Lexicon,
    iterations: usize,
) -> Result<ProbeReport> {
    let split = probe
        .split
        .as_ref()
        .ok_or_else(|| Error::Config("probe carries no attribute split".into()))?;
    let (gender_word, gender_occ) = gender_accuracy(probe, attribute_bank, &split.test_words, lexicon)?;
    let stereo = stereotype_bank.subset(&lexicon.stereotype_terms());
    let stereotype_accuracy = bias_accuracy(probe, &stereo, lexicon)?;
    let confidence = mean_bias_confidence(probe, &stereo)?;
    let randomization = randomization_test(probe, &stereo, lexicon, iterations, probe.config.seed)?;
    let per_word_scores = word_predictions(probe, &stereo, &lexicon.stereotype_terms())
        .into_iter()
        .map(|(w, (predicted, mean_confidence))| (w, WordScore { predicted, mean_confidence }))
        .collect();
    Ok(ProbeReport {
        gender_accuracy: gender_word,
        gender_accuracy_occurrences: gender_occ,
        stereotype_accuracy,
        mean_bias_confidence: confidence,
        randomization_p_value: randomization.p_value,
        randomization,
        per_word_scores,
    })
}
