use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Adam, ContextualEncoder, MaskedLanguageModel};
use crate::error::{Error, Result};

/// Anything that maps a text to class probabilities.
pub trait TextClassifier {
    fn num_classes(&self) -> usize;
    fn class_probabilities(&self, text: &str) -> Vec<f64>;

    fn predict(&self, text: &str) -> usize {
        let p = self.class_probabilities(text);
        (0..p.len()).fold(0, |best, c| if p[c] > p[best] { c } else { best })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_sequence_length: usize,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            epochs: 4,
            learning_rate: 2e-5,
            batch_size: 16,
            max_sequence_length: 100,
            seed: 0,
        }
    }
}

/// Encoder plus a one-layer linear head over the mean-pooled final layer.
#[derive(Debug, Clone)]
pub struct SequenceClassifier {
    encoder: ContextualEncoder,
    num_classes: usize,
    /// Row-major `num_classes × hidden` weights followed by `num_classes` biases.
    head: Vec<f64>,
    max_sequence_length: usize,
}

impl SequenceClassifier {
    pub fn new(encoder: ContextualEncoder, num_classes: usize) -> Self {
        let d = encoder.hidden_size();
        Self {
            max_sequence_length: encoder.max_sequence_length(),
            encoder,
            num_classes,
            head: vec![0.0; num_classes * d + num_classes],
        }
    }

    pub fn encoder(&self) -> &ContextualEncoder {
        &self.encoder
    }

    fn ids(&self, text: &str) -> Vec<usize> {
        let mut ids: Vec<usize> = self.encoder.vocabulary().tokenize(text).into_iter().map(|t| t.1).collect();
        ids.truncate(self.max_sequence_length.min(self.encoder.max_sequence_length()));
        ids
    }

    fn pooled(&self, out: &[Vec<f64>]) -> Vec<f64> {
        let d = self.encoder.hidden_size();
        let mut pooled = vec![0.0; d];
        for v in out {
            pooled.iter_mut().zip(v).for_each(|(p, x)| *p += x);
        }
        if !out.is_empty() {
            pooled.iter_mut().for_each(|p| *p /= out.len() as f64);
        }
        pooled
    }

    fn logits(&self, pooled: &[f64]) -> Vec<f64> {
        let d = pooled.len();
        (0..self.num_classes)
            .map(|c| {
                self.head[self.num_classes * d + c]
                    + self.head[c * d..(c + 1) * d].iter().zip(pooled).map(|(w, x)| w * x).sum::<f64>()
            })
            .collect()
    }

    fn softmax(logits: &[f64]) -> Vec<f64> {
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = e.iter().sum();
        e.into_iter().map(|x| x / z).collect()
    }

    /// Cross-entropy for one example; accumulates encoder and head gradients.
    fn loss_and_grad(&self, text: &str, label: usize, enc_grad: &mut [f64], head_grad: &mut [f64]) -> f64 {
        let ids = self.ids(text);
        let d = self.encoder.hidden_size();
        let cache = self.encoder.forward(&ids);
        let out = self.encoder.output(&cache);
        let pooled = self.pooled(&out);
        let probs = Self::softmax(&self.logits(&pooled));
        let loss = -probs[label].max(1e-300).ln();
        let mut g = probs;
        g[label] -= 1.0;
        let mut g_pooled = vec![0.0; d];
        for c in 0..self.num_classes {
            head_grad[self.num_classes * d + c] += g[c];
            for k in 0..d {
                head_grad[c * d + k] += g[c] * pooled[k];
                g_pooled[k] += g[c] * self.head[c * d + k];
            }
        }
        if !ids.is_empty() {
            self.encoder.project(&mut g_pooled);
            let mut layer_grads = self.encoder.zero_layer_grads(&cache);
            let last = layer_grads.len() - 1;
            let scale = 1.0 / ids.len() as f64;
            for gi in &mut layer_grads[last] {
                gi.iter_mut().zip(&g_pooled).for_each(|(a, b)| *a = b * scale);
            }
            self.encoder.backward(&cache, &layer_grads, enc_grad);
        }
        loss
    }

    /// Finetunes encoder and head jointly. Returns the mean loss per epoch.
    pub fn fit(&mut self, texts: &[String], labels: &[usize], cfg: &ClassifierConfig) -> Result<Vec<f64>> {
        if texts.len() != labels.len() || texts.is_empty() {
            return Err(Error::InsufficientData("classifier needs a nonempty, aligned training set".into()));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= self.num_classes) {
            return Err(Error::Label(format!("label {bad} outside {} classes", self.num_classes)));
        }
        self.max_sequence_length = cfg.max_sequence_length;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut enc_opt = Adam::new(self.encoder.param_count(), cfg.learning_rate);
        let mut head_opt = Adam::new(self.head.len(), cfg.learning_rate);
        let mut order: Vec<usize> = (0..texts.len()).collect();
        let mut history = Vec::with_capacity(cfg.epochs);
        for epoch in 0..cfg.epochs {
            order.shuffle(&mut rng);
            let mut total = 0.0;
            for batch in order.chunks(cfg.batch_size.max(1)) {
                let mut enc_grad = vec![0.0; self.encoder.param_count()];
                let mut head_grad = vec![0.0; self.head.len()];
                for &i in batch {
                    total += self.loss_and_grad(&texts[i], labels[i], &mut enc_grad, &mut head_grad);
                }
                let scale = 1.0 / batch.len() as f64;
                enc_grad.iter_mut().for_each(|g| *g *= scale);
                head_grad.iter_mut().for_each(|g| *g *= scale);
                enc_opt.step(self.encoder.params_mut(), &enc_grad);
                head_opt.step(&mut self.head, &head_grad);
            }
            let mean = total / texts.len() as f64;
            if !mean.is_finite() {
                return Err(Error::Training {
                    epoch,
                    reason: "classification loss is not finite".into(),
                });
            }
            history.push(mean);
        }
        Ok(history)
    }
}

impl TextClassifier for SequenceClassifier {
    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn class_probabilities(&self, text: &str) -> Vec<f64> {
        let ids = self.ids(text);
        let out = self.encoder.encode(&ids);
        Self::softmax(&self.logits(&self.pooled(&out)))
    }
}
