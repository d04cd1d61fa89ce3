//! A small trainable contextual encoder with a masked-LM head.
//!
//! Layer 0 is token embedding plus position embedding. Each further layer is
//! a residual context-mixing block
//!
//! ```text
//! c_i = mean_{j != i} x_j
//! y_i = x_i + tanh(A x_i + B c_i + b)
//! ```
//!
//! and the masked-LM head is a linear map to vocabulary logits. Gradients are
//! computed by hand; every parameter lives in one flat vector so optimizers
//! and finite-difference checks can treat it uniformly.

use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{MaskedLanguageModel, Vocabulary};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub hidden_size: usize,
    pub layers: usize,
    pub max_sequence_length: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ContextualEncoder {
    identifier: String,
    vocab: Arc<Vocabulary>,
    config: EncoderConfig,
    params: Vec<f64>,
    /// Orthonormal directions removed from every final-layer vector.
    #[serde(default)]
    output_projection: Option<Vec<Vec<f64>>>,
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub ids: Vec<usize>,
    /// `hidden[l]` holds the layer-`l` vectors; `hidden[0]` is the embedding layer.
    pub hidden: Vec<Vec<Vec<f64>>>,
    acts: Vec<Vec<Vec<f64>>>,
    ctx: Vec<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MlmConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub mask_probability: f64,
    pub seed: u64,
}

impl Default for MlmConfig {
    fn default() -> Self {
        Self {
            epochs: 8,
            learning_rate: 0.01,
            batch_size: 16,
            mask_probability: 0.15,
            seed: 0,
        }
    }
}

fn matvec(m: &[f64], x: &[f64], d: usize, out: &mut [f64]) {
    for r in 0..d {
        let row = &m[r * d..(r + 1) * d];
        out[r] += row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

fn matvec_t(m: &[f64], g: &[f64], d: usize, out: &mut [f64]) {
    for r in 0..d {
        let gr = g[r];
        if gr == 0.0 {
            continue;
        }
        for (o, a) in out.iter_mut().zip(&m[r * d..(r + 1) * d]) {
            *o += a * gr;
        }
    }
}

fn outer_add(dst: &mut [f64], g: &[f64], x: &[f64]) {
    let d = x.len();
    for (r, gr) in g.iter().enumerate() {
        if *gr == 0.0 {
            continue;
        }
        for (o, xv) in dst[r * d..(r + 1) * d].iter_mut().zip(x) {
            *o += gr * xv;
        }
    }
}

impl ContextualEncoder {
    pub fn new(identifier: impl Into<String>, vocab: Arc<Vocabulary>, config: EncoderConfig, seed: u64) -> Self {
        let mut enc = Self {
            identifier: identifier.into(),
            vocab,
            config,
            params: Vec::new(),
            output_projection: None,
        };
        enc.params = vec![0.0; enc.param_count()];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.hidden_size;
        let v = enc.vocab.len();
        let mut fill = |range: std::ops::Range<usize>, scale: f64, params: &mut [f64]| {
            for p in &mut params[range] {
                *p = rng.random_range(-scale..scale);
            }
        };
        let pos = enc.pos_offset();
        fill(0..v * d, 0.1, &mut enc.params);
        fill(pos..pos + config.max_sequence_length * d, 0.05, &mut enc.params);
        let mix_scale = 0.6 / (d as f64).sqrt();
        for l in 0..config.layers {
            let off = enc.layer_offset(l);
            fill(off..off + 2 * d * d, mix_scale, &mut enc.params);
        }
        let head = enc.head_offset();
        fill(head..head + v * d, 0.1, &mut enc.params);
        enc
    }

    /// Context-free "fixed linear embedder": no mixing layers and an
    /// all-zero masked-LM head, so every masked distribution is uniform.
    pub fn stub(identifier: impl Into<String>, vocab: Arc<Vocabulary>, hidden_size: usize, seed: u64) -> Self {
        let config = EncoderConfig {
            hidden_size,
            layers: 0,
            max_sequence_length: 512,
        };
        let mut enc = Self::new(identifier, vocab, config, seed);
        let pos = enc.pos_offset();
        let head = enc.head_offset();
        let end = enc.layer_offset(0);
        enc.params[pos..end].iter_mut().for_each(|p| *p = 0.0);
        enc.params[head..].iter_mut().for_each(|p| *p = 0.0);
        enc
    }

    pub fn config(&self) -> EncoderConfig {
        self.config
    }

    pub fn set_identifier(&mut self, identifier: impl Into<String>) {
        self.identifier = identifier.into();
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn d(&self) -> usize {
        self.config.hidden_size
    }

    fn pos_offset(&self) -> usize {
        self.vocab.len() * self.d()
    }

    fn layer_offset(&self, layer: usize) -> usize {
        let d = self.d();
        self.pos_offset() + self.config.max_sequence_length * d + layer * (2 * d * d + d)
    }

    fn head_offset(&self) -> usize {
        self.layer_offset(self.config.layers)
    }

    /// Number of encoder parameters θ_e (everything except the masked-LM head).
    /// They occupy `params()[..encoder_param_count()]`.
    pub fn encoder_param_count(&self) -> usize {
        self.head_offset()
    }

    pub fn param_count(&self) -> usize {
        self.head_offset() + self.vocab.len() * self.d() + self.vocab.len()
    }

    pub fn output_projection(&self) -> Option<&[Vec<f64>]> {
        self.output_projection.as_deref()
    }

    /// Removes the span of `basis` (orthonormal) from every final-layer vector.
    pub fn with_output_projection(mut self, basis: Vec<Vec<f64>>) -> Self {
        self.output_projection = Some(basis);
        self
    }

    /// Applies the output projection in place (identity if none). The
    /// projection is symmetric, so this also maps output gradients back to
    /// final-layer gradients.
    pub fn project(&self, v: &mut [f64]) {
        if let Some(basis) = &self.output_projection {
            for b in basis {
                let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
            }
        }
    }

    pub fn forward(&self, ids: &[usize]) -> ForwardCache {
        let d = self.d();
        let n = ids.len();
        let pos = self.pos_offset();
        let mut x: Vec<Vec<f64>> = ids
            .iter()
            .enumerate()
            .map(|(i, &id)| {
                let p = i.min(self.config.max_sequence_length - 1);
                (0..d)
                    .map(|k| self.params[id * d + k] + self.params[pos + p * d + k])
                    .collect()
            })
            .collect();
        let mut hidden = Vec::with_capacity(self.config.layers + 1);
        let mut acts = Vec::with_capacity(self.config.layers);
        let mut ctxs = Vec::with_capacity(self.config.layers);
        for l in 0..self.config.layers {
            let off = self.layer_offset(l);
            let (a, rest) = self.params[off..].split_at(d * d);
            let (b, rest) = rest.split_at(d * d);
            let bias = &rest[..d];
            let mut sum = vec![0.0; d];
            for xi in &x {
                sum.iter_mut().zip(xi).for_each(|(s, v)| *s += v);
            }
            let mut act_l = Vec::with_capacity(n);
            let mut ctx_l = Vec::with_capacity(n);
            let mut y = Vec::with_capacity(n);
            for xi in &x {
                let c: Vec<f64> = if n > 1 {
                    sum.iter().zip(xi).map(|(s, v)| (s - v) / (n - 1) as f64).collect()
                } else {
                    vec![0.0; d]
                };
                let mut pre = bias.to_vec();
                matvec(a, xi, d, &mut pre);
                matvec(b, &c, d, &mut pre);
                let act: Vec<f64> = pre.iter().map(|p| p.tanh()).collect();
                y.push(xi.iter().zip(&act).map(|(u, v)| u + v).collect::<Vec<f64>>());
                act_l.push(act);
                ctx_l.push(c);
            }
            hidden.push(std::mem::replace(&mut x, y));
            acts.push(act_l);
            ctxs.push(ctx_l);
        }
        hidden.push(x);
        ForwardCache {
            ids: ids.to_vec(),
            hidden,
            acts,
            ctx: ctxs,
        }
    }

    /// Final-layer vectors after the output projection.
    pub fn output(&self, cache: &ForwardCache) -> Vec<Vec<f64>> {
        let mut out = cache.hidden[self.config.layers].clone();
        for v in &mut out {
            self.project(v);
        }
        out
    }

    /// Accumulates parameter gradients into `grad` given the loss gradient
    /// with respect to every layer's vectors. `layer_grads[l]` matches
    /// `cache.hidden[l]`; the last entry is taken with respect to the
    /// unprojected final layer.
    pub fn backward(&self, cache: &ForwardCache, layer_grads: &[Vec<Vec<f64>>], grad: &mut [f64]) {
        let d = self.d();
        let n = cache.ids.len();
        let layers = self.config.layers;
        let mut g = layer_grads[layers].clone();
        for l in (0..layers).rev() {
            let off = self.layer_offset(l);
            let x = &cache.hidden[l];
            let mut gx = g.clone();
            let mut gc = vec![vec![0.0; d]; n];
            let a_mat = &self.params[off..off + d * d];
            let b_mat = &self.params[off + d * d..off + 2 * d * d];
            for i in 0..n {
                let gp: Vec<f64> = g[i]
                    .iter()
                    .zip(&cache.acts[l][i])
                    .map(|(gy, a)| gy * (1.0 - a * a))
                    .collect();
                outer_add(&mut grad[off..off + d * d], &gp, &x[i]);
                outer_add(&mut grad[off + d * d..off + 2 * d * d], &gp, &cache.ctx[l][i]);
                grad[off + 2 * d * d..off + 2 * d * d + d]
                    .iter_mut()
                    .zip(&gp)
                    .for_each(|(o, v)| *o += v);
                matvec_t(a_mat, &gp, d, &mut gx[i]);
                matvec_t(b_mat, &gp, d, &mut gc[i]);
            }
            if n > 1 {
                let mut total = vec![0.0; d];
                for gci in &gc {
                    total.iter_mut().zip(gci).for_each(|(t, v)| *t += v);
                }
                let scale = 1.0 / (n - 1) as f64;
                for j in 0..n {
                    for k in 0..d {
                        gx[j][k] += (total[k] - gc[j][k]) * scale;
                    }
                }
            }
            for (gxi, extra) in gx.iter_mut().zip(&layer_grads[l]) {
                gxi.iter_mut().zip(extra).for_each(|(a, b)| *a += b);
            }
            g = gx;
        }
        let pos = self.pos_offset();
        for (i, &id) in cache.ids.iter().enumerate() {
            let p = i.min(self.config.max_sequence_length - 1);
            for k in 0..d {
                grad[id * d + k] += g[i][k];
                grad[pos + p * d + k] += g[i][k];
            }
        }
    }

    /// Zero gradients shaped like `cache.hidden`.
    pub fn zero_layer_grads(&self, cache: &ForwardCache) -> Vec<Vec<Vec<f64>>> {
        cache
            .hidden
            .iter()
            .map(|layer| vec![vec![0.0; self.d()]; layer.len()])
            .collect()
    }

    pub fn mlm_logits(&self, h: &[f64]) -> Vec<f64> {
        let d = self.d();
        let head = self.head_offset();
        let v = self.vocab.len();
        let bias = head + v * d;
        (0..v)
            .map(|t| {
                let row = &self.params[head + t * d..head + (t + 1) * d];
                self.params[bias + t] + row.iter().zip(h).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect()
    }

    /// Head gradients for `g_logits` at output vector `h`; returns dL/dh.
    fn mlm_backward(&self, h: &[f64], g_logits: &[f64], grad: &mut [f64]) -> Vec<f64> {
        let d = self.d();
        let head = self.head_offset();
        let v = self.vocab.len();
        let mut gh = vec![0.0; d];
        for t in 0..v {
            let gt = g_logits[t];
            grad[head + v * d + t] += gt;
            for k in 0..d {
                grad[head + t * d + k] += gt * h[k];
                gh[k] += gt * self.params[head + t * d + k];
            }
        }
        gh
    }

    /// Cross-entropy of the masked-LM head at `positions` (original ids in
    /// `targets`), accumulating gradients. Returns the summed loss.
    pub fn mlm_loss_and_grad(&self, ids: &[usize], positions: &[usize], targets: &[usize], grad: &mut [f64]) -> f64 {
        let cache = self.forward(ids);
        let out = self.output(&cache);
        let mut layer_grads = self.zero_layer_grads(&cache);
        let mut loss = 0.0;
        for (&p, &t) in positions.iter().zip(targets) {
            let logits = self.mlm_logits(&out[p]);
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            loss += -(exps[t] / z).ln();
            let mut g: Vec<f64> = exps.iter().map(|e| e / z).collect();
            g[t] -= 1.0;
            let mut gh = self.mlm_backward(&out[p], &g, grad);
            self.project(&mut gh);
            let last = layer_grads.len() - 1;
            layer_grads[last][p].iter_mut().zip(&gh).for_each(|(a, b)| *a += b);
        }
        self.backward(&cache, &layer_grads, grad);
        loss
    }

    /// Masked-LM training on `sentences`. Returns the mean loss per epoch.
    pub fn train_mlm(&mut self, sentences: &[String], cfg: &MlmConfig) -> Result<Vec<f64>> {
        let encoded: Vec<Vec<usize>> = sentences
            .iter()
            .map(|s| {
                let mut ids: Vec<usize> = self.vocab.tokenize(s).into_iter().map(|(_, id)| id).collect();
                ids.truncate(self.config.max_sequence_length);
                ids
            })
            .filter(|ids| ids.len() >= 2)
            .collect();
        if encoded.is_empty() {
            return Err(Error::InsufficientData("no trainable sentences for masked-LM training".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut adam = Adam::new(self.params.len(), cfg.learning_rate);
        let mask_id = self.vocab.mask_id();
        let mut order: Vec<usize> = (0..encoded.len()).collect();
        let mut history = Vec::with_capacity(cfg.epochs);
        for epoch in 0..cfg.epochs {
            order.shuffle(&mut rng);
            let mut epoch_loss = 0.0;
            let mut count = 0usize;
            for batch in order.chunks(cfg.batch_size.max(1)) {
                let mut grad = vec![0.0; self.params.len()];
                let mut batch_count = 0usize;
                for &si in batch {
                    let ids = &encoded[si];
                    let mut positions: Vec<usize> =
                        (0..ids.len()).filter(|_| rng.random::<f64>() < cfg.mask_probability).collect();
                    if positions.is_empty() {
                        positions.push(rng.random_range(0..ids.len()));
                    }
                    let targets: Vec<usize> = positions.iter().map(|&p| ids[p]).collect();
                    let mut masked = ids.clone();
                    for &p in &positions {
                        masked[p] = mask_id;
                    }
                    epoch_loss += self.mlm_loss_and_grad(&masked, &positions, &targets, &mut grad);
                    batch_count += positions.len();
                }
                count += batch_count;
                let scale = 1.0 / batch_count as f64;
                grad.iter_mut().for_each(|g| *g *= scale);
                adam.step(&mut self.params, &grad);
            }
            let mean = epoch_loss / count as f64;
            if !mean.is_finite() {
                return Err(Error::Training {
                    epoch,
                    reason: "masked-LM loss is not finite".into(),
                });
            }
            history.push(mean);
        }
        Ok(history)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(self).map_err(|e| Error::Format(e.to_string()))?;
        crate::corpus::write_atomic(path, text.as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let enc: Self = serde_json::from_str(&text).map_err(|e| Error::Format(format!("model file: {e}")))?;
        if enc.params.len() != enc.param_count() {
            return Err(Error::Format(format!(
                "model file has {} parameters, configuration needs {}",
                enc.params.len(),
                enc.param_count()
            )));
        }
        Ok(enc)
    }
}

impl MaskedLanguageModel for ContextualEncoder {
    fn identifier(&self) -> &str {
        &self.identifier
    }

    fn hidden_size(&self) -> usize {
        self.config.hidden_size
    }

    fn max_sequence_length(&self) -> usize {
        self.config.max_sequence_length
    }

    fn vocabulary(&self) -> &Arc<Vocabulary> {
        &self.vocab
    }

    fn encode(&self, ids: &[usize]) -> Vec<Vec<f64>> {
        let cache = self.forward(ids);
        self.output(&cache)
    }

    fn mask_logits(&self, ids: &[usize], pos: usize) -> Vec<f64> {
        let out = self.encode(ids);
        self.mlm_logits(&out[pos])
    }
}

/// Plain Adam over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(len: usize, learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            params[i] -= self.learning_rate * (self.m[i] / bc1) / ((self.v[i] / bc2).sqrt() + self.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(layers: usize) -> ContextualEncoder {
        let vocab = Arc::new(Vocabulary::from_words(["a", "b", "c", "d"]));
        ContextualEncoder::new(
            "t",
            vocab,
            EncoderConfig {
                hidden_size: 3,
                layers,
                max_sequence_length: 6,
            },
            11,
        )
    }

    /// Loss = Σ_l Σ_i w_{l,i} · h_{l,i} for fixed random weights.
    fn probe_loss(enc: &ContextualEncoder, ids: &[usize], weights: &[Vec<Vec<f64>>]) -> f64 {
        let cache = enc.forward(ids);
        cache
            .hidden
            .iter()
            .zip(weights)
            .map(|(layer, w)| {
                layer
                    .iter()
                    .zip(w)
                    .map(|(h, wi)| h.iter().zip(wi).map(|(a, b)| a * b).sum::<f64>())
                    .sum::<f64>()
            })
            .sum()
    }

    #[test]
    fn backward_matches_finite_differences() {
        let enc = small(2);
        let ids = [2, 3, 4, 2];
        let cache = enc.forward(&ids);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let weights: Vec<Vec<Vec<f64>>> = cache
            .hidden
            .iter()
            .map(|l| l.iter().map(|h| h.iter().map(|_| rng.random_range(-1.0..1.0)).collect()).collect())
            .collect();
        let mut grad = vec![0.0; enc.param_count()];
        enc.backward(&cache, &weights, &mut grad);
        let h = 1e-6;
        for i in 0..enc.encoder_param_count() {
            let mut plus = enc.clone();
            plus.params[i] += h;
            let mut minus = enc.clone();
            minus.params[i] -= h;
            let fd = (probe_loss(&plus, &ids, &weights) - probe_loss(&minus, &ids, &weights)) / (2.0 * h);
            assert!(
                (fd - grad[i]).abs() <= 1e-6 * (1.0 + fd.abs()),
                "param {i}: analytic {} vs fd {fd}",
                grad[i]
            );
        }
    }

    #[test]
    fn mlm_gradient_matches_finite_differences() {
        let enc = small(1).with_output_projection(vec![vec![0.6, 0.8, 0.0]]);
        let ids = [2, 1, 4];
        let mut grad = vec![0.0; enc.param_count()];
        enc.mlm_loss_and_grad(&ids, &[1], &[3], &mut grad);
        let h = 1e-6;
        for i in (0..enc.param_count()).step_by(3) {
            let mut plus = enc.clone();
            plus.params[i] += h;
            let mut minus = enc.clone();
            minus.params[i] -= h;
            let mut scratch = vec![0.0; enc.param_count()];
            let lp = plus.mlm_loss_and_grad(&ids, &[1], &[3], &mut scratch);
            let lm = minus.mlm_loss_and_grad(&ids, &[1], &[3], &mut scratch);
            let fd = (lp - lm) / (2.0 * h);
            assert!((fd - grad[i]).abs() <= 1e-6 * (1.0 + fd.abs()), "param {i}: {} vs {fd}", grad[i]);
        }
    }

    #[test]
    fn mlm_training_reduces_loss() {
        let mut enc = small(1);
        let sentences: Vec<String> = (0..40).map(|i| if i % 2 == 0 { "a b".into() } else { "c d".into() }).collect();
        let hist = enc
            .train_mlm(&sentences, &MlmConfig { epochs: 30, learning_rate: 0.05, ..Default::default() })
            .unwrap();
        assert!(hist.last().unwrap() < &(hist[0] * 0.5), "{hist:?}");
    }

    #[test]
    fn projection_removes_direction_from_outputs() {
        let enc = small(2).with_output_projection(vec![vec![1.0, 0.0, 0.0]]);
        let out = enc.encode(&[2, 3, 4]);
        assert!(out.iter().all(|v| v[0].abs() < 1e-12));
    }

    #[test]
    fn save_load_round_trip() {
        let enc = small(2);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        enc.save(&path).unwrap();
        let back = ContextualEncoder::load(&path).unwrap();
        assert_eq!(back.params(), enc.params());
        assert_eq!(back.encode(&[2, 3]), enc.encode(&[2, 3]));
    }
}
