//! Browser demo: text interventions, the sent-debias "hiding bias" effect on
//! planted embeddings, and the power curve of the probe's randomization test.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;
use wasm_bindgen::prelude::*;

use biasprobe::corpus::{BankMetadata, EmbeddingBank};
use biasprobe::debias::{compute_bias_subspace, sent_debias};
use biasprobe::downstream::scrub_text;
use biasprobe::intrinsic::seat_test;
use biasprobe::lexicon::{counterfactual_text, split_attribute_terms, Lexicon};
use biasprobe::probe::{run_probe, ProbeConfig};

const DIM: usize = 16;
const OCCURRENCES: usize = 6;
/// Weaker than the audit default: planted signals here are small in norm.
const PROBE_L2: f64 = 0.01;

#[derive(Debug, Serialize)]
pub struct Interventions {
    pub scrubbed: String,
    pub swapped: String,
    pub swapped_with_names: String,
}

pub fn interventions(text: &str) -> Interventions {
    let lex = Lexicon::builtin();
    Interventions {
        scrubbed: scrub_text(text, &lex),
        swapped: counterfactual_text(text, &lex, false).unwrap_or_else(|| text.to_string()),
        swapped_with_names: counterfactual_text(text, &lex, true).unwrap_or_else(|| text.to_string()),
    }
}

/// How gender is planted in the synthetic embedding space.
#[derive(Debug, Clone, Copy)]
pub struct Planting {
    /// Attribute words along the first axis.
    pub attribute: f64,
    /// Stereotype words along the first axis.
    pub stereotype: f64,
    pub noise: f64,
    pub seed: u64,
}

fn planted_bank(lex: &Lexicon, p: Planting) -> Result<EmbeddingBank, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let noise = Normal::new(0.0, p.noise.max(0.0)).map_err(|e| e.to_string())?;
    let mut bank = EmbeddingBank::new("planted", DIM, BankMetadata::default());
    let groups = [
        (lex.attributes_female(), 1.0, p.attribute),
        (lex.attributes_male(), -1.0, p.attribute),
        (lex.stereotypes_female(), 1.0, p.stereotype),
        (lex.stereotypes_male(), -1.0, p.stereotype),
    ];
    for (words, sign, strength) in groups {
        for w in words {
            for _ in 0..OCCURRENCES {
                let v: Vec<f32> = (0..DIM)
                    .map(|k| {
                        let planted = if k == 0 { sign * strength } else { 0.0 };
                        (planted + noise.sample(&mut rng)) as f32
                    })
                    .collect();
                bank.push_vector(w, v).map_err(|e| e.to_string())?;
            }
        }
    }
    Ok(bank)
}

#[derive(Debug, Serialize)]
pub struct ProbeSummary {
    pub gender_accuracy: f64,
    pub bias_accuracy: f64,
    pub mean_bias_confidence: f64,
    pub p_value: f64,
    pub permutation_p_value: f64,
    pub seat_effect_size: f64,
}

fn summarize(bank: &EmbeddingBank, lex: &Lexicon, seed: u64) -> Result<ProbeSummary, String> {
    let split = split_attribute_terms(lex, 0.5, seed).map_err(|e| e.to_string())?;
    let config = ProbeConfig {
        seed,
        l2: PROBE_L2,
        ..ProbeConfig::default()
    };
    let attributes = bank.subset(&lex.attribute_terms());
    let stereotypes = bank.subset(&lex.stereotype_terms());
    let (_, r) = run_probe(&attributes, &stereotypes, lex, &split, &config, 100).map_err(|e| e.to_string())?;
    let seat = seat_test(bank, lex, lex.attributes_female(), lex.attributes_male()).map_err(|e| e.to_string())?;
    Ok(ProbeSummary {
        gender_accuracy: r.gender_accuracy,
        bias_accuracy: r.stereotype_accuracy,
        mean_bias_confidence: r.mean_bias_confidence,
        p_value: r.randomization_p_value,
        permutation_p_value: r.randomization.permutation_p_value,
        seat_effect_size: seat.effect_size,
    })
}

#[derive(Debug, Serialize)]
pub struct HidingBias {
    pub before: ProbeSummary,
    pub after: ProbeSummary,
    pub explained_variance: Vec<f64>,
    /// Unit basis vectors of the removed subspace, first two coordinates.
    pub basis_2d: Vec<[f64; 2]>,
}

fn first_vector(bank: &EmbeddingBank, word: &str) -> Option<Vec<f64>> {
    let e = bank.get(word)?.first()?;
    Some(e.vector.iter().map(|&x| f64::from(x)).collect())
}

/// Probes planted embeddings, removes a rank-`k` subspace estimated from
/// one occurrence of each of the first `pairs` attribute pairs, and probes
/// again with a freshly trained probe. Few pairs give a noisy subspace
/// that leaves part of the gender direction behind.
pub fn hiding_bias(p: Planting, k: usize, pairs: usize) -> Result<HidingBias, String> {
    let lex = Lexicon::builtin();
    let bank = planted_bank(&lex, p)?;
    let before = summarize(&bank, &lex, p.seed)?;
    let sets: Vec<Vec<Vec<f64>>> = lex
        .attribute_pairs()
        .iter()
        .take(pairs)
        .filter_map(|pair| Some(vec![first_vector(&bank, &pair.female)?, first_vector(&bank, &pair.male)?]))
        .collect();
    let subspace = compute_bias_subspace(&sets, k).map_err(|e| e.to_string())?;
    let debiased = bank.map_vectors(|v| {
        let projected = sent_debias(v, &subspace);
        v.copy_from_slice(&projected);
    });
    let after = summarize(&debiased, &lex, p.seed)?;
    Ok(HidingBias {
        before,
        after,
        explained_variance: subspace.explained_variance.clone(),
        basis_2d: subspace.basis.iter().map(|b| [b[0], b[1]]).collect(),
    })
}

#[derive(Debug, Serialize)]
pub struct PowerPoint {
    pub signal: f64,
    pub bias_accuracy: f64,
    pub p_value: f64,
    pub permutation_p_value: f64,
}

/// Randomization-test p-values as the planted stereotype signal grows
/// from 0 to `max_signal` in `steps` steps.
pub fn power_curve(noise: f64, max_signal: f64, steps: usize, seed: u64) -> Result<Vec<PowerPoint>, String> {
    let lex = Lexicon::builtin();
    let steps = steps.clamp(1, 40);
    (0..=steps)
        .map(|i| {
            let signal = max_signal * i as f64 / steps as f64;
            let planting = Planting {
                attribute: 1.0,
                stereotype: signal,
                noise,
                seed: seed.wrapping_add(i as u64),
            };
            let bank = planted_bank(&lex, planting)?;
            let s = summarize(&bank, &lex, planting.seed)?;
            Ok(PowerPoint {
                signal,
                bias_accuracy: s.bias_accuracy,
                p_value: s.p_value,
                permutation_p_value: s.permutation_p_value,
            })
        })
        .collect()
}

fn to_json<T: Serialize>(value: &Result<T, String>) -> String {
    match value {
        Ok(v) => serde_json::to_string(v).unwrap_or_else(|e| error_json(&e.to_string())),
        Err(e) => error_json(e),
    }
}

fn error_json(message: &str) -> String {
    serde_json::json!({ "error": message }).to_string()
}

#[wasm_bindgen(js_name = interventions)]
pub fn interventions_js(text: &str) -> String {
    to_json(&Ok(interventions(text)))
}

#[wasm_bindgen(js_name = hidingBias)]
pub fn hiding_bias_js(attribute: f64, stereotype: f64, noise: f64, k: usize, pairs: usize, seed: u32) -> String {
    let p = Planting {
        attribute,
        stereotype,
        noise,
        seed: seed.into(),
    };
    to_json(&hiding_bias(p, k, pairs))
}

#[wasm_bindgen(js_name = powerCurve)]
pub fn power_curve_js(noise: f64, max_signal: f64, steps: usize, seed: u32) -> String {
    to_json(&power_curve(noise, max_signal, steps, seed.into()))
}
