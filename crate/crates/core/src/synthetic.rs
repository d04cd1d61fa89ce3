//! Planted-bias synthetic data.
//!
//! Generates a small pretraining corpus in which stereotype words co-occur
//! with same-gender attribute words at a configurable rate, a neutral-context
//! corpus for harvesting, and a binary downstream task whose label is
//! correlated with the gender of the text's subject. The `builtin-tiny`
//! model is pretrained on this corpus, so every pipeline stage can run
//! offline and deterministically.

use std::collections::BTreeSet;
use std::sync::Arc;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::downstream::LabeledExample;
use crate::error::Result;
use crate::lexicon::{Gender, Lexicon};
use crate::model::registry::{kv_get, parse_kv};
use crate::model::{ContextualEncoder, EncoderConfig, MlmConfig, Vocabulary};
use crate::text::substream_seed;

const PLANTED_TEMPLATES: &[&str] = &[
    "{a} works as a {s} .",
    "the {a} is a {s} .",
    "{a} wanted to become a {s} .",
    "my {a} met the {s} at work .",
    "everyone says the {a} is a good {s} .",
    "{a} is a {s} .",
];

const NEUTRAL_STEREOTYPE_TEMPLATES: &[&str] = &[
    "the {s} arrived early today .",
    "we talked to the {s} yesterday .",
    "a {s} was waiting outside .",
    "the new {s} looked tired .",
    "our {s} finished the job .",
];

const NEUTRAL_ATTRIBUTE_TEMPLATES: &[&str] = &[
    "{a} went to the store .",
    "{a} was reading a book .",
    "yesterday {a} walked home .",
    "the {a} looked tired .",
    "{a} finished the job .",
];

const COHERENT_TEMPLATES: &[&str] = &[
    "{a} called {b} yesterday .",
    "{a} lives with {b} .",
    "{a} and {b} went home .",
];

const POSITIVE_CUES: &[&str] = &["great", "excellent", "wonderful", "lovely"];
const NEGATIVE_CUES: &[&str] = &["awful", "terrible", "poor", "boring"];
const TASK_NOUNS: &[&str] = &["book", "film", "store", "job", "meal", "trip"];
const TASK_TEMPLATE: &str = "{a} wrote a {c} review of the {n} .";

/// Word inventory drawn from a lexicon.
#[derive(Debug, Clone)]
pub struct SyntheticWorld {
    attributes_female: Vec<String>,
    attributes_male: Vec<String>,
    stereotypes_female: Vec<String>,
    stereotypes_male: Vec<String>,
    names: Vec<(String, String)>,
    seed: u64,
}

impl SyntheticWorld {
    pub fn new(lexicon: &Lexicon, seed: u64) -> Self {
        let list = |set: &BTreeSet<String>| set.iter().cloned().collect::<Vec<_>>();
        Self {
            attributes_female: list(lexicon.attributes_female()),
            attributes_male: list(lexicon.attributes_male()),
            stereotypes_female: list(lexicon.stereotypes_female()),
            stereotypes_male: list(lexicon.stereotypes_male()),
            names: lexicon
                .name_pairs()
                .iter()
                .map(|p| (p.female.clone(), p.male.clone()))
                .collect(),
            seed,
        }
    }

    /// Every word the generators can emit, plus the full stereotype lists.
    pub fn vocabulary(&self) -> Vocabulary {
        let mut words: BTreeSet<String> = BTreeSet::new();
        for (f, m) in &self.names {
            words.insert(f.clone());
            words.insert(m.clone());
        }
        words.extend(self.attributes_female.iter().cloned());
        words.extend(self.attributes_male.iter().cloned());
        words.extend(self.stereotypes_female.iter().cloned());
        words.extend(self.stereotypes_male.iter().cloned());
        let empty = Vocabulary::from_words(Vec::<String>::new());
        for t in PLANTED_TEMPLATES
            .iter()
            .chain(NEUTRAL_STEREOTYPE_TEMPLATES)
            .chain(NEUTRAL_ATTRIBUTE_TEMPLATES)
            .chain(COHERENT_TEMPLATES)
            .chain(&[TASK_TEMPLATE])
        {
            let bare = ["{a}", "{b}", "{s}", "{c}", "{n}"].iter().fold(t.to_string(), |s, p| s.replace(p, " "));
            words.extend(empty.tokenize(&bare).into_iter().map(|(w, _)| w));
        }
        words.extend(POSITIVE_CUES.iter().chain(NEGATIVE_CUES).chain(TASK_NOUNS).map(|s| s.to_string()));
        Vocabulary::from_words(words)
    }

    fn pick_stereotype(&self, gender: Gender, rng: &mut ChaCha8Rng) -> &str {
        let pool = match gender {
            Gender::Female => &self.stereotypes_female,
            Gender::Male => &self.stereotypes_male,
        };
        pool.choose(rng).expect("nonempty stereotype list")
    }

    fn pick_attribute(&self, gender: Gender, rng: &mut ChaCha8Rng) -> &str {
        let pool = match gender {
            Gender::Female => &self.attributes_female,
            Gender::Male => &self.attributes_male,
        };
        pool.choose(rng).expect("nonempty attribute list")
    }

    fn pick_name(&self, gender: Gender, rng: &mut ChaCha8Rng) -> Option<&str> {
        self.names.choose(rng).map(|(f, m)| match gender {
            Gender::Female => f.as_str(),
            Gender::Male => m.as_str(),
        })
    }

    /// Pretraining corpus. In planted sentences the stereotype matches the
    /// attribute's gender with probability `bias`; coherent sentences pair
    /// two attribute terms of the same gender.
    pub fn pretraining_corpus(&self, sentences: usize, bias: f64) -> Vec<String> {
        let mut rng = ChaCha8Rng::seed_from_u64(substream_seed(self.seed, "pretraining-corpus"));
        let mut out = Vec::with_capacity(sentences);
        for _ in 0..sentences {
            let gender = if rng.random::<bool>() { Gender::Female } else { Gender::Male };
            let kind = rng.random::<f64>();
            let line = if kind < 0.3 {
                let stereo_gender = if rng.random::<f64>() < bias { gender } else { gender.flipped() };
                let subject = if rng.random::<f64>() < 0.15 {
                    self.pick_name(gender, &mut rng).unwrap_or_else(|| self.pick_attribute(gender, &mut rng)).to_string()
                } else {
                    self.pick_attribute(gender, &mut rng).to_string()
                };
                PLANTED_TEMPLATES
                    .choose(&mut rng)
                    .unwrap()
                    .replace("{a}", &subject)
                    .replace("{s}", self.pick_stereotype(stereo_gender, &mut rng))
            } else if kind < 0.6 {
                COHERENT_TEMPLATES
                    .choose(&mut rng)
                    .unwrap()
                    .replace("{a}", self.pick_attribute(gender, &mut rng))
                    .replace("{b}", self.pick_attribute(gender, &mut rng))
            } else if kind < 0.8 {
                let g = if rng.random::<bool>() { Gender::Female } else { Gender::Male };
                NEUTRAL_STEREOTYPE_TEMPLATES
                    .choose(&mut rng)
                    .unwrap()
                    .replace("{s}", self.pick_stereotype(g, &mut rng))
            } else {
                NEUTRAL_ATTRIBUTE_TEMPLATES
                    .choose(&mut rng)
                    .unwrap()
                    .replace("{a}", self.pick_attribute(gender, &mut rng))
            };
            out.push(line);
        }
        out
    }

    /// Binary task: label 1 with probability `gender_skew` for female
    /// subjects and `1 - gender_skew` for male subjects; the sentiment cue
    /// agrees with the label with probability `cue_reliability`.
    pub fn downstream_dataset(&self, examples: usize, gender_skew: f64, cue_reliability: f64) -> Vec<LabeledExample> {
        let mut rng = ChaCha8Rng::seed_from_u64(substream_seed(self.seed, "downstream-dataset"));
        (0..examples)
            .map(|i| {
                let group = if rng.random::<bool>() { Gender::Female } else { Gender::Male };
                let p1 = if group == Gender::Female { gender_skew } else { 1.0 - gender_skew };
                let label = usize::from(rng.random::<f64>() < p1);
                let cue_positive = if rng.random::<f64>() < cue_reliability { label == 1 } else { rng.random::<bool>() };
                let cue = if cue_positive { POSITIVE_CUES } else { NEGATIVE_CUES }.choose(&mut rng).unwrap();
                let subject = if rng.random::<bool>() {
                    self.pick_name(group, &mut rng).unwrap_or_else(|| self.pick_attribute(group, &mut rng)).to_string()
                } else {
                    self.pick_attribute(group, &mut rng).to_string()
                };
                let noun = TASK_NOUNS.choose(&mut rng).unwrap();
                LabeledExample {
                    text: TASK_TEMPLATE.replace("{a}", &subject).replace("{c}", cue).replace("{n}", noun),
                    label,
                    group,
                    example_id: i as u64,
                }
            })
            .collect()
    }
}

/// Parameters of the `builtin-tiny` model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TinyModelSpec {
    pub seed: u64,
    pub hidden: usize,
    pub layers: usize,
    pub epochs: usize,
    pub sentences: usize,
    pub bias: f64,
}

impl Default for TinyModelSpec {
    fn default() -> Self {
        Self {
            seed: 7,
            hidden: 32,
            layers: 1,
            epochs: 8,
            sentences: 20000,
            bias: 0.85,
        }
    }
}

impl TinyModelSpec {
    pub fn parse(args: &str) -> Result<Self> {
        let kv = parse_kv(args)?;
        let d = Self::default();
        Ok(Self {
            seed: kv_get(&kv, "seed", d.seed)?,
            hidden: kv_get(&kv, "hidden", d.hidden)?,
            layers: kv_get(&kv, "layers", d.layers)?,
            epochs: kv_get(&kv, "epochs", d.epochs)?,
            sentences: kv_get(&kv, "sentences", d.sentences)?,
            bias: kv_get(&kv, "bias", d.bias)?,
        })
    }

    pub fn identifier(&self) -> String {
        format!(
            "builtin-tiny:seed={},hidden={},layers={},epochs={},sentences={},bias={}",
            self.seed, self.hidden, self.layers, self.epochs, self.sentences, self.bias
        )
    }
}

/// Pretrains the tiny masked LM on the synthetic corpus of the builtin lexicon.
pub fn pretrain_tiny_model(spec: &TinyModelSpec) -> Result<ContextualEncoder> {
    let world = SyntheticWorld::new(&Lexicon::builtin(), spec.seed);
    let corpus = world.pretraining_corpus(spec.sentences, spec.bias);
    let config = EncoderConfig {
        hidden_size: spec.hidden,
        layers: spec.layers,
        max_sequence_length: 128,
    };
    let mut enc = ContextualEncoder::new(spec.identifier(), Arc::new(world.vocabulary()), config, spec.seed);
    enc.train_mlm(
        &corpus,
        &MlmConfig {
            epochs: spec.epochs,
            learning_rate: 0.01,
            batch_size: 16,
            mask_probability: 0.15,
            seed: substream_seed(spec.seed, "mlm"),
        },
    )?;
    Ok(enc)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpus_words_are_in_vocabulary() {
        let world = SyntheticWorld::new(&Lexicon::builtin(), 1);
        let vocab = world.vocabulary();
        for line in world.pretraining_corpus(300, 0.8) {
            for (w, id) in vocab.tokenize(&line) {
                assert_ne!(id, vocab.unk_id(), "`{w}` missing from `{line}`");
            }
        }
        for ex in world.downstream_dataset(100, 0.75, 0.75) {
            assert!(vocab.tokenize(&ex.text).iter().all(|t| t.1 != vocab.unk_id()), "{}", ex.text);
        }
    }

    #[test]
    fn generators_are_deterministic() {
        let a = SyntheticWorld::new(&Lexicon::builtin(), 3);
        let b = SyntheticWorld::new(&Lexicon::builtin(), 3);
        assert_eq!(a.pretraining_corpus(50, 0.8), b.pretraining_corpus(50, 0.8));
    }
}
