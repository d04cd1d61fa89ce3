//! SEAT over embedding banks and log-probability bias scores over masked
//! distributions.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::EmbeddingBank;
use crate::error::{Error, Result};
use crate::lexicon::{AttributePair, Lexicon};
use crate::model::{masked_distribution, masked_distribution_at, MaskedLanguageModel, MASK_TOKEN};

/// Floor applied to probabilities before taking logs.
pub const PROBABILITY_FLOOR: f64 = 1e-12;

const DEFAULT_TEMPLATES: &str = include_str!("../data/default_templates.txt");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeatResult {
    /// Raw test statistic (sum over X_f minus sum over X_m).
    pub test_statistic: f64,
    pub effect_size: f64,
    pub per_word_associations: BTreeMap<String, f64>,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_dims(vectors: &[&[f64]], d: usize) -> Result<()> {
    for v in vectors {
        if v.len() != d {
            return Err(Error::Dimension { expected: d, got: v.len() });
        }
    }
    Ok(())
}

fn association_labeled(
    x: (&str, &[f64]),
    a: &[(String, Vec<f64>)],
    b: &[(String, Vec<f64>)],
) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InsufficientData("attribute sets A and B must be nonempty".into()));
    }
    let d = x.1.len();
    let nx = norm(x.1);
    if nx == 0.0 {
        return Err(Error::ZeroNorm(x.0.to_string()));
    }
    let mean_cos = |set: &[(String, Vec<f64>)]| -> Result<f64> {
        let mut total = 0.0;
        for (w, v) in set {
            check_dims(&[v], d)?;
            let nv = norm(v);
            if nv == 0.0 {
                return Err(Error::ZeroNorm(w.clone()));
            }
            total += dot(x.1, v) / (nx * nv);
        }
        Ok(total / set.len() as f64)
    };
    Ok(mean_cos(a)? - mean_cos(b)?)
}

/// Mean cosine to `a` minus mean cosine to `b`, where `x` is the mean of
/// `x_vectors`.
pub fn seat_association(x_vectors: &[Vec<f64>], a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if x_vectors.is_empty() {
        return Err(Error::InsufficientData("target word has no vectors".into()));
    }
    let d = x_vectors[0].len();
    let mut x = vec![0.0; d];
    for v in x_vectors {
        check_dims(&[v], d)?;
        x.iter_mut().zip(v).for_each(|(m, y)| *m += y);
    }
    x.iter_mut().for_each(|m| *m /= x_vectors.len() as f64);
    let label = |prefix: &str, set: &[Vec<f64>]| -> Vec<(String, Vec<f64>)> {
        set.iter().enumerate().map(|(i, v)| (format!("{prefix}[{i}]"), v.clone())).collect()
    };
    association_labeled(("x", &x), &label("A", a), &label("B", b))
}

/// Word-level SEAT of the lexicon's stereotype sets against attribute sets
/// `a_words` and `b_words`. Each word is represented by the mean of its
/// occurrence vectors.
pub fn seat_test(
    bank: &EmbeddingBank,
    lexicon: &Lexicon,
    a_words: &BTreeSet<String>,
    b_words: &BTreeSet<String>,
) -> Result<SeatResult> {
    seat_test_sets(bank, lexicon.stereotypes_female(), lexicon.stereotypes_male(), a_words, b_words)
}

/// [`seat_test`] with explicit target sets.
pub fn seat_test_sets(
    bank: &EmbeddingBank,
    x_f: &BTreeSet<String>,
    x_m: &BTreeSet<String>,
    a_words: &BTreeSet<String>,
    b_words: &BTreeSet<String>,
) -> Result<SeatResult> {
    let mut missing: Vec<String> = bank.missing(x_f.iter().chain(x_m).chain(a_words).chain(b_words));
    missing.sort();
    missing.dedup();
    if !missing.is_empty() {
        return Err(Error::Coverage(missing));
    }
    let reps = |set: &BTreeSet<String>| -> Vec<(String, Vec<f64>)> {
        set.iter().map(|w| (w.clone(), bank.word_mean(w).expect("covered"))).collect()
    };
    let (a, b) = (reps(a_words), reps(b_words));
    let mut per_word = BTreeMap::new();
    let mut sum_f = 0.0;
    let mut sum_m = 0.0;
    let mut all = Vec::new();
    for (set, sum) in [(x_f, &mut sum_f), (x_m, &mut sum_m)] {
        for w in set {
            let x = bank.word_mean(w).expect("covered");
            let s = association_labeled((w, &x), &a, &b)?;
            *sum += s;
            all.push((w.as_str(), s));
            per_word.insert(w.clone(), s);
        }
    }
    // Word order, so that swapping X_f and X_m leaves the spread bit-identical.
    all.sort_by(|x, y| x.0.cmp(y.0));
    let all: Vec<f64> = all.into_iter().map(|(_, s)| s).collect();
    let n = all.len() as f64;
    let mean = all.iter().sum::<f64>() / n;
    let std = (all.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n).sqrt();
    let diff = sum_f / x_f.len() as f64 - sum_m / x_m.len() as f64;
    let effect_size = if std > 0.0 { diff / std } else { 0.0 };
    Ok(SeatResult {
        test_statistic: sum_f - sum_m,
        effect_size,
        per_word_associations: per_word,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LpbsVariant {
    /// Masked attribute slot, stereotype in context.
    Attribute,
    /// Masked stereotype slot, attribute in context.
    Target,
}

/// One `|ls(female) − ls(male)|` term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LpbsTerm {
    pub template: String,
    pub stereotype: String,
    pub female: String,
    pub male: String,
    pub log_score_female: f64,
    pub log_score_male: f64,
    pub difference: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LpbsResult {
    /// Sum over stereotypes and pairs of the template-averaged absolute
    /// log-score difference.
    pub score: f64,
    pub variant: LpbsVariant,
    pub templates: usize,
    pub per_template_terms: Vec<LpbsTerm>,
}

/// Parses a template file: one template per line, `#` comments and blank
/// lines ignored, `{attribute}` and `{target}` each exactly once.
pub fn parse_templates(text: &str) -> Result<Vec<String>> {
    let templates: Vec<String> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_string)
        .collect();
    for t in &templates {
        for p in ["{attribute}", "{target}"] {
            if t.matches(p).count() != 1 {
                return Err(Error::Template(format!("`{t}` must contain {p} exactly once")));
            }
        }
        if t.contains(MASK_TOKEN) {
            return Err(Error::Template(format!("`{t}` must not contain a literal {MASK_TOKEN}")));
        }
    }
    if templates.is_empty() {
        return Err(Error::Template("template file holds no templates".into()));
    }
    Ok(templates)
}

pub fn load_templates(path: impl AsRef<Path>) -> Result<Vec<String>> {
    let path = path.as_ref();
    parse_templates(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

pub fn default_templates() -> Vec<String> {
    parse_templates(DEFAULT_TEMPLATES).expect("shipped templates are valid")
}

fn fill(template: &str, attribute: &str, target: &str) -> String {
    template.replace("{attribute}", attribute).replace("{target}", target)
}

fn log_floor(p: f64) -> f64 {
    p.max(PROBABILITY_FLOOR).ln()
}

/// Attribute-side log-probability bias score.
pub fn attribute_lpbs(
    model: &dyn MaskedLanguageModel,
    templates: &[String],
    stereotypes: &BTreeSet<String>,
    pairs: &[AttributePair],
) -> Result<LpbsResult> {
    lpbs(model, templates, stereotypes, pairs, LpbsVariant::Attribute)
}

/// Target-side log-probability bias score.
pub fn target_lpbs(
    model: &dyn MaskedLanguageModel,
    templates: &[String],
    stereotypes: &BTreeSet<String>,
    pairs: &[AttributePair],
) -> Result<LpbsResult> {
    lpbs(model, templates, stereotypes, pairs, LpbsVariant::Target)
}

fn lpbs(
    model: &dyn MaskedLanguageModel,
    templates: &[String],
    stereotypes: &BTreeSet<String>,
    pairs: &[AttributePair],
    variant: LpbsVariant,
) -> Result<LpbsResult> {
    if templates.is_empty() {
        return Err(Error::Template("no templates".into()));
    }
    let vocab = model.vocabulary();
    let known = |w: &str| vocab.id(w).is_some();
    let xs: Vec<&String> = stereotypes.iter().filter(|x| known(x)).collect();
    let dropped: Vec<&String> = stereotypes.iter().filter(|x| !known(x)).collect();
    if !dropped.is_empty() {
        log::warn!("{} stereotype terms are not single pieces and were dropped", dropped.len());
    }
    let pairs: Vec<&AttributePair> = pairs.iter().filter(|p| known(&p.female) && known(&p.male)).collect();
    if xs.is_empty() || pairs.is_empty() {
        return Err(Error::EmptyEvaluation(format!(
            "{} usable stereotypes and {} usable attribute pairs",
            xs.len(),
            pairs.len()
        )));
    }

    let mut terms = Vec::new();
    let mut score = 0.0;
    for template in templates {
        let attr_first = template.find("{attribute}") < template.find("{target}");
        let both = fill(template, MASK_TOKEN, MASK_TOKEN);
        let which = match (variant, attr_first) {
            (LpbsVariant::Attribute, true) | (LpbsVariant::Target, false) => 0,
            _ => 1,
        };
        let prior = masked_distribution_at(model, &both, which)?;
        let mut template_sum = 0.0;
        for x in &xs {
            for pair in &pairs {
                let ls = |w: &str| -> Result<f64> {
                    let (cond, token) = match variant {
                        LpbsVariant::Attribute => (masked_distribution(model, &fill(template, MASK_TOKEN, x))?, w),
                        LpbsVariant::Target => (masked_distribution(model, &fill(template, w, MASK_TOKEN))?, x.as_str()),
                    };
                    let p = cond.get(token).unwrap_or(0.0);
                    let p0 = prior.get(token).unwrap_or(0.0);
                    Ok(log_floor(p) - log_floor(p0))
                };
                let lf = ls(&pair.female)?;
                let lm = ls(&pair.male)?;
                let difference = (lf - lm).abs();
                template_sum += difference;
                terms.push(LpbsTerm {
                    template: template.clone(),
                    stereotype: x.to_string(),
                    female: pair.female.clone(),
                    male: pair.male.clone(),
                    log_score_female: lf,
                    log_score_male: lm,
                    difference,
                });
            }
        }
        score += template_sum;
    }
    Ok(LpbsResult {
        score: score / templates.len() as f64,
        variant,
        templates: templates.len(),
        per_template_terms: terms,
    })
}

/// Intrinsic section of an audit report.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IntrinsicReport {
    pub seat: Option<SeatResult>,
    pub attribute_lpbs: Option<LpbsResult>,
    pub target_lpbs: Option<LpbsResult>,
}
