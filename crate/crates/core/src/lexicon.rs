//! Attribute, stereotype and name word lists.
//!
//! A lexicon file is a JSON document:
//!
//! ```json
//! {
//!   "attribute_pairs": [["she", "he"], ["woman", "man"]],
//!   "stereotypes_female": ["nurse"],
//!   "stereotypes_male": ["engineer"],
//!   "name_pairs": [["mary", "john"]],
//!   "attributes_female": ["diva"],
//!   "attributes_male": ["bachelor"]
//! }
//! ```
//!
//! `attributes_female` / `attributes_male` are optional unpaired members of
//! the attribute sets. They count as gender-defining words everywhere
//! (probe training, SEAT, harvesting exclusion, scrubbing) but are never
//! swapped, since swapping needs an explicit counterpart.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::{word_spans, CasePattern};

const DEFAULT_LEXICON: &str = include_str!("../data/default_lexicon.json");

/// Binary gender group used throughout the toolkit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Gender {
    #[serde(rename = "f")]
    Female,
    #[serde(rename = "m")]
    Male,
}

impl Gender {
    pub fn flipped(self) -> Self {
        match self {
            Gender::Female => Gender::Male,
            Gender::Male => Gender::Female,
        }
    }

    /// Parses `f`, `female`, `m`, `male` (any case).
    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_lowercase().as_str() {
            "f" | "female" | "woman" => Some(Gender::Female),
            "m" | "male" | "man" => Some(Gender::Male),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct AttributePair {
    pub female: String,
    pub male: String,
}

impl AttributePair {
    pub fn new(female: impl Into<String>, male: impl Into<String>) -> Self {
        Self {
            female: female.into(),
            male: male.into(),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct LexiconFile {
    pub attribute_pairs: Vec<[String; 2]>,
    pub stereotypes_female: Vec<String>,
    pub stereotypes_male: Vec<String>,
    #[serde(default)]
    pub name_pairs: Vec<[String; 2]>,
    #[serde(default)]
    pub attributes_female: Vec<String>,
    #[serde(default)]
    pub attributes_male: Vec<String>,
}

/// Validated word lists. Immutable once built.
#[derive(Debug, Clone)]
pub struct Lexicon {
    attribute_pairs: Vec<AttributePair>,
    name_pairs: Vec<AttributePair>,
    attributes_female: BTreeSet<String>,
    attributes_male: BTreeSet<String>,
    stereotypes_female: BTreeSet<String>,
    stereotypes_male: BTreeSet<String>,
    attribute_swap: BTreeMap<String, String>,
    name_swap: BTreeMap<String, String>,
    warnings: Vec<String>,
}

/// Lowercases a term and checks it is exactly one word.
fn normalize_term(raw: &str, list: &str) -> Result<String> {
    let term = raw.trim().to_lowercase();
    if term.is_empty() {
        return Err(Error::Validation(format!("empty term in {list}")));
    }
    let spans = word_spans(&term);
    if spans.len() != 1 || spans[0] != (0, term.len()) {
        return Err(Error::Validation(format!(
            "`{raw}` in {list} is not a single token"
        )));
    }
    Ok(term)
}

fn collect_set(raw: &[String], list: &str, warnings: &mut Vec<String>) -> Result<BTreeSet<String>> {
    let mut set = BTreeSet::new();
    for r in raw {
        let t = normalize_term(r, list)?;
        if !set.insert(t.clone()) {
            warnings.push(format!("duplicate `{t}` in {list} dropped"));
        }
    }
    Ok(set)
}

fn collect_pairs(
    raw: &[[String; 2]],
    list: &str,
    warnings: &mut Vec<String>,
) -> Result<(Vec<AttributePair>, BTreeMap<String, String>)> {
    let mut pairs = Vec::new();
    let mut swap = BTreeMap::new();
    for [f, m] in raw {
        let f = normalize_term(f, list)?;
        let m = normalize_term(m, list)?;
        if f == m {
            return Err(Error::Validation(format!("`{f}` is paired with itself in {list}")));
        }
        match (swap.get(&f), swap.get(&m)) {
            (Some(other), _) if *other == m => {
                warnings.push(format!("duplicate pair ({f}, {m}) in {list} dropped"));
                continue;
            }
            (Some(_), _) => {
                return Err(Error::Validation(format!("`{f}` appears in two pairs of {list}")))
            }
            (_, Some(_)) => {
                return Err(Error::Validation(format!("`{m}` appears in two pairs of {list}")))
            }
            _ => {}
        }
        swap.insert(f.clone(), m.clone());
        swap.insert(m.clone(), f.clone());
        pairs.push(AttributePair::new(f, m));
    }
    Ok((pairs, swap))
}

impl Lexicon {
    pub fn from_file_data(file: &LexiconFile) -> Result<Self> {
        let mut warnings = Vec::new();
        let (attribute_pairs, attribute_swap) =
            collect_pairs(&file.attribute_pairs, "attribute_pairs", &mut warnings)?;
        let (name_pairs, name_swap) = collect_pairs(&file.name_pairs, "name_pairs", &mut warnings)?;

        let mut attributes_female = collect_set(&file.attributes_female, "attributes_female", &mut warnings)?;
        let mut attributes_male = collect_set(&file.attributes_male, "attributes_male", &mut warnings)?;
        for p in &attribute_pairs {
            attributes_female.insert(p.female.clone());
            attributes_male.insert(p.male.clone());
        }
        let stereotypes_female = collect_set(&file.stereotypes_female, "stereotypes_female", &mut warnings)?;
        let stereotypes_male = collect_set(&file.stereotypes_male, "stereotypes_male", &mut warnings)?;

        if let Some(t) = attributes_female.intersection(&attributes_male).next() {
            return Err(Error::Validation(format!("`{t}` is both a female and a male attribute term")));
        }
        if let Some(t) = stereotypes_female.intersection(&stereotypes_male).next() {
            return Err(Error::Validation(format!("`{t}` is both a female and a male stereotype")));
        }
        for t in stereotypes_female.iter().chain(&stereotypes_male) {
            if attributes_female.contains(t) || attributes_male.contains(t) {
                return Err(Error::Validation(format!("`{t}` is both an attribute term and a stereotype")));
            }
            if name_swap.contains_key(t) {
                return Err(Error::Validation(format!("`{t}` is both a name and a stereotype")));
            }
        }
        for n in name_swap.keys() {
            if attributes_female.contains(n) || attributes_male.contains(n) {
                return Err(Error::Validation(format!("`{n}` is both a name and an attribute term")));
            }
        }
        if attribute_pairs.is_empty() {
            return Err(Error::Validation("attribute_pairs is empty".into()));
        }
        if stereotypes_female.is_empty() || stereotypes_male.is_empty() {
            return Err(Error::Validation("both stereotype sets must be nonempty".into()));
        }
        if name_pairs.is_empty() {
            warnings.push("name_pairs is empty; name intervention is a no-op".into());
        }
        for w in &warnings {
            if w.starts_with("duplicate") {
                log::debug!("lexicon: {w}");
            } else {
                log::warn!("lexicon: {w}");
            }
        }
        Ok(Self {
            attribute_pairs,
            name_pairs,
            attributes_female,
            attributes_male,
            stereotypes_female,
            stereotypes_male,
            attribute_swap,
            name_swap,
            warnings,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: LexiconFile =
            serde_json::from_str(text).map_err(|e| Error::Format(format!("lexicon: {e}")))?;
        Self::from_file_data(&file)
    }

    /// Word lists shipped with the toolkit.
    pub fn builtin() -> Self {
        Self::from_json(DEFAULT_LEXICON).expect("shipped lexicon is valid")
    }

    /// Lexicon limited to the attribute and stereotype terms accepted by
    /// `keep`. Pairs survive only when both members do; names are kept.
    pub fn restricted(&self, keep: impl Fn(&str) -> bool) -> Result<Self> {
        let mut file = self.to_file_data();
        file.attribute_pairs.retain(|[f, m]| keep(f) && keep(m));
        for list in [
            &mut file.attributes_female,
            &mut file.attributes_male,
            &mut file.stereotypes_female,
            &mut file.stereotypes_male,
        ] {
            list.retain(|t| keep(t));
        }
        Self::from_file_data(&file)
    }

    pub fn to_file_data(&self) -> LexiconFile {
        let pairs = |v: &[AttributePair]| v.iter().map(|p| [p.female.clone(), p.male.clone()]).collect();
        let paired: BTreeSet<&String> = self.attribute_swap.keys().collect();
        LexiconFile {
            attribute_pairs: pairs(&self.attribute_pairs),
            stereotypes_female: self.stereotypes_female.iter().cloned().collect(),
            stereotypes_male: self.stereotypes_male.iter().cloned().collect(),
            name_pairs: pairs(&self.name_pairs),
            attributes_female: self.attributes_female.iter().filter(|t| !paired.contains(t)).cloned().collect(),
            attributes_male: self.attributes_male.iter().filter(|t| !paired.contains(t)).cloned().collect(),
        }
    }

    pub fn attribute_pairs(&self) -> &[AttributePair] {
        &self.attribute_pairs
    }
    pub fn name_pairs(&self) -> &[AttributePair] {
        &self.name_pairs
    }
    /// W_f: every female attribute term, paired or not.
    pub fn attributes_female(&self) -> &BTreeSet<String> {
        &self.attributes_female
    }
    pub fn attributes_male(&self) -> &BTreeSet<String> {
        &self.attributes_male
    }
    pub fn stereotypes_female(&self) -> &BTreeSet<String> {
        &self.stereotypes_female
    }
    pub fn stereotypes_male(&self) -> &BTreeSet<String> {
        &self.stereotypes_male
    }
    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    /// W = W_f ∪ W_m.
    pub fn attribute_terms(&self) -> BTreeSet<String> {
        self.attributes_female.union(&self.attributes_male).cloned().collect()
    }

    /// X = X_f ∪ X_m.
    pub fn stereotype_terms(&self) -> BTreeSet<String> {
        self.stereotypes_female.union(&self.stereotypes_male).cloned().collect()
    }

    pub fn names(&self) -> BTreeSet<String> {
        self.name_swap.keys().cloned().collect()
    }

    /// Gender of an attribute term (case-insensitive).
    pub fn attribute_gender(&self, term: &str) -> Option<Gender> {
        let t = term.to_lowercase();
        if self.attributes_female.contains(&t) {
            Some(Gender::Female)
        } else if self.attributes_male.contains(&t) {
            Some(Gender::Male)
        } else {
            None
        }
    }

    pub fn stereotype_gender(&self, term: &str) -> Option<Gender> {
        let t = term.to_lowercase();
        if self.stereotypes_female.contains(&t) {
            Some(Gender::Female)
        } else if self.stereotypes_male.contains(&t) {
            Some(Gender::Male)
        } else {
            None
        }
    }

    pub fn name_gender(&self, term: &str) -> Option<Gender> {
        let t = term.to_lowercase();
        self.name_pairs.iter().find_map(|p| {
            if p.female == t {
                Some(Gender::Female)
            } else if p.male == t {
                Some(Gender::Male)
            } else {
                None
            }
        })
    }

    /// True if `token` would be deleted by attribute scrubbing.
    pub fn is_scrubbable(&self, token: &str) -> bool {
        let t = token.to_lowercase();
        self.attributes_female.contains(&t) || self.attributes_male.contains(&t) || self.name_swap.contains_key(&t)
    }
}

pub fn load_lexicon(path: impl AsRef<Path>) -> Result<Lexicon> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Lexicon::from_json(&text)
}

/// Counterpart of `token` in its attribute pair (or name pair when
/// `use_names`), carrying over the token's capitalization.
pub fn counterfactual_of(token: &str, lexicon: &Lexicon, use_names: bool) -> Option<String> {
    let key = token.to_lowercase();
    let hit = lexicon
        .attribute_swap
        .get(&key)
        .or_else(|| if use_names { lexicon.name_swap.get(&key) } else { None })?;
    Some(CasePattern::of(token).apply(hit))
}

/// Swaps every swappable word of `text` at once. Returns `None` when the
/// text holds no swappable word.
pub fn counterfactual_text(text: &str, lexicon: &Lexicon, use_names: bool) -> Option<String> {
    let mut changed = false;
    let out = crate::text::rewrite_words(text, |w| {
        let swapped = counterfactual_of(w, lexicon, use_names);
        changed |= swapped.is_some();
        swapped
    });
    changed.then_some(out)
}

/// Pair-consistent train/test split of the attribute terms.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeSplit {
    pub train_words: BTreeSet<String>,
    pub test_words: BTreeSet<String>,
    pub seed: u64,
}

/// Splits W into W_T and W_I. Both members of an attribute pair land on the
/// same side; unpaired attribute terms are split as singleton units.
pub fn split_attribute_terms(lexicon: &Lexicon, train_fraction: f64, seed: u64) -> Result<AttributeSplit> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!("train fraction {train_fraction} outside (0, 1)")));
    }
    let mut units: Vec<Vec<String>> = lexicon
        .attribute_pairs
        .iter()
        .map(|p| vec![p.female.clone(), p.male.clone()])
        .collect();
    for t in lexicon.attributes_female.iter().chain(&lexicon.attributes_male) {
        if !lexicon.attribute_swap.contains_key(t) {
            units.push(vec![t.clone()]);
        }
    }
    if units.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "need at least 2 attribute pairs to split, found {}",
            units.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    units.shuffle(&mut rng);
    let n_train = ((train_fraction * units.len() as f64).round() as usize).clamp(1, units.len() - 1);
    let mut split = AttributeSplit {
        train_words: BTreeSet::new(),
        test_words: BTreeSet::new(),
        seed,
    };
    for (i, unit) in units.into_iter().enumerate() {
        let side = if i < n_train { &mut split.train_words } else { &mut split.test_words };
        side.extend(unit);
    }
    Ok(split)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small() -> Lexicon {
        Lexicon::from_json(
            r#"{"attribute_pairs": [["she","he"],["woman","man"]],
                "stereotypes_female": ["nurse"], "stereotypes_male": ["engineer"],
                "name_pairs": [["mary","john"]]}"#,
        )
        .unwrap()
    }

    fn ten_pairs() -> Lexicon {
        let pairs: Vec<[String; 2]> = (0..10).map(|i| [format!("f{i}"), format!("m{i}")]).collect();
        Lexicon::from_file_data(&LexiconFile {
            attribute_pairs: pairs,
            stereotypes_female: vec!["nurse".into()],
            stereotypes_male: vec!["engineer".into()],
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn direct_construction_counts() {
        let lex = small();
        assert_eq!(lex.attribute_terms().len(), 4);
        assert_eq!(lex.stereotype_terms().len(), 2);
    }

    #[test]
    fn builtin_has_appendix_words() {
        let lex = Lexicon::builtin();
        assert!(lex.stereotypes_female().contains("nurse"));
        assert!(lex.stereotypes_female().contains("softball"));
        assert!(lex.stereotypes_male().contains("warrior"));
        assert!(lex.stereotypes_male().contains("engineer"));
        assert!(lex.attributes_female().contains("dowry"));
        assert!(lex.attributes_male().contains("bachelor"));
        // repeated entries such as 'mechanic' and 'nun' are collapsed with a warning
        assert!(lex.warnings().iter().any(|w| w.contains("mechanic")));
        assert!(lex.warnings().iter().any(|w| w.contains("`nun`")));
    }

    #[test]
    fn stereotype_in_both_sets_is_rejected() {
        let err = Lexicon::from_json(
            r#"{"attribute_pairs": [["she","he"]],
                "stereotypes_female": ["nurse"], "stereotypes_male": ["nurse","engineer"]}"#,
        )
        .unwrap_err();
        assert!(err.to_string().contains("nurse"), "{err}");
    }

    #[test]
    fn term_in_two_pairs_is_rejected() {
        let err = Lexicon::from_json(
            r#"{"attribute_pairs": [["her","his"],["her","him"]],
                "stereotypes_female": ["nurse"], "stereotypes_male": ["engineer"]}"#,
        )
        .unwrap_err();
        assert!(err.to_string().contains("her"));
    }

    #[test]
    fn multi_word_entries_are_rejected() {
        let err = Lexicon::from_json(
            r#"{"attribute_pairs": [["she","he"]],
                "stereotypes_female": ["flight attendant"], "stereotypes_male": ["engineer"]}"#,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn malformed_file_is_a_format_error() {
        assert!(matches!(Lexicon::from_json("{not json"), Err(Error::Format(_))));
    }

    #[test]
    fn counterfactuals() {
        let lex = small();
        assert_eq!(counterfactual_of("she", &lex, false).as_deref(), Some("he"));
        assert_eq!(counterfactual_of("She", &lex, false).as_deref(), Some("He"));
        assert_eq!(counterfactual_of("WOMAN", &lex, false).as_deref(), Some("MAN"));
        assert_eq!(counterfactual_of("nurse", &lex, true), None);
        assert_eq!(counterfactual_of("Mary", &lex, false), None);
        assert_eq!(counterfactual_of("Mary", &lex, true).as_deref(), Some("John"));
    }

    #[test]
    fn split_cardinalities() {
        let lex = ten_pairs();
        let s = split_attribute_terms(&lex, 0.8, 7).unwrap();
        assert_eq!(s.train_words.len(), 16);
        assert_eq!(s.test_words.len(), 4);
        assert!(s.train_words.is_disjoint(&s.test_words));
        assert_eq!(s, split_attribute_terms(&lex, 0.8, 7).unwrap());

        let s = split_attribute_terms(&small(), 0.5, 1).unwrap();
        assert_eq!((s.train_words.len(), s.test_words.len()), (2, 2));
    }

    #[test]
    fn split_needs_two_pairs() {
        let lex = Lexicon::from_json(
            r#"{"attribute_pairs": [["she","he"]],
                "stereotypes_female": ["nurse"], "stereotypes_male": ["engineer"]}"#,
        )
        .unwrap();
        assert!(matches!(split_attribute_terms(&lex, 0.5, 0), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn builtin_is_involutive() {
        let lex = Lexicon::builtin();
        for t in lex.attribute_terms() {
            if let Some(c) = counterfactual_of(&t, &lex, false) {
                assert_eq!(counterfactual_of(&c, &lex, false).as_deref(), Some(t.as_str()));
            }
        }
    }

    proptest! {
        #[test]
        fn split_is_pair_consistent(seed in any::<u64>(), frac in 0.05f64..0.95) {
            let lex = ten_pairs();
            let s = split_attribute_terms(&lex, frac, seed).unwrap();
            let all: BTreeSet<String> = s.train_words.union(&s.test_words).cloned().collect();
            prop_assert_eq!(all, lex.attribute_terms());
            prop_assert!(s.train_words.is_disjoint(&s.test_words));
            for p in lex.attribute_pairs() {
                prop_assert_eq!(s.train_words.contains(&p.female), s.train_words.contains(&p.male));
            }
        }

        #[test]
        fn counterfactual_involution(idx in 0usize..64, upper in any::<bool>()) {
            let lex = Lexicon::builtin();
            let pairs = lex.attribute_pairs();
            let p = &pairs[idx % pairs.len()];
            let t = if upper { CasePattern::Capitalized.apply(&p.female) } else { p.female.clone() };
            let back = counterfactual_of(&counterfactual_of(&t, &lex, true).unwrap(), &lex, true).unwrap();
            prop_assert_eq!(back, t);
        }
    }
}
