//! Downstream fairness: dataset ingestion, data interventions, k-fold
//! finetuning and group / counterfactual metrics.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lexicon::{counterfactual_text, Gender, Lexicon};
use crate::model::{ClassifierConfig, ContextualEncoder, SequenceClassifier, TextClassifier};
use crate::text::{normalize_whitespace, rewrite_words, substream_seed};

/// One labeled text with its protected-group tag.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub text: String,
    pub label: usize,
    pub group: Gender,
    pub example_id: u64,
}

/// Id given to the counterfactual copy of an example.
pub fn counterfactual_id(id: u64) -> u64 {
    id ^ (1 << 63)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    BiasInBios,
    Jigsaw,
    /// Header with text, label and gender columns; labels are integers or names.
    Generic,
    /// Built-in planted-bias binary task.
    Synthetic,
}

/// Column names and delimiter of a dataset file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SchemaMapping {
    pub text: String,
    pub label: String,
    pub gender: String,
    pub toxicity: String,
    pub female_score: String,
    pub male_score: String,
    pub delimiter: char,
}

impl Default for SchemaMapping {
    fn default() -> Self {
        Self {
            text: "text".into(),
            label: "label".into(),
            gender: "gender".into(),
            toxicity: "toxicity".into(),
            female_score: "female".into(),
            male_score: "male".into(),
            delimiter: ',',
        }
    }
}

/// Row accounting of an ingestion pass.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestStats {
    pub rows: usize,
    pub kept: usize,
    /// Rows with missing or unparsable fields.
    pub malformed: usize,
    /// Well-formed rows removed by a selection rule.
    pub excluded: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub examples: Vec<LabeledExample>,
    pub class_names: Vec<String>,
    pub stats: IngestStats,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }
}

struct Table {
    rows: Vec<BTreeMap<String, String>>,
}

fn read_table(path: &Path, schema: &SchemaMapping) -> Result<Table> {
    let delimiter = u8::try_from(schema.delimiter)
        .map_err(|_| Error::Config(format!("delimiter `{}` is not a single byte", schema.delimiter)))?;
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .flexible(true)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let headers: Vec<String> = reader.headers().map_err(|e| csv_error(path, e))?.iter().map(str::to_string).collect();
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        rows.push(headers.iter().cloned().zip(rec.iter().map(str::to_string)).collect());
    }
    Ok(Table { rows })
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other:?}", path.display())),
    }
}

fn field<'a>(row: &'a BTreeMap<String, String>, name: &str) -> Option<&'a str> {
    row.get(name).map(|s| s.trim()).filter(|s| !s.is_empty())
}

/// Keeps the seven most female-dominated and seven most male-dominated
/// professions (by share of female biographies).
pub fn ingest_bias_in_bios(path: impl AsRef<Path>, schema: &SchemaMapping) -> Result<Dataset> {
    let table = read_table(path.as_ref(), schema)?;
    let mut stats = IngestStats {
        rows: table.rows.len(),
        ..Default::default()
    };
    let mut parsed = Vec::new();
    for row in &table.rows {
        match (field(row, &schema.text), field(row, &schema.label), field(row, &schema.gender).and_then(Gender::parse)) {
            (Some(t), Some(p), Some(g)) => parsed.push((t.to_string(), p.to_lowercase(), g)),
            _ => stats.malformed += 1,
        }
    }
    let mut counts: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for (_, p, g) in &parsed {
        let c = counts.entry(p.as_str()).or_default();
        if *g == Gender::Female {
            c.0 += 1;
        } else {
            c.1 += 1;
        }
    }
    let selected = select_professions(&counts)?;
    let class_names: Vec<String> = selected.iter().map(|s| s.to_string()).collect();
    let mut examples = Vec::new();
    for (i, (text, p, g)) in parsed.iter().enumerate() {
        match class_names.iter().position(|c| c == p) {
            Some(label) => examples.push(LabeledExample {
                text: text.clone(),
                label,
                group: *g,
                example_id: i as u64,
            }),
            None => stats.excluded += 1,
        }
    }
    stats.kept = examples.len();
    Ok(Dataset { examples, class_names, stats })
}

/// Top seven professions at each end of the female-share ranking, in name
/// order. Ties in share break by name.
pub fn select_professions<'a>(counts: &BTreeMap<&'a str, (usize, usize)>) -> Result<BTreeSet<&'a str>> {
    if counts.len() < 14 {
        return Err(Error::Config(format!(
            "need at least 14 professions, found {}",
            counts.len()
        )));
    }
    let share = |(f, m): (usize, usize)| f as f64 / (f + m) as f64;
    let mut ranked: Vec<(&str, f64)> = counts.iter().map(|(p, c)| (*p, share(*c))).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(b.0)));
    let mut selected: BTreeSet<&str> = ranked[..7].iter().map(|r| r.0).collect();
    ranked.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(b.0)));
    selected.extend(ranked[..7].iter().map(|r| r.0));
    Ok(selected)
}

/// Label 1 when toxicity > 0.5, label 0 when toxicity is exactly 0; group
/// g when g's score exceeds 0.5 and the other gender's score is 0.
pub fn ingest_jigsaw(path: impl AsRef<Path>, schema: &SchemaMapping) -> Result<Dataset> {
    let table = read_table(path.as_ref(), schema)?;
    let mut stats = IngestStats {
        rows: table.rows.len(),
        ..Default::default()
    };
    let mut examples = Vec::new();
    let score = |row: &BTreeMap<String, String>, name: &str| -> std::result::Result<Option<f64>, ()> {
        match field(row, name) {
            None => Ok(None),
            Some(s) => s.parse::<f64>().ok().filter(|v| (0.0..=1.0).contains(v)).map(Some).ok_or(()),
        }
    };
    for (i, row) in table.rows.iter().enumerate() {
        let (Some(text), Ok(Some(tox)), Ok(female), Ok(male)) = (
            field(row, &schema.text),
            score(row, &schema.toxicity),
            score(row, &schema.female_score),
            score(row, &schema.male_score),
        ) else {
            stats.malformed += 1;
            continue;
        };
        let label = if tox > 0.5 {
            1
        } else if tox == 0.0 {
            0
        } else {
            stats.excluded += 1;
            continue;
        };
        let group = match (female, male) {
            (Some(f), Some(m)) if f > 0.5 && m == 0.0 => Gender::Female,
            (Some(f), Some(m)) if m > 0.5 && f == 0.0 => Gender::Male,
            _ => {
                stats.excluded += 1;
                continue;
            }
        };
        examples.push(LabeledExample {
            text: text.to_string(),
            label,
            group,
            example_id: i as u64,
        });
    }
    stats.kept = examples.len();
    Ok(Dataset {
        examples,
        class_names: vec!["non-toxic".into(), "toxic".into()],
        stats,
    })
}

/// Text, label and gender columns. Integer labels are used as class ids;
/// otherwise label names are sorted into class ids.
pub fn ingest_generic(path: impl AsRef<Path>, schema: &SchemaMapping) -> Result<Dataset> {
    let table = read_table(path.as_ref(), schema)?;
    let mut stats = IngestStats {
        rows: table.rows.len(),
        ..Default::default()
    };
    let mut parsed = Vec::new();
    for (i, row) in table.rows.iter().enumerate() {
        match (field(row, &schema.text), field(row, &schema.label), field(row, &schema.gender).and_then(Gender::parse)) {
            (Some(t), Some(l), Some(g)) => parsed.push((i, t.to_string(), l.to_string(), g)),
            _ => stats.malformed += 1,
        }
    }
    let numeric = parsed.iter().all(|p| p.2.parse::<usize>().is_ok());
    let class_names: Vec<String> = if numeric {
        let max = parsed.iter().map(|p| p.2.parse::<usize>().unwrap_or(0)).max().unwrap_or(0);
        (0..=max).map(|c| c.to_string()).collect()
    } else {
        parsed.iter().map(|p| p.2.clone()).collect::<BTreeSet<_>>().into_iter().collect()
    };
    let examples: Vec<LabeledExample> = parsed
        .into_iter()
        .map(|(i, text, l, group)| LabeledExample {
            label: class_names.iter().position(|c| *c == l).unwrap_or(0),
            text,
            group,
            example_id: i as u64,
        })
        .collect();
    stats.kept = examples.len();
    Ok(Dataset { examples, class_names, stats })
}

/// Deletes every attribute term and name, then normalizes whitespace.
pub fn scrub_text(text: &str, lexicon: &Lexicon) -> String {
    normalize_whitespace(&rewrite_words(text, |w| lexicon.is_scrubbable(w).then(String::new)))
}

pub fn scrub_attributes(examples: &[LabeledExample], lexicon: &Lexicon) -> Vec<LabeledExample> {
    examples
        .iter()
        .map(|e| LabeledExample {
            text: scrub_text(&e.text, lexicon),
            ..e.clone()
        })
        .collect()
}

/// Originals followed by the counterfactual of every example holding a
/// swappable attribute term or name; counterfactuals keep the label and
/// flip the group.
pub fn swap_attributes(examples: &[LabeledExample], lexicon: &Lexicon) -> Vec<LabeledExample> {
    let mut out = examples.to_vec();
    out.extend(examples.iter().filter_map(|e| {
        counterfactual_text(&e.text, lexicon, true).map(|text| LabeledExample {
            text,
            label: e.label,
            group: e.group.flipped(),
            example_id: counterfactual_id(e.example_id),
        })
    }));
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Intervention {
    #[default]
    Default,
    Scrubbing,
    Swapping,
}

impl Intervention {
    pub fn apply(self, examples: &[LabeledExample], lexicon: &Lexicon) -> Vec<LabeledExample> {
        match self {
            Intervention::Default => examples.to_vec(),
            Intervention::Scrubbing => scrub_attributes(examples, lexicon),
            Intervention::Swapping => swap_attributes(examples, lexicon),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    /// Binary: signed TPR_f − TPR_m. Multiclass: mean over classes of |gap|.
    pub tprd: f64,
    pub fprd: f64,
    pub acc_f: f64,
    pub acc_m: f64,
    /// Per class TPR_f − TPR_m; `None` where a group has no positives.
    pub per_class_tpr_gap: Vec<Option<f64>>,
    pub per_class_fpr_gap: Vec<Option<f64>>,
    pub skipped_classes: Vec<usize>,
}

fn rate(hits: usize, total: usize) -> Option<f64> {
    (total > 0).then(|| hits as f64 / total as f64)
}

/// TPR/FPR gaps and per-group accuracy with female as the reference group.
pub fn compute_group_metrics(
    predictions: &[usize],
    labels: &[usize],
    groups: &[Gender],
    num_classes: usize,
) -> Result<GroupMetrics> {
    if predictions.len() != labels.len() || labels.len() != groups.len() {
        return Err(Error::Dimension {
            expected: labels.len(),
            got: predictions.len().min(groups.len()),
        });
    }
    let idx = |g: Gender| usize::from(g == Gender::Male);
    // [group][class] counts of positives, true positives, negatives, false positives.
    let mut pos = vec![vec![0usize; num_classes]; 2];
    let mut tp = pos.clone();
    let mut neg = pos.clone();
    let mut fp = pos.clone();
    let mut correct = [0usize; 2];
    let mut total = [0usize; 2];
    for ((&p, &y), &g) in predictions.iter().zip(labels).zip(groups) {
        let gi = idx(g);
        total[gi] += 1;
        correct[gi] += usize::from(p == y);
        for c in 0..num_classes {
            if y == c {
                pos[gi][c] += 1;
                tp[gi][c] += usize::from(p == c);
            } else {
                neg[gi][c] += 1;
                fp[gi][c] += usize::from(p == c);
            }
        }
    }
    let gap = |hits: &Vec<Vec<usize>>, base: &Vec<Vec<usize>>, c: usize| -> Option<f64> {
        Some(rate(hits[0][c], base[0][c])? - rate(hits[1][c], base[1][c])?)
    };
    let per_class_tpr_gap: Vec<Option<f64>> = (0..num_classes).map(|c| gap(&tp, &pos, c)).collect();
    let per_class_fpr_gap: Vec<Option<f64>> = (0..num_classes).map(|c| gap(&fp, &neg, c)).collect();
    let skipped_classes: Vec<usize> = (0..num_classes).filter(|&c| per_class_tpr_gap[c].is_none()).collect();
    if !skipped_classes.is_empty() {
        log::warn!("classes {skipped_classes:?} lack positives in a group and are skipped");
    }
    let aggregate = |gaps: &[Option<f64>]| -> f64 {
        if num_classes == 2 {
            gaps[1].unwrap_or(0.0)
        } else {
            let usable: Vec<f64> = gaps.iter().flatten().map(|g| g.abs()).collect();
            if usable.is_empty() {
                0.0
            } else {
                usable.iter().sum::<f64>() / usable.len() as f64
            }
        }
    };
    Ok(GroupMetrics {
        tprd: aggregate(&per_class_tpr_gap),
        fprd: aggregate(&per_class_fpr_gap),
        acc_f: rate(correct[0], total[0]).unwrap_or(0.0),
        acc_m: rate(correct[1], total[1]).unwrap_or(0.0),
        per_class_tpr_gap,
        per_class_fpr_gap,
        skipped_classes,
    })
}

/// Mean absolute change in the gold-class probability when each text is
/// replaced by its counterfactual. Texts without swappable terms add 0.
pub fn counterfactual_fairness(classifier: &dyn TextClassifier, test: &[LabeledExample], lexicon: &Lexicon) -> f64 {
    if test.is_empty() {
        return 0.0;
    }
    let total: f64 = test
        .iter()
        .map(|e| match counterfactual_text(&e.text, lexicon, true) {
            Some(cf) => (classifier.class_probabilities(&e.text)[e.label] - classifier.class_probabilities(&cf)[e.label]).abs(),
            None => 0.0,
        })
        .sum();
    total / test.len() as f64
}

/// The nine reported extrinsic metrics.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricValues {
    pub tprd: f64,
    pub fprd: f64,
    pub acc_f: f64,
    pub acc_m: f64,
    pub cf: f64,
    pub cf_tprd: f64,
    pub cf_fprd: f64,
    pub cf_acc_f: f64,
    pub cf_acc_m: f64,
}

impl MetricValues {
    pub const HEADER: [&'static str; 9] = ["TPRD", "FPRD", "ACC-F", "ACC-M", "CF", "CF-TPRD", "CF-FPRD", "CF-ACC-F", "CF-ACC-M"];

    pub fn to_array(&self) -> [f64; 9] {
        [
            self.tprd, self.fprd, self.acc_f, self.acc_m, self.cf, self.cf_tprd, self.cf_fprd, self.cf_acc_f, self.cf_acc_m,
        ]
    }

    fn from_array(a: [f64; 9]) -> Self {
        Self {
            tprd: a[0],
            fprd: a[1],
            acc_f: a[2],
            acc_m: a[3],
            cf: a[4],
            cf_tprd: a[5],
            cf_fprd: a[6],
            cf_acc_f: a[7],
            cf_acc_m: a[8],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub metrics: MetricValues,
    pub per_class_tpr_gap: Vec<Option<f64>>,
    pub train_losses: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtrinsicReport {
    /// Means over folds.
    #[serde(flatten)]
    pub mean: MetricValues,
    /// Sample standard deviations over folds.
    pub std: MetricValues,
    pub intervention: Intervention,
    pub num_classes: usize,
    pub folds: Vec<FoldResult>,
}

/// One held-out prediction, enough to rescore without retraining.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub fold: usize,
    pub example_id: u64,
    pub label: usize,
    pub group: Gender,
    pub predicted: usize,
    pub gold_probability: f64,
    /// Prediction and gold-class probability on the counterfactual text.
    pub cf_predicted: Option<usize>,
    pub cf_gold_probability: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DownstreamConfig {
    pub folds: usize,
    pub classifier: ClassifierConfig,
    pub intervention: Intervention,
    pub seed: u64,
    pub jobs: usize,
}

impl Default for DownstreamConfig {
    fn default() -> Self {
        Self {
            folds: 10,
            classifier: ClassifierConfig::default(),
            intervention: Intervention::Default,
            seed: 0,
            jobs: 1,
        }
    }
}

/// Fold index per example, stratified by (label, group).
pub fn stratified_folds(examples: &[LabeledExample], folds: usize, seed: u64) -> Result<Vec<usize>> {
    if folds < 2 {
        return Err(Error::Config("at least 2 folds are required".into()));
    }
    let mut per_class: BTreeMap<usize, usize> = BTreeMap::new();
    for e in examples {
        *per_class.entry(e.label).or_default() += 1;
    }
    if let Some((c, n)) = per_class.iter().find(|(_, &n)| n < folds) {
        return Err(Error::Stratification(format!("class {c} has {n} examples, fewer than {folds} folds")));
    }
    let mut strata: BTreeMap<(usize, Gender), Vec<usize>> = BTreeMap::new();
    for (i, e) in examples.iter().enumerate() {
        strata.entry((e.label, e.group)).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(substream_seed(seed, "folds"));
    let mut assignment = vec![0; examples.len()];
    let mut next = 0;
    for members in strata.values_mut() {
        members.shuffle(&mut rng);
        for &i in members.iter() {
            assignment[i] = next % folds;
            next += 1;
        }
    }
    Ok(assignment)
}

/// Finetunes a fresh classifier per fold on the intervened training split
/// and scores the untouched held-out fold.
pub fn run_downstream_eval(
    model: &ContextualEncoder,
    examples: &[LabeledExample],
    num_classes: usize,
    lexicon: &Lexicon,
    config: &DownstreamConfig,
) -> Result<(ExtrinsicReport, Vec<PredictionRecord>)> {
    if let Some(e) = examples.iter().find(|e| e.label >= num_classes) {
        return Err(Error::Label(format!("example {} has label {} outside {num_classes} classes", e.example_id, e.label)));
    }
    let assignment = stratified_folds(examples, config.folds, config.seed)?;
    let run_fold = |fold: usize| -> Result<(FoldResult, Vec<PredictionRecord>)> {
        let train: Vec<LabeledExample> = examples
            .iter()
            .zip(&assignment)
            .filter(|(_, &f)| f != fold)
            .map(|(e, _)| e.clone())
            .collect();
        let test: Vec<LabeledExample> = examples
            .iter()
            .zip(&assignment)
            .filter(|(_, &f)| f == fold)
            .map(|(e, _)| e.clone())
            .collect();
        let present: BTreeSet<usize> = train.iter().map(|e| e.label).collect();
        if let Some(c) = (0..num_classes).find(|c| !present.contains(c)) {
            return Err(Error::Stratification(format!("class {c} is absent from the training split of fold {fold}")));
        }
        let train = config.intervention.apply(&train, lexicon);
        let mut clf = SequenceClassifier::new(model.clone(), num_classes);
        let texts: Vec<String> = train.iter().map(|e| e.text.clone()).collect();
        let labels: Vec<usize> = train.iter().map(|e| e.label).collect();
        let cfg = ClassifierConfig {
            seed: substream_seed(config.seed, &format!("fold-{fold}")),
            ..config.classifier
        };
        let train_losses = clf.fit(&texts, &labels, &cfg)?;
        let records: Vec<PredictionRecord> = test
            .iter()
            .map(|e| {
                let p = clf.class_probabilities(&e.text);
                let cf = counterfactual_text(&e.text, lexicon, true).map(|t| clf.class_probabilities(&t));
                PredictionRecord {
                    fold,
                    example_id: e.example_id,
                    label: e.label,
                    group: e.group,
                    predicted: argmax(&p),
                    gold_probability: p[e.label],
                    cf_predicted: cf.as_ref().map(|q| argmax(q)),
                    cf_gold_probability: cf.as_ref().map(|q| q[e.label]),
                }
            })
            .collect();
        let (metrics, per_class_tpr_gap) = score_records(&records, num_classes)?;
        Ok((
            FoldResult {
                fold,
                metrics,
                per_class_tpr_gap,
                train_losses,
            },
            records,
        ))
    };

    let jobs = config.jobs.max(1);
    let mut outcomes: Vec<Option<Result<(FoldResult, Vec<PredictionRecord>)>>> = (0..config.folds).map(|_| None).collect();
    for chunk_start in (0..config.folds).step_by(jobs) {
        let chunk: Vec<usize> = (chunk_start..(chunk_start + jobs).min(config.folds)).collect();
        let results: Vec<(usize, Result<(FoldResult, Vec<PredictionRecord>)>)> = std::thread::scope(|s| {
            let handles: Vec<_> = chunk.iter().map(|&f| (f, s.spawn(move || run_fold(f)))).collect();
            handles
                .into_iter()
                .map(|(f, h)| (f, h.join().unwrap_or_else(|_| Err(Error::Training { epoch: 0, reason: format!("fold {f} panicked") }))))
                .collect()
        });
        for (f, r) in results {
            outcomes[f] = Some(r);
        }
    }
    let mut folds = Vec::with_capacity(config.folds);
    let mut records = Vec::new();
    for r in outcomes.into_iter().flatten() {
        let (fold, recs) = r?;
        folds.push(fold);
        records.extend(recs);
    }
    let (mean, std) = summarize(&folds);
    Ok((
        ExtrinsicReport {
            mean,
            std,
            intervention: config.intervention,
            num_classes,
            folds,
        },
        records,
    ))
}

fn argmax(p: &[f64]) -> usize {
    (0..p.len()).fold(0, |best, c| if p[c] > p[best] { c } else { best })
}

/// Recomputes every metric of one fold from its prediction records.
pub fn score_records(records: &[PredictionRecord], num_classes: usize) -> Result<(MetricValues, Vec<Option<f64>>)> {
    if records.is_empty() {
        return Err(Error::EmptyEvaluation("no held-out predictions".into()));
    }
    let preds: Vec<usize> = records.iter().map(|r| r.predicted).collect();
    let labels: Vec<usize> = records.iter().map(|r| r.label).collect();
    let groups: Vec<Gender> = records.iter().map(|r| r.group).collect();
    let base = compute_group_metrics(&preds, &labels, &groups, num_classes)?;
    let cf = records
        .iter()
        .map(|r| r.cf_gold_probability.map_or(0.0, |q| (r.gold_probability - q).abs()))
        .sum::<f64>()
        / records.len() as f64;
    let (mut ap, mut al, mut ag) = (preds, labels, groups);
    for r in records {
        if let Some(p) = r.cf_predicted {
            ap.push(p);
            al.push(r.label);
            ag.push(r.group.flipped());
        }
    }
    let aug = compute_group_metrics(&ap, &al, &ag, num_classes)?;
    Ok((
        MetricValues {
            tprd: base.tprd,
            fprd: base.fprd,
            acc_f: base.acc_f,
            acc_m: base.acc_m,
            cf,
            cf_tprd: aug.tprd,
            cf_fprd: aug.fprd,
            cf_acc_f: aug.acc_f,
            cf_acc_m: aug.acc_m,
        },
        base.per_class_tpr_gap,
    ))
}

fn summarize(folds: &[FoldResult]) -> (MetricValues, MetricValues) {
    let n = folds.len() as f64;
    let mut mean = [0.0; 9];
    for f in folds {
        for (m, v) in mean.iter_mut().zip(f.metrics.to_array()) {
            *m += v / n;
        }
    }
    let mut var = [0.0; 9];
    if folds.len() > 1 {
        for f in folds {
            for ((s, v), m) in var.iter_mut().zip(f.metrics.to_array()).zip(mean) {
                *s += (v - m).powi(2) / (n - 1.0);
            }
        }
    }
    (MetricValues::from_array(mean), MetricValues::from_array(var.map(f64::sqrt)))
}

/// Writes prediction records as CSV.
pub fn write_predictions(path: impl AsRef<Path>, records: &[PredictionRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in records {
        w.serialize(r).map_err(|e| csv_error(path, e))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    crate::corpus::write_atomic(path, &bytes)
}

pub fn read_predictions(path: impl AsRef<Path>) -> Result<Vec<PredictionRecord>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    r.deserialize().map(|rec| rec.map_err(|e| csv_error(path, e))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Vocabulary;
    use proptest::prelude::*;
    use std::io::Write;
    use std::sync::Arc;

    fn ex(text: &str, label: usize, group: Gender) -> LabeledExample {
        LabeledExample { text: text.into(), label, group, example_id: 0 }
    }

    #[test]
    fn scrub_example() {
        let lex = Lexicon::builtin();
        assert_eq!(scrub_text("She is a nurse at St. Mary", &lex), "is a nurse at St.");
        assert_eq!(scrub_text("the data is ready", &lex), "the data is ready");
    }

    #[test]
    fn swap_example() {
        let lex = Lexicon::builtin();
        let out = swap_attributes(&[ex("she is brilliant", 1, Gender::Female), ex("the data", 0, Gender::Male)], &lex);
        assert_eq!(out.len(), 3);
        assert_eq!(out[2].text, "he is brilliant");
        assert_eq!((out[2].label, out[2].group), (1, Gender::Male));
    }

    #[test]
    fn binary_tprd_counting() {
        // Female: 5 positives, 4 hit. Male: 5 positives, 3 hit.
        let labels = [1, 1, 1, 1, 1, 1, 1, 1, 1, 1];
        let preds = [1, 1, 1, 1, 0, 1, 1, 1, 0, 0];
        let groups = [[Gender::Female; 5], [Gender::Male; 5]].concat();
        let m = compute_group_metrics(&preds, &labels, &groups, 2).unwrap();
        assert!((m.tprd - 0.2).abs() < 1e-15);
        let flipped: Vec<Gender> = groups.iter().map(|g| g.flipped()).collect();
        assert_eq!(compute_group_metrics(&preds, &labels, &flipped, 2).unwrap().tprd, -m.tprd);
        let perfect = compute_group_metrics(&labels, &labels, &groups, 2).unwrap();
        assert_eq!((perfect.tprd, perfect.fprd), (0.0, 0.0));
    }

    struct Fixed(f64, f64);
    impl TextClassifier for Fixed {
        fn num_classes(&self) -> usize {
            2
        }
        fn class_probabilities(&self, text: &str) -> Vec<f64> {
            let p = if text.starts_with("she") { self.0 } else { self.1 };
            vec![1.0 - p, p]
        }
    }

    #[test]
    fn cf_examples() {
        let lex = Lexicon::builtin();
        let test = [ex("she is brilliant", 1, Gender::Female)];
        let cf = counterfactual_fairness(&Fixed(0.9, 0.7), &test, &lex);
        assert!((cf - 0.2).abs() <= 4.0 * f64::EPSILON);
        assert_eq!(counterfactual_fairness(&Fixed(0.6, 0.6), &test, &lex), 0.0);
    }

    #[test]
    fn jigsaw_rules() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("j.csv");
        let mut f = std::fs::File::create(&p).unwrap();
        writeln!(f, "text,toxicity,female,male").unwrap();
        writeln!(f, "a,0.7,0.9,0.0").unwrap();
        writeln!(f, "b,0.3,0.9,0.0").unwrap();
        writeln!(f, "c,0.0,0.6,0.6").unwrap();
        writeln!(f, "d,0.0,0.0,0.8").unwrap();
        writeln!(f, "e,oops,0.0,0.8").unwrap();
        drop(f);
        let d = ingest_jigsaw(&p, &SchemaMapping::default()).unwrap();
        assert_eq!(d.examples.len(), 2);
        assert_eq!((d.examples[0].label, d.examples[0].group), (1, Gender::Female));
        assert_eq!((d.examples[1].label, d.examples[1].group), (0, Gender::Male));
        assert_eq!((d.stats.malformed, d.stats.excluded), (1, 2));
    }

    #[test]
    fn bios_selection() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.csv");
        let mut f = std::fs::File::create(&p).unwrap();
        writeln!(f, "text,label,gender").unwrap();
        // Profession k has k female and 19 - k male biographies.
        for k in 0..20 {
            for i in 0..19 {
                writeln!(f, "bio {k} {i},prof{k:02},{}", if i < k { "f" } else { "m" }).unwrap();
            }
        }
        writeln!(f, "missing gender,prof00,").unwrap();
        drop(f);
        let d = ingest_bias_in_bios(&p, &SchemaMapping::default()).unwrap();
        let expected: Vec<String> = (0..7).chain(13..20).map(|k| format!("prof{k:02}")).collect();
        assert_eq!(d.class_names, expected);
        assert_eq!(d.stats.malformed, 1);
        assert_eq!(d.examples.len(), 14 * 19);
    }

    #[test]
    fn folds_partition_and_stratify() {
        let examples: Vec<LabeledExample> = (0..60)
            .map(|i| LabeledExample { text: format!("t{i}"), label: i % 3, group: if i % 2 == 0 { Gender::Female } else { Gender::Male }, example_id: i as u64 })
            .collect();
        let a = stratified_folds(&examples, 5, 1).unwrap();
        assert_eq!(a.len(), 60);
        for f in 0..5 {
            assert_eq!(a.iter().filter(|&&x| x == f).count(), 12);
        }
        assert!(matches!(stratified_folds(&examples[..4], 5, 1), Err(Error::Stratification(_))));
    }

    #[test]
    fn separable_task_is_learned() {
        let vocab = Arc::new(Vocabulary::from_words(["good", "bad", "she", "he", "it", "was"]));
        let enc = ContextualEncoder::stub("stub", vocab, 8, 3);
        let lex = Lexicon::builtin();
        let examples: Vec<LabeledExample> = (0..80)
            .map(|i| {
                let label = i % 2;
                let group = if (i / 2) % 2 == 0 { Gender::Female } else { Gender::Male };
                let who = if group == Gender::Female { "she" } else { "he" };
                let what = if label == 1 { "good" } else { "bad" };
                LabeledExample { text: format!("{who} was {what}"), label, group, example_id: i as u64 }
            })
            .collect();
        let cfg = DownstreamConfig {
            folds: 4,
            classifier: ClassifierConfig { epochs: 10, learning_rate: 0.05, ..Default::default() },
            jobs: 2,
            ..Default::default()
        };
        let (report, records) = run_downstream_eval(&enc, &examples, 2, &lex, &cfg).unwrap();
        assert!(report.mean.acc_f >= 0.95 && report.mean.acc_m >= 0.95);
        assert_eq!(records.len(), 80);
        let dir = tempfile::tempdir().unwrap();
        write_predictions(dir.path().join("p.csv"), &records).unwrap();
        let back = read_predictions(dir.path().join("p.csv")).unwrap();
        let fold0: Vec<PredictionRecord> = back.into_iter().filter(|r| r.fold == 0).collect();
        assert_eq!(score_records(&fold0, 2).unwrap().0, report.folds[0].metrics);
    }

    proptest! {
        #[test]
        fn metrics_ignore_order(rows in prop::collection::vec((0usize..3, 0usize..3, any::<bool>()), 1..40), seed in any::<u64>()) {
            let preds: Vec<usize> = rows.iter().map(|r| r.0).collect();
            let labels: Vec<usize> = rows.iter().map(|r| r.1).collect();
            let groups: Vec<Gender> = rows.iter().map(|r| if r.2 { Gender::Female } else { Gender::Male }).collect();
            let a = compute_group_metrics(&preds, &labels, &groups, 3).unwrap();
            let mut idx: Vec<usize> = (0..rows.len()).collect();
            idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let b = compute_group_metrics(
                &idx.iter().map(|&i| preds[i]).collect::<Vec<_>>(),
                &idx.iter().map(|&i| labels[i]).collect::<Vec<_>>(),
                &idx.iter().map(|&i| groups[i]).collect::<Vec<_>>(),
                3,
            ).unwrap();
            prop_assert!((a.tprd - b.tprd).abs() < 1e-12 && (a.fprd - b.fprd).abs() < 1e-12);
            prop_assert_eq!((a.acc_f, a.acc_m), (b.acc_f, b.acc_m));
        }

        #[test]
        fn scrub_is_idempotent_and_clean(words in prop::collection::vec("(She|he|MARY|john|nurse|the|Women|data|,|\\.)", 0..12)) {
            let lex = Lexicon::builtin();
            let text = words.join(" ");
            let once = scrub_text(&text, &lex);
            prop_assert_eq!(scrub_text(&once, &lex), once.clone());
            prop_assert!(crate::text::words_lower(&once).iter().all(|w| !lex.is_scrubbable(w)));
        }

        #[test]
        fn swap_preserves_labels(rows in prop::collection::vec(("(she|he|mary|the|nurse) (is|was) (kind|late)", 0usize..4, any::<bool>()), 0..30)) {
            let lex = Lexicon::builtin();
            let examples: Vec<LabeledExample> = rows.iter().enumerate()
                .map(|(i, (t, l, g))| LabeledExample { text: t.clone(), label: *l, group: if *g { Gender::Female } else { Gender::Male }, example_id: i as u64 })
                .collect();
            let out = swap_attributes(&examples, &lex);
            let added = &out[examples.len()..];
            let mut before: Vec<usize> = examples.iter().filter(|e| counterfactual_text(&e.text, &lex, true).is_some()).map(|e| e.label).collect();
            let mut after: Vec<usize> = added.iter().map(|e| e.label).collect();
            before.sort_unstable();
            after.sort_unstable();
            prop_assert_eq!(before, after);
            let texts: BTreeSet<String> = out.iter().map(|e| e.text.clone()).collect();
            let twice: BTreeSet<String> = swap_attributes(&out, &lex).into_iter().map(|e| e.text).collect();
            prop_assert_eq!(texts, twice);
        }
    }
}
