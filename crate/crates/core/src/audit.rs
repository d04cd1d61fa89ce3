//! Audit configuration, grid expansion and the staged pipeline
//! (model → mitigation → intrinsic metrics → probe → downstream).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, OnceLock};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::corpus::{self, BankMetadata, CoverageReport, EmbeddingBank, DEFAULT_CAP};
use crate::debias::{self, ContextDebiasConfig};
use crate::downstream::{self, DatasetKind, DownstreamConfig, ExtrinsicReport, Intervention, SchemaMapping};
use crate::error::{Error, Result};
use crate::intrinsic::{self, IntrinsicReport};
use crate::lexicon::{self, split_attribute_terms, Lexicon};
use crate::model::{ClassifierConfig, ContextualEncoder, MaskedLanguageModel, MlmConfig, ModelRegistry};
use crate::probe::{self, ProbeConfig, ProbeReport};
use crate::synthetic::SyntheticWorld;
use crate::text::{content_hash, substream_seed};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MitigationKind {
    #[default]
    None,
    SentDebias,
    ContextDebias,
    Cda,
}

impl MitigationKind {
    pub fn name(self) -> &'static str {
        match self {
            MitigationKind::None => "none",
            MitigationKind::SentDebias => "sent_debias",
            MitigationKind::ContextDebias => "context_debias",
            MitigationKind::Cda => "cda",
        }
    }
}

fn intervention_name(i: Intervention) -> &'static str {
    match i {
        Intervention::Default => "default",
        Intervention::Scrubbing => "scrubbing",
        Intervention::Swapping => "swapping",
    }
}

/// A single value or a list, for grid axes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum OneOrMany<T> {
    One(T),
    Many(Vec<T>),
}

impl<T: Clone> OneOrMany<T> {
    pub fn to_vec(&self) -> Vec<T> {
        match self {
            OneOrMany::One(t) => vec![t.clone()],
            OneOrMany::Many(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SentDebiasParams {
    pub k: usize,
    pub max_pairs: usize,
}

impl Default for SentDebiasParams {
    fn default() -> Self {
        Self { k: 1, max_pairs: 1000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContextDebiasParams {
    #[serde(flatten)]
    pub objective: ContextDebiasConfig,
    /// Sentences sampled per word for the attribute and stereotype sets.
    pub sentences_per_word: usize,
}

impl Default for ContextDebiasParams {
    fn default() -> Self {
        Self {
            objective: ContextDebiasConfig::default(),
            sentences_per_word: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CdaParams {
    pub use_names: bool,
    #[serde(flatten)]
    pub training: MlmConfig,
}

impl Default for CdaParams {
    fn default() -> Self {
        Self {
            use_names: false,
            training: MlmConfig {
                epochs: 2,
                ..MlmConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, bound(deserialize = "K: Deserialize<'de> + Default"))]
pub struct MitigationSection<K> {
    pub kind: K,
    pub sent_debias: SentDebiasParams,
    pub context_debias: ContextDebiasParams,
    pub cda: CdaParams,
}

impl<K: Default> Default for MitigationSection<K> {
    fn default() -> Self {
        Self {
            kind: K::default(),
            sent_debias: Default::default(),
            context_debias: Default::default(),
            cda: Default::default(),
        }
    }
}

impl Default for OneOrMany<MitigationKind> {
    fn default() -> Self {
        OneOrMany::One(MitigationKind::None)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, bound(deserialize = "I: Deserialize<'de> + Default"))]
pub struct DownstreamSection<I> {
    pub kind: DatasetKind,
    pub dataset: Option<PathBuf>,
    pub intervention: I,
    pub folds: usize,
    pub schema: SchemaMapping,
    pub classifier: ClassifierConfig,
}

impl<I: Default> Default for DownstreamSection<I> {
    fn default() -> Self {
        Self {
            kind: DatasetKind::Synthetic,
            dataset: None,
            intervention: I::default(),
            folds: 10,
            schema: SchemaMapping::default(),
            classifier: ClassifierConfig::default(),
        }
    }
}

impl Default for OneOrMany<Intervention> {
    fn default() -> Self {
        OneOrMany::One(Intervention::Default)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricToggles {
    pub seat: bool,
    pub lpbs: bool,
    pub probe: bool,
    pub extrinsic: bool,
}

impl Default for MetricToggles {
    fn default() -> Self {
        Self {
            seat: true,
            lpbs: true,
            probe: true,
            extrinsic: true,
        }
    }
}

impl MetricToggles {
    pub fn none() -> Self {
        Self {
            seat: false,
            lpbs: false,
            probe: false,
            extrinsic: false,
        }
    }

    fn any(&self) -> bool {
        self.seat || self.lpbs || self.probe || self.extrinsic
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeSection {
    #[serde(flatten)]
    pub training: ProbeConfig,
    pub train_fraction: f64,
    pub iterations: usize,
}

impl Default for ProbeSection {
    fn default() -> Self {
        Self {
            training: ProbeConfig::default(),
            train_fraction: 0.5,
            iterations: 100,
        }
    }
}

/// Settings of the built-in synthetic corpus and downstream task, used
/// when no corpus or dataset file is configured.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSection {
    pub seed: u64,
    pub corpus_sentences: usize,
    pub bias: f64,
    pub downstream_examples: usize,
    pub gender_skew: f64,
    pub cue_reliability: f64,
}

impl Default for SyntheticSection {
    fn default() -> Self {
        Self {
            seed: 11,
            corpus_sentences: 6000,
            bias: 0.85,
            downstream_examples: 600,
            gender_skew: 0.8,
            cue_reliability: 0.7,
        }
    }
}

/// Audit configuration file. `mitigation.kind` and
/// `downstream.intervention` may be lists; [`AuditSpec::expand`] turns the
/// file into one [`AuditConfig`] per grid cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, bound(deserialize = "K: Deserialize<'de> + Default, I: Deserialize<'de> + Default"))]
pub struct AuditSpecOf<K, I> {
    pub model: String,
    pub lexicon: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    pub templates: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub cache_dir: Option<PathBuf>,
    pub seed: u64,
    pub jobs: usize,
    pub harvest_cap: usize,
    pub metrics: MetricToggles,
    pub mitigation: MitigationSection<K>,
    pub probe: ProbeSection,
    pub downstream: DownstreamSection<I>,
    pub synthetic: SyntheticSection,
}

pub type AuditSpec = AuditSpecOf<OneOrMany<MitigationKind>, OneOrMany<Intervention>>;
/// One grid cell: exactly one mitigation and one intervention.
pub type AuditConfig = AuditSpecOf<MitigationKind, Intervention>;

impl<K: Default, I: Default> Default for AuditSpecOf<K, I> {
    fn default() -> Self {
        Self {
            model: "builtin-tiny".into(),
            lexicon: None,
            corpus: None,
            templates: None,
            output_dir: PathBuf::from("audit-out"),
            cache_dir: None,
            seed: 0,
            jobs: 1,
            harvest_cap: DEFAULT_CAP,
            metrics: MetricToggles::default(),
            mitigation: MitigationSection::default(),
            probe: ProbeSection::default(),
            downstream: DownstreamSection::default(),
            synthetic: SyntheticSection::default(),
        }
    }
}

impl AuditSpec {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Parses a config file; relative paths are resolved against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut spec = Self::from_toml_str(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for p in [&mut spec.lexicon, &mut spec.corpus, &mut spec.templates, &mut spec.cache_dir, &mut spec.downstream.dataset]
            .into_iter()
            .flatten()
        {
            rebase(p);
        }
        rebase(&mut spec.output_dir);
        if let Some(rest) = spec.model.strip_prefix("file:") {
            let mut p = PathBuf::from(rest);
            rebase(&mut p);
            spec.model = format!("file:{}", p.display());
        }
        Ok(spec)
    }

    /// Checks paths, parameters and the model scheme without running anything.
    pub fn validate(&self, registry: &ModelRegistry) -> Result<()> {
        let scheme = self.model.split_once(':').map_or(self.model.as_str(), |s| s.0);
        if !registry.schemes().any(|s| s == scheme) {
            return Err(Error::Validation(format!("unknown model scheme `{scheme}`")));
        }
        if let Some(path) = self.model.strip_prefix("file:") {
            require_file(Path::new(path), "model")?;
        }
        for (what, p) in [("lexicon", &self.lexicon), ("corpus", &self.corpus), ("templates", &self.templates)] {
            if let Some(p) = p {
                require_file(p, what)?;
            }
        }
        let kinds = self.mitigation.kind.to_vec();
        check_axis("mitigation.kind", &kinds)?;
        check_axis("downstream.intervention", &self.downstream.intervention.to_vec())?;
        if self.harvest_cap == 0 {
            return Err(Error::Validation("harvest_cap must be at least 1".into()));
        }
        if self.jobs == 0 {
            return Err(Error::Validation("jobs must be at least 1".into()));
        }
        let p = &self.probe;
        if !(p.train_fraction > 0.0 && p.train_fraction < 1.0) {
            return Err(Error::Validation(format!("probe.train_fraction {} outside (0, 1)", p.train_fraction)));
        }
        if p.iterations == 0 || p.training.epochs == 0 || p.training.batch_size == 0 || !(p.training.learning_rate > 0.0) {
            return Err(Error::Validation("probe iterations, epochs, batch_size and learning_rate must be positive".into()));
        }
        if kinds.contains(&MitigationKind::SentDebias) && (self.mitigation.sent_debias.k == 0 || self.mitigation.sent_debias.max_pairs == 0) {
            return Err(Error::Validation("sent_debias.k and max_pairs must be at least 1".into()));
        }
        if kinds.contains(&MitigationKind::ContextDebias) {
            self.mitigation
                .context_debias
                .objective
                .validate()
                .map_err(|e| Error::Validation(e.to_string()))?;
            if self.mitigation.context_debias.sentences_per_word == 0 {
                return Err(Error::Validation("context_debias.sentences_per_word must be at least 1".into()));
            }
        }
        if self.metrics.extrinsic {
            let d = &self.downstream;
            match (d.kind, &d.dataset) {
                (DatasetKind::Synthetic, _) => {}
                (_, Some(p)) => require_file(p, "dataset")?,
                (_, None) => return Err(Error::Validation("downstream.dataset is required for file datasets".into())),
            }
            if d.folds < 2 {
                return Err(Error::Validation("downstream.folds must be at least 2".into()));
            }
            let c = &d.classifier;
            if c.epochs == 0 || c.batch_size == 0 || c.max_sequence_length == 0 || !(c.learning_rate > 0.0) {
                return Err(Error::Validation("classifier epochs, batch_size, max_sequence_length and learning_rate must be positive".into()));
            }
        }
        let s = &self.synthetic;
        if !(0.0..=1.0).contains(&s.bias) || !(0.0..=1.0).contains(&s.gender_skew) || !(0.0..=1.0).contains(&s.cue_reliability) {
            return Err(Error::Validation("synthetic bias, gender_skew and cue_reliability must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Cross product of the mitigation and intervention axes.
    pub fn expand(&self) -> Vec<AuditConfig> {
        let mut cells = Vec::new();
        for kind in self.mitigation.kind.to_vec() {
            for intervention in self.downstream.intervention.to_vec() {
                cells.push(AuditConfig {
                    model: self.model.clone(),
                    lexicon: self.lexicon.clone(),
                    corpus: self.corpus.clone(),
                    templates: self.templates.clone(),
                    output_dir: self.output_dir.clone(),
                    cache_dir: self.cache_dir.clone(),
                    seed: self.seed,
                    jobs: self.jobs,
                    harvest_cap: self.harvest_cap,
                    metrics: self.metrics,
                    mitigation: MitigationSection {
                        kind,
                        sent_debias: self.mitigation.sent_debias.clone(),
                        context_debias: self.mitigation.context_debias.clone(),
                        cda: self.mitigation.cda.clone(),
                    },
                    probe: self.probe.clone(),
                    downstream: DownstreamSection {
                        kind: self.downstream.kind,
                        dataset: self.downstream.dataset.clone(),
                        intervention,
                        folds: self.downstream.folds,
                        schema: self.downstream.schema.clone(),
                        classifier: self.downstream.classifier,
                    },
                    synthetic: self.synthetic.clone(),
                });
            }
        }
        cells
    }
}

fn require_file(p: &Path, what: &str) -> Result<()> {
    if p.is_file() {
        Ok(())
    } else {
        Err(Error::Validation(format!("{what} file {} does not exist", p.display())))
    }
}

fn check_axis<T: PartialEq + std::fmt::Debug>(name: &str, values: &[T]) -> Result<()> {
    if values.is_empty() {
        return Err(Error::Validation(format!("{name} must select at least one value")));
    }
    for (i, v) in values.iter().enumerate() {
        if values[..i].contains(v) {
            return Err(Error::Validation(format!("{name} lists {v:?} twice")));
        }
    }
    Ok(())
}

impl AuditConfig {
    /// Directory-friendly name of the grid cell.
    pub fn cell_name(&self) -> String {
        format!("{}-{}", self.mitigation.kind.name(), intervention_name(self.downstream.intervention))
    }

    /// SHA-256 of the canonical JSON form of the cell.
    pub fn config_hash(&self) -> String {
        content_hash(&serde_json::to_vec(self).expect("config serializes"))
    }

    pub fn cache_dir(&self) -> PathBuf {
        self.cache_dir.clone().unwrap_or_else(|| self.output_dir.join("cache"))
    }

    pub fn cell_dir(&self) -> PathBuf {
        self.output_dir.join(self.cell_name())
    }
}

/// Identifies the grid cell of a report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellId {
    pub mitigation: MitigationKind,
    pub intervention: Intervention,
}

/// A derived artifact used by the run, with its cache status.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactRecord {
    pub kind: String,
    pub key: String,
    pub cache_hit: bool,
    /// Unix time in milliseconds at which the artifact was first built.
    pub created_at_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub toolkit_version: String,
    pub model_identifier: String,
    pub model_hash: Option<String>,
    pub lexicon_hash: String,
    pub corpus_hash: Option<String>,
    pub dataset_hash: Option<String>,
    pub seed: u64,
    pub started_at_ms: u64,
    pub finished_at_ms: u64,
    pub wall_clock_seconds: f64,
    pub artifacts: Vec<ArtifactRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageFailure {
    pub stage: String,
    pub error: String,
}

/// Diagnostics of the mitigation stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MitigationSummary {
    pub kind: MitigationKind,
    pub explained_variance: Option<Vec<f64>>,
    pub loss_history: Option<Vec<f64>>,
    pub cda_corpus_lines: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub cell: CellId,
    pub config: AuditConfig,
    pub provenance: Provenance,
    pub mitigation: Option<MitigationSummary>,
    pub attribute_coverage: Option<CoverageReport>,
    pub stereotype_coverage: Option<CoverageReport>,
    pub intrinsic: Option<IntrinsicReport>,
    pub probe: Option<ProbeReport>,
    pub extrinsic: Option<ExtrinsicReport>,
    pub failed_stages: Vec<StageFailure>,
}

impl AuditReport {
    pub fn succeeded(&self) -> bool {
        self.failed_stages.is_empty()
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format(format!("audit report: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_json(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

type Shared<T> = Arc<OnceLock<std::result::Result<T, String>>>;

/// Runs audit cells, sharing loaded and mitigated models between cells of
/// the same process.
pub struct Auditor {
    registry: ModelRegistry,
    models: Mutex<BTreeMap<String, Shared<(Arc<ContextualEncoder>, ArtifactRecord, Option<MitigationSummary>)>>>,
    banks: Mutex<BTreeMap<String, Shared<(Arc<EmbeddingBank>, CoverageReport, ArtifactRecord)>>>,
}

impl Default for Auditor {
    fn default() -> Self {
        Self::new(ModelRegistry::default())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CacheMeta {
    created_at_ms: u64,
    summary: Option<MitigationSummary>,
}

impl Auditor {
    pub fn new(registry: ModelRegistry) -> Self {
        Self {
            registry,
            models: Mutex::new(BTreeMap::new()),
            banks: Mutex::new(BTreeMap::new()),
        }
    }

    pub fn registry(&self) -> &ModelRegistry {
        &self.registry
    }

    /// Runs every cell, at most `jobs` at a time, in cell order.
    pub fn run_grid(&self, cells: &[AuditConfig], jobs: usize) -> Vec<AuditReport> {
        let jobs = jobs.max(1);
        let mut reports = Vec::with_capacity(cells.len());
        for chunk in cells.chunks(jobs) {
            let done: Vec<AuditReport> = std::thread::scope(|s| {
                let handles: Vec<_> = chunk.iter().map(|c| s.spawn(move || self.run(c))).collect();
                handles
                    .into_iter()
                    .zip(chunk)
                    .map(|(h, c)| h.join().unwrap_or_else(|_| self.panicked(c)))
                    .collect()
            });
            reports.extend(done);
        }
        reports
    }

    fn panicked(&self, config: &AuditConfig) -> AuditReport {
        let mut r = empty_report(config, now_ms());
        r.failed_stages.push(StageFailure {
            stage: "audit".into(),
            error: "worker thread panicked".into(),
        });
        r
    }

    /// Runs the enabled stages of one cell. Stage errors are recorded in
    /// the report; stages depending on a failed one are skipped. The
    /// structured report is written atomically to the cell directory.
    pub fn run(&self, config: &AuditConfig) -> AuditReport {
        let started = now_ms();
        let clock = Instant::now();
        let mut report = empty_report(config, started);
        if config.metrics.any() {
            if let Err((stage, e)) = self.run_stages(config, &mut report) {
                log::error!("{}: stage `{stage}` failed: {e}", config.cell_name());
                report.failed_stages.push(StageFailure {
                    stage: stage.into(),
                    error: e.to_string(),
                });
            }
        }
        report.provenance.finished_at_ms = now_ms();
        report.provenance.wall_clock_seconds = clock.elapsed().as_secs_f64();
        let path = config.cell_dir().join("report.json");
        if let Err(e) = corpus::write_atomic(&path, report.to_json().as_bytes()) {
            report.failed_stages.push(StageFailure {
                stage: "write".into(),
                error: e.to_string(),
            });
        }
        report
    }

    fn run_stages(&self, config: &AuditConfig, report: &mut AuditReport) -> std::result::Result<(), (&'static str, Error)> {
        let lexicon = load_lexicon(config).map_err(|e| ("lexicon", e))?;
        report.provenance.lexicon_hash = lexicon_hash(&lexicon);
        let needs_corpus = config.metrics.seat || config.metrics.probe || config.mitigation.kind != MitigationKind::None;
        let corpus = if needs_corpus {
            let lines = load_corpus(config, &lexicon).map_err(|e| ("corpus", e))?;
            report.provenance.corpus_hash = Some(corpus::corpus_hash(&lines));
            lines
        } else {
            Vec::new()
        };

        let base = self.base_model(config).map_err(|e| ("model", e))?;
        report.provenance.artifacts.push(base.1.clone());
        let (model, record, summary) = self
            .mitigated_model(config, &base, &lexicon, &corpus, report.provenance.corpus_hash.as_deref().unwrap_or(""))
            .map_err(|e| ("mitigation", e))?;
        if config.mitigation.kind != MitigationKind::None {
            report.provenance.artifacts.push(record.clone());
        }
        report.mitigation = summary;
        report.provenance.model_hash = Some(model_hash(&model));
        let model_key = record.key.clone();

        let mut failures = Vec::new();
        let mut banks = None;
        if config.metrics.seat || config.metrics.probe {
            match self.banks(config, &model, &model_key, &lexicon, &corpus, report) {
                Ok(b) => banks = Some(b),
                Err(e) => failures.push(("harvest", e)),
            }
        }
        let mut intrinsic = IntrinsicReport::default();
        if let (true, Some((attr, stereo, lex))) = (config.metrics.seat, &banks) {
            let seat = EmbeddingBank::clone(attr)
                .merge(EmbeddingBank::clone(stereo))
                .and_then(|b| intrinsic::seat_test(&b, lex, lex.attributes_female(), lex.attributes_male()));
            match seat {
                Ok(r) => intrinsic.seat = Some(r),
                Err(e) => failures.push(("seat", e)),
            }
        }
        if config.metrics.lpbs {
            match lpbs(config, &*model, &lexicon) {
                Ok((a, t)) => {
                    intrinsic.attribute_lpbs = Some(a);
                    intrinsic.target_lpbs = Some(t);
                }
                Err(e) => failures.push(("lpbs", e)),
            }
        }
        if config.metrics.seat || config.metrics.lpbs {
            report.intrinsic = Some(intrinsic);
        }
        if let (true, Some((attr, stereo, lex))) = (config.metrics.probe, &banks) {
            match run_probe_stage(config, attr, stereo, lex) {
                Ok(r) => report.probe = Some(r),
                Err(e) => failures.push(("probe", e)),
            }
        }
        if config.metrics.extrinsic {
            match extrinsic(config, &model, &lexicon, report) {
                Ok(r) => report.extrinsic = Some(r),
                Err(e) => failures.push(("extrinsic", e)),
            }
        }
        let mut failures = failures.into_iter();
        let first = failures.next();
        for (stage, e) in failures {
            report.failed_stages.push(StageFailure {
                stage: stage.into(),
                error: e.to_string(),
            });
        }
        match first {
            Some(f) => Err(f),
            None => Ok(()),
        }
    }

    fn memo<T: Clone>(
        &self,
        key: &str,
        build: impl FnOnce() -> Result<T>,
        map: &Mutex<BTreeMap<String, Shared<T>>>,
    ) -> Result<T> {
        let cell = map.lock().expect("memo lock").entry(key.to_string()).or_default().clone();
        cell.get_or_init(|| build().map_err(|e| e.to_string()))
            .clone()
            .map_err(Error::Config)
    }

    fn base_model(&self, config: &AuditConfig) -> Result<(Arc<ContextualEncoder>, ArtifactRecord, Option<MitigationSummary>)> {
        let key = content_hash(format!("base\0{}", config.model).as_bytes());
        let cache = config.cache_dir().join("models");
        self.memo(
            &key,
            || {
                let cacheable = !config.model.starts_with("file:");
                let path = cache.join(format!("{key}.json"));
                if cacheable {
                    if let Some(meta) = read_meta(&cache, &key) {
                        if let Ok(m) = ContextualEncoder::load(&path) {
                            return Ok((Arc::new(m), record("model", &key, true, meta.created_at_ms), None));
                        }
                    }
                }
                let m = self.registry.resolve(&config.model)?;
                let created = now_ms();
                if cacheable {
                    m.save(&path)?;
                    write_meta(&cache, &key, created, None)?;
                }
                Ok((Arc::new(m), record("model", &key, false, created), None))
            },
            &self.models,
        )
    }

    fn mitigated_model(
        &self,
        config: &AuditConfig,
        base: &(Arc<ContextualEncoder>, ArtifactRecord, Option<MitigationSummary>),
        lexicon: &Lexicon,
        corpus_lines: &[String],
        corpus_hash: &str,
    ) -> Result<(Arc<ContextualEncoder>, ArtifactRecord, Option<MitigationSummary>)> {
        let m = &config.mitigation;
        let params = match m.kind {
            MitigationKind::None => return Ok(base.clone()),
            MitigationKind::SentDebias => serde_json::to_string(&m.sent_debias),
            MitigationKind::ContextDebias => serde_json::to_string(&m.context_debias),
            MitigationKind::Cda => serde_json::to_string(&m.cda),
        }
        .expect("parameters serialize");
        let key = content_hash(
            format!(
                "{}\0{}\0{params}\0{corpus_hash}\0{}\0{}",
                base.1.key,
                m.kind.name(),
                lexicon_hash(lexicon),
                config.seed
            )
            .as_bytes(),
        );
        let cache = config.cache_dir().join("models");
        self.memo(
            &key,
            || {
                let path = cache.join(format!("{key}.json"));
                if let Some(meta) = read_meta(&cache, &key) {
                    if let Ok(model) = ContextualEncoder::load(&path) {
                        return Ok((Arc::new(model), record("mitigated-model", &key, true, meta.created_at_ms), meta.summary));
                    }
                }
                let (model, summary) = mitigate(config, &base.0, lexicon, corpus_lines)?;
                let created = now_ms();
                model.save(&path)?;
                write_meta(&cache, &key, created, Some(&summary))?;
                Ok((Arc::new(model), record("mitigated-model", &key, false, created), Some(summary)))
            },
            &self.models,
        )
    }

    /// Attribute and stereotype banks plus the lexicon restricted to the
    /// covered words.
    fn banks(
        &self,
        config: &AuditConfig,
        model: &ContextualEncoder,
        model_key: &str,
        lexicon: &Lexicon,
        corpus_lines: &[String],
        report: &mut AuditReport,
    ) -> Result<(Arc<EmbeddingBank>, Arc<EmbeddingBank>, Lexicon)> {
        let attributes = lexicon.attribute_terms();
        let stereotypes = lexicon.stereotype_terms();
        let seed = substream_seed(config.seed, "harvest");
        let chash = corpus::corpus_hash(corpus_lines);
        let build = |name: &str, words, exclusion| -> Result<(Arc<EmbeddingBank>, CoverageReport, ArtifactRecord)> {
            let key = content_hash(
                format!("{model_key}\0{name}\0{chash}\0{}\0{seed}\0{}", config.harvest_cap, lexicon_hash(lexicon)).as_bytes(),
            );
            let kind = format!("{name}-bank");
            self.memo(
                &key,
                || {
                    let dir = config.cache_dir().join("banks");
                    let stem = dir.join(&key);
                    let harvest = corpus::harvest_sentences(corpus_lines, words, exclusion, config.harvest_cap, seed)?;
                    if let Some(meta) = read_meta(&dir, &key) {
                        if let Ok(bank) = corpus::load_bank(&stem) {
                            return Ok((Arc::new(bank), harvest.coverage, record(&kind, &key, true, meta.created_at_ms)));
                        }
                    }
                    let meta = BankMetadata {
                        corpus_hash: chash.clone(),
                        cap: config.harvest_cap,
                        seed,
                    };
                    let bank = corpus::build_embedding_bank(model, &harvest.occurrences, meta)?;
                    let created = now_ms();
                    corpus::save_bank(&bank, &stem)?;
                    write_meta(&dir, &key, created, None)?;
                    Ok((Arc::new(bank), harvest.coverage, record(&kind, &key, false, created)))
                },
                &self.banks,
            )
        };
        let (attr, attr_cov, attr_rec) = build("attribute", &attributes, &stereotypes)?;
        let (stereo, stereo_cov, stereo_rec) = build("stereotype", &stereotypes, &attributes)?;
        report.provenance.artifacts.extend([attr_rec, stereo_rec]);
        report.attribute_coverage = Some(attr_cov);
        report.stereotype_coverage = Some(stereo_cov);
        let restricted = lexicon.restricted(|w| attr.contains(w) || stereo.contains(w))?;
        Ok((attr, stereo, restricted))
    }
}

fn record(kind: &str, key: &str, cache_hit: bool, created_at_ms: u64) -> ArtifactRecord {
    ArtifactRecord {
        kind: kind.into(),
        key: key.into(),
        cache_hit,
        created_at_ms,
    }
}

fn read_meta(dir: &Path, key: &str) -> Option<CacheMeta> {
    let text = fs::read_to_string(dir.join(format!("{key}.meta.json"))).ok()?;
    serde_json::from_str(&text).ok()
}

fn write_meta(dir: &Path, key: &str, created_at_ms: u64, summary: Option<&MitigationSummary>) -> Result<()> {
    let meta = serde_json::json!({ "created_at_ms": created_at_ms, "summary": summary });
    corpus::write_atomic(&dir.join(format!("{key}.meta.json")), meta.to_string().as_bytes())
}

fn empty_report(config: &AuditConfig, started: u64) -> AuditReport {
    AuditReport {
        cell: CellId {
            mitigation: config.mitigation.kind,
            intervention: config.downstream.intervention,
        },
        config: config.clone(),
        provenance: Provenance {
            config_hash: config.config_hash(),
            toolkit_version: env!("CARGO_PKG_VERSION").into(),
            model_identifier: config.model.clone(),
            model_hash: None,
            lexicon_hash: String::new(),
            corpus_hash: None,
            dataset_hash: None,
            seed: config.seed,
            started_at_ms: started,
            finished_at_ms: started,
            wall_clock_seconds: 0.0,
            artifacts: Vec::new(),
        },
        mitigation: None,
        attribute_coverage: None,
        stereotype_coverage: None,
        intrinsic: None,
        probe: None,
        extrinsic: None,
        failed_stages: Vec::new(),
    }
}

fn load_lexicon(config: &AuditConfig) -> Result<Lexicon> {
    match &config.lexicon {
        Some(p) => lexicon::load_lexicon(p),
        None => Ok(Lexicon::builtin()),
    }
}

fn lexicon_hash(lexicon: &Lexicon) -> String {
    content_hash(&serde_json::to_vec(&lexicon.to_file_data()).expect("lexicon serializes"))
}

fn model_hash(model: &ContextualEncoder) -> String {
    let mut bytes: Vec<u8> = model.params().iter().flat_map(|p| p.to_le_bytes()).collect();
    for b in model.output_projection().unwrap_or_default() {
        bytes.extend(b.iter().flat_map(|p| p.to_le_bytes()));
    }
    content_hash(&bytes)
}

fn load_corpus(config: &AuditConfig, lexicon: &Lexicon) -> Result<Vec<String>> {
    match &config.corpus {
        Some(p) => corpus::read_corpus(p),
        None => {
            let s = &config.synthetic;
            Ok(SyntheticWorld::new(lexicon, s.seed).pretraining_corpus(s.corpus_sentences, s.bias))
        }
    }
}

fn mitigate(
    config: &AuditConfig,
    base: &ContextualEncoder,
    lexicon: &Lexicon,
    corpus_lines: &[String],
) -> Result<(ContextualEncoder, MitigationSummary)> {
    let m = &config.mitigation;
    let mut summary = MitigationSummary {
        kind: m.kind,
        explained_variance: None,
        loss_history: None,
        cda_corpus_lines: None,
    };
    let model = match m.kind {
        MitigationKind::None => base.clone(),
        MitigationKind::SentDebias => {
            let sets = debias::definition_sets(base, corpus_lines, lexicon, m.sent_debias.max_pairs);
            let subspace = debias::compute_bias_subspace(&sets, m.sent_debias.k)?;
            summary.explained_variance = Some(subspace.explained_variance.clone());
            let mut model = base.clone().with_output_projection(subspace.basis);
            model.set_identifier(format!("{}+sent_debias", base.identifier()));
            model
        }
        MitigationKind::ContextDebias => {
            let attributes = lexicon.attribute_terms();
            let stereotypes = lexicon.stereotype_terms();
            let cap = m.context_debias.sentences_per_word;
            let seed = substream_seed(config.seed, "context-debias");
            let sentences = |words, exclusion| -> Result<Vec<String>> {
                let h = corpus::harvest_sentences(corpus_lines, words, exclusion, cap, seed)?;
                let mut ids: Vec<(u64, String)> = h.occurrences.into_iter().map(|o| (o.sentence_id, o.sentence)).collect();
                ids.sort();
                ids.dedup();
                Ok(ids.into_iter().map(|p| p.1).collect())
            };
            let attr = sentences(&attributes, &stereotypes)?;
            let stereo = sentences(&stereotypes, &attributes)?;
            let outcome = debias::run_context_debias(base, lexicon, &attr, &stereo, &m.context_debias.objective)?;
            summary.loss_history = Some(outcome.loss_history);
            let mut model = outcome.model;
            model.set_identifier(format!("{}+context_debias", base.identifier()));
            model
        }
        MitigationKind::Cda => {
            let training = MlmConfig {
                seed: substream_seed(config.seed, "cda"),
                ..m.cda.training
            };
            summary.cda_corpus_lines = Some(debias::generate_cda_corpus(corpus_lines, lexicon, m.cda.use_names).len());
            let mut model = debias::run_cda_pretraining(base, corpus_lines, lexicon, m.cda.use_names, &training)?;
            model.set_identifier(format!("{}+cda", base.identifier()));
            model
        }
    };
    Ok((model, summary))
}

fn lpbs(config: &AuditConfig, model: &dyn MaskedLanguageModel, lexicon: &Lexicon) -> Result<(intrinsic::LpbsResult, intrinsic::LpbsResult)> {
    let templates = match &config.templates {
        Some(p) => intrinsic::load_templates(p)?,
        None => intrinsic::default_templates(),
    };
    let stereotypes = lexicon.stereotype_terms();
    Ok((
        intrinsic::attribute_lpbs(model, &templates, &stereotypes, lexicon.attribute_pairs())?,
        intrinsic::target_lpbs(model, &templates, &stereotypes, lexicon.attribute_pairs())?,
    ))
}

fn run_probe_stage(config: &AuditConfig, attr: &EmbeddingBank, stereo: &EmbeddingBank, lexicon: &Lexicon) -> Result<ProbeReport> {
    let split = split_attribute_terms(lexicon, config.probe.train_fraction, substream_seed(config.seed, "split"))?;
    let training = ProbeConfig {
        seed: substream_seed(config.seed, "probe"),
        ..config.probe.training
    };
    probe::run_probe(attr, stereo, lexicon, &split, &training, config.probe.iterations).map(|r| r.1)
}

fn extrinsic(config: &AuditConfig, model: &ContextualEncoder, lexicon: &Lexicon, report: &mut AuditReport) -> Result<ExtrinsicReport> {
    let d = &config.downstream;
    let (examples, classes) = match (d.kind, &d.dataset) {
        (DatasetKind::Synthetic, _) => {
            let s = &config.synthetic;
            let world = SyntheticWorld::new(lexicon, s.seed);
            (world.downstream_dataset(s.downstream_examples, s.gender_skew, s.cue_reliability), 2)
        }
        (kind, Some(path)) => {
            let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
            report.provenance.dataset_hash = Some(content_hash(&bytes));
            let ds = match kind {
                DatasetKind::BiasInBios => downstream::ingest_bias_in_bios(path, &d.schema)?,
                DatasetKind::Jigsaw => downstream::ingest_jigsaw(path, &d.schema)?,
                _ => downstream::ingest_generic(path, &d.schema)?,
            };
            log::info!("ingested {path:?}: {:?}", ds.stats);
            let n = ds.num_classes();
            (ds.examples, n)
        }
        (_, None) => return Err(Error::Config("downstream.dataset is not set".into())),
    };
    let cfg = DownstreamConfig {
        folds: d.folds,
        classifier: d.classifier,
        intervention: d.intervention,
        seed: substream_seed(config.seed, "downstream"),
        jobs: config.jobs,
    };
    let (ext, records) = downstream::run_downstream_eval(model, &examples, classes, lexicon, &cfg)?;
    downstream::write_predictions(config.cell_dir().join("predictions.csv"), &records)?;
    Ok(ext)
}

/// Runs one cell with the default registry.
pub fn run_audit(config: &AuditConfig) -> AuditReport {
    Auditor::default().run(config)
}
