//! Study orchestration: a declarative config, staged commands over an output
//! directory, a data-access audit and an artifact index.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::adapter::AdapterSpec;
use crate::backend::{self, BackendKind, BackendModel, TrainConfig, TrainHistory, TrainPair};
use crate::corpus::{
    build_partition, build_scenario, load_corpus, Corpus, CorpusPartition, DatasetFormat,
    PartitionParams, Sample, ScenarioKind, SplitKind,
};
use crate::error::{Error, Result};
use crate::eval::{
    draw_probe, evaluate_project, exposure_bias, measure_efficiency, render_effectiveness,
    render_efficiency, render_exposure, AdaptedModel, Efficiency, EfficiencyRow, EvalReport,
    ExposureTable, Normalization, ProjectResult, ReportFormat, MIN_TIMING_PROBES,
};
use crate::methods::{
    adapter_tune, build_curriculum, curriculum_tune, full_fine_tune, repair_pairs,
    score_confidence_batch, score_length, score_similarity, source_centroid, AdaptationResult,
    HashedBagOfTokens, MethodId, Scorer, DEFAULT_CENTROID_SAMPLE, DEFAULT_PORTIONS,
};
use crate::synth::{
    build_reverse_corpus, evaluate_generator, synthesize_project_dataset, train_bug_generator,
    write_synthetic, CleanLine, LabeledPair, TypeFallback,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub path: PathBuf,
    pub format: DatasetFormat,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            path: PathBuf::from("corpus.jsonl"),
            format: DatasetFormat::LineLevel,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterOptions {
    /// Defaults to a quarter of the backend's hidden size.
    pub bottleneck_dim: Option<usize>,
    pub init_seed: u64,
}

impl Default for AdapterOptions {
    fn default() -> Self {
        AdapterOptions {
            bottleneck_dim: None,
            init_seed: 11,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurriculumOptions {
    pub portions: Vec<f64>,
    pub centroid_sample: usize,
    pub centroid_seed: u64,
    pub embedding_dim: usize,
}

impl Default for CurriculumOptions {
    fn default() -> Self {
        CurriculumOptions {
            portions: DEFAULT_PORTIONS.to_vec(),
            centroid_sample: DEFAULT_CENTROID_SAMPLE,
            centroid_seed: 13,
            embedding_dim: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthOptions {
    /// Condition the generator on the error type.
    pub with_metadata: bool,
    /// Keep target error types on clean lines; when off, types are drawn
    /// from the project's empirical distribution.
    pub retain_error_types: bool,
    pub seed: u64,
    pub train: TrainConfig,
}

impl Default for SynthOptions {
    fn default() -> Self {
        SynthOptions {
            with_metadata: true,
            retain_error_types: true,
            seed: 17,
            train: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    pub probe_size: usize,
    pub probe_seed: u64,
    pub normalization: Normalization,
    /// Exposure rows dropping more than this many points are flagged.
    pub overfit_margin: f64,
    /// Cells within this many points of the row maximum are marked.
    pub mark_margin: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            probe_size: 5000,
            probe_seed: 19,
            normalization: Normalization::Collapse,
            overfit_margin: 5.0,
            mark_margin: 3.0,
        }
    }
}

/// The single document of record for a study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyConfig {
    pub output_dir: PathBuf,
    pub methods: Vec<MethodId>,
    pub model_seed: u64,
    pub dataset: DatasetConfig,
    pub partition: PartitionParams,
    pub backend: BackendKind,
    pub pretrain: TrainConfig,
    pub adapt: TrainConfig,
    pub adapter: AdapterOptions,
    pub curriculum: CurriculumOptions,
    pub synth: SynthOptions,
    pub eval: EvalOptions,
}

impl Default for StudyConfig {
    fn default() -> Self {
        StudyConfig {
            output_dir: PathBuf::from("study-out"),
            methods: vec![
                MethodId::Default,
                MethodId::Baseline,
                MethodId::Fft,
                MethodId::Tlwal,
                MethodId::ClLength,
                MethodId::ClConfidence,
                MethodId::ClSimilarity,
            ],
            model_seed: 1,
            dataset: DatasetConfig::default(),
            partition: PartitionParams::default(),
            backend: BackendKind::ToyNeural(Default::default()),
            pretrain: TrainConfig::default(),
            adapt: TrainConfig::default(),
            adapter: AdapterOptions::default(),
            curriculum: CurriculumOptions::default(),
            synth: SynthOptions::default(),
            eval: EvalOptions::default(),
        }
    }
}

impl StudyConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: StudyConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config = Self::from_toml(&text)?;
        // Relative dataset and output paths resolve against the config file.
        if let Some(dir) = path.parent() {
            if config.dataset.path.is_relative() {
                config.dataset.path = dir.join(&config.dataset.path);
            }
            if config.output_dir.is_relative() {
                config.output_dir = dir.join(&config.output_dir);
            }
        }
        Ok(config)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(Error::Config("method list is empty".into()));
        }
        self.partition.ratios.validate()?;
        for (name, cfg) in [
            ("pretrain", &self.pretrain),
            ("adapt", &self.adapt),
            ("synth.train", &self.synth.train),
        ] {
            cfg.validate()
                .map_err(|e| Error::Config(format!("[{name}] {e}")))?;
        }
        if self.curriculum.embedding_dim == 0 {
            return Err(Error::Config(
                "curriculum.embedding_dim must be >= 1".into(),
            ));
        }
        if self.eval.probe_size == 0 {
            return Err(Error::Config("eval.probe_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Paths of every artifact under the output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn partition(&self) -> PathBuf {
        self.root.join("partition.json")
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }

    /// Deterministic tables: a pure function of config and corpus.
    pub fn report(&self, name: &str, format: ReportFormat) -> PathBuf {
        self.reports()
            .join(format!("{name}.{}", format.extension()))
    }

    /// Wall-clock measurements; these differ between runs.
    pub fn timing(&self, name: &str, format: ReportFormat) -> PathBuf {
        self.root
            .join("timings")
            .join(format!("{name}.{}", format.extension()))
    }

    pub fn pretrained(&self, scenario: ScenarioKind) -> PathBuf {
        self.root
            .join("checkpoints")
            .join(format!("pretrain-{}", scenario.name()))
    }

    pub fn adapted(&self, method: MethodId, project: &str) -> PathBuf {
        self.root
            .join("checkpoints")
            .join(method.name())
            .join(project)
    }

    pub fn generator(&self) -> PathBuf {
        self.root.join("checkpoints").join("generator")
    }

    pub fn synthetic(&self, project: &str) -> PathBuf {
        self.root.join("synthetic").join(format!("{project}.jsonl"))
    }

    pub fn evaluation(&self) -> PathBuf {
        self.root.join("evaluation.json")
    }

    pub fn audit(&self) -> PathBuf {
        self.root.join("audit.jsonl")
    }

    pub fn index(&self) -> PathBuf {
        self.root.join("index.json")
    }
}

/// Training record kept next to each checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub stage: String,
    pub method: Option<MethodId>,
    pub scenario: Option<ScenarioKind>,
    pub project_id: Option<String>,
    pub prep_time_s: f64,
    pub training_samples: usize,
    pub history: TrainHistory,
}

pub const RUN_FILE: &str = "run.json";

impl RunRecord {
    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(RUN_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    fn write(&self, dir: &Path) -> Result<()> {
        write_json(&dir.join(RUN_FILE), self)
    }
}

/// One read of corpus fields from one split of one project.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessRecord {
    pub stage: String,
    pub project_id: String,
    pub split: String,
    pub fields: Vec<String>,
}

const REPAIR_FIELDS: [&str; 5] = [
    "error_type",
    "error_message",
    "buggy_line",
    "fixed_line",
    "context",
];

/// Corpus access for one stage; every read is logged with the fields used.
pub struct DataAccess<'a> {
    corpus: &'a Corpus,
    partition: &'a CorpusPartition,
    stage: String,
    log: RefCell<Vec<AccessRecord>>,
}

impl<'a> DataAccess<'a> {
    pub fn new(corpus: &'a Corpus, partition: &'a CorpusPartition, stage: &str) -> Self {
        DataAccess {
            corpus,
            partition,
            stage: stage.to_string(),
            log: RefCell::new(Vec::new()),
        }
    }

    fn record(&self, project: &str, kind: SplitKind, fields: &[&str]) {
        self.log.borrow_mut().push(AccessRecord {
            stage: self.stage.clone(),
            project_id: project.to_string(),
            split: kind.name().to_string(),
            fields: fields.iter().map(|f| f.to_string()).collect(),
        });
    }

    /// Samples of one split; `fields` declares what the caller will read.
    pub fn samples(
        &self,
        project: &str,
        kind: SplitKind,
        fields: &[&str],
    ) -> Result<Vec<&'a Sample>> {
        self.record(project, kind, fields);
        self.corpus.resolve(self.partition.ids(project, kind))
    }

    pub fn repair_pairs(&self, project: &str, kind: SplitKind) -> Result<Vec<TrainPair>> {
        Ok(repair_pairs(&self.samples(
            project,
            kind,
            &REPAIR_FIELDS,
        )?))
    }

    pub fn source_repair_pairs(&self, kind: SplitKind) -> Result<Vec<TrainPair>> {
        let mut out = Vec::new();
        for p in &self.partition.source_projects {
            out.extend(self.repair_pairs(p, kind)?);
        }
        Ok(out)
    }

    /// Fixed lines with context (and error types when retained); buggy lines
    /// are never read.
    pub fn clean_lines(
        &self,
        project: &str,
        kind: SplitKind,
        retain_types: bool,
    ) -> Result<Vec<CleanLine>> {
        let fields: &[&str] = if retain_types {
            &["fixed_line", "context", "error_type"]
        } else {
            &["fixed_line", "context"]
        };
        Ok(self
            .samples(project, kind, fields)?
            .into_iter()
            .map(|s| CleanLine {
                id: s.id.clone(),
                project_id: s.project_id.clone(),
                text: s.fixed_line.clone(),
                context: s.context.clone(),
                error_type: retain_types.then(|| s.error_type.clone()),
            })
            .collect())
    }

    pub fn error_type_counts(
        &self,
        project: &str,
        kind: SplitKind,
    ) -> Result<BTreeMap<String, usize>> {
        let mut counts = BTreeMap::new();
        for s in self.samples(project, kind, &["error_type"])? {
            *counts.entry(s.error_type.clone()).or_insert(0) += 1;
        }
        Ok(counts)
    }

    pub fn source_samples(&self, kind: SplitKind, fields: &[&str]) -> Result<Vec<&'a Sample>> {
        let mut out = Vec::new();
        for p in &self.partition.source_projects {
            out.extend(self.samples(p, kind, fields)?);
        }
        Ok(out)
    }

    pub fn into_log(self) -> Vec<AccessRecord> {
        self.log.into_inner()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct IndexEntry {
    stage: String,
    path: String,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Rows of the per-project split summary.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitRow {
    pub project_id: String,
    pub total: usize,
    pub train: usize,
    pub validation: usize,
    pub test: usize,
}

pub struct SplitOutcome {
    pub partition: CorpusPartition,
    pub summary: Vec<SplitRow>,
}

pub struct PretrainOutcome {
    pub scenario: ScenarioKind,
    pub checkpoint: PathBuf,
    pub checkpoint_bytes: u64,
    pub record: RunRecord,
    pub training_ids: Vec<String>,
}

pub struct AdaptOutcome {
    pub method: MethodId,
    pub project_id: String,
    pub checkpoint: PathBuf,
    pub checkpoint_bytes: u64,
    pub record: RunRecord,
    pub audit: Vec<AccessRecord>,
}

pub struct SynthOutcome {
    pub project_id: String,
    pub dataset: PathBuf,
    pub generated: usize,
    pub skipped: usize,
    pub audit: Vec<AccessRecord>,
}

/// Everything `evaluate` computes; persisted so `report` can re-render.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub reports: Vec<EvalReport>,
    pub efficiency: Vec<EfficiencyRow>,
    pub exposure: Option<ExposureTable>,
}

pub struct Study {
    pub config: StudyConfig,
    pub layout: Layout,
}

impl Study {
    pub fn new(config: StudyConfig) -> Result<Self> {
        config.validate()?;
        let layout = Layout {
            root: config.output_dir.clone(),
        };
        Ok(Study { config, layout })
    }

    pub fn corpus(&self) -> Result<Corpus> {
        load_corpus(&self.config.dataset.path, self.config.dataset.format)
    }

    pub fn partition(&self) -> Result<CorpusPartition> {
        let path = self.layout.partition();
        if !path.exists() {
            return Err(Error::Config(format!(
                "no partition at {}; run `split` first",
                path.display()
            )));
        }
        CorpusPartition::load(&path)
    }

    fn register(&self, stage: &str, artifacts: &[(String, &Path)]) -> Result<()> {
        let path = self.layout.index();
        let mut index: BTreeMap<String, IndexEntry> = if path.exists() {
            let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            serde_json::from_str(&text)?
        } else {
            BTreeMap::new()
        };
        for (name, artifact) in artifacts {
            let rel = artifact
                .strip_prefix(&self.layout.root)
                .unwrap_or(artifact)
                .to_string_lossy()
                .replace('\\', "/");
            index.insert(
                name.clone(),
                IndexEntry {
                    stage: stage.to_string(),
                    path: rel,
                },
            );
        }
        write_json(&path, &index)
    }

    fn append_audit(&self, records: &[AccessRecord]) -> Result<()> {
        let path = self.layout.audit();
        std::fs::create_dir_all(&self.layout.root).map_err(|e| Error::io(&self.layout.root, e))?;
        let mut file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        for r in records {
            writeln!(file, "{}", serde_json::to_string(r)?).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    fn load_checkpoint(&self, dir: &Path, what: &str) -> Result<BackendModel> {
        if !dir.join(backend::MANIFEST_FILE).exists() {
            return Err(Error::Checkpoint(format!(
                "missing {what} checkpoint at {}",
                dir.display()
            )));
        }
        backend::load(dir)
    }

    fn bottleneck(&self) -> usize {
        self.config
            .adapter
            .bottleneck_dim
            .unwrap_or(match &self.config.backend {
                BackendKind::ToyNeural(c) => AdapterSpec::default_bottleneck(c.d_model),
                BackendKind::Memorizer => 1,
            })
    }

    /// Builds the partition and writes it with a per-target summary.
    pub fn split(&self) -> Result<SplitOutcome> {
        let corpus = self.corpus()?;
        let partition = build_partition(&corpus, &self.config.partition)?;
        write_text(&self.layout.partition(), &partition.to_json())?;
        let summary: Vec<SplitRow> = partition
            .target_projects
            .iter()
            .map(|p| {
                let s = partition.project_split(p).expect("target has a split");
                SplitRow {
                    project_id: p.clone(),
                    total: s.len(),
                    train: s.train.len(),
                    validation: s.validation.len(),
                    test: s.test.len(),
                }
            })
            .collect();
        let mut artifacts = vec![("partition".to_string(), self.layout.partition())];
        for format in [ReportFormat::Markdown, ReportFormat::Csv] {
            let path = self.layout.report("split_summary", format);
            write_text(&path, &render_split_summary(&summary, &partition, format))?;
            artifacts.push((format!("split_summary.{}", format.extension()), path));
        }
        let refs: Vec<(String, &Path)> = artifacts
            .iter()
            .map(|(n, p)| (n.clone(), p.as_path()))
            .collect();
        self.register("split", &refs)?;
        Ok(SplitOutcome { partition, summary })
    }

    /// Trains the backend from scratch on the scenario's training set.
    pub fn pretrain(&self, scenario: ScenarioKind) -> Result<PretrainOutcome> {
        let corpus = self.corpus()?;
        let partition = self.partition()?;
        let access = DataAccess::new(&corpus, &partition, "pretrain");
        let plan = build_scenario(&partition, scenario);
        let mut train_pairs = access.source_repair_pairs(SplitKind::Train)?;
        let mut val_pairs = access.source_repair_pairs(SplitKind::Validation)?;
        if scenario == ScenarioKind::Included {
            for p in &partition.target_projects {
                train_pairs.extend(access.repair_pairs(p, SplitKind::Train)?);
                val_pairs.extend(access.repair_pairs(p, SplitKind::Validation)?);
            }
        }
        debug_assert_eq!(train_pairs.len(), plan.training_samples.len());
        let started = Instant::now();
        let model = self.config.backend.create(self.config.model_seed)?;
        let (model, history) =
            backend::train(model, &train_pairs, &val_pairs, &self.config.pretrain)?;
        let prep_time_s = started.elapsed().as_secs_f64();
        let dir = self.layout.pretrained(scenario);
        let checkpoint_bytes = backend::save_tagged(
            model.as_ref(),
            &dir,
            &[format!("scenario:{}", scenario.name())],
        )?;
        let record = RunRecord {
            stage: "pretrain".into(),
            method: None,
            scenario: Some(scenario),
            project_id: None,
            prep_time_s,
            training_samples: train_pairs.len(),
            history,
        };
        record.write(&dir)?;
        self.append_audit(&access.into_log())?;
        self.register(
            "pretrain",
            &[(format!("pretrain-{}", scenario.name()), &dir)],
        )?;
        Ok(PretrainOutcome {
            scenario,
            checkpoint: dir,
            checkpoint_bytes,
            record,
            training_ids: train_pairs.into_iter().map(|p| p.id).collect(),
        })
    }

    /// The bug generator, trained on reversed source-train pairs on first use.
    fn generator(&self, access: &DataAccess<'_>) -> Result<BackendModel> {
        let dir = self.layout.generator();
        if dir.join(backend::MANIFEST_FILE).exists() {
            return backend::load(&dir);
        }
        let fields = ["error_type", "buggy_line", "fixed_line", "context"];
        let meta = self.config.synth.with_metadata;
        let train = build_reverse_corpus(&access.source_samples(SplitKind::Train, &fields)?, meta);
        let val = build_reverse_corpus(
            &access.source_samples(SplitKind::Validation, &fields)?,
            meta,
        );
        let started = Instant::now();
        let (model, history) = train_bug_generator(
            &self.config.backend,
            self.config.model_seed,
            &train,
            &val,
            &self.config.synth.train,
        )?;
        backend::save_tagged(model.as_ref(), &dir, &["generator".to_string()])?;
        RunRecord {
            stage: "generator".into(),
            method: None,
            scenario: None,
            project_id: None,
            prep_time_s: started.elapsed().as_secs_f64(),
            training_samples: train.len(),
            history,
        }
        .write(&dir)?;
        self.register("synthesize", &[("generator".to_string(), &dir)])?;
        Ok(model)
    }

    fn synthesize_split(
        &self,
        generator: &dyn backend::Backend,
        access: &DataAccess<'_>,
        project: &str,
        kind: SplitKind,
    ) -> Result<(Vec<Sample>, usize, Vec<crate::synth::SyntheticSample>)> {
        let synth = &self.config.synth;
        let lines = access.clean_lines(project, kind, synth.retain_error_types)?;
        let fallback = if synth.retain_error_types {
            None
        } else {
            Some(TypeFallback {
                distribution: access.error_type_counts(project, SplitKind::Train)?,
                seed: crate::corpus::derive_seed(synth.seed, project),
            })
        };
        let report = synthesize_project_dataset(
            generator,
            "generator",
            &lines,
            synth.with_metadata,
            fallback.as_ref(),
        )?;
        let samples = report
            .samples
            .iter()
            .map(|s| s.to_sample())
            .collect::<Result<Vec<_>>>()?;
        Ok((samples, report.skipped, report.samples))
    }

    /// Synthesizes a project's repair data from its clean train lines and
    /// reports generator accuracy on reversed source-test pairs.
    pub fn synthesize(&self, project: &str) -> Result<SynthOutcome> {
        let corpus = self.corpus()?;
        let partition = self.partition()?;
        if !partition.is_target(project) {
            return Err(Error::InvalidArgument(format!(
                "`{project}` is not a target project"
            )));
        }
        let access = DataAccess::new(&corpus, &partition, "synthesize");
        let generator = self.generator(&access)?;
        let (_, skipped, synthetic) =
            self.synthesize_split(generator.as_ref(), &access, project, SplitKind::Train)?;
        let dataset = self.layout.synthetic(project);
        if let Some(dir) = dataset.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        write_synthetic(&synthetic, &dataset)?;
        let fields = ["error_type", "buggy_line", "fixed_line", "context"];
        let held_out: Vec<LabeledPair> = access
            .source_samples(SplitKind::Test, &fields)?
            .into_iter()
            .map(|s| LabeledPair {
                error_type: s.error_type.clone(),
                pair: crate::synth::reverse_pair(s, self.config.synth.with_metadata),
            })
            .collect();
        let eval = evaluate_generator(generator.as_ref(), &held_out)?;
        let mut artifacts = vec![(format!("synthetic/{project}"), dataset.clone())];
        for format in [ReportFormat::Markdown, ReportFormat::Csv] {
            let path = self.layout.report("generator", format);
            write_text(&path, &render_generator(&eval, format))?;
            artifacts.push((format!("generator.{}", format.extension()), path));
        }
        let audit = access.into_log();
        self.append_audit(&audit)?;
        let refs: Vec<(String, &Path)> = artifacts
            .iter()
            .map(|(n, p)| (n.clone(), p.as_path()))
            .collect();
        self.register("synthesize", &refs)?;
        Ok(SynthOutcome {
            project_id: project.to_string(),
            dataset,
            generated: synthetic.len(),
            skipped,
            audit,
        })
    }

    /// Adapts the excluded-scenario model to one target project.
    pub fn adapt(&self, method: MethodId, project: &str) -> Result<AdaptOutcome> {
        if !method.adapts() {
            return Err(Error::InvalidArgument(format!(
                "`{method}` reuses a pretrained checkpoint and has nothing to adapt"
            )));
        }
        let corpus = self.corpus()?;
        let partition = self.partition()?;
        if !partition.is_target(project) {
            return Err(Error::InvalidArgument(format!(
                "`{project}` is not a target project"
            )));
        }
        let pretrained = self.load_checkpoint(
            &self.layout.pretrained(ScenarioKind::Excluded),
            "excluded pretrained",
        )?;
        let access = DataAccess::new(&corpus, &partition, "adapt");
        let cfg = &self.config.adapt;
        let dir = self.layout.adapted(method, project);
        let mut extra_artifacts: Vec<(String, PathBuf)> = Vec::new();
        let (result, training_samples): (AdaptationResult, usize) = match method {
            MethodId::Fft => {
                let train = access.repair_pairs(project, SplitKind::Train)?;
                let val = access.repair_pairs(project, SplitKind::Validation)?;
                (
                    full_fine_tune(pretrained.as_ref(), project, &train, &val, cfg)?,
                    train.len(),
                )
            }
            MethodId::Tlwal => {
                let train = access.repair_pairs(project, SplitKind::Train)?;
                let val = access.repair_pairs(project, SplitKind::Validation)?;
                let spec = AdapterSpec::for_model(
                    pretrained.as_ref(),
                    self.bottleneck(),
                    self.config.adapter.init_seed,
                );
                (
                    adapter_tune(pretrained.as_ref(), &spec, project, &train, &val, cfg)?,
                    train.len(),
                )
            }
            MethodId::ClLength | MethodId::ClConfidence | MethodId::ClSimilarity => {
                let scorer = method.scorer().expect("curriculum method");
                let samples = access.samples(project, SplitKind::Train, &REPAIR_FIELDS)?;
                let train = repair_pairs(&samples);
                let val = access.repair_pairs(project, SplitKind::Validation)?;
                let keys = match scorer {
                    Scorer::Length => samples.iter().map(|s| score_length(s)).collect(),
                    Scorer::Confidence => score_confidence_batch(pretrained.as_ref(), &samples),
                    Scorer::Similarity => {
                        let opts = &self.config.curriculum;
                        let embedder = HashedBagOfTokens {
                            dim: opts.embedding_dim,
                        };
                        let source = access.source_samples(SplitKind::Train, &["buggy_line"])?;
                        let lines: Vec<&str> =
                            source.iter().map(|s| s.buggy_line.as_str()).collect();
                        let centroid = source_centroid(
                            &embedder,
                            &lines,
                            opts.centroid_sample,
                            opts.centroid_seed,
                        );
                        samples
                            .iter()
                            .map(|s| score_similarity(s, &centroid, &embedder))
                            .collect()
                    }
                };
                let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
                let plan = build_curriculum(
                    scorer,
                    &ids,
                    &keys,
                    &self.config.curriculum.portions,
                    cfg.max_epochs,
                )?;
                let plan_path = dir.join("curriculum.json");
                write_text(&plan_path, &plan.to_json())?;
                extra_artifacts.push((format!("{method}/{project}/curriculum"), plan_path));
                (
                    curriculum_tune(pretrained.as_ref(), &plan, project, &train, &val, cfg)?,
                    train.len(),
                )
            }
            MethodId::FftSynthetic => {
                let started = Instant::now();
                let generator = self.generator(&access)?;
                let (train_samples, skipped, synthetic) =
                    self.synthesize_split(generator.as_ref(), &access, project, SplitKind::Train)?;
                let (val_samples, _, _) = self.synthesize_split(
                    generator.as_ref(),
                    &access,
                    project,
                    SplitKind::Validation,
                )?;
                if skipped > 0 {
                    log::warn!("{skipped} clean lines of `{project}` produced no bug");
                }
                let dataset = self.layout.synthetic(project);
                if let Some(d) = dataset.parent() {
                    std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
                }
                write_synthetic(&synthetic, &dataset)?;
                extra_artifacts.push((format!("synthetic/{project}"), dataset));
                let synth_time = started.elapsed().as_secs_f64();
                let train = repair_pairs(&train_samples.iter().collect::<Vec<_>>());
                let val = repair_pairs(&val_samples.iter().collect::<Vec<_>>());
                let mut r = full_fine_tune(pretrained.as_ref(), project, &train, &val, cfg)?;
                r.method = MethodId::FftSynthetic;
                r.prep_time_s += synth_time;
                (r, train.len())
            }
            MethodId::Default | MethodId::Baseline => unreachable!("rejected above"),
        };
        let checkpoint_bytes = backend::save_tagged(
            result.model.as_ref(),
            &dir,
            &[format!("method:{method}"), format!("project:{project}")],
        )?;
        let record = RunRecord {
            stage: "adapt".into(),
            method: Some(method),
            scenario: None,
            project_id: Some(project.to_string()),
            prep_time_s: result.prep_time_s,
            training_samples,
            history: result.history,
        };
        record.write(&dir)?;
        let audit = access.into_log();
        self.append_audit(&audit)?;
        let mut artifacts: Vec<(String, &Path)> =
            vec![(format!("{method}/{project}"), dir.as_path())];
        artifacts.extend(
            extra_artifacts
                .iter()
                .map(|(n, p)| (n.clone(), p.as_path())),
        );
        self.register("adapt", &artifacts)?;
        Ok(AdaptOutcome {
            method,
            project_id: project.to_string(),
            checkpoint: dir,
            checkpoint_bytes,
            record,
            audit,
        })
    }

    /// Every configured adaptation method on every target project.
    pub fn adapt_all(&self) -> Result<Vec<AdaptOutcome>> {
        let partition = self.partition()?;
        let mut out = Vec::new();
        for method in self.config.methods.iter().filter(|m| m.adapts()) {
            for project in &partition.target_projects {
                out.push(self.adapt(*method, project)?);
            }
        }
        Ok(out)
    }

    /// Evaluates every configured method on every target test split, plus
    /// the exposure probe; never trains.
    pub fn evaluate(&self) -> Result<Evaluation> {
        let corpus = self.corpus()?;
        let partition = self.partition()?;
        if partition.target_projects.is_empty() {
            return Err(Error::EmptyData("partition has no target projects".into()));
        }
        let access = DataAccess::new(&corpus, &partition, "evaluate");
        let norm = self.config.eval.normalization;
        let mut tests: Vec<(String, Vec<&Sample>)> = Vec::new();
        for p in &partition.target_projects {
            tests.push((
                p.clone(),
                access.samples(p, SplitKind::Test, &REPAIR_FIELDS)?,
            ));
        }
        let timing_inputs: Vec<String> = tests
            .iter()
            .flat_map(|(_, s)| s.iter().map(|x| crate::corpus::format_repair_input(x)))
            .collect();
        let source_test = partition.source(SplitKind::Test);
        let probe_ids = draw_probe(
            &source_test,
            self.config.eval.probe_size,
            self.config.eval.probe_seed,
        );
        let probe_samples = access.source_samples(SplitKind::Test, &REPAIR_FIELDS)?;
        let probe_set: BTreeSet<&str> = probe_ids.iter().map(String::as_str).collect();
        let probe: Vec<TrainPair> = repair_pairs(
            &probe_samples
                .into_iter()
                .filter(|s| probe_set.contains(s.id.as_str()))
                .collect::<Vec<_>>(),
        );

        let mut reports = Vec::new();
        let mut efficiency = Vec::new();
        let mut adapted: Vec<(MethodId, String, BackendModel)> = Vec::new();
        for &method in &self.config.methods {
            let mut results: Vec<ProjectResult> = Vec::new();
            let mut rows: Vec<EfficiencyRow> = Vec::new();
            match method {
                MethodId::Default | MethodId::Baseline => {
                    let scenario = if method == MethodId::Default {
                        ScenarioKind::Excluded
                    } else {
                        ScenarioKind::Included
                    };
                    let dir = self.layout.pretrained(scenario);
                    let model =
                        self.load_checkpoint(&dir, &format!("{} pretrained", scenario.name()))?;
                    for (p, test) in &tests {
                        results.push(evaluate_project(model.as_ref(), p, test, norm)?.result);
                    }
                    // The excluded model is what every method starts from.
                    let prep = match method {
                        MethodId::Default => 0.0,
                        _ => RunRecord::read(&dir)?.prep_time_s,
                    };
                    let probes: Vec<&str> = timing_inputs
                        .iter()
                        .take(MIN_TIMING_PROBES)
                        .map(String::as_str)
                        .collect();
                    rows.push(EfficiencyRow {
                        method: method.name().to_string(),
                        project_id: None,
                        efficiency: measure_efficiency(prep, model.as_ref(), &dir, &probes)?,
                    });
                }
                _ => {
                    for (p, test) in &tests {
                        let dir = self.layout.adapted(method, p);
                        let model = self.load_checkpoint(&dir, &format!("{method}/{p}"))?;
                        results.push(evaluate_project(model.as_ref(), p, test, norm)?.result);
                        let probes: Vec<String> = test
                            .iter()
                            .take(MIN_TIMING_PROBES)
                            .map(|s| crate::corpus::format_repair_input(s))
                            .collect();
                        let probes: Vec<&str> = probes.iter().map(String::as_str).collect();
                        let prep = RunRecord::read(&dir)?.prep_time_s;
                        rows.push(EfficiencyRow {
                            method: method.name().to_string(),
                            project_id: Some(p.clone()),
                            efficiency: measure_efficiency(prep, model.as_ref(), &dir, &probes)?,
                        });
                        adapted.push((method, p.clone(), model));
                    }
                }
            }
            let mut report = EvalReport::new(method.name(), results)?;
            report.efficiency = Some(mean_efficiency(&rows));
            reports.push(report);
            efficiency.extend(rows);
        }
        let exposure = if probe.is_empty() {
            log::warn!("source-test is empty; skipping the exposure probe");
            None
        } else {
            let pretrained = self.load_checkpoint(
                &self.layout.pretrained(ScenarioKind::Excluded),
                "excluded pretrained",
            )?;
            let views: Vec<AdaptedModel<'_>> = adapted
                .iter()
                .map(|(m, p, model)| AdaptedModel {
                    method: m.name(),
                    project_id: p,
                    model: model.as_ref(),
                })
                .collect();
            Some(exposure_bias(
                pretrained.as_ref(),
                &views,
                &probe,
                self.config.eval.overfit_margin,
            )?)
        };
        let evaluation = Evaluation {
            reports,
            efficiency,
            exposure,
        };
        write_json(&self.layout.evaluation(), &evaluation)?;
        if let Some(table) = &evaluation.exposure {
            write_json(&self.layout.reports().join("probe.json"), &table.probe_ids)?;
        }
        self.append_audit(&access.into_log())?;
        self.register(
            "evaluate",
            &[("evaluation".to_string(), &self.layout.evaluation())],
        )?;
        self.render(&evaluation)?;
        Ok(evaluation)
    }

    /// Re-renders report files from the stored evaluation.
    pub fn report(&self) -> Result<Vec<PathBuf>> {
        let path = self.layout.evaluation();
        if !path.exists() {
            return Err(Error::Config(format!(
                "no evaluation at {}; run `evaluate` first",
                path.display()
            )));
        }
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let evaluation: Evaluation = serde_json::from_str(&text)?;
        self.render(&evaluation)
    }

    fn render(&self, evaluation: &Evaluation) -> Result<Vec<PathBuf>> {
        let mut written = Vec::new();
        for format in [ReportFormat::Markdown, ReportFormat::Csv] {
            let path = self.layout.report("effectiveness", format);
            write_text(
                &path,
                &render_effectiveness(&evaluation.reports, format, self.config.eval.mark_margin)?,
            )?;
            written.push(path);
            let path = self.layout.timing("efficiency", format);
            write_text(&path, &render_efficiency(&evaluation.efficiency, format))?;
            written.push(path);
            if let Some(table) = &evaluation.exposure {
                let path = self.layout.report("exposure", format);
                write_text(&path, &render_exposure(table, format))?;
                written.push(path);
            }
        }
        let artifacts: Vec<(String, &Path)> = written
            .iter()
            .map(|p| {
                let name = p.file_name().expect("file").to_string_lossy().into_owned();
                (name, p.as_path())
            })
            .collect();
        self.register("report", &artifacts)?;
        Ok(written)
    }

    /// split, both pretraining scenarios, every adaptation, evaluate.
    pub fn run_all(&self) -> Result<Evaluation> {
        self.split()?;
        self.pretrain(ScenarioKind::Excluded)?;
        if self.config.methods.contains(&MethodId::Baseline) {
            self.pretrain(ScenarioKind::Included)?;
        }
        self.adapt_all()?;
        self.evaluate()
    }
}

fn mean_efficiency(rows: &[EfficiencyRow]) -> Efficiency {
    let n = rows.len().max(1) as f64;
    Efficiency {
        prep_time_s: rows.iter().map(|r| r.efficiency.prep_time_s).sum::<f64>() / n,
        inference_time_s_per_sample: rows
            .iter()
            .map(|r| r.efficiency.inference_time_s_per_sample)
            .sum::<f64>()
            / n,
        model_size_bytes: (rows
            .iter()
            .map(|r| r.efficiency.model_size_bytes as f64)
            .sum::<f64>()
            / n)
            .round() as u64,
        probe_count: rows
            .iter()
            .map(|r| r.efficiency.probe_count)
            .min()
            .unwrap_or(0),
    }
}

fn render_split_summary(
    rows: &[SplitRow],
    partition: &CorpusPartition,
    format: ReportFormat,
) -> String {
    let mut lines: Vec<[String; 5]> = rows
        .iter()
        .map(|r| {
            [
                r.project_id.clone(),
                r.total.to_string(),
                r.train.to_string(),
                r.validation.to_string(),
                r.test.to_string(),
            ]
        })
        .collect();
    let sum = |f: fn(&SplitRow) -> usize| rows.iter().map(f).sum::<usize>().to_string();
    lines.push([
        "Sum".into(),
        sum(|r| r.total),
        sum(|r| r.train),
        sum(|r| r.validation),
        sum(|r| r.test),
    ]);
    let header = ["Project", "# Samples", "# Train", "# Validation", "# Test"];
    let mut out = String::new();
    match format {
        ReportFormat::Markdown => {
            out.push_str(&format!(
                "| {} |\n|---|---|---|---|---|\n",
                header.join(" | ")
            ));
            for l in &lines {
                out.push_str(&format!("| {} |\n", l.join(" | ")));
            }
            out.push_str(&format!(
                "\nSource projects: {}; target projects: {}.\n",
                partition.source_projects.len(),
                partition.target_projects.len()
            ));
        }
        ReportFormat::Csv => {
            out.push_str(&header.join(","));
            out.push('\n');
            for l in &lines {
                out.push_str(&l.join(","));
                out.push('\n');
            }
        }
    }
    out
}

fn render_generator(eval: &crate::synth::GeneratorEval, format: ReportFormat) -> String {
    let mut out = String::new();
    let rows: Vec<[String; 3]> = eval
        .rows
        .iter()
        .map(|r| {
            [
                r.error_type.clone(),
                r.count.to_string(),
                format!("{:.2}", r.exact_match_pct),
            ]
        })
        .chain(std::iter::once([
            "Weighted Average".to_string(),
            eval.rows.iter().map(|r| r.count).sum::<usize>().to_string(),
            format!("{:.2}", eval.weighted_average),
        ]))
        .collect();
    match format {
        ReportFormat::Markdown => {
            out.push_str("| Error type | # Samples | Exact match |\n|---|---|---|\n");
            for r in rows {
                out.push_str(&format!("| {} |\n", r.join(" | ")));
            }
        }
        ReportFormat::Csv => {
            out.push_str("Error type,# Samples,Exact match\n");
            for r in rows {
                out.push_str(&r.join(","));
                out.push('\n');
            }
        }
    }
    out
}
