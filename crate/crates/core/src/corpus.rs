//! Project-labelled bug-fix corpora: loading, validation, input formatting,
//! project-stratified partitioning and the included/excluded training
//! scenarios.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};

/// Fields every dataset record must carry.
pub const RECORD_FIELDS: [&str; 7] = [
    "id",
    "project_id",
    "error_type",
    "error_message",
    "buggy_line",
    "fixed_line",
    "context",
];

/// Whitespace tokenization shared by length scoring and the toy backends.
pub fn tokens(text: &str) -> impl Iterator<Item = &str> {
    text.split_whitespace()
}

pub fn token_count(text: &str) -> usize {
    tokens(text).count()
}

/// Dataset layouts accepted by the loader.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetFormat {
    /// Line-level records with error metadata and surrounding context.
    #[default]
    LineLevel,
    /// Function-level records; error message and context are dropped.
    FunctionLevel,
}

impl DatasetFormat {
    pub fn id(self) -> &'static str {
        match self {
            DatasetFormat::LineLevel => "line-level",
            DatasetFormat::FunctionLevel => "function-level",
        }
    }
}

impl FromStr for DatasetFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "line-level" => Ok(DatasetFormat::LineLevel),
            "function-level" => Ok(DatasetFormat::FunctionLevel),
            other => Err(Error::InvalidArgument(format!(
                "unknown dataset format `{other}`"
            ))),
        }
    }
}

impl fmt::Display for DatasetFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

/// One bug-fix pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub project_id: String,
    pub error_type: String,
    pub error_message: String,
    pub buggy_line: String,
    pub fixed_line: String,
    pub context: String,
    pub token_count: usize,
}

impl Sample {
    pub fn new(
        id: impl Into<String>,
        project_id: impl Into<String>,
        error_type: impl Into<String>,
        error_message: impl Into<String>,
        buggy_line: impl Into<String>,
        fixed_line: impl Into<String>,
        context: impl Into<String>,
    ) -> Result<Self> {
        let buggy_line = buggy_line.into();
        let fixed_line = fixed_line.into();
        let id = id.into();
        if buggy_line.trim().is_empty() || fixed_line.trim().is_empty() {
            return Err(Error::InvalidArgument(format!(
                "sample `{id}` has an empty buggy or fixed line"
            )));
        }
        Ok(Sample {
            token_count: token_count(&buggy_line),
            id,
            project_id: project_id.into(),
            error_type: error_type.into(),
            error_message: error_message.into(),
            buggy_line,
            fixed_line,
            context: context.into(),
        })
    }

    /// The JSON-lines record for this sample (token count is derived, not stored).
    pub fn to_record(&self) -> Value {
        json!({
            "id": self.id,
            "project_id": self.project_id,
            "error_type": self.error_type,
            "error_message": self.error_message,
            "buggy_line": self.buggy_line,
            "fixed_line": self.fixed_line,
            "context": self.context,
        })
    }
}

/// An ordered sample list with project and (project, error type) indices.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    samples: Vec<Sample>,
    by_id: HashMap<String, usize>,
    by_project: BTreeMap<String, Vec<usize>>,
    by_project_type: BTreeMap<(String, String), Vec<usize>>,
}

impl Corpus {
    pub fn new(samples: Vec<Sample>) -> Result<Self> {
        let mut corpus = Corpus {
            samples,
            ..Default::default()
        };
        for (idx, s) in corpus.samples.iter().enumerate() {
            if corpus.by_id.insert(s.id.clone(), idx).is_some() {
                return Err(Error::DuplicateId(s.id.clone()));
            }
            corpus
                .by_project
                .entry(s.project_id.clone())
                .or_default()
                .push(idx);
            corpus
                .by_project_type
                .entry((s.project_id.clone(), s.error_type.clone()))
                .or_default()
                .push(idx);
        }
        Ok(corpus)
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Sample> {
        self.by_id.get(id).map(|&i| &self.samples[i])
    }

    /// Looks up every id, failing on the first unknown one.
    pub fn resolve<'a, S: AsRef<str>>(&'a self, ids: &[S]) -> Result<Vec<&'a Sample>> {
        ids.iter()
            .map(|id| {
                self.get(id.as_ref()).ok_or_else(|| {
                    Error::InvalidArgument(format!("unknown sample id `{}`", id.as_ref()))
                })
            })
            .collect()
    }

    pub fn project_ids(&self) -> impl Iterator<Item = &str> {
        self.by_project.keys().map(String::as_str)
    }

    pub fn project_samples(&self, project: &str) -> Vec<&Sample> {
        self.by_project
            .get(project)
            .map(|idx| idx.iter().map(|&i| &self.samples[i]).collect())
            .unwrap_or_default()
    }

    pub fn project_sizes(&self) -> BTreeMap<String, usize> {
        self.by_project
            .iter()
            .map(|(p, idx)| (p.clone(), idx.len()))
            .collect()
    }

    /// Samples of one project grouped by error type.
    pub fn error_type_groups(&self, project: &str) -> BTreeMap<&str, Vec<&Sample>> {
        self.by_project_type
            .range((project.to_string(), String::new())..)
            .take_while(|((p, _), _)| p == project)
            .map(|((_, t), idx)| (t.as_str(), idx.iter().map(|&i| &self.samples[i]).collect()))
            .collect()
    }
}

/// Reads a JSON-lines dataset.
pub fn load_corpus(path: &Path, format: DatasetFormat) -> Result<Corpus> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_corpus(file, format)
}

pub fn parse_corpus<R: Read>(reader: R, format: DatasetFormat) -> Result<Corpus> {
    let mut samples = Vec::new();
    for (n, line) in BufReader::new(reader).lines().enumerate() {
        let lineno = n + 1;
        let line = line.map_err(|e| Error::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        samples.push(record_to_sample(&value, lineno, format)?);
    }
    Corpus::new(samples)
}

fn record_to_sample(value: &Value, line: usize, format: DatasetFormat) -> Result<Sample> {
    let obj = value.as_object().ok_or_else(|| Error::Schema {
        line,
        message: "record is not a JSON object".into(),
    })?;
    let field = |name: &str| -> Result<String> {
        match obj.get(name) {
            Some(Value::String(s)) => Ok(s.clone()),
            Some(_) => Err(Error::Schema {
                line,
                message: format!("field `{name}` must be a string"),
            }),
            None => Err(Error::Schema {
                line,
                message: format!("missing field `{name}`"),
            }),
        }
    };
    let [id, project_id, error_type, error_message, buggy_line, fixed_line, context] =
        RECORD_FIELDS.map(field);
    let (error_message, context) = match format {
        DatasetFormat::LineLevel => (error_message?, context?),
        DatasetFormat::FunctionLevel => {
            error_message?;
            context?;
            (String::new(), String::new())
        }
    };
    Sample::new(
        id?,
        project_id?,
        error_type?,
        error_message,
        buggy_line?,
        fixed_line?,
        context,
    )
    .map_err(|e| Error::Schema {
        line,
        message: e.to_string(),
    })
}

/// Writes samples as JSON-lines; `extra` adds per-record fields (provenance).
pub fn write_jsonl<'a, W: Write>(
    mut out: W,
    records: impl IntoIterator<Item = (&'a Sample, Option<Value>)>,
) -> std::io::Result<()> {
    for (sample, extra) in records {
        let mut rec = sample.to_record();
        if let (Some(Value::Object(extra)), Value::Object(map)) = (extra, &mut rec) {
            map.extend(extra);
        }
        writeln!(out, "{rec}")?;
    }
    Ok(())
}

pub fn save_corpus(samples: &[Sample], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    write_jsonl(&mut out, samples.iter().map(|s| (s, None)))
        .and_then(|_| out.flush())
        .map_err(|e| Error::io(path, e))
}

/// Source/target project assignment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProjectSelection {
    pub source: BTreeSet<String>,
    pub target: Vec<String>,
}

/// Sorts eligible projects by descending size (ties by id) and takes every
/// `stride`-th one, 1-based, as a target. Everything else is source.
pub fn select_targets(
    sizes: &BTreeMap<String, usize>,
    min_samples: usize,
    stride: usize,
) -> Result<ProjectSelection> {
    if min_samples < 1 {
        return Err(Error::InvalidArgument("min_samples must be >= 1".into()));
    }
    if stride < 2 {
        return Err(Error::InvalidArgument("stride must be >= 2".into()));
    }
    let mut eligible: Vec<(&String, usize)> = sizes
        .iter()
        .filter(|(_, &n)| n >= min_samples)
        .map(|(p, &n)| (p, n))
        .collect();
    if eligible.is_empty() {
        log::warn!("no project has at least {min_samples} samples; target set is empty");
    }
    eligible.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let target: Vec<String> = eligible
        .iter()
        .enumerate()
        .filter(|(pos, _)| (pos + 1) % stride == 0)
        .map(|(_, (p, _))| (*p).clone())
        .collect();
    let source = sizes
        .keys()
        .filter(|p| !target.contains(p))
        .cloned()
        .collect();
    Ok(ProjectSelection { source, target })
}

pub fn select_target_projects(
    corpus: &Corpus,
    min_samples: usize,
    stride: usize,
) -> Result<ProjectSelection> {
    select_targets(&corpus.project_sizes(), min_samples, stride)
}

/// Rounding rule applied to the validation share of the post-test pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Rounding {
    Floor,
    #[default]
    Ceil,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitRatios {
    pub test: f64,
    pub validation: f64,
    pub validation_rounding: Rounding,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            test: 0.2,
            validation: 0.2,
            validation_rounding: Rounding::Ceil,
        }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<()> {
        if !(self.test > 0.0 && self.test < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "test ratio {} outside (0, 1)",
                self.test
            )));
        }
        if !(0.0..1.0).contains(&self.validation) {
            return Err(Error::InvalidArgument(format!(
                "validation ratio {} outside [0, 1)",
                self.validation
            )));
        }
        Ok(())
    }
}

// Products like 0.2 * 15 land a hair above the integer; snap before rounding.
const ROUND_EPS: f64 = 1e-9;

pub(crate) fn ceil_share(ratio: f64, n: usize) -> usize {
    ((ratio * n as f64 - ROUND_EPS).ceil().max(0.0) as usize).min(n)
}

pub(crate) fn floor_share(ratio: f64, n: usize) -> usize {
    ((ratio * n as f64 + ROUND_EPS).floor() as usize).min(n)
}

/// Train/validation/test ids of one project, each sorted.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProjectSplit {
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

impl ProjectSplit {
    pub fn len(&self) -> usize {
        self.train.len() + self.validation.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn seeded_shuffle(ids: &mut [String], rng: &mut ChaCha8Rng) {
    ids.sort();
    ids.shuffle(rng);
}

/// Per-error-type stratified split of one project's samples.
pub fn split_project(samples: &[&Sample], ratios: &SplitRatios, seed: u64) -> Result<ProjectSplit> {
    ratios.validate()?;
    let mut by_type: BTreeMap<&str, Vec<String>> = BTreeMap::new();
    for s in samples {
        by_type.entry(&s.error_type).or_default().push(s.id.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut split = ProjectSplit::default();
    let mut pool = Vec::new();
    for ids in by_type.values_mut() {
        seeded_shuffle(ids, &mut rng);
        let n_test = ceil_share(ratios.test, ids.len());
        split.test.extend(ids.drain(..n_test));
        pool.append(ids);
    }
    seeded_shuffle(&mut pool, &mut rng);
    let n_val = match ratios.validation_rounding {
        Rounding::Floor => floor_share(ratios.validation, pool.len()),
        Rounding::Ceil => ceil_share(ratios.validation, pool.len()),
    }
    // Training keeps at least one sample whenever the pool is non-empty.
    .min(pool.len().saturating_sub(1));
    split.validation = pool.drain(..n_val).collect();
    split.train = pool;
    split.train.sort();
    split.validation.sort();
    split.test.sort();
    Ok(split)
}

/// FNV-1a, used wherever a stable string hash is needed.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub(crate) fn derive_seed(seed: u64, salt: &str) -> u64 {
    fnv1a(salt.as_bytes()) ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PartitionParams {
    pub min_samples: usize,
    pub stride: usize,
    pub ratios: SplitRatios,
    pub seed: u64,
}

impl Default for PartitionParams {
    fn default() -> Self {
        PartitionParams {
            min_samples: 150,
            stride: 3,
            ratios: SplitRatios::default(),
            seed: 42,
        }
    }
}

/// Project assignment plus per-project splits for every project.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusPartition {
    pub source_projects: BTreeSet<String>,
    pub target_projects: Vec<String>,
    pub splits: BTreeMap<String, ProjectSplit>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitKind {
    Train,
    Validation,
    Test,
}

impl SplitKind {
    pub fn name(self) -> &'static str {
        match self {
            SplitKind::Train => "train",
            SplitKind::Validation => "validation",
            SplitKind::Test => "test",
        }
    }
}

impl CorpusPartition {
    pub fn project_split(&self, project: &str) -> Option<&ProjectSplit> {
        self.splits.get(project)
    }

    fn pick(split: &ProjectSplit, kind: SplitKind) -> &[String] {
        match kind {
            SplitKind::Train => &split.train,
            SplitKind::Validation => &split.validation,
            SplitKind::Test => &split.test,
        }
    }

    /// Ids of one split of one project (empty for unknown projects).
    pub fn ids(&self, project: &str, kind: SplitKind) -> &[String] {
        self.splits
            .get(project)
            .map(|s| Self::pick(s, kind))
            .unwrap_or(&[])
    }

    /// Aggregated source split, in project order.
    pub fn source(&self, kind: SplitKind) -> Vec<String> {
        self.source_projects
            .iter()
            .flat_map(|p| self.ids(p, kind).iter().cloned())
            .collect()
    }

    /// Aggregated split over all target projects, in target order.
    pub fn target(&self, kind: SplitKind) -> Vec<String> {
        self.target_projects
            .iter()
            .flat_map(|p| self.ids(p, kind).iter().cloned())
            .collect()
    }

    pub fn is_target(&self, project: &str) -> bool {
        self.target_projects.iter().any(|p| p == project)
    }

    /// Checks the partition invariants against its corpus.
    pub fn validate(&self, corpus: &Corpus) -> Result<()> {
        for t in &self.target_projects {
            if self.source_projects.contains(t) {
                return Err(Error::InvalidArgument(format!(
                    "project `{t}` is both source and target"
                )));
            }
        }
        let mut seen: HashMap<&str, &str> = HashMap::new();
        for (project, split) in &self.splits {
            for id in split
                .train
                .iter()
                .chain(&split.validation)
                .chain(&split.test)
            {
                if seen.insert(id, project).is_some() {
                    return Err(Error::InvalidArgument(format!(
                        "sample `{id}` appears in more than one split"
                    )));
                }
                match corpus.get(id) {
                    Some(s) if &s.project_id == project => {}
                    _ => {
                        return Err(Error::InvalidArgument(format!(
                            "sample `{id}` does not belong to project `{project}`"
                        )))
                    }
                }
            }
        }
        if seen.len() != corpus.len() {
            return Err(Error::InvalidArgument(format!(
                "partition covers {} of {} samples",
                seen.len(),
                corpus.len()
            )));
        }
        Ok(())
    }

    /// Bit-stable JSON: sorted keys, no floats.
    pub fn to_json(&self) -> String {
        let mut splits = serde_json::Map::new();
        for (project, split) in &self.splits {
            for kind in [SplitKind::Train, SplitKind::Validation, SplitKind::Test] {
                splits.insert(
                    format!("{project}/{}", kind.name()),
                    json!(Self::pick(split, kind)),
                );
            }
        }
        let doc = json!({
            "projects": {
                "source": self.source_projects,
                "target": self.target_projects,
            },
            "splits": splits,
        });
        let mut text = serde_json::to_string_pretty(&doc).expect("partition serializes");
        text.push('\n');
        text
    }

    pub fn from_json(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Projects {
            source: BTreeSet<String>,
            target: Vec<String>,
        }
        #[derive(Deserialize)]
        struct Doc {
            projects: Projects,
            splits: BTreeMap<String, Vec<String>>,
        }
        let doc: Doc = serde_json::from_str(text)?;
        let mut splits: BTreeMap<String, ProjectSplit> = BTreeMap::new();
        for (key, ids) in doc.splits {
            let (project, kind) = key
                .rsplit_once('/')
                .ok_or_else(|| Error::InvalidArgument(format!("malformed split key `{key}`")))?;
            let entry = splits.entry(project.to_string()).or_default();
            match kind {
                "train" => entry.train = ids,
                "validation" => entry.validation = ids,
                "test" => entry.test = ids,
                other => {
                    return Err(Error::InvalidArgument(format!(
                        "unknown split kind `{other}`"
                    )))
                }
            }
        }
        Ok(CorpusPartition {
            source_projects: doc.projects.source,
            target_projects: doc.projects.target,
            splits,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// Selects targets, then splits every project.
pub fn build_partition(corpus: &Corpus, params: &PartitionParams) -> Result<CorpusPartition> {
    params.ratios.validate()?;
    let selection = select_target_projects(corpus, params.min_samples, params.stride)?;
    let mut splits = BTreeMap::new();
    for project in corpus.project_ids() {
        let samples = corpus.project_samples(project);
        let split = split_project(&samples, &params.ratios, derive_seed(params.seed, project))?;
        splits.insert(project.to_string(), split);
    }
    let partition = CorpusPartition {
        source_projects: selection.source,
        target_projects: selection.target,
        splits,
    };
    partition.validate(corpus)?;
    Ok(partition)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScenarioKind {
    /// Source and target training data together (no domain shift).
    Included,
    /// Source training data only (domain shift).
    Excluded,
}

impl ScenarioKind {
    pub fn name(self) -> &'static str {
        match self {
            ScenarioKind::Included => "included",
            ScenarioKind::Excluded => "excluded",
        }
    }
}

impl FromStr for ScenarioKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "included" => Ok(ScenarioKind::Included),
            "excluded" => Ok(ScenarioKind::Excluded),
            other => Err(Error::InvalidArgument(format!(
                "unknown scenario `{other}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioCorpus {
    pub kind: ScenarioKind,
    pub training_samples: Vec<String>,
    pub validation_samples: Vec<String>,
}

pub fn build_scenario(partition: &CorpusPartition, kind: ScenarioKind) -> ScenarioCorpus {
    let mut training_samples = partition.source(SplitKind::Train);
    let mut validation_samples = partition.source(SplitKind::Validation);
    if kind == ScenarioKind::Included {
        training_samples.extend(partition.target(SplitKind::Train));
        validation_samples.extend(partition.target(SplitKind::Validation));
    }
    ScenarioCorpus {
        kind,
        training_samples,
        validation_samples,
    }
}

/// Joins non-empty segments with single spaces.
fn join_segments<'a>(parts: impl IntoIterator<Item = &'a str>) -> String {
    parts
        .into_iter()
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Repair-model input: `fix <type> <message> <buggy line> : <context>`.
pub fn format_repair_input(sample: &Sample) -> String {
    let head = join_segments([
        "fix",
        sample.error_type.as_str(),
        sample.error_message.as_str(),
        sample.buggy_line.as_str(),
    ]);
    join_segments([head.as_str(), ":", sample.context.as_str()])
}

/// Bug-generator input: `bug <type> <clean line>`, with ` : <context>`
/// appended when context is present. `None` drops the type (no-metadata
/// variant).
pub fn format_bug_input(clean_line: &str, context: &str, error_type: Option<&str>) -> String {
    let head = join_segments(["bug", error_type.unwrap_or(""), clean_line]);
    if context.trim().is_empty() {
        head
    } else {
        join_segments([head.as_str(), ":", context])
    }
}
