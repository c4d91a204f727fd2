//! Domain-adaptation procedures over a pretrained backend: full fine-tuning,
//! adapter tuning with the base frozen, and curriculum fine-tuning with
//! length, confidence and similarity difficulty scorers.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::{insert_adapters, AdapterSpec};
use crate::backend::{
    train, train_with_schedule, Backend, BackendModel, EpochSchedule, TrainConfig, TrainHistory,
    TrainPair,
};
use crate::corpus::{ceil_share, fnv1a, format_repair_input, tokens, Sample};
use crate::error::{Error, Result};

/// Method identifiers used in configs and report columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MethodId {
    /// Excluded-scenario pretrained model, unadapted.
    Default,
    /// Included-scenario pretrained model.
    Baseline,
    Fft,
    Tlwal,
    ClLength,
    ClConfidence,
    ClSimilarity,
    /// Full fine-tuning on synthesized target pairs.
    FftSynthetic,
}

impl MethodId {
    pub const ALL: [MethodId; 8] = [
        MethodId::Default,
        MethodId::Baseline,
        MethodId::Fft,
        MethodId::Tlwal,
        MethodId::ClLength,
        MethodId::ClConfidence,
        MethodId::ClSimilarity,
        MethodId::FftSynthetic,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MethodId::Default => "default",
            MethodId::Baseline => "baseline",
            MethodId::Fft => "fft",
            MethodId::Tlwal => "tlwal",
            MethodId::ClLength => "cl-length",
            MethodId::ClConfidence => "cl-confidence",
            MethodId::ClSimilarity => "cl-similarity",
            MethodId::FftSynthetic => "fft-synthetic",
        }
    }

    /// Whether the method trains a per-project model.
    pub fn adapts(self) -> bool {
        !matches!(self, MethodId::Default | MethodId::Baseline)
    }

    pub fn scorer(self) -> Option<Scorer> {
        match self {
            MethodId::ClLength => Some(Scorer::Length),
            MethodId::ClConfidence => Some(Scorer::Confidence),
            MethodId::ClSimilarity => Some(Scorer::Similarity),
            _ => None,
        }
    }
}

impl fmt::Display for MethodId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MethodId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MethodId::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::UnknownMethod(s.to_string()))
    }
}

/// Repair training pairs: formatted input, fixed line as target.
pub fn repair_pairs(samples: &[&Sample]) -> Vec<TrainPair> {
    samples
        .iter()
        .map(|s| TrainPair::new(s.id.clone(), format_repair_input(s), s.fixed_line.clone()))
        .collect()
}

pub struct AdaptationResult {
    pub model: BackendModel,
    pub method: MethodId,
    pub target_project: String,
    pub prep_time_s: f64,
    pub history: TrainHistory,
}

fn require_train(train_pairs: &[TrainPair]) -> Result<()> {
    if train_pairs.is_empty() {
        return Err(Error::EmptyData("target-train is empty".into()));
    }
    Ok(())
}

/// Continues training every parameter group on the target data.
pub fn full_fine_tune(
    pretrained: &dyn Backend,
    target_project: &str,
    train_pairs: &[TrainPair],
    validation_pairs: &[TrainPair],
    config: &TrainConfig,
) -> Result<AdaptationResult> {
    require_train(train_pairs)?;
    let started = Instant::now();
    let mut model = pretrained.clone_model()?;
    model.set_frozen_groups("*", false)?;
    let (model, history) = train(model, train_pairs, validation_pairs, config)?;
    Ok(AdaptationResult {
        model,
        method: MethodId::Fft,
        target_project: target_project.to_string(),
        prep_time_s: started.elapsed().as_secs_f64(),
        history,
    })
}

/// Inserts adapters, freezes every base group and trains the adapters only.
pub fn adapter_tune(
    pretrained: &dyn Backend,
    spec: &AdapterSpec,
    target_project: &str,
    train_pairs: &[TrainPair],
    validation_pairs: &[TrainPair],
    config: &TrainConfig,
) -> Result<AdaptationResult> {
    require_train(train_pairs)?;
    let started = Instant::now();
    let mut model = pretrained.clone_model()?;
    model.set_frozen_groups("*", true)?;
    let mut model = insert_adapters(model, spec)?;
    model.set_frozen_groups("adapter/*", false)?;
    let (model, history) = train(model, train_pairs, validation_pairs, config)?;
    Ok(AdaptationResult {
        model,
        method: MethodId::Tlwal,
        target_project: target_project.to_string(),
        prep_time_s: started.elapsed().as_secs_f64(),
        history,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scorer {
    Length,
    Confidence,
    Similarity,
}

impl Scorer {
    pub fn method(self) -> MethodId {
        match self {
            Scorer::Length => MethodId::ClLength,
            Scorer::Confidence => MethodId::ClConfidence,
            Scorer::Similarity => MethodId::ClSimilarity,
        }
    }
}

/// Difficulty of one sample; ascending order is easy to hard, ties broken by
/// sample id.
#[derive(Debug, Clone, PartialEq)]
pub struct DifficultyKey {
    pub value: f64,
    pub id: String,
}

impl DifficultyKey {
    pub fn new(value: f64, id: impl Into<String>) -> Self {
        DifficultyKey {
            value,
            id: id.into(),
        }
    }

    /// Sorts after every finite key.
    pub fn hardest(id: impl Into<String>) -> Self {
        DifficultyKey::new(f64::INFINITY, id)
    }
}

impl Eq for DifficultyKey {}

impl PartialOrd for DifficultyKey {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for DifficultyKey {
    fn cmp(&self, other: &Self) -> Ordering {
        self.value
            .total_cmp(&other.value)
            .then_with(|| self.id.cmp(&other.id))
    }
}

pub fn score_length(sample: &Sample) -> DifficultyKey {
    DifficultyKey::new(sample.token_count as f64, sample.id.clone())
}

/// Negated confidence of the pretrained model on the formatted input.
pub fn score_confidence(pretrained: &dyn Backend, sample: &Sample) -> DifficultyKey {
    score_confidence_batch(pretrained, &[sample]).remove(0)
}

pub fn score_confidence_batch(pretrained: &dyn Backend, samples: &[&Sample]) -> Vec<DifficultyKey> {
    let inputs: Vec<String> = samples.iter().map(|s| format_repair_input(s)).collect();
    let refs: Vec<&str> = inputs.iter().map(String::as_str).collect();
    match pretrained.generate_batch(&refs) {
        Ok(preds) => samples
            .iter()
            .zip(preds)
            .map(|(s, p)| DifficultyKey::new(-p.confidence, s.id.clone()))
            .collect(),
        Err(batch_err) => {
            log::warn!("batched confidence scoring failed ({batch_err}); scoring one by one");
            samples
                .iter()
                .zip(&refs)
                .map(|(s, input)| match pretrained.generate(input) {
                    Ok(p) => DifficultyKey::new(-p.confidence, s.id.clone()),
                    Err(e) => {
                        log::warn!(
                            "confidence scoring failed for `{}`: {e}; ranked hardest",
                            s.id
                        );
                        DifficultyKey::hardest(s.id.clone())
                    }
                })
                .collect()
        }
    }
}

/// Text to fixed-dimension vector.
pub trait Embedder: Send + Sync {
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Vec<f64>;
}

/// Token counts hashed into `dim` buckets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashedBagOfTokens {
    pub dim: usize,
}

impl Default for HashedBagOfTokens {
    fn default() -> Self {
        HashedBagOfTokens { dim: 256 }
    }
}

impl Embedder for HashedBagOfTokens {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        for t in tokens(text) {
            v[(fnv1a(t.as_bytes()) % self.dim as u64) as usize] += 1.0;
        }
        v
    }
}

/// `None` when either vector has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        None
    } else {
        Some(dot / (na * nb))
    }
}

pub const DEFAULT_CENTROID_SAMPLE: usize = 1000;

/// Mean embedding over a seeded subsample of `lines`.
pub fn source_centroid(
    embedder: &dyn Embedder,
    lines: &[&str],
    subsample: usize,
    seed: u64,
) -> Vec<f64> {
    let mut picked: Vec<&str> = lines.to_vec();
    picked.sort_unstable();
    if picked.len() > subsample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        picked.shuffle(&mut rng);
        picked.truncate(subsample);
    }
    let mut centroid = vec![0.0; embedder.dim()];
    for line in &picked {
        for (c, x) in centroid.iter_mut().zip(embedder.embed(line)) {
            *c += x;
        }
    }
    if !picked.is_empty() {
        let n = picked.len() as f64;
        centroid.iter_mut().for_each(|c| *c /= n);
    }
    centroid
}

/// Negated cosine between the buggy line's embedding and the centroid.
pub fn score_similarity(
    sample: &Sample,
    centroid: &[f64],
    embedder: &dyn Embedder,
) -> DifficultyKey {
    match cosine(&embedder.embed(&sample.buggy_line), centroid) {
        Some(c) => DifficultyKey::new(-c, sample.id.clone()),
        None => {
            log::warn!("zero-norm embedding for `{}`; ranked hardest", sample.id);
            DifficultyKey::hardest(sample.id.clone())
        }
    }
}

pub const DEFAULT_PORTIONS: [f64; 3] = [0.35, 0.7, 1.0];

/// Easy-to-hard sample order and the growing per-epoch prefix sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurriculumPlan {
    pub scorer: Scorer,
    pub portions: Vec<f64>,
    pub ordered_samples: Vec<String>,
    pub epoch_sizes: Vec<usize>,
}

impl CurriculumPlan {
    /// Ids fed in epoch `epoch` (1-based); epochs past the plan use all.
    pub fn epoch_samples(&self, epoch: usize) -> &[String] {
        let n = self
            .epoch_sizes
            .get(epoch.saturating_sub(1))
            .copied()
            .unwrap_or(self.ordered_samples.len());
        &self.ordered_samples[..n]
    }

    pub fn to_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("plan serializes");
        text.push('\n');
        text
    }
}

fn validate_portions(portions: &[f64]) -> Result<()> {
    if portions.is_empty() {
        return Err(Error::InvalidArgument(
            "curriculum portions are empty".into(),
        ));
    }
    if portions.iter().any(|p| !(*p > 0.0 && *p <= 1.0)) {
        return Err(Error::InvalidArgument(
            "curriculum portions must lie in (0, 1]".into(),
        ));
    }
    if portions.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::InvalidArgument(
            "curriculum portions must be non-decreasing".into(),
        ));
    }
    if *portions.last().expect("non-empty") != 1.0 {
        return Err(Error::InvalidArgument(
            "final curriculum portion must be 1.0".into(),
        ));
    }
    Ok(())
}

/// Orders `ids` by their keys and sizes each epoch as
/// `ceil(portion · N)`, repeating 1.0 up to `max_epochs`.
pub fn build_curriculum(
    scorer: Scorer,
    ids: &[String],
    keys: &[DifficultyKey],
    portions: &[f64],
    max_epochs: usize,
) -> Result<CurriculumPlan> {
    validate_portions(portions)?;
    let by_id: HashMap<&str, &DifficultyKey> = keys.iter().map(|k| (k.id.as_str(), k)).collect();
    let mut ordered: Vec<&DifficultyKey> = Vec::with_capacity(ids.len());
    for id in ids {
        ordered.push(
            by_id
                .get(id.as_str())
                .ok_or_else(|| Error::MissingScore(id.clone()))?,
        );
    }
    ordered.sort();
    let n = ordered.len();
    let epochs = max_epochs.max(1);
    let epoch_sizes = (0..epochs)
        .map(|e| {
            let p = portions.get(e).copied().unwrap_or(1.0);
            ceil_share(p, n).max(n.min(1))
        })
        .collect();
    Ok(CurriculumPlan {
        scorer,
        portions: portions.to_vec(),
        ordered_samples: ordered.iter().map(|k| k.id.clone()).collect(),
        epoch_sizes,
    })
}

/// Trains epoch `e` on the plan's epoch-`e` prefix in easy-to-hard order.
pub fn curriculum_tune(
    pretrained: &dyn Backend,
    plan: &CurriculumPlan,
    target_project: &str,
    train_pairs: &[TrainPair],
    validation_pairs: &[TrainPair],
    config: &TrainConfig,
) -> Result<AdaptationResult> {
    require_train(train_pairs)?;
    let started = Instant::now();
    let index: BTreeMap<&str, usize> = train_pairs
        .iter()
        .enumerate()
        .map(|(i, p)| (p.id.as_str(), i))
        .collect();
    let lists = (1..=config.max_epochs)
        .map(|e| {
            plan.epoch_samples(e)
                .iter()
                .map(|id| {
                    index
                        .get(id.as_str())
                        .copied()
                        .ok_or_else(|| Error::MissingScore(id.clone()))
                })
                .collect::<Result<Vec<usize>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let mut model = pretrained.clone_model()?;
    model.set_frozen_groups("*", false)?;
    let (model, history) = train_with_schedule(
        model,
        train_pairs,
        validation_pairs,
        config,
        &EpochSchedule::Fixed(lists),
    )?;
    Ok(AdaptationResult {
        model,
        method: plan.scorer.method(),
        target_project: target_project.to_string(),
        prep_time_s: started.elapsed().as_secs_f64(),
        history,
    })
}
