//! The trainable sequence-to-sequence contract every adaptation method and
//! the bug generator run against, the shared early-stopping training loop,
//! and checkpoint persistence.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapter::AdapterSpec;
use crate::error::{Error, Result};
use crate::eval::{exact_match, Normalization};

pub mod memorizer;
pub mod neural;
pub mod tagging;

pub use memorizer::Memorizer;
pub use neural::{NeuralConfig, ToyNeural};

/// One (input text, target text) training example.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainPair {
    pub id: String,
    pub input: String,
    pub target: String,
}

impl TrainPair {
    pub fn new(id: impl Into<String>, input: impl Into<String>, target: impl Into<String>) -> Self {
        TrainPair {
            id: id.into(),
            input: input.into(),
            target: target.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub output_text: String,
    /// Length-normalized sequence log-likelihood; higher is more confident.
    pub confidence: f64,
}

/// A named parameter group as it appears in the checkpoint manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamGroup {
    pub name: String,
    pub frozen: bool,
    pub elements: usize,
    pub checksum: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Linear decay from the base rate to a tenth of it over `max_epochs`.
    LinearDecay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub learning_rate: f64,
    pub lr_schedule: LrSchedule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_epochs: 30,
            early_stop_patience: 4,
            batch_size: 8,
            seed: 7,
            learning_rate: 3e-3,
            lr_schedule: LrSchedule::Constant,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_epochs < 1 {
            return Err(Error::InvalidArgument("max_epochs must be >= 1".into()));
        }
        if self.early_stop_patience < 1 {
            return Err(Error::InvalidArgument(
                "early_stop_patience must be >= 1".into(),
            ));
        }
        if self.batch_size < 1 {
            return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
        }
        Ok(())
    }

    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.learning_rate,
            LrSchedule::LinearDecay => {
                let span = self.max_epochs.saturating_sub(1).max(1) as f64;
                let t = (epoch.saturating_sub(1) as f64 / span).min(1.0);
                self.learning_rate * (1.0 - 0.9 * t)
            }
        }
    }
}

/// The stopping signal recorded per epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopMetric {
    /// Exact-match percentage on validation pairs.
    ValidationExactMatch,
    /// Negated mean training loss, used when there is no validation data.
    NegTrainLoss,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub metric: f64,
    pub train_loss: f64,
    pub wall_time_s: f64,
    /// Ids of the training pairs, in the order they were fed.
    pub sample_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub metric: StopMetric,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
}

impl TrainHistory {
    pub fn executed_epochs(&self) -> usize {
        self.epochs.len()
    }
}

/// A trainable seq2seq model.
pub trait Backend: Send + Sync {
    fn backend_id(&self) -> &'static str;

    fn seed(&self) -> u64;

    fn is_trained(&self) -> bool;

    fn inventory(&self) -> Vec<ParamGroup>;

    /// Sets the frozen flag on every group matching `pattern` (`*` wildcards).
    /// Returns the number of matched groups.
    fn set_frozen_groups(&mut self, pattern: &str, frozen: bool) -> Result<usize>;

    /// Layer identifiers adapters can be inserted after.
    fn layer_ids(&self) -> Vec<String>;

    fn insert_adapters(&mut self, spec: &AdapterSpec) -> Result<()>;

    /// Prepares optimizer state for a training run over the currently
    /// trainable groups.
    fn begin_training(&mut self, config: &TrainConfig) -> Result<()>;

    /// One pass over `pairs` in the given order; returns mean loss.
    fn train_epoch(&mut self, pairs: &[&TrainPair], learning_rate: f64) -> Result<f64>;

    fn end_training(&mut self);

    fn generate(&self, input: &str) -> Result<Prediction>;

    fn generate_batch(&self, inputs: &[&str]) -> Result<Vec<Prediction>> {
        inputs.iter().map(|i| self.generate(i)).collect()
    }

    /// Deep copy, without optimizer state.
    fn clone_model(&self) -> Result<Box<dyn Backend>>;

    /// Writes the payload into `dir`; returns the payload file name and the
    /// backend configuration recorded in the manifest.
    fn save_payload(&self, dir: &Path) -> Result<(String, serde_json::Value)>;
}

pub type BackendModel = Box<dyn Backend>;

/// Glob match supporting `*` only.
pub fn glob_match(pattern: &str, name: &str) -> bool {
    let parts: Vec<&str> = pattern.split('*').collect();
    if parts.len() == 1 {
        return pattern == name;
    }
    let (first, last) = (parts[0], parts[parts.len() - 1]);
    if !name.starts_with(first) || name.len() < first.len() + last.len() || !name.ends_with(last) {
        return false;
    }
    let mut rest = &name[first.len()..name.len() - last.len()];
    for mid in &parts[1..parts.len() - 1] {
        match rest.find(mid) {
            Some(pos) => rest = &rest[pos + mid.len()..],
            None => return false,
        }
    }
    true
}

pub fn set_frozen(model: &mut dyn Backend, pattern: &str, frozen: bool) -> Result<usize> {
    model.set_frozen_groups(pattern, frozen)
}

/// Hex SHA-256 over a byte stream; used for parameter checksums.
pub fn checksum<'a>(chunks: impl IntoIterator<Item = &'a [u8]>) -> String {
    let mut h = Sha256::new();
    for c in chunks {
        h.update(c);
    }
    hex::encode(h.finalize())
}

/// How pairs are ordered in each epoch.
#[derive(Debug, Clone)]
pub enum EpochSchedule {
    /// All pairs, reshuffled every epoch from the config seed.
    Shuffled,
    /// Explicit per-epoch index lists, used as given; epochs past the end
    /// repeat the last list.
    Fixed(Vec<Vec<usize>>),
}

impl EpochSchedule {
    fn order(&self, epoch: usize, n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        match self {
            EpochSchedule::Shuffled => {
                let mut idx: Vec<usize> = (0..n).collect();
                idx.shuffle(rng);
                idx
            }
            EpochSchedule::Fixed(lists) => lists
                .get(epoch - 1)
                .or_else(|| lists.last())
                .cloned()
                .unwrap_or_default(),
        }
    }
}

/// Exact-match percentage of `model` on `pairs` (collapsed whitespace).
pub fn pair_exact_match(model: &dyn Backend, pairs: &[TrainPair]) -> Result<f64> {
    if pairs.is_empty() {
        return Ok(0.0);
    }
    let inputs: Vec<&str> = pairs.iter().map(|p| p.input.as_str()).collect();
    let preds = model.generate_batch(&inputs)?;
    let hits = preds
        .iter()
        .zip(pairs)
        .filter(|(p, pair)| exact_match(&p.output_text, &pair.target, Normalization::Collapse))
        .count();
    Ok(100.0 * hits as f64 / pairs.len() as f64)
}

/// Seeded shuffled training with early stopping.
pub fn train(
    model: BackendModel,
    train_pairs: &[TrainPair],
    validation_pairs: &[TrainPair],
    config: &TrainConfig,
) -> Result<(BackendModel, TrainHistory)> {
    train_with_schedule(
        model,
        train_pairs,
        validation_pairs,
        config,
        &EpochSchedule::Shuffled,
    )
}

/// Trains epoch by epoch, evaluates after each, keeps the best checkpoint
/// and stops once `early_stop_patience` epochs pass without improvement.
pub fn train_with_schedule(
    mut model: BackendModel,
    train_pairs: &[TrainPair],
    validation_pairs: &[TrainPair],
    config: &TrainConfig,
    schedule: &EpochSchedule,
) -> Result<(BackendModel, TrainHistory)> {
    config.validate()?;
    if train_pairs.is_empty() {
        return Err(Error::EmptyData("no training pairs".into()));
    }
    let metric = if validation_pairs.is_empty() {
        log::warn!("validation set is empty; early stopping on training loss");
        StopMetric::NegTrainLoss
    } else {
        StopMetric::ValidationExactMatch
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut history = TrainHistory {
        metric,
        epochs: Vec::new(),
        best_epoch: 0,
    };
    let mut best: Option<(f64, BackendModel)> = None;
    model.begin_training(config)?;
    for epoch in 1..=config.max_epochs {
        let started = Instant::now();
        let order = schedule.order(epoch, train_pairs.len(), &mut rng);
        let batch: Vec<&TrainPair> = order.iter().map(|&i| &train_pairs[i]).collect();
        let loss = model.train_epoch(&batch, config.learning_rate_at(epoch))?;
        let score = match metric {
            StopMetric::ValidationExactMatch => pair_exact_match(model.as_ref(), validation_pairs)?,
            StopMetric::NegTrainLoss => -loss,
        };
        history.epochs.push(EpochRecord {
            epoch,
            metric: score,
            train_loss: loss,
            wall_time_s: started.elapsed().as_secs_f64(),
            sample_ids: batch.iter().map(|p| p.id.clone()).collect(),
        });
        log::debug!("epoch {epoch}: loss {loss:.4} metric {score:.2}");
        let improved = best.as_ref().is_none_or(|(b, _)| score > *b);
        if improved {
            best = Some((score, model.clone_model()?));
            history.best_epoch = epoch;
        } else if epoch - history.best_epoch >= config.early_stop_patience {
            break;
        }
    }
    model.end_training();
    let (_, best_model) = best.expect("at least one epoch runs");
    Ok((best_model, history))
}

/// Supported backends.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "id", rename_all = "kebab-case")]
pub enum BackendKind {
    Memorizer,
    ToyNeural(NeuralConfig),
}

impl BackendKind {
    pub fn id(&self) -> &'static str {
        match self {
            BackendKind::Memorizer => memorizer::BACKEND_ID,
            BackendKind::ToyNeural(_) => neural::BACKEND_ID,
        }
    }

    /// A fresh, untrained model.
    pub fn create(&self, seed: u64) -> Result<BackendModel> {
        Ok(match self {
            BackendKind::Memorizer => Box::new(Memorizer::new(seed)),
            BackendKind::ToyNeural(cfg) => Box::new(ToyNeural::new(cfg.clone(), seed)?),
        })
    }
}

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub backend_id: String,
    pub seed: u64,
    pub payload: String,
    pub created: String,
    pub inventory: Vec<ParamGroup>,
    pub config: serde_json::Value,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tags: Vec<String>,
}

impl Manifest {
    pub fn read(dir: &Path) -> Result<Manifest> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("bad manifest: {e}")))
    }
}

/// Writes payload and manifest into `dir`; returns total bytes on disk.
pub fn save(model: &dyn Backend, dir: &Path) -> Result<u64> {
    save_tagged(model, dir, &[])
}

pub fn save_tagged(model: &dyn Backend, dir: &Path, tags: &[String]) -> Result<u64> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (payload, config) = model.save_payload(dir)?;
    let manifest = Manifest {
        backend_id: model.backend_id().to_string(),
        seed: model.seed(),
        payload: payload.clone(),
        created: chrono::Utc::now().format("%Y-%m-%dT%H:%M:%SZ").to_string(),
        inventory: model.inventory(),
        config,
        tags: tags.to_vec(),
    };
    let path = dir.join(MANIFEST_FILE);
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    checkpoint_size(dir)
}

/// On-disk byte count of a checkpoint (manifest plus payload).
pub fn checkpoint_size(dir: &Path) -> Result<u64> {
    let manifest = Manifest::read(dir)?;
    let mut total = 0;
    for name in [MANIFEST_FILE, manifest.payload.as_str()] {
        let path = dir.join(name);
        total += std::fs::metadata(&path)
            .map_err(|e| Error::io(&path, e))?
            .len();
    }
    Ok(total)
}

/// Loads a checkpoint and verifies its parameter checksums.
pub fn load(dir: &Path) -> Result<BackendModel> {
    let manifest = Manifest::read(dir)?;
    let payload = dir.join(&manifest.payload);
    let model: BackendModel = match manifest.backend_id.as_str() {
        memorizer::BACKEND_ID => Box::new(Memorizer::load(&payload, &manifest)?),
        neural::BACKEND_ID => Box::new(ToyNeural::load(&payload, &manifest)?),
        other => return Err(Error::Checkpoint(format!("unknown backend `{other}`"))),
    };
    if model.inventory() != manifest.inventory {
        return Err(Error::Checkpoint(
            "parameter inventory does not match manifest".into(),
        ));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn glob_patterns() {
        assert!(glob_match("*", "encoder/0"));
        assert!(glob_match("adapter/*", "adapter/encoder/1"));
        assert!(!glob_match("adapter/*", "encoder/1"));
        assert!(glob_match("*/0", "decoder/0"));
        assert!(glob_match("enc*er/*", "encoder/3"));
        assert!(glob_match("output", "output"));
        assert!(!glob_match("output", "outputs"));
    }

    #[test]
    fn decay_schedule_ends_at_a_tenth() {
        let cfg = TrainConfig {
            max_epochs: 11,
            learning_rate: 1.0,
            lr_schedule: LrSchedule::LinearDecay,
            ..Default::default()
        };
        assert!((cfg.learning_rate_at(1) - 1.0).abs() < 1e-12);
        assert!((cfg.learning_rate_at(11) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        let bad = TrainConfig {
            max_epochs: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            early_stop_patience: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
