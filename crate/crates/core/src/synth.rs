//! Reverse-direction bug generation: train a model on role-swapped fix pairs
//! and use it to inject bugs into a target project's clean lines, producing
//! labeled repair data without any target bug-fix pairs.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::backend::{
    train, Backend, BackendKind, BackendModel, TrainConfig, TrainHistory, TrainPair,
};
use crate::corpus::{format_bug_input, write_jsonl, Sample};
use crate::error::{Error, Result};
use crate::eval::{exact_match, Normalization};

/// Bug-generator pair for one sample: the fixed line (plus context and,
/// optionally, the error type) maps to the buggy line alone.
pub fn reverse_pair(sample: &Sample, with_metadata: bool) -> TrainPair {
    let ty = with_metadata.then_some(sample.error_type.as_str());
    TrainPair::new(
        sample.id.clone(),
        format_bug_input(&sample.fixed_line, &sample.context, ty),
        sample.buggy_line.clone(),
    )
}

pub fn build_reverse_corpus(source_train: &[&Sample], with_metadata: bool) -> Vec<TrainPair> {
    source_train
        .iter()
        .map(|s| reverse_pair(s, with_metadata))
        .collect()
}

/// Trains a fresh model from `factory` on reversed pairs.
pub fn train_bug_generator(
    factory: &BackendKind,
    seed: u64,
    reverse_corpus: &[TrainPair],
    validation: &[TrainPair],
    config: &TrainConfig,
) -> Result<(BackendModel, TrainHistory)> {
    if reverse_corpus.is_empty() {
        return Err(Error::EmptyData("reverse corpus is empty".into()));
    }
    train(factory.create(seed)?, reverse_corpus, validation, config)
}

/// A clean target line awaiting bug injection. Carries no buggy text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CleanLine {
    pub id: String,
    pub project_id: String,
    pub text: String,
    pub context: String,
    /// Retained detector metadata, when available.
    pub error_type: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSample {
    pub id: String,
    pub clean_line: String,
    pub generated_buggy_line: String,
    pub context: String,
    pub error_type: String,
    pub project_id: String,
    pub generator_id: String,
    pub confidence: f64,
}

impl SyntheticSample {
    /// Repair sample with the generated line as buggy and the clean line as
    /// fixed; the error message is left empty.
    pub fn to_sample(&self) -> Result<Sample> {
        Sample::new(
            self.id.clone(),
            self.project_id.clone(),
            self.error_type.clone(),
            "",
            self.generated_buggy_line.clone(),
            self.clean_line.clone(),
            self.context.clone(),
        )
    }
}

/// How error types are chosen for lines without metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct TypeFallback {
    /// Empirical error-type counts of the target project.
    pub distribution: BTreeMap<String, usize>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthesisReport {
    pub samples: Vec<SyntheticSample>,
    pub skipped: usize,
    /// Lines whose error type came from the fallback distribution.
    pub fallback_typed: usize,
}

/// Generates one synthetic sample per clean line; lines that fail to
/// generate, or generate an empty line, are counted as skipped.
pub fn synthesize_project_dataset(
    generator: &dyn Backend,
    generator_id: &str,
    clean_lines: &[CleanLine],
    with_metadata: bool,
    fallback: Option<&TypeFallback>,
) -> Result<SynthesisReport> {
    let sampler = match fallback {
        Some(f) if !f.distribution.is_empty() => {
            let types: Vec<&String> = f.distribution.keys().collect();
            let index = WeightedIndex::new(f.distribution.values().copied())
                .map_err(|e| Error::InvalidArgument(format!("bad fallback distribution: {e}")))?;
            Some((types, index, ChaCha8Rng::seed_from_u64(f.seed)))
        }
        _ => None,
    };
    let mut sampler = sampler;
    let mut report = SynthesisReport {
        samples: Vec::new(),
        skipped: 0,
        fallback_typed: 0,
    };
    for line in clean_lines {
        let error_type = match (&line.error_type, sampler.as_mut()) {
            (Some(t), _) => t.clone(),
            (None, Some((types, index, rng))) => {
                report.fallback_typed += 1;
                types[index.sample(rng)].clone()
            }
            (None, None) => String::new(),
        };
        let ty = (with_metadata && !error_type.is_empty()).then_some(error_type.as_str());
        let input = format_bug_input(&line.text, &line.context, ty);
        match generator.generate(&input) {
            Ok(p) if !p.output_text.trim().is_empty() => report.samples.push(SyntheticSample {
                id: format!("syn-{}", line.id),
                clean_line: line.text.clone(),
                generated_buggy_line: p.output_text,
                context: line.context.clone(),
                error_type,
                project_id: line.project_id.clone(),
                generator_id: generator_id.to_string(),
                confidence: p.confidence,
            }),
            Ok(_) => {
                log::debug!("empty generation for `{}`", line.id);
                report.skipped += 1;
            }
            Err(e) => {
                log::warn!("generation failed for `{}`: {e}", line.id);
                report.skipped += 1;
            }
        }
    }
    Ok(report)
}

/// Writes synthetic samples in the corpus schema plus a `provenance` field.
pub fn write_synthetic(samples: &[SyntheticSample], path: &Path) -> Result<()> {
    let converted = samples
        .iter()
        .map(|s| s.to_sample())
        .collect::<Result<Vec<_>>>()?;
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    let records = converted.iter().zip(samples).map(|(sample, syn)| {
        let extra = json!({
            "provenance": {
                "generator_id": syn.generator_id,
                "confidence": syn.confidence,
            }
        });
        (sample, Some(extra))
    });
    write_jsonl(&mut out, records)
        .and_then(|_| out.flush())
        .map_err(|e| Error::io(path, e))
}

/// Held-out reversed pair labeled with its error type.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPair {
    pub error_type: String,
    pub pair: TrainPair,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TypeAccuracy {
    pub error_type: String,
    pub count: usize,
    pub exact_match_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorEval {
    /// Populated error types only, sorted by name.
    pub rows: Vec<TypeAccuracy>,
    pub weighted_average: f64,
}

impl GeneratorEval {
    pub fn row(&self, error_type: &str) -> Option<&TypeAccuracy> {
        self.rows.iter().find(|r| r.error_type == error_type)
    }
}

pub fn evaluate_generator(
    generator: &dyn Backend,
    held_out: &[LabeledPair],
) -> Result<GeneratorEval> {
    let inputs: Vec<&str> = held_out.iter().map(|l| l.pair.input.as_str()).collect();
    let preds = generator.generate_batch(&inputs)?;
    let mut tally: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for (l, p) in held_out.iter().zip(&preds) {
        let entry = tally.entry(&l.error_type).or_default();
        entry.0 += 1;
        if exact_match(&p.output_text, &l.pair.target, Normalization::Collapse) {
            entry.1 += 1;
        }
    }
    let rows: Vec<TypeAccuracy> = tally
        .into_iter()
        .map(|(t, (n, hits))| TypeAccuracy {
            error_type: t.to_string(),
            count: n,
            exact_match_pct: 100.0 * hits as f64 / n as f64,
        })
        .collect();
    let total: usize = rows.iter().map(|r| r.count).sum();
    let weighted_average = if total == 0 {
        0.0
    } else {
        rows.iter()
            .map(|r| r.exact_match_pct * r.count as f64)
            .sum::<f64>()
            / total as f64
    };
    Ok(GeneratorEval {
        rows,
        weighted_average,
    })
}
