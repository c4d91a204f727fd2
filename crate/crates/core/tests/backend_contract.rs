use std::path::Path;

use apr_domain_adapt::adapter::AdapterSpec;
use apr_domain_adapt::backend::{
    self, train, Backend, BackendKind, Memorizer, NeuralConfig, ParamGroup, Prediction, StopMetric,
    ToyNeural, TrainConfig, TrainPair,
};
use apr_domain_adapt::corpus::{format_repair_input, Sample};
use apr_domain_adapt::toy;
use apr_domain_adapt::Error;
use proptest::prelude::*;

/// Validation exact match follows a script: after epoch `e` the model
/// answers the first `script[e - 1]` validation inputs correctly.
#[derive(Clone)]
struct Scripted {
    script: Vec<usize>,
    epochs: usize,
}

impl Backend for Scripted {
    fn backend_id(&self) -> &'static str {
        "scripted"
    }
    fn seed(&self) -> u64 {
        0
    }
    fn is_trained(&self) -> bool {
        self.epochs > 0
    }
    fn inventory(&self) -> Vec<ParamGroup> {
        Vec::new()
    }
    fn set_frozen_groups(&mut self, _: &str, _: bool) -> apr_domain_adapt::Result<usize> {
        Ok(0)
    }
    fn layer_ids(&self) -> Vec<String> {
        Vec::new()
    }
    fn insert_adapters(&mut self, _: &AdapterSpec) -> apr_domain_adapt::Result<()> {
        Ok(())
    }
    fn begin_training(&mut self, _: &TrainConfig) -> apr_domain_adapt::Result<()> {
        Ok(())
    }
    fn train_epoch(&mut self, _: &[&TrainPair], _: f64) -> apr_domain_adapt::Result<f64> {
        self.epochs += 1;
        Ok(1.0 / self.epochs as f64)
    }
    fn end_training(&mut self) {}
    fn generate(&self, input: &str) -> apr_domain_adapt::Result<Prediction> {
        let k: usize = input.trim_start_matches('v').parse().expect("v<index>");
        let hits = self.script.get(self.epochs - 1).copied().unwrap_or(0);
        Ok(Prediction {
            output_text: if k < hits { "ok".into() } else { "no".into() },
            confidence: 0.0,
        })
    }
    fn clone_model(&self) -> apr_domain_adapt::Result<Box<dyn Backend>> {
        Ok(Box::new(self.clone()))
    }
    fn save_payload(&self, _: &Path) -> apr_domain_adapt::Result<(String, serde_json::Value)> {
        unimplemented!("not persisted")
    }
}

fn validation(n: usize) -> Vec<TrainPair> {
    (0..n)
        .map(|i| TrainPair::new(format!("val{i}"), format!("v{i}"), "ok"))
        .collect()
}

fn scripted_run(script: Vec<usize>, max_epochs: usize, patience: usize) -> (usize, usize, usize) {
    let config = TrainConfig {
        max_epochs,
        early_stop_patience: patience,
        ..Default::default()
    };
    let model = Box::new(Scripted { script, epochs: 0 });
    let train_pairs = vec![TrainPair::new("t", "x", "y")];
    let (best, history) = train(model, &train_pairs, &validation(20), &config).unwrap();
    // Hits of the returned model identify the epoch it was taken from.
    let hits = (0..20)
        .filter(|i| best.generate(&format!("v{i}")).unwrap().output_text == "ok")
        .count();
    (history.executed_epochs(), history.best_epoch, hits)
}

#[test]
fn patience_four_halts_at_epoch_seven_with_epoch_three_checkpoint() {
    // Improves at epochs 1..3 only, out of 20.
    let mut script = vec![2, 4, 6];
    script.extend(std::iter::repeat_n(6, 17));
    let (executed, best_epoch, best_hits) = scripted_run(script, 20, 4);
    assert_eq!(executed, 7);
    assert_eq!(best_epoch, 3);
    assert_eq!(best_hits, 6);
}

#[test]
fn one_epoch_cap_runs_exactly_once() {
    let (executed, best_epoch, _) = scripted_run(vec![1, 2, 3, 4], 1, 10);
    assert_eq!((executed, best_epoch), (1, 1));
}

proptest! {
    #[test]
    fn executed_epochs_bounded_by_best_plus_patience(
        script in proptest::collection::vec(0usize..=20, 1..25),
        patience in 1usize..6,
    ) {
        let max_epochs = script.len();
        let (executed, best_epoch, _) = scripted_run(script.clone(), max_epochs, patience);
        prop_assert!(executed <= best_epoch + patience);
        prop_assert!(executed <= max_epochs);
        // The returned epoch holds the first maximum over executed epochs.
        let seen = &script[..executed];
        let max = *seen.iter().max().unwrap();
        prop_assert_eq!(best_epoch, seen.iter().position(|&h| h == max).unwrap() + 1);
    }
}

#[test]
fn no_validation_falls_back_to_training_loss() {
    let model = Box::new(Scripted {
        script: vec![0; 5],
        epochs: 0,
    });
    let config = TrainConfig {
        max_epochs: 5,
        ..Default::default()
    };
    let (_, history) = train(model, &[TrainPair::new("t", "x", "y")], &[], &config).unwrap();
    assert_eq!(history.metric, StopMetric::NegTrainLoss);
    assert_eq!(history.best_epoch, 5);
}

#[test]
fn empty_training_set_is_an_error() {
    let result = train(
        Box::new(Memorizer::new(0)),
        &[],
        &[],
        &TrainConfig::default(),
    );
    assert!(matches!(result, Err(Error::EmptyData(_))));
}

fn toy_pairs(n: usize) -> Vec<TrainPair> {
    let samples = toy::project_samples(&toy::default_projects()[0], 5).unwrap();
    samples
        .iter()
        .take(n)
        .map(|s: &Sample| {
            TrainPair::new(s.id.clone(), format_repair_input(s), s.fixed_line.clone())
        })
        .collect()
}

fn small_neural() -> NeuralConfig {
    NeuralConfig {
        d_model: 16,
        n_heads: 2,
        ff_dim: 32,
        hash_buckets: 512,
        label_capacity: 64,
        ..Default::default()
    }
}

fn quick() -> TrainConfig {
    TrainConfig {
        max_epochs: 2,
        ..Default::default()
    }
}

fn assert_round_trip(model: &dyn Backend, probes: &[&str]) {
    let dir = tempfile::tempdir().unwrap();
    let bytes = backend::save(model, dir.path()).unwrap();
    assert_eq!(bytes, backend::checkpoint_size(dir.path()).unwrap());
    let loaded = backend::load(dir.path()).unwrap();
    assert_eq!(loaded.backend_id(), model.backend_id());
    assert_eq!(loaded.seed(), model.seed());
    assert_eq!(loaded.inventory(), model.inventory());
    assert_eq!(
        loaded.generate_batch(probes).unwrap(),
        model.generate_batch(probes).unwrap()
    );
}

#[test]
fn save_load_round_trip_reproduces_fifty_probes() {
    let pairs = toy_pairs(120);
    let probes: Vec<&str> = pairs[70..].iter().map(|p| p.input.as_str()).collect();
    assert_eq!(probes.len(), 50);
    for kind in [
        BackendKind::Memorizer,
        BackendKind::ToyNeural(small_neural()),
    ] {
        let (model, _) = train(kind.create(3).unwrap(), &pairs[..70], &[], &quick()).unwrap();
        assert_round_trip(model.as_ref(), &probes);
    }
}

#[test]
fn round_trip_keeps_adapters() {
    let pairs = toy_pairs(40);
    let probes: Vec<&str> = pairs.iter().map(|p| p.input.as_str()).collect();
    let (mut model, _) = train(
        BackendKind::ToyNeural(small_neural()).create(1).unwrap(),
        &pairs,
        &[],
        &quick(),
    )
    .unwrap();
    let spec = AdapterSpec::for_model(model.as_ref(), 4, 9);
    model.insert_adapters(&spec).unwrap();
    assert_round_trip(model.as_ref(), &probes);
}

#[test]
fn tampered_inventory_is_rejected() {
    let pairs = toy_pairs(10);
    let (model, _) = train(Box::new(Memorizer::new(0)), &pairs, &[], &quick()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    backend::save(model.as_ref(), dir.path()).unwrap();
    let path = dir.path().join(backend::MANIFEST_FILE);
    let mut manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    manifest["inventory"][0]["checksum"] = "0".repeat(64).into();
    std::fs::write(&path, manifest.to_string()).unwrap();
    assert!(matches!(
        backend::load(dir.path()),
        Err(Error::Checkpoint(_))
    ));
}

fn checksums(model: &dyn Backend) -> Vec<(String, String)> {
    model
        .inventory()
        .into_iter()
        .map(|g| (g.name, g.checksum))
        .collect()
}

#[test]
fn frozen_groups_keep_their_checksums() {
    let pairs = toy_pairs(60);
    let (mut model, _) = train(
        BackendKind::ToyNeural(small_neural()).create(2).unwrap(),
        &pairs[..30],
        &[],
        &quick(),
    )
    .unwrap();
    model.set_frozen_groups("encoder/*", true).unwrap();
    let before = checksums(model.as_ref());
    let (model, _) = train(model, &pairs[30..], &[], &quick()).unwrap();
    let after = checksums(model.as_ref());
    for ((name, a), (_, b)) in before.iter().zip(&after) {
        if name.starts_with("encoder/") {
            assert_eq!(a, b, "{name} changed while frozen");
        }
    }
    assert!(before.iter().zip(&after).any(|(a, b)| a != b));
}

#[test]
fn memorizer_overlay_leaves_base_memory_untouched() {
    let pairs = toy_pairs(40);
    let (mut model, _) = train(Box::new(Memorizer::new(0)), &pairs[..20], &[], &quick()).unwrap();
    model.set_frozen_groups("*", true).unwrap();
    let spec = AdapterSpec::for_model(model.as_ref(), 1, 0);
    model.insert_adapters(&spec).unwrap();
    model.set_frozen_groups("adapter/*", false).unwrap();
    let base = checksums(model.as_ref())[0].clone();
    let (model, _) = train(model, &pairs[20..], &[], &quick()).unwrap();
    let inv = checksums(model.as_ref());
    assert_eq!(inv[0], base);
    assert_eq!(inv.len(), 2);
    for p in &pairs {
        assert_eq!(model.generate(&p.input).unwrap().output_text, p.target);
    }
}

#[test]
fn unknown_freeze_pattern_is_reported() {
    let mut model = ToyNeural::new(small_neural(), 0).unwrap();
    assert!(matches!(
        model.set_frozen_groups("nothing/*", true),
        Err(Error::PatternNoMatch(_))
    ));
}

#[test]
fn training_is_seed_deterministic() {
    let pairs = toy_pairs(40);
    let run = || {
        let (m, h) = train(
            BackendKind::ToyNeural(small_neural()).create(4).unwrap(),
            &pairs,
            &[],
            &quick(),
        )
        .unwrap();
        (
            checksums(m.as_ref()),
            h.epochs
                .iter()
                .map(|e| e.sample_ids.clone())
                .collect::<Vec<_>>(),
        )
    };
    assert_eq!(run(), run());
}
