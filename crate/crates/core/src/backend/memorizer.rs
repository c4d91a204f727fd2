//! Reference backend that stores its training pairs verbatim and answers
//! unseen inputs with the target of the nearest stored input by character
//! edit distance.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{
    checksum, glob_match, Backend, Manifest, ParamGroup, Prediction, TrainConfig, TrainPair,
};
use crate::adapter::AdapterSpec;
use crate::error::{Error, Result};

pub const BACKEND_ID: &str = "memorizer";
const BASE_GROUP: &str = "memory";
const PAYLOAD: &str = "memory.json";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
struct MemoryGroup {
    name: String,
    frozen: bool,
    entries: BTreeMap<String, String>,
}

impl MemoryGroup {
    fn new(name: &str) -> Self {
        MemoryGroup {
            name: name.to_string(),
            ..Default::default()
        }
    }

    fn checksum(&self) -> String {
        let bytes = serde_json::to_vec(&self.entries).expect("map serializes");
        checksum([bytes.as_slice()])
    }
}

/// Groups are consulted in reverse order, so an adapter overlay shadows the
/// base memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Memorizer {
    seed: u64,
    trained: bool,
    groups: Vec<MemoryGroup>,
}

/// Levenshtein distance over chars.
pub fn edit_distance(a: &str, b: &str) -> usize {
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ca) in a.chars().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            cur[j + 1] = (prev[j] + usize::from(ca != *cb))
                .min(prev[j + 1] + 1)
                .min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Edit distance when it is at most `limit`; rows whose minimum exceeds the
/// limit end the scan early.
fn edit_distance_within(a: &[char], b: &[char], limit: usize) -> Option<usize> {
    if a.len().abs_diff(b.len()) > limit {
        return None;
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        let mut row_min = cur[0];
        for (j, cb) in b.iter().enumerate() {
            cur[j + 1] = (prev[j] + usize::from(ca != cb))
                .min(prev[j + 1] + 1)
                .min(cur[j] + 1);
            row_min = row_min.min(cur[j + 1]);
        }
        if row_min > limit {
            return None;
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    Some(prev[b.len()]).filter(|&d| d <= limit)
}

impl Memorizer {
    pub fn new(seed: u64) -> Self {
        Memorizer {
            seed,
            trained: false,
            groups: vec![MemoryGroup::new(BASE_GROUP)],
        }
    }

    pub fn len(&self) -> usize {
        self.groups.iter().map(|g| g.entries.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub(crate) fn load(payload: &Path, manifest: &Manifest) -> Result<Self> {
        let text = std::fs::read_to_string(payload).map_err(|e| Error::io(payload, e))?;
        let groups: Vec<MemoryGroup> = serde_json::from_str(&text)
            .map_err(|e| Error::Checkpoint(format!("bad memorizer payload: {e}")))?;
        if groups.is_empty() {
            return Err(Error::Checkpoint("memorizer payload has no groups".into()));
        }
        let trained = manifest
            .config
            .get("trained")
            .and_then(|v| v.as_bool())
            .unwrap_or(false);
        Ok(Memorizer {
            seed: manifest.seed,
            trained,
            groups,
        })
    }

    fn lookup(&self, input: &str) -> Option<&String> {
        self.groups.iter().rev().find_map(|g| g.entries.get(input))
    }
}

impl Backend for Memorizer {
    fn backend_id(&self) -> &'static str {
        BACKEND_ID
    }

    fn seed(&self) -> u64 {
        self.seed
    }

    fn is_trained(&self) -> bool {
        self.trained
    }

    fn inventory(&self) -> Vec<ParamGroup> {
        self.groups
            .iter()
            .map(|g| ParamGroup {
                name: g.name.clone(),
                frozen: g.frozen,
                elements: g.entries.len(),
                checksum: g.checksum(),
            })
            .collect()
    }

    fn set_frozen_groups(&mut self, pattern: &str, frozen: bool) -> Result<usize> {
        let mut n = 0;
        for g in self
            .groups
            .iter_mut()
            .filter(|g| glob_match(pattern, &g.name))
        {
            g.frozen = frozen;
            n += 1;
        }
        if n == 0 {
            return Err(Error::PatternNoMatch(pattern.to_string()));
        }
        Ok(n)
    }

    fn layer_ids(&self) -> Vec<String> {
        vec![BASE_GROUP.to_string()]
    }

    /// Adds an overlay memory per insertion point; training writes to the
    /// newest unfrozen group.
    fn insert_adapters(&mut self, spec: &AdapterSpec) -> Result<()> {
        spec.validate()?;
        for point in &spec.insertion_points {
            if point != BASE_GROUP {
                return Err(Error::UnknownInsertionPoint(point.clone()));
            }
            let name = format!("adapter/{point}");
            if self.groups.iter().all(|g| g.name != name) {
                self.groups.push(MemoryGroup::new(&name));
            }
        }
        Ok(())
    }

    fn begin_training(&mut self, _config: &TrainConfig) -> Result<()> {
        Ok(())
    }

    fn train_epoch(&mut self, pairs: &[&TrainPair], _learning_rate: f64) -> Result<f64> {
        if let Some(group) = self.groups.iter_mut().rev().find(|g| !g.frozen) {
            for p in pairs {
                group.entries.insert(p.input.clone(), p.target.clone());
            }
        }
        self.trained = true;
        Ok(0.0)
    }

    fn end_training(&mut self) {}

    fn generate(&self, input: &str) -> Result<Prediction> {
        if !self.trained {
            return Err(Error::Untrained);
        }
        if let Some(target) = self.lookup(input) {
            return Ok(Prediction {
                output_text: target.clone(),
                confidence: 0.0,
            });
        }
        // Newer groups shadow older ones; candidates closest in length are
        // scanned first so the distance bound tightens early. Ties go to the
        // lexicographically smallest stored input.
        let query: Vec<char> = input.chars().collect();
        let mut shadowed = std::collections::HashSet::new();
        let mut candidates: Vec<(usize, &String, &String)> = Vec::new();
        for g in self.groups.iter().rev() {
            for (stored, target) in &g.entries {
                if shadowed.insert(stored.as_str()) {
                    candidates.push((stored.chars().count().abs_diff(query.len()), stored, target));
                }
            }
        }
        candidates.sort_by_key(|c| c.0);
        let mut stored_chars = Vec::new();
        let mut best: Option<(usize, &str, &String)> = None;
        for (_, stored, target) in candidates {
            stored_chars.clear();
            stored_chars.extend(stored.chars());
            let limit = best.map_or(usize::MAX, |(bd, _, _)| bd);
            let Some(d) = edit_distance_within(&query, &stored_chars, limit) else {
                continue;
            };
            let better = match best {
                None => true,
                Some((bd, bs, _)) => d < bd || (d == bd && stored.as_str() < bs),
            };
            if better {
                best = Some((d, stored, target));
            }
        }
        let (dist, _, target) = best.ok_or(Error::Untrained)?;
        let len = input.chars().count().max(1);
        Ok(Prediction {
            output_text: target.clone(),
            confidence: -(dist as f64) / len as f64,
        })
    }

    fn clone_model(&self) -> Result<Box<dyn Backend>> {
        Ok(Box::new(self.clone()))
    }

    fn save_payload(&self, dir: &Path) -> Result<(String, serde_json::Value)> {
        let path = dir.join(PAYLOAD);
        let text = serde_json::to_string(&self.groups)?;
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok((PAYLOAD.to_string(), json!({ "trained": self.trained })))
    }
}
