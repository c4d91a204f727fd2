//! Toy neural backend: a small transformer encoder over hashed whitespace
//! tokens and a non-autoregressive decoder that cross-attends to the encoder
//! memory and emits one edit tag per input token (keep, delete, replace with
//! a phrase, or keep and append a phrase). Output text is the input with the
//! tags applied, so identifiers unseen in training are copied through.
//!
//! Hash buckets never trained on map to a shared unknown-token embedding,
//! which training also sees through token dropout.
//!
//! The tag vocabulary has a fixed capacity; slots are assigned in first-seen
//! order, which lets adaptation learn fixes the pretrained model never saw
//! without reshaping the output layer.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var, D};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tagging::{apply_tags, edit_tags, Edit, DELETE, KEEP};
use super::{
    checksum, glob_match, Backend, Manifest, ParamGroup, Prediction, TrainConfig, TrainPair,
};
use crate::adapter::AdapterSpec;
use crate::corpus::{derive_seed, fnv1a, tokens};
use crate::error::{Error, Result};

pub const BACKEND_ID: &str = "toy-neural";
const PAYLOAD: &str = "model.safetensors";
const LN_EPS: f64 = 1e-5;
const GENERATE_CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NeuralConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub ff_dim: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    /// Inputs are truncated to this many tokens; the rest are dropped.
    pub max_len: usize,
    pub hash_buckets: usize,
    pub label_capacity: usize,
    /// Probability of replacing a training token with the unknown token.
    pub token_dropout: f64,
}

impl Default for NeuralConfig {
    fn default() -> Self {
        NeuralConfig {
            d_model: 48,
            n_heads: 4,
            ff_dim: 96,
            encoder_layers: 2,
            decoder_layers: 2,
            max_len: 64,
            hash_buckets: 4096,
            label_capacity: 256,
            token_dropout: 0.3,
        }
    }
}

impl NeuralConfig {
    fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::InvalidArgument(
                "d_model must be a positive multiple of n_heads".into(),
            ));
        }
        if self.max_len == 0 || self.hash_buckets == 0 || self.label_capacity < 2 {
            return Err(Error::InvalidArgument(
                "max_len, hash_buckets must be positive and label_capacity >= 2".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.token_dropout) {
            return Err(Error::InvalidArgument(
                "token_dropout must be in [0, 1)".into(),
            ));
        }
        Ok(())
    }
}

/// Serialized alongside the payload in the manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct SavedState {
    model: NeuralConfig,
    trained: bool,
    labels: Vec<String>,
    frozen: BTreeSet<String>,
    adapters: BTreeMap<String, usize>,
    #[serde(default)]
    seen: BTreeSet<u32>,
    #[serde(default)]
    steps: u64,
}

pub struct ToyNeural {
    config: NeuralConfig,
    seed: u64,
    trained: bool,
    vars: BTreeMap<String, Var>,
    frozen: BTreeSet<String>,
    /// insertion point -> bottleneck width
    adapters: BTreeMap<String, usize>,
    labels: Vec<String>,
    label_ids: HashMap<String, u32>,
    /// Buckets whose embedding has been trained.
    seen: BTreeSet<u32>,
    /// Training batches run so far; seeds token dropout.
    steps: u64,
    optimizer: Option<AdamW>,
    batch_size: usize,
}

fn group_of(var_name: &str) -> &str {
    var_name.split_once('.').map_or(var_name, |(g, _)| g)
}

struct Batch {
    ids: Tensor,
    start: Tensor,
    end: Tensor,
    mask: Tensor,
    lens: Vec<usize>,
    width: usize,
}

impl ToyNeural {
    pub fn new(config: NeuralConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut model = ToyNeural {
            config,
            seed,
            trained: false,
            vars: BTreeMap::new(),
            frozen: BTreeSet::new(),
            adapters: BTreeMap::new(),
            labels: vec![KEEP.to_string(), DELETE.to_string()],
            label_ids: HashMap::new(),
            seen: BTreeSet::new(),
            steps: 0,
            optimizer: None,
            batch_size: 32,
        };
        model.rebuild_label_index();
        model.init_base()?;
        Ok(model)
    }

    pub fn config(&self) -> &NeuralConfig {
        &self.config
    }

    pub fn hidden_dim(&self) -> usize {
        self.config.d_model
    }

    /// Tag labels assigned so far, in slot order.
    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    fn rebuild_label_index(&mut self) {
        self.label_ids = self
            .labels
            .iter()
            .enumerate()
            .map(|(i, l)| (l.clone(), i as u32))
            .collect();
    }

    fn add_var(&mut self, name: String, shape: &[usize], init: Init) -> Result<()> {
        let n: usize = shape.iter().product();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &name));
        let data: Vec<f32> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Uniform(a) => (0..n).map(|_| rng.random_range(-a..a)).collect(),
        };
        let t = Tensor::from_vec(data, shape, &Device::Cpu)?;
        self.vars.insert(name, Var::from_tensor(&t)?);
        Ok(())
    }

    fn add_linear(
        &mut self,
        prefix: &str,
        out_dim: usize,
        in_dim: usize,
        init: Option<Init>,
    ) -> Result<()> {
        let bound = (6.0 / (in_dim + out_dim) as f32).sqrt();
        self.add_var(
            format!("{prefix}.weight"),
            &[out_dim, in_dim],
            init.unwrap_or(Init::Uniform(bound)),
        )?;
        self.add_var(format!("{prefix}.bias"), &[out_dim], Init::Zeros)
    }

    fn add_norm(&mut self, prefix: &str, d: usize) -> Result<()> {
        self.add_var(format!("{prefix}.weight"), &[d], Init::Ones)?;
        self.add_var(format!("{prefix}.bias"), &[d], Init::Zeros)
    }

    fn init_base(&mut self) -> Result<()> {
        let c = self.config.clone();
        let d = c.d_model;
        self.add_var(
            "embed/token.weight".into(),
            &[c.hash_buckets + 1, d],
            Init::Uniform(0.5),
        )?;
        self.add_var(
            "embed/position.start".into(),
            &[c.max_len, d],
            Init::Uniform(0.5),
        )?;
        self.add_var(
            "embed/position.end".into(),
            &[c.max_len, d],
            Init::Uniform(0.5),
        )?;
        for i in 0..c.encoder_layers {
            let p = format!("encoder/{i}");
            self.add_norm(&format!("{p}.ln1"), d)?;
            self.add_linear(&format!("{p}.qkv"), 3 * d, d, None)?;
            self.add_linear(&format!("{p}.proj"), d, d, None)?;
            self.add_norm(&format!("{p}.ln2"), d)?;
            self.add_linear(&format!("{p}.ff1"), c.ff_dim, d, None)?;
            self.add_linear(&format!("{p}.ff2"), d, c.ff_dim, None)?;
        }
        for i in 0..c.decoder_layers {
            let p = format!("decoder/{i}");
            self.add_norm(&format!("{p}.ln1"), d)?;
            self.add_norm(&format!("{p}.ln_mem"), d)?;
            self.add_linear(&format!("{p}.q"), d, d, None)?;
            self.add_linear(&format!("{p}.kv"), 2 * d, d, None)?;
            self.add_linear(&format!("{p}.proj"), d, d, None)?;
            self.add_norm(&format!("{p}.ln2"), d)?;
            self.add_linear(&format!("{p}.ff1"), c.ff_dim, d, None)?;
            self.add_linear(&format!("{p}.ff2"), d, c.ff_dim, None)?;
        }
        self.add_norm("output.ln", d)?;
        self.add_linear("output.proj", c.label_capacity, d, None)?;
        Ok(())
    }

    fn add_adapter(&mut self, point: &str, bottleneck: usize, init_seed: u64) -> Result<()> {
        let d = self.config.d_model;
        let p = format!("adapter/{point}");
        self.add_norm(&format!("{p}.ln"), d)?;
        // Down-projection draws from the spec seed so insertion is independent
        // of the base model seed.
        let bound = (6.0 / (d + bottleneck) as f32).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(init_seed, point));
        let down: Vec<f32> = (0..bottleneck * d)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        let t = Tensor::from_vec(down, (bottleneck, d), &Device::Cpu)?;
        self.vars
            .insert(format!("{p}.down.weight"), Var::from_tensor(&t)?);
        self.add_var(format!("{p}.down.bias"), &[bottleneck], Init::Zeros)?;
        self.add_var(format!("{p}.up.weight"), &[d, bottleneck], Init::Zeros)?;
        self.add_var(format!("{p}.up.bias"), &[d], Init::Zeros)?;
        self.adapters.insert(point.to_string(), bottleneck);
        Ok(())
    }

    fn w(&self, name: &str) -> Result<&Tensor> {
        self.vars
            .get(name)
            .map(|v| v.as_tensor())
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))
    }

    fn linear(&self, x: &Tensor, prefix: &str) -> Result<Tensor> {
        let w = self.w(&format!("{prefix}.weight"))?;
        let b = self.w(&format!("{prefix}.bias"))?;
        Ok(x.broadcast_matmul(&w.t()?)?.broadcast_add(b)?)
    }

    fn norm(&self, x: &Tensor, prefix: &str) -> Result<Tensor> {
        let w = self.w(&format!("{prefix}.weight"))?;
        let b = self.w(&format!("{prefix}.bias"))?;
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + LN_EPS)?.sqrt()?)?;
        Ok(normed.broadcast_mul(w)?.broadcast_add(b)?)
    }

    fn split_heads(&self, x: &Tensor) -> Result<Tensor> {
        let (b, t, d) = x.dims3()?;
        let h = self.config.n_heads;
        Ok(x.reshape((b, t, h, d / h))?.transpose(1, 2)?.contiguous()?)
    }

    fn attention(&self, q: &Tensor, k: &Tensor, v: &Tensor, mask: &Tensor) -> Result<Tensor> {
        let (b, t, d) = q.dims3()?;
        let (q, k, v) = (
            self.split_heads(q)?,
            self.split_heads(k)?,
            self.split_heads(v)?,
        );
        let scale = ((d / self.config.n_heads) as f64).sqrt();
        let scores = (q.matmul(&k.t()?.contiguous()?)? / scale)?.broadcast_add(mask)?;
        let att = candle_nn::ops::softmax_last_dim(&scores)?;
        Ok(att
            .matmul(&v)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, t, d))?)
    }

    fn adapter(&self, h: Tensor, point: &str) -> Result<Tensor> {
        if !self.adapters.contains_key(point) {
            return Ok(h);
        }
        let p = format!("adapter/{point}");
        let x = self.norm(&h, &format!("{p}.ln"))?;
        let z = self.linear(&x, &format!("{p}.down"))?.relu()?;
        Ok((h + self.linear(&z, &format!("{p}.up"))?)?)
    }

    fn encoder_block(&self, i: usize, h: Tensor, mask: &Tensor) -> Result<Tensor> {
        let p = format!("encoder/{i}");
        let d = self.config.d_model;
        let x = self.norm(&h, &format!("{p}.ln1"))?;
        let qkv = self.linear(&x, &format!("{p}.qkv"))?;
        let att = self.attention(
            &qkv.narrow(2, 0, d)?,
            &qkv.narrow(2, d, d)?,
            &qkv.narrow(2, 2 * d, d)?,
            mask,
        )?;
        let h = (h + self.linear(&att, &format!("{p}.proj"))?)?;
        let x = self.norm(&h, &format!("{p}.ln2"))?;
        let ff = self.linear(
            &self.linear(&x, &format!("{p}.ff1"))?.relu()?,
            &format!("{p}.ff2"),
        )?;
        Ok((h + ff)?)
    }

    fn decoder_block(&self, i: usize, h: Tensor, memory: &Tensor, mask: &Tensor) -> Result<Tensor> {
        let p = format!("decoder/{i}");
        let d = self.config.d_model;
        let x = self.norm(&h, &format!("{p}.ln1"))?;
        let m = self.norm(memory, &format!("{p}.ln_mem"))?;
        let q = self.linear(&x, &format!("{p}.q"))?;
        let kv = self.linear(&m, &format!("{p}.kv"))?;
        let att = self.attention(&q, &kv.narrow(2, 0, d)?, &kv.narrow(2, d, d)?, mask)?;
        let h = (h + self.linear(&att, &format!("{p}.proj"))?)?;
        let x = self.norm(&h, &format!("{p}.ln2"))?;
        let ff = self.linear(
            &self.linear(&x, &format!("{p}.ff1"))?.relu()?,
            &format!("{p}.ff2"),
        )?;
        Ok((h + ff)?)
    }

    /// Logits over the tag vocabulary, shape `(batch, width, capacity)`.
    fn forward(&self, batch: &Batch) -> Result<Tensor> {
        let emb = |name: &str, ids: &Tensor| -> Result<Tensor> {
            let w = self.w(name)?;
            let (b, t) = ids.dims2()?;
            Ok(w.index_select(&ids.flatten_all()?, 0)?
                .reshape((b, t, self.config.d_model))?)
        };
        let mut h = ((emb("embed/token.weight", &batch.ids)?
            + emb("embed/position.start", &batch.start)?)?
            + emb("embed/position.end", &batch.end)?)?;
        for i in 0..self.config.encoder_layers {
            h = self.encoder_block(i, h, &batch.mask)?;
            h = self.adapter(h, &format!("encoder/{i}"))?;
        }
        let memory = h.clone();
        for i in 0..self.config.decoder_layers {
            h = self.decoder_block(i, h, &memory, &batch.mask)?;
            h = self.adapter(h, &format!("decoder/{i}"))?;
        }
        let x = self.norm(&h, "output.ln")?;
        self.linear(&x, "output.proj")
    }

    fn token_ids(&self, text: &str) -> Vec<u32> {
        tokens(text)
            .take(self.config.max_len)
            .map(|t| (fnv1a(t.as_bytes()) % self.config.hash_buckets as u64) as u32)
            .collect()
    }

    fn unknown_id(&self) -> u32 {
        self.config.hash_buckets as u32
    }

    /// Inference batch: untrained buckets become the unknown token.
    fn make_batch(&self, inputs: &[&str]) -> Result<Batch> {
        let unk = self.unknown_id();
        let encoded: Vec<Vec<u32>> = inputs
            .iter()
            .map(|s| {
                self.token_ids(s)
                    .into_iter()
                    .map(|id| if self.seen.contains(&id) { id } else { unk })
                    .collect()
            })
            .collect();
        Self::assemble(encoded)
    }

    fn assemble(encoded: Vec<Vec<u32>>) -> Result<Batch> {
        let lens: Vec<usize> = encoded.iter().map(Vec::len).collect();
        let width = lens.iter().copied().max().unwrap_or(0).max(1);
        let n = encoded.len();
        let mut ids = vec![0u32; n * width];
        let mut start = vec![0u32; n * width];
        let mut end = vec![0u32; n * width];
        let mut mask = vec![-1e9f32; n * width];
        for (r, row) in encoded.iter().enumerate() {
            for (c, &id) in row.iter().enumerate() {
                let k = r * width + c;
                ids[k] = id;
                start[k] = c as u32;
                end[k] = (row.len() - 1 - c) as u32;
                mask[k] = 0.0;
            }
        }
        let dev = Device::Cpu;
        Ok(Batch {
            ids: Tensor::from_vec(ids, (n, width), &dev)?,
            start: Tensor::from_vec(start, (n, width), &dev)?,
            end: Tensor::from_vec(end, (n, width), &dev)?,
            mask: Tensor::from_vec(mask, (n, 1, 1, width), &dev)?,
            lens,
            width,
        })
    }

    /// Tag slot for `label`, assigning a free slot when there is one.
    fn label_slot(&mut self, label: String) -> Option<u32> {
        if let Some(&id) = self.label_ids.get(&label) {
            return Some(id);
        }
        if self.labels.len() >= self.config.label_capacity {
            log::warn!("tag vocabulary full; dropping label `{label}`");
            return None;
        }
        let id = self.labels.len() as u32;
        self.labels.push(label.clone());
        self.label_ids.insert(label, id);
        Some(id)
    }

    fn batch_loss(&mut self, pairs: &[&TrainPair]) -> Result<Tensor> {
        let learn_embeddings = !self.frozen.contains("embed/token");
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(self.seed, "token-dropout") ^ self.steps);
        self.steps += 1;
        let unk = self.unknown_id();
        let mut encoded = Vec::with_capacity(pairs.len());
        for p in pairs {
            let ids = self.token_ids(&p.input);
            if learn_embeddings {
                self.seen.extend(ids.iter().copied());
            }
            encoded.push(
                ids.into_iter()
                    .map(|id| {
                        if !self.seen.contains(&id) || rng.random_bool(self.config.token_dropout) {
                            unk
                        } else {
                            id
                        }
                    })
                    .collect(),
            );
        }
        let batch = Self::assemble(encoded)?;
        let n = pairs.len();
        let mut targets = vec![0u32; n * batch.width];
        let mut weights = vec![0f32; n * batch.width];
        for (r, pair) in pairs.iter().enumerate() {
            let input_toks: Vec<&str> = tokens(&pair.input).collect();
            let target_toks: Vec<&str> = tokens(&pair.target).collect();
            let tags = edit_tags(&input_toks, &target_toks);
            for (c, tag) in tags.into_iter().take(batch.lens[r]).enumerate() {
                if let Some(slot) = self.label_slot(tag.encode()) {
                    targets[r * batch.width + c] = slot;
                    weights[r * batch.width + c] = 1.0;
                }
            }
        }
        let logits = self.forward(&batch)?;
        let cap = self.config.label_capacity;
        let logp =
            candle_nn::ops::log_softmax(&logits.reshape((n * batch.width, cap))?, D::Minus1)?;
        let dev = Device::Cpu;
        let targets = Tensor::from_vec(targets, (n * batch.width, 1), &dev)?;
        let count = weights.iter().sum::<f32>().max(1.0);
        let weights = Tensor::from_vec(weights, (n * batch.width, 1), &dev)?;
        let picked = logp.gather(&targets, 1)?;
        Ok((picked.mul(&weights)?.sum_all()?.neg()? / f64::from(count))?)
    }

    fn trainable_vars(&self) -> Vec<Var> {
        self.vars
            .iter()
            .filter(|(name, _)| !self.frozen.contains(group_of(name)))
            .map(|(_, v)| v.clone())
            .collect()
    }

    fn group_names(&self) -> BTreeSet<String> {
        self.vars.keys().map(|k| group_of(k).to_string()).collect()
    }

    fn predict_chunk(&self, inputs: &[&str]) -> Result<Vec<Prediction>> {
        let batch = self.make_batch(inputs)?;
        let logits = self.forward(&batch)?;
        let logp = candle_nn::ops::log_softmax(&logits, D::Minus1)?;
        let rows: Vec<Vec<Vec<f32>>> = logp.to_vec3()?;
        let assigned = self.labels.len();
        let mut out = Vec::with_capacity(inputs.len());
        for (r, input) in inputs.iter().enumerate() {
            let toks: Vec<&str> = tokens(input).take(self.config.max_len).collect();
            let mut tags = Vec::with_capacity(toks.len());
            let mut total = 0f64;
            for row in rows[r].iter().take(batch.lens[r]) {
                let row = &row[..assigned];
                let (best, lp) =
                    row.iter()
                        .enumerate()
                        .fold((0usize, f32::NEG_INFINITY), |acc, (i, &v)| {
                            if v > acc.1 {
                                (i, v)
                            } else {
                                acc
                            }
                        });
                total += f64::from(lp);
                tags.push(Edit::decode(&self.labels[best]).unwrap_or(Edit::Keep));
            }
            let confidence = if batch.lens[r] == 0 {
                0.0
            } else {
                total / batch.lens[r] as f64
            };
            out.push(Prediction {
                output_text: apply_tags(&toks, &tags).join(" "),
                confidence,
            });
        }
        Ok(out)
    }

    /// Raw logits for one input; exposed for identity checks on adapters.
    pub fn logits(&self, input: &str) -> Result<Vec<Vec<f32>>> {
        let batch = self.make_batch(&[input])?;
        Ok(self.forward(&batch)?.squeeze(0)?.to_vec2()?)
    }

    pub(crate) fn load(payload: &Path, manifest: &Manifest) -> Result<Self> {
        let state: SavedState = serde_json::from_value(manifest.config.clone())
            .map_err(|e| Error::Checkpoint(format!("bad toy-neural config: {e}")))?;
        let mut model = ToyNeural::new(state.model, manifest.seed)?;
        for (point, b) in &state.adapters {
            model.add_adapter(point, *b, 0)?;
        }
        let tensors = candle_core::safetensors::load(payload, &Device::Cpu)
            .map_err(|e| Error::Checkpoint(format!("bad payload: {e}")))?;
        if tensors.len() != model.vars.len() {
            return Err(Error::Checkpoint(format!(
                "payload has {} tensors, expected {}",
                tensors.len(),
                model.vars.len()
            )));
        }
        for (name, var) in &model.vars {
            let t = tensors
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("payload lacks `{name}`")))?;
            if t.dims() != var.dims() {
                return Err(Error::Checkpoint(format!("shape mismatch for `{name}`")));
            }
            var.set(&t.to_dtype(DType::F32)?)?;
        }
        model.trained = state.trained;
        model.labels = state.labels;
        model.frozen = state.frozen;
        model.seen = state.seen;
        model.steps = state.steps;
        model.rebuild_label_index();
        Ok(model)
    }
}

#[derive(Clone, Copy)]
enum Init {
    Zeros,
    Ones,
    Uniform(f32),
}

impl Backend for ToyNeural {
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
        let mut groups: BTreeMap<&str, Vec<(&String, &Var)>> = BTreeMap::new();
        for (name, var) in &self.vars {
            groups.entry(group_of(name)).or_default().push((name, var));
        }
        groups
            .into_iter()
            .map(|(group, vars)| {
                let mut bytes: Vec<Vec<u8>> = Vec::new();
                let mut elements = 0;
                for (name, var) in vars {
                    elements += var.elem_count();
                    bytes.push(name.as_bytes().to_vec());
                    let values: Vec<f32> = var
                        .as_tensor()
                        .flatten_all()
                        .and_then(|t| t.to_vec1())
                        .expect("cpu f32 tensor");
                    bytes.push(values.iter().flat_map(|v| v.to_le_bytes()).collect());
                }
                ParamGroup {
                    name: group.to_string(),
                    frozen: self.frozen.contains(group),
                    elements,
                    checksum: checksum(bytes.iter().map(Vec::as_slice)),
                }
            })
            .collect()
    }

    fn set_frozen_groups(&mut self, pattern: &str, frozen: bool) -> Result<usize> {
        let matched: Vec<String> = self
            .group_names()
            .into_iter()
            .filter(|g| glob_match(pattern, g))
            .collect();
        if matched.is_empty() {
            return Err(Error::PatternNoMatch(pattern.to_string()));
        }
        for g in &matched {
            if frozen {
                self.frozen.insert(g.clone());
            } else {
                self.frozen.remove(g);
            }
        }
        Ok(matched.len())
    }

    fn layer_ids(&self) -> Vec<String> {
        (0..self.config.encoder_layers)
            .map(|i| format!("encoder/{i}"))
            .chain((0..self.config.decoder_layers).map(|i| format!("decoder/{i}")))
            .collect()
    }

    fn insert_adapters(&mut self, spec: &AdapterSpec) -> Result<()> {
        spec.validate()?;
        let layers = self.layer_ids();
        for point in &spec.insertion_points {
            if !layers.contains(point) {
                return Err(Error::UnknownInsertionPoint(point.clone()));
            }
            if self.adapters.contains_key(point) {
                return Err(Error::InvalidArgument(format!(
                    "adapter already present at `{point}`"
                )));
            }
        }
        for point in &spec.insertion_points {
            self.add_adapter(point, spec.bottleneck_dim, spec.init_seed)?;
        }
        Ok(())
    }

    fn begin_training(&mut self, config: &TrainConfig) -> Result<()> {
        let params = ParamsAdamW {
            lr: config.learning_rate,
            weight_decay: 0.0,
            ..Default::default()
        };
        self.optimizer = Some(AdamW::new(self.trainable_vars(), params)?);
        self.batch_size = config.batch_size;
        Ok(())
    }

    fn train_epoch(&mut self, pairs: &[&TrainPair], learning_rate: f64) -> Result<f64> {
        let mut optimizer = match self.optimizer.take() {
            Some(o) => o,
            None => AdamW::new(
                self.trainable_vars(),
                ParamsAdamW {
                    lr: learning_rate,
                    weight_decay: 0.0,
                    ..Default::default()
                },
            )?,
        };
        optimizer.set_learning_rate(learning_rate);
        let has_trainable = !self.trainable_vars().is_empty();
        let mut total = 0f64;
        let mut batches = 0usize;
        let result = (|| -> Result<()> {
            for chunk in pairs.chunks(self.batch_size.max(1)) {
                let loss = self.batch_loss(chunk)?;
                total += f64::from(loss.to_scalar::<f32>()?);
                batches += 1;
                if has_trainable {
                    optimizer.backward_step(&loss)?;
                }
            }
            Ok(())
        })();
        self.optimizer = Some(optimizer);
        result?;
        self.trained = true;
        Ok(if batches == 0 {
            0.0
        } else {
            total / batches as f64
        })
    }

    fn end_training(&mut self) {
        self.optimizer = None;
    }

    fn generate(&self, input: &str) -> Result<Prediction> {
        Ok(self.generate_batch(&[input])?.remove(0))
    }

    fn generate_batch(&self, inputs: &[&str]) -> Result<Vec<Prediction>> {
        if !self.trained {
            return Err(Error::Untrained);
        }
        let mut out = Vec::with_capacity(inputs.len());
        for chunk in inputs.chunks(GENERATE_CHUNK) {
            out.extend(self.predict_chunk(chunk)?);
        }
        Ok(out)
    }

    fn clone_model(&self) -> Result<Box<dyn Backend>> {
        let mut vars = BTreeMap::new();
        for (name, var) in &self.vars {
            vars.insert(name.clone(), Var::from_tensor(&var.as_tensor().copy()?)?);
        }
        Ok(Box::new(ToyNeural {
            config: self.config.clone(),
            seed: self.seed,
            trained: self.trained,
            vars,
            frozen: self.frozen.clone(),
            adapters: self.adapters.clone(),
            labels: self.labels.clone(),
            label_ids: self.label_ids.clone(),
            seen: self.seen.clone(),
            steps: self.steps,
            optimizer: None,
            batch_size: self.batch_size,
        }))
    }

    fn save_payload(&self, dir: &Path) -> Result<(String, serde_json::Value)> {
        let path = dir.join(PAYLOAD);
        let tensors: HashMap<String, Tensor> = self
            .vars
            .iter()
            .map(|(k, v)| (k.clone(), v.as_tensor().clone()))
            .collect();
        candle_core::safetensors::save(&tensors, &path)?;
        let state = SavedState {
            model: self.config.clone(),
            trained: self.trained,
            labels: self.labels.clone(),
            frozen: self.frozen.clone(),
            adapters: self.adapters.clone(),
            seen: self.seen.clone(),
            steps: self.steps,
        };
        Ok((PAYLOAD.to_string(), serde_json::to_value(state)?))
    }
}
