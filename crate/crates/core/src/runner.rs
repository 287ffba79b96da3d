//! Experiment orchestration: run configs, the training loop, gradient checks,
//! benchmark sweeps and report files.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array1;
use rand::rngs::StdRng;
use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::autograd::{Mat, NodeId};
use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::data::{
    self, load_manifest, split_dataset, synthesize_toy_dataset, to_retrieval_split, Normalization, Split,
    ToyDatasetConfig, Vocab,
};
use crate::encoder::{Augment, DualEncoderModel, EncoderConfig, EncoderInput, Tape};
use crate::error::{PetlError, Result};
use crate::objectives::{graph_hmmc, LossConfig, NegativeMode};
use crate::petl::{attach_strategy, count_parameters, ParamReport, PetlStrategy, StrategyKind};
use crate::retrieval::{embed_split, evaluate_retrieval, kfold_aggregate, MetricsRecord, RetrievalSplit};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub betas: [f64; 2],
    pub eps: f64,
    /// L2 penalty added to the gradient. Off by default.
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            lr: 2e-4,
            betas: [0.9, 0.999],
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Step decay of the learning rate, counted in epochs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub decay_factor: f64,
    pub decay_every: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            decay_factor: 0.7,
            decay_every: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSource {
    Toy(ToyDatasetConfig),
    Manifest {
        path: PathBuf,
        /// Vocabulary JSON; built from the training captions when absent.
        #[serde(default)]
        vocab: Option<PathBuf>,
        #[serde(default)]
        normalization: Option<Normalization>,
    },
}

fn default_batch_size() -> usize {
    16
}
fn default_epochs() -> usize {
    30
}
fn default_k_folds() -> usize {
    5
}
fn default_split() -> [f64; 3] {
    [0.8, 0.1, 0.1]
}
fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Row label in reports; the strategy label when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(default)]
    pub encoder: EncoderConfig,
    pub strategy: PetlStrategy,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// Stop after this many optimizer steps.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_steps: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    pub dataset: DatasetSource,
    /// Train/val/test fractions.
    #[serde(default = "default_split")]
    pub split: [f64; 3],
    #[serde(default = "default_k_folds")]
    pub k_folds: usize,
    /// Backbone weights to start from instead of random initialization.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_checkpoint: Option<PathBuf>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub export_embeddings: bool,
}

impl RunConfig {
    /// Toy-scale recipe: small encoder on the default synthetic dataset.
    ///
    /// A random backbone gives weak starting features; the hardest-negative
    /// loss collapses every embedding onto one point from there, so the toy
    /// recipe sums over negatives and uses a larger learning rate.
    pub fn toy(strategy: PetlStrategy) -> Self {
        RunConfig {
            label: None,
            encoder: EncoderConfig::toy(),
            strategy,
            loss: LossConfig {
                margin_cross: 0.3,
                margin_image: 0.3,
                margin_text: 0.3,
                dropout_p: 0.1,
                negative_mode: NegativeMode::Sum,
            },
            optimizer: OptimizerConfig {
                lr: 1e-2,
                ..Default::default()
            },
            schedule: ScheduleConfig::default(),
            batch_size: default_batch_size(),
            epochs: default_epochs(),
            max_steps: None,
            seed: 0,
            dataset: DatasetSource::Toy(ToyDatasetConfig::default()),
            split: default_split(),
            k_folds: 1,
            init_checkpoint: None,
            output_dir: default_output_dir(),
            export_embeddings: false,
        }
    }

    pub fn label(&self) -> String {
        self.label.clone().unwrap_or_else(|| self.strategy.label())
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.strategy.validate(&self.encoder)?;
        self.loss.validate()?;
        if self.batch_size < 2 {
            return Err(PetlError::config(
                "batch_size must be >= 2 so every anchor has a negative",
            ));
        }
        if self.epochs == 0 {
            return Err(PetlError::config("epochs must be >= 1"));
        }
        if self.k_folds == 0 {
            return Err(PetlError::config("k_folds must be >= 1"));
        }
        let o = &self.optimizer;
        if !(o.lr.is_finite() && o.lr > 0.0) {
            return Err(PetlError::config(format!("learning rate {} must be > 0", o.lr)));
        }
        if o.betas.iter().any(|b| !(0.0..1.0).contains(b))
            || o.eps.is_nan()
            || o.eps <= 0.0
            || o.weight_decay.is_nan()
            || o.weight_decay < 0.0
        {
            return Err(PetlError::config(
                "adam betas must lie in [0, 1), eps > 0, weight_decay >= 0",
            ));
        }
        let s = &self.schedule;
        if s.decay_every == 0 || !(s.decay_factor > 0.0 && s.decay_factor.is_finite()) {
            return Err(PetlError::config(
                "schedule needs decay_every >= 1 and decay_factor > 0",
            ));
        }
        if let DatasetSource::Toy(t) = &self.dataset {
            t.validate()?;
        }
        Ok(())
    }

    /// Parses a config value. Keys containing dots are expanded into nested
    /// tables, so `{"optimizer.lr": 1e-3}` equals `{"optimizer": {"lr": 1e-3}}`.
    pub fn from_value(value: Value) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_value(expand_dotted(value)?).map_err(|e| PetlError::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let value: toml::Value = toml::from_str(text).map_err(|e| PetlError::config(e.to_string()))?;
        Self::from_value(serde_json::to_value(value)?)
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text).map_err(|e| PetlError::config(e.to_string()))?;
        Self::from_value(value)
    }

    /// Reads a `.toml` or `.json` file. Relative paths inside resolve against
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| PetlError::config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = match path.extension().and_then(|e| e.to_str()) {
            Some("toml") => Self::from_toml_str(&text)?,
            Some("json") => Self::from_json_str(&text)?,
            _ => {
                return Err(PetlError::config(format!(
                    "config {} must end in .toml or .json",
                    path.display()
                )))
            }
        };
        let base = path.parent().unwrap_or(Path::new(""));
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let DatasetSource::Manifest { path, vocab, .. } = &mut cfg.dataset {
            rebase(path);
            if let Some(v) = vocab {
                rebase(v);
            }
        }
        if let Some(p) = &mut cfg.init_checkpoint {
            rebase(p);
        }
        rebase(&mut cfg.output_dir);
        Ok(cfg)
    }

    /// SHA-256 over the canonical JSON of everything but the output location.
    pub fn config_hash(&self) -> String {
        let mut value = serde_json::to_value(self).expect("config serializes");
        if let Value::Object(m) = &mut value {
            m.remove("output_dir");
        }
        let digest = Sha256::digest(canonical_json(&value).as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn expand_dotted(value: Value) -> Result<Value> {
    match value {
        Value::Object(map) => {
            let mut out = Map::new();
            for (key, v) in map {
                let v = expand_dotted(v)?;
                let parts: Vec<&str> = key.split('.').collect();
                insert_path(&mut out, &parts, v, &key)?;
            }
            Ok(Value::Object(out))
        }
        other => Ok(other),
    }
}

fn insert_path(map: &mut Map<String, Value>, parts: &[&str], v: Value, full: &str) -> Result<()> {
    let conflict = || PetlError::config(format!("config key {full} conflicts with another entry"));
    let (head, rest) = parts.split_first().expect("nonempty key path");
    if rest.is_empty() {
        match (map.get_mut(*head), v) {
            (Some(Value::Object(existing)), Value::Object(new)) => {
                for (k, val) in new {
                    insert_path(existing, &[k.as_str()], val, full)?;
                }
            }
            (Some(_), _) => return Err(conflict()),
            (None, v) => {
                map.insert(head.to_string(), v);
            }
        }
        return Ok(());
    }
    let child = map.entry(head.to_string()).or_insert_with(|| Value::Object(Map::new()));
    match child {
        Value::Object(m) => insert_path(m, rest, v, full),
        _ => Err(conflict()),
    }
}

fn canonical_json(v: &Value) -> String {
    match v {
        Value::Object(m) => {
            let mut keys: Vec<&String> = m.keys().collect();
            keys.sort();
            let body: Vec<String> = keys
                .into_iter()
                .map(|k| format!("{}:{}", Value::String(k.clone()), canonical_json(&m[k])))
                .collect();
            format!("{{{}}}", body.join(","))
        }
        Value::Array(a) => format!("[{}]", a.iter().map(canonical_json).collect::<Vec<_>>().join(",")),
        other => other.to_string(),
    }
}

/// `base_lr · decay_factor^⌊epoch / decay_every⌋`.
pub fn lr_schedule(epoch: usize, base_lr: f64, cfg: &ScheduleConfig) -> f64 {
    base_lr * cfg.decay_factor.powi((epoch / cfg.decay_every.max(1)) as i32)
}

/// Independent seed for a named purpose within a run.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.next_u64()
}

const STREAM_INIT: u64 = 1;
const STREAM_ATTACH: u64 = 2;
const STREAM_SAMPLER: u64 = 3;
const STREAM_DROPOUT: u64 = 4;
const STREAM_GRADCHECK: u64 = 5;

/// Tokenized, preprocessed splits of a run's dataset.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub vocab: Vocab,
    pub normalization: Normalization,
    pub train: RetrievalSplit,
    pub val: RetrievalSplit,
    pub test: RetrievalSplit,
}

impl PreparedData {
    pub fn split(&self, split: Split) -> &RetrievalSplit {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Loads or synthesizes the dataset and splits it with `split_seed`.
pub fn prepare_data(cfg: &RunConfig, split_seed: u64) -> Result<PreparedData> {
    let (manifest, vocab, normalization) = match &cfg.dataset {
        DatasetSource::Toy(toy) => {
            let ds = synthesize_toy_dataset(toy)?;
            (ds.manifest, Some(ds.vocab), Normalization::IDENTITY)
        }
        DatasetSource::Manifest {
            path,
            vocab,
            normalization,
        } => {
            let m = load_manifest(path)?;
            let v = match vocab {
                Some(p) => Some(serde_json::from_str::<Vocab>(&fs::read_to_string(p)?)?),
                None => None,
            };
            (m, v, normalization.unwrap_or_default())
        }
    };
    let splits = split_dataset(&manifest, cfg.split, split_seed)?;
    for s in [Split::Train, Split::Val, Split::Test] {
        let n = splits.get(s).len();
        if n < if s == Split::Train { cfg.batch_size.min(2) } else { 1 } {
            return Err(PetlError::config(format!("{} split has only {n} images", s.name())));
        }
    }
    let vocab = vocab.unwrap_or_else(|| {
        Vocab::from_corpus(
            splits
                .train
                .items
                .iter()
                .flat_map(|i| i.captions.iter().map(String::as_str)),
            cfg.encoder.vocab_size,
        )
    });
    if vocab.size() > cfg.encoder.vocab_size {
        return Err(PetlError::config(format!(
            "vocabulary has {} ids but the encoder embeds only {}",
            vocab.size(),
            cfg.encoder.vocab_size
        )));
    }
    let enc = &cfg.encoder;
    let convert =
        |m: &data::DatasetManifest| to_retrieval_split(m, &vocab, enc.context_length, enc.image_size, &normalization);
    Ok(PreparedData {
        train: convert(&splits.train)?,
        val: convert(&splits.val)?,
        test: convert(&splits.test)?,
        vocab,
        normalization,
    })
}

/// Backbone (random or from `init_checkpoint`) with the run's strategy attached.
pub fn build_model(cfg: &RunConfig, seed: u64) -> Result<DualEncoderModel> {
    let mut model = match &cfg.init_checkpoint {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            if ckpt.model.strategy().is_some() {
                return Err(PetlError::config("init_checkpoint must hold a bare backbone"));
            }
            if ckpt.model.config() != &cfg.encoder {
                return Err(PetlError::config(
                    "init_checkpoint encoder config differs from the run config",
                ));
            }
            ckpt.model
        }
        None => DualEncoderModel::new(cfg.encoder.clone(), derive_seed(seed, STREAM_INIT))?,
    };
    attach_strategy(&mut model, &cfg.strategy, derive_seed(seed, STREAM_ATTACH))?;
    Ok(model)
}

/// Adam over the trainable tensors of a model.
#[derive(Clone, Debug)]
pub struct Adam {
    cfg: OptimizerConfig,
    t: i32,
    moments: HashMap<String, (Mat, Mat)>,
}

impl Adam {
    pub fn new(cfg: OptimizerConfig) -> Self {
        Adam {
            cfg,
            t: 0,
            moments: HashMap::new(),
        }
    }

    pub fn steps(&self) -> usize {
        self.t as usize
    }

    /// Applies one update. Gradients of frozen tensors are refused.
    pub fn update(&mut self, model: &mut DualEncoderModel, grads: &[(String, Mat)], lr: f64) -> Result<()> {
        self.t += 1;
        let [b1, b2] = self.cfg.betas;
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        for (name, g) in grads {
            let p = model
                .params_mut()
                .get_mut(name)
                .ok_or_else(|| PetlError::config(format!("no parameter {name}")))?;
            if !p.trainable {
                return Err(PetlError::config(format!("refusing to update frozen parameter {name}")));
            }
            let g = if self.cfg.weight_decay > 0.0 {
                g + &(&p.value * self.cfg.weight_decay)
            } else {
                g.clone()
            };
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (Mat::zeros(g.dim()), Mat::zeros(g.dim())));
            m.zip_mut_with(&g, |m, &g| *m = b1 * *m + (1.0 - b1) * g);
            v.zip_mut_with(&g, |v, &g| *v = b2 * *v + (1.0 - b2) * g * g);
            let eps = self.cfg.eps;
            ndarray::Zip::from(&mut p.value)
                .and(&*m)
                .and(&*v)
                .for_each(|w, &m, &v| *w -= lr * (m / c1) / ((v / c2).sqrt() + eps));
        }
        Ok(())
    }
}

/// Encodes a batch of `(image, caption)` pairs on `tape` and returns the loss
/// node. Clean passes come first, then the dropout passes, so the dropout
/// stream is consumed in a fixed order.
fn batch_loss(
    tape: &mut Tape<'_>,
    split: &RetrievalSplit,
    pairs: &[(usize, usize)],
    loss: &LossConfig,
    rng: &mut dyn RngCore,
) -> Result<NodeId> {
    let mut v = Vec::with_capacity(pairs.len());
    let mut t = Vec::with_capacity(pairs.len());
    for &(img, cap) in pairs {
        v.push(tape.encode(&EncoderInput::Image(&split.images[img]), None)?);
        t.push(tape.encode(&EncoderInput::Text(&split.captions[cap]), None)?);
    }
    let mut v_aug = Vec::with_capacity(pairs.len());
    let mut t_aug = Vec::with_capacity(pairs.len());
    for &(img, cap) in pairs {
        let aug = Augment {
            p: loss.dropout_p,
            rng: &mut *rng,
        };
        v_aug.push(tape.encode(&EncoderInput::Image(&split.images[img]), Some(aug))?);
        let aug = Augment {
            p: loss.dropout_p,
            rng: &mut *rng,
        };
        t_aug.push(tape.encode(&EncoderInput::Text(&split.captions[cap]), Some(aug))?);
    }
    let g = &mut tape.graph;
    let (v, t) = (g.concat_rows(&v), g.concat_rows(&t));
    let (v_aug, t_aug) = (g.concat_rows(&v_aug), g.concat_rows(&t_aug));
    let ids: Vec<usize> = pairs.iter().map(|p| split.caption_to_image[p.1]).collect();
    graph_hmmc(g, v, t, v_aug, t_aug, &ids, loss)
}

/// Loss value and gradients of every trainable parameter used by the batch.
pub fn loss_and_grads(
    model: &DualEncoderModel,
    split: &RetrievalSplit,
    pairs: &[(usize, usize)],
    loss: &LossConfig,
    rng: &mut dyn RngCore,
) -> Result<(f64, Vec<(String, Mat)>)> {
    let mut tape = Tape::new(model);
    let root = batch_loss(&mut tape, split, pairs, loss, rng)?;
    let value = tape.graph.value(root)[[0, 0]];
    if !value.is_finite() {
        return Ok((value, Vec::new()));
    }
    let grads = tape.graph.backward(root);
    let mut out: Vec<(String, Mat)> = tape
        .leaves()
        .filter(|(name, _)| model.params().get(name).is_some_and(|p| p.trainable))
        .filter_map(|(name, id)| grads.get(id).map(|g| (name.to_string(), g.clone())))
        .collect();
    out.sort_by(|a, b| a.0.cmp(&b.0));
    Ok((value, out))
}

/// Loss value and the kink signature of the forward pass.
fn loss_value(
    model: &DualEncoderModel,
    split: &RetrievalSplit,
    pairs: &[(usize, usize)],
    loss: &LossConfig,
    rng: &mut dyn RngCore,
) -> Result<(f64, u64)> {
    let mut tape = Tape::inference(model);
    let root = batch_loss(&mut tape, split, pairs, loss, rng)?;
    Ok((tape.graph.value(root)[[0, 0]], tape.graph.kink_signature()))
}

/// Single-threaded training state for one run.
pub struct Trainer<'d> {
    cfg: RunConfig,
    data: &'d PreparedData,
    model: DualEncoderModel,
    adam: Adam,
    sampler: ChaCha8Rng,
    dropout: ChaCha8Rng,
}

impl<'d> Trainer<'d> {
    pub fn new(cfg: &RunConfig, data: &'d PreparedData, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let model = build_model(cfg, seed)?;
        Ok(Trainer {
            cfg: cfg.clone(),
            data,
            model,
            adam: Adam::new(cfg.optimizer.clone()),
            sampler: ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_SAMPLER)),
            dropout: ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_DROPOUT)),
        })
    }

    pub fn model(&self) -> &DualEncoderModel {
        &self.model
    }

    pub fn into_model(self) -> DualEncoderModel {
        self.model
    }

    pub fn steps(&self) -> usize {
        self.adam.steps()
    }

    /// One epoch of batches: every training image once, in shuffled order,
    /// each paired with one of its captions drawn at random. A trailing batch
    /// with fewer than two images is dropped.
    pub fn epoch_batches(&mut self) -> Vec<Vec<(usize, usize)>> {
        let split = &self.data.train;
        let mut order: Vec<usize> = (0..split.n_images()).collect();
        order.shuffle(&mut self.sampler);
        let by_image = captions_by_image(split);
        let pairs: Vec<(usize, usize)> = order
            .into_iter()
            .map(|i| {
                let caps = &by_image[i];
                (i, caps[self.sampler.random_range(0..caps.len())])
            })
            .collect();
        pairs
            .chunks(self.cfg.batch_size)
            .filter(|c| c.len() >= 2)
            .map(<[_]>::to_vec)
            .collect()
    }

    /// One optimizer step on a batch of training pairs; returns the loss.
    pub fn step(&mut self, pairs: &[(usize, usize)], lr: f64) -> Result<f64> {
        let (loss, grads) = loss_and_grads(&self.model, &self.data.train, pairs, &self.cfg.loss, &mut self.dropout)?;
        if !loss.is_finite() {
            return Err(PetlError::numerical(format!(
                "non-finite loss {loss} at step {} (lr {lr}, batch images {:?})",
                self.steps() + 1,
                pairs.iter().map(|p| p.0).collect::<Vec<_>>()
            )));
        }
        if let Some((name, _)) = grads.iter().find(|(_, g)| g.iter().any(|x| !x.is_finite())) {
            return Err(PetlError::numerical(format!(
                "non-finite gradient for {name} at step {}",
                self.steps() + 1
            )));
        }
        self.adam.update(&mut self.model, &grads, lr)?;
        Ok(loss)
    }

    /// Trains one epoch (or until `max_steps`) and returns the mean batch loss.
    pub fn run_epoch(&mut self, epoch: usize) -> Result<f64> {
        let lr = lr_schedule(epoch, self.cfg.optimizer.lr, &self.cfg.schedule);
        let mut total = 0.0;
        let mut n = 0;
        for batch in self.epoch_batches() {
            if self.cfg.max_steps.is_some_and(|m| self.steps() >= m) {
                break;
            }
            total += self.step(&batch, lr)?;
            n += 1;
        }
        Ok(if n == 0 { 0.0 } else { total / n as f64 })
    }
}

fn captions_by_image(split: &RetrievalSplit) -> Vec<Vec<usize>> {
    let mut by_image = vec![Vec::new(); split.n_images()];
    for (c, &i) in split.caption_to_image.iter().enumerate() {
        by_image[i].push(c);
    }
    by_image
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub label: String,
    pub strategy: StrategyKind,
    pub seed: u64,
    pub config_hash: String,
    /// Mean training loss per epoch.
    pub loss_curve: Vec<f64>,
    /// Learning rate used in each epoch.
    pub lr_curve: Vec<f64>,
    /// Validation mR after each epoch.
    pub val_curve: Vec<f64>,
    pub initial_val: MetricsRecord,
    pub initial_test: MetricsRecord,
    pub best_val: MetricsRecord,
    /// 0 for the untrained model, otherwise the 1-based epoch.
    pub best_epoch: usize,
    /// Test metrics of the best-validation model.
    pub test: MetricsRecord,
    pub params: ParamReport,
    pub steps: usize,
    pub wall_clock_secs: f64,
}

impl RunResult {
    /// Everything except timing, for reproducibility checks.
    pub fn same_outcome(&self, other: &RunResult) -> bool {
        let mut a = self.clone();
        a.wall_clock_secs = other.wall_clock_secs;
        a == *other
    }
}

pub struct TrainedRun {
    pub result: RunResult,
    /// Best-validation model.
    pub model: DualEncoderModel,
}

/// Prepares data with the run seed and trains once.
pub fn train(cfg: &RunConfig) -> Result<RunResult> {
    cfg.validate()?;
    let data = prepare_data(cfg, cfg.seed)?;
    Ok(train_on(cfg, &data, cfg.seed)?.result)
}

/// Training protocol: evaluate the untouched model, train epoch by epoch
/// validating after each, keep the best-validation weights and report their
/// test metrics. Runs with nothing trainable take no steps.
pub fn train_on(cfg: &RunConfig, data: &PreparedData, seed: u64) -> Result<TrainedRun> {
    let start = Instant::now();
    let mut trainer = Trainer::new(cfg, data, seed)?;
    let params = count_parameters(trainer.model());
    let initial_val = evaluate_retrieval(trainer.model(), &data.val)?;
    let initial_test = evaluate_retrieval(trainer.model(), &data.test)?;
    let mut best = (initial_val, 0usize, trainer.model().clone());
    let (mut loss_curve, mut lr_curve, mut val_curve) = (Vec::new(), Vec::new(), Vec::new());

    if params.trainable > 0 {
        for epoch in 0..cfg.epochs {
            if cfg.max_steps.is_some_and(|m| trainer.steps() >= m) {
                break;
            }
            lr_curve.push(lr_schedule(epoch, cfg.optimizer.lr, &cfg.schedule));
            loss_curve.push(trainer.run_epoch(epoch)?);
            let val = evaluate_retrieval(trainer.model(), &data.val)?;
            val_curve.push(val.mr);
            if val.mr > best.0.mr {
                best = (val, epoch + 1, trainer.model().clone());
            }
        }
    }
    let steps = trainer.steps();
    let (best_val, best_epoch, model) = best;
    let test = evaluate_retrieval(&model, &data.test)?;
    Ok(TrainedRun {
        result: RunResult {
            label: cfg.label(),
            strategy: cfg.strategy.kind,
            seed,
            config_hash: cfg.config_hash(),
            loss_curve,
            lr_curve,
            val_curve,
            initial_val,
            initial_test,
            best_val,
            best_epoch,
            test,
            params,
            steps,
            wall_clock_secs: start.elapsed().as_secs_f64(),
        },
        model,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub epsilon: f64,
    /// Trainable tensors are redrawn from `N(0, std²)` first, so zero-initialized
    /// up-projections do not hide the gradients of everything upstream.
    pub perturb_std: Option<f64>,
    /// Checks a seeded sample of entries per tensor instead of all of them.
    pub max_entries_per_tensor: Option<usize>,
    /// Denominator floor of the relative error. Central differences of a
    /// loss `L` carry roundoff near `|L|·ε/h`, so gradients much smaller than
    /// the floor are compared in absolute terms.
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            epsilon: 1e-5,
            perturb_std: Some(0.05),
            max_entries_per_tensor: None,
            floor: 1e-5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    /// `max |a − n| / max(|a|, |n|, floor)` over all checked entries.
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub worst_param: String,
    pub entries_checked: usize,
    /// Largest relative error per trainable tensor.
    pub per_param: Vec<(String, f64)>,
    /// Entries whose ±epsilon evaluations crossed a ReLU or hinge kink; the
    /// central difference is meaningless there, so they are not compared.
    pub kinks_skipped: usize,
    /// Compared entries whose gradient magnitude fell below the floor.
    pub below_floor: usize,
    /// Frozen tensors that received a gradient; always empty when the freeze
    /// contract holds.
    pub frozen_with_grad: Vec<String>,
    pub loss: f64,
}

pub fn grad_check(cfg: &RunConfig, epsilon: f64) -> Result<GradCheckReport> {
    grad_check_with(
        cfg,
        &GradCheckOptions {
            epsilon,
            ..Default::default()
        },
    )
}

/// Analytic vs central-difference gradients of the batch loss on the first
/// `batch_size` training images, with one fixed dropout stream for every
/// evaluation. Entries whose perturbation flips a ReLU sign, a hinge or a
/// hardest-negative choice are skipped and counted.
pub fn grad_check_with(cfg: &RunConfig, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    cfg.validate()?;
    if opts.epsilon.is_nan() || opts.epsilon <= 0.0 {
        return Err(PetlError::config("gradcheck epsilon must be > 0"));
    }
    let data = prepare_data(cfg, cfg.seed)?;
    let mut model = build_model(cfg, cfg.seed)?;
    let check_seed = derive_seed(cfg.seed, STREAM_GRADCHECK);
    let mut rng = StdRng::seed_from_u64(check_seed);
    let trainable = model.trainable_names();
    if let Some(std) = opts.perturb_std {
        let normal = Normal::new(0.0, std).map_err(|e| PetlError::config(e.to_string()))?;
        for name in &trainable {
            let p = model.params_mut().get_mut(name).expect("trainable exists");
            p.value.mapv_inplace(|_| normal.sample(&mut rng));
        }
    }
    let split = &data.train;
    let by_image = captions_by_image(split);
    let pairs: Vec<(usize, usize)> = (0..cfg.batch_size.min(split.n_images()))
        .map(|i| (i, by_image[i][0]))
        .collect();
    let dropout_seed = derive_seed(check_seed, STREAM_DROPOUT);
    let fresh = || ChaCha8Rng::seed_from_u64(dropout_seed);

    let mut tape = Tape::new(&model);
    let root = batch_loss(&mut tape, split, &pairs, &cfg.loss, &mut fresh())?;
    let loss = tape.graph.value(root)[[0, 0]];
    let signature = tape.graph.kink_signature();
    let grads = tape.graph.backward(root);
    let mut analytic: HashMap<String, Mat> = HashMap::new();
    let mut frozen_with_grad = Vec::new();
    for (name, id) in tape.leaves() {
        let trainable_leaf = model.params().get(name).is_some_and(|p| p.trainable);
        match (grads.get(id), trainable_leaf) {
            (Some(g), true) => {
                analytic.insert(name.to_string(), g.clone());
            }
            (Some(_), false) => frozen_with_grad.push(name.to_string()),
            _ => {}
        }
    }
    drop(tape);
    frozen_with_grad.sort();

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst_param: String::new(),
        entries_checked: 0,
        per_param: Vec::new(),
        kinks_skipped: 0,
        below_floor: 0,
        frozen_with_grad,
        loss,
    };
    for name in &trainable {
        let shape = model.param(name)?.dim();
        let n = shape.0 * shape.1;
        let zero = Mat::zeros(shape);
        let a = analytic.get(name).unwrap_or(&zero).clone();
        let entries: Vec<usize> = match opts.max_entries_per_tensor {
            Some(k) if k < n => sample(&mut rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        let mut worst = 0.0f64;
        for flat in entries {
            let idx = (flat / shape.1, flat % shape.1);
            let orig = model.param(name)?[idx];
            let mut eval_at = |x: f64| -> Result<(f64, u64)> {
                model.params_mut().get_mut(name).expect("exists").value[idx] = x;
                loss_value(&model, split, &pairs, &cfg.loss, &mut fresh())
            };
            let (plus, sig_plus) = eval_at(orig + opts.epsilon)?;
            let (minus, sig_minus) = eval_at(orig - opts.epsilon)?;
            model.params_mut().get_mut(name).expect("exists").value[idx] = orig;
            if sig_plus != signature || sig_minus != signature {
                report.kinks_skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * opts.epsilon);
            let abs = (a[idx] - numeric).abs();
            let rel = abs / a[idx].abs().max(numeric.abs()).max(opts.floor);
            worst = worst.max(rel);
            report.max_abs_err = report.max_abs_err.max(abs);
            report.entries_checked += 1;
            report.below_floor += usize::from(a[idx].abs().max(numeric.abs()) < opts.floor);
        }
        if worst >= report.max_rel_err {
            report.max_rel_err = worst;
            report.worst_param = name.clone();
        }
        report.per_param.push((name.clone(), worst));
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRow {
    pub label: String,
    pub strategy: StrategyKind,
    pub folds: usize,
    /// Fold mean.
    pub metrics: MetricsRecord,
    pub runs: Vec<RunResult>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkFailure {
    pub label: String,
    pub fold: usize,
    pub error: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkTable {
    pub rows: Vec<BenchmarkRow>,
    pub failures: Vec<BenchmarkFailure>,
}

/// Runs every config over its `k_folds` (fold `f` reseeds split and init with
/// `seed + f`) and averages the folds. Failed runs are listed and their
/// config's row is left out; runs execute in parallel.
pub fn run_benchmark(configs: &[RunConfig]) -> Result<BenchmarkTable> {
    if configs.is_empty() {
        return Err(PetlError::config("benchmark needs at least one config"));
    }
    let jobs: Vec<(usize, usize)> = configs
        .iter()
        .enumerate()
        .flat_map(|(c, cfg)| (0..cfg.k_folds).map(move |f| (c, f)))
        .collect();
    let outcomes: Vec<Result<RunResult>> = jobs
        .par_iter()
        .map(|&(c, f)| {
            let cfg = &configs[c];
            cfg.validate()?;
            let seed = cfg.seed.wrapping_add(f as u64);
            let data = prepare_data(cfg, seed)?;
            Ok(train_on(cfg, &data, seed)?.result)
        })
        .collect();
    let mut table = BenchmarkTable::default();
    let mut per_config: Vec<Vec<RunResult>> = vec![Vec::new(); configs.len()];
    let mut failed = vec![false; configs.len()];
    for (&(c, f), outcome) in jobs.iter().zip(outcomes) {
        match outcome {
            Ok(r) => per_config[c].push(r),
            Err(e) => {
                failed[c] = true;
                table.failures.push(BenchmarkFailure {
                    label: configs[c].label(),
                    fold: f,
                    error: e.to_string(),
                });
            }
        }
    }
    for (c, runs) in per_config.into_iter().enumerate() {
        if failed[c] || runs.is_empty() {
            continue;
        }
        let tests: Vec<MetricsRecord> = runs.iter().map(|r| r.test).collect();
        table.rows.push(BenchmarkRow {
            label: configs[c].label(),
            strategy: configs[c].strategy.kind,
            folds: runs.len(),
            metrics: kfold_aggregate(&tests)?,
            runs,
        });
    }
    Ok(table)
}

/// Embedding matrices of one split.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingDump {
    pub split: String,
    pub images: Mat,
    pub captions: Mat,
    pub caption_to_image: Vec<usize>,
}

pub fn dump_embeddings(model: &DualEncoderModel, split: &RetrievalSplit, name: &str) -> Result<EmbeddingDump> {
    let (images, captions) = embed_split(model, split)?;
    Ok(EmbeddingDump {
        split: name.to_string(),
        images,
        captions,
        caption_to_image: split.caption_to_image.clone(),
    })
}

/// Moves an existing file at `path` to the first free `stem.vN.ext`.
fn version_existing(path: &Path) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("file");
    let ext = path.extension().and_then(|s| s.to_str());
    for n in 1.. {
        let name = match ext {
            Some(e) => format!("{stem}.v{n}.{e}"),
            None => format!("{stem}.v{n}"),
        };
        let candidate = path.with_file_name(name);
        if !candidate.exists() {
            fs::rename(path, candidate)?;
            break;
        }
    }
    Ok(())
}

fn write_versioned(path: &Path, contents: &[u8]) -> Result<()> {
    version_existing(path)?;
    fs::write(path, contents)?;
    Ok(())
}

/// Writes `<split>_images.npy`, `<split>_captions.npy` and
/// `<split>_caption_to_image.npy` into `dir`.
pub fn write_embeddings(dumps: &[EmbeddingDump], dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let npy_err = |e: ndarray_npy::WriteNpyError| PetlError::Io(std::io::Error::other(e.to_string()));
    let mut written = Vec::new();
    for d in dumps {
        let images = dir.join(format!("{}_images.npy", d.split));
        let captions = dir.join(format!("{}_captions.npy", d.split));
        let index = dir.join(format!("{}_caption_to_image.npy", d.split));
        for p in [&images, &captions, &index] {
            version_existing(p)?;
        }
        ndarray_npy::write_npy(&images, &d.images).map_err(npy_err)?;
        ndarray_npy::write_npy(&captions, &d.captions).map_err(npy_err)?;
        let idx: Array1<i64> = d.caption_to_image.iter().map(|&i| i as i64).collect();
        ndarray_npy::write_npy(&index, &idx).map_err(npy_err)?;
        written.extend([images, captions, index]);
    }
    Ok(written)
}

/// Writes `results.csv`, `results.json`, `params_vs_mr.csv` and any embedding
/// dumps under `embeddings/`. Existing files are renamed, never overwritten.
pub fn emit_report(table: &BenchmarkTable, dumps: &[EmbeddingDump], out_dir: &Path) -> Result<Vec<PathBuf>> {
    if table.rows.is_empty() && table.failures.is_empty() {
        return Err(PetlError::input("nothing to report"));
    }
    fs::create_dir_all(out_dir)?;
    let mut csv = format!("strategy,{}\n", MetricsRecord::csv_header());
    let mut scatter = String::from("strategy,params_trainable,mr\n");
    for row in &table.rows {
        csv.push_str(&format!("{},{}\n", row.label, row.metrics.to_csv_row()));
        scatter.push_str(&format!(
            "{},{},{}\n",
            row.label, row.metrics.params_trainable, row.metrics.mr
        ));
    }
    let json = serde_json::json!({
        "rows": table.rows.iter().map(|r| serde_json::json!({
            "strategy": r.label,
            "kind": r.strategy,
            "folds": r.folds,
            "metrics": r.metrics.to_json(),
        })).collect::<Vec<_>>(),
        "failures": table.failures,
    });
    let files = [
        (out_dir.join("results.csv"), csv.into_bytes()),
        (out_dir.join("results.json"), serde_json::to_vec_pretty(&json)?),
        (out_dir.join("params_vs_mr.csv"), scatter.into_bytes()),
    ];
    let mut written = Vec::new();
    for (path, bytes) in files {
        write_versioned(&path, &bytes)?;
        written.push(path);
    }
    if !dumps.is_empty() {
        written.extend(write_embeddings(dumps, &out_dir.join("embeddings"))?);
    }
    Ok(written)
}

/// Files produced by [`run_single`].
#[derive(Clone, Debug)]
pub struct RunArtifacts {
    pub result: RunResult,
    pub checkpoint: PathBuf,
    pub files: Vec<PathBuf>,
}

/// One training run into `cfg.output_dir`: best checkpoint, `run_result.json`,
/// a one-row report and, if requested, embeddings of every split.
pub fn run_single(cfg: &RunConfig) -> Result<RunArtifacts> {
    cfg.validate()?;
    let data = prepare_data(cfg, cfg.seed)?;
    let TrainedRun { result, model } = train_on(cfg, &data, cfg.seed)?;
    let out = &cfg.output_dir;
    fs::create_dir_all(out)?;
    let dumps = if cfg.export_embeddings {
        [Split::Train, Split::Val, Split::Test]
            .iter()
            .map(|&s| dump_embeddings(&model, data.split(s), s.name()))
            .collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };
    let table = BenchmarkTable {
        rows: vec![BenchmarkRow {
            label: result.label.clone(),
            strategy: result.strategy,
            folds: 1,
            metrics: result.test,
            runs: vec![result.clone()],
        }],
        failures: Vec::new(),
    };
    let mut files = emit_report(&table, &dumps, out)?;
    let result_path = out.join("run_result.json");
    write_versioned(&result_path, &serde_json::to_vec_pretty(&result)?)?;
    files.push(result_path);

    let checkpoint = out.join("best.safetensors");
    version_existing(&checkpoint)?;
    let mut ckpt = Checkpoint::new(model);
    ckpt.vocab = Some(data.vocab.clone());
    ckpt.normalization = Some(data.normalization);
    ckpt.run_config = Some(serde_json::to_value(cfg)?);
    save_checkpoint(&checkpoint, &ckpt)?;
    Ok(RunArtifacts {
        result,
        checkpoint,
        files,
    })
}

/// Embeds one split of the dataset a checkpoint was trained on, rebuilt from
/// the run config stored in the checkpoint.
pub fn export_checkpoint_embeddings(checkpoint: &Path, split: Split, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let ckpt = load_checkpoint(checkpoint)?;
    let run_config = ckpt
        .run_config
        .clone()
        .ok_or_else(|| PetlError::input("checkpoint carries no run config; cannot rebuild its dataset"))?;
    let cfg = RunConfig::from_value(run_config)?;
    let data = prepare_data(&cfg, cfg.seed)?;
    let dump = dump_embeddings(&ckpt.model, data.split(split), split.name())?;
    write_embeddings(&[dump], out_dir)
}
