//! CLIP-style dual encoder: patch and word embeddings, pre-norm transformer
//! blocks, CLS/EOS pooling, joint-space projection and L2 normalization.
//!
//! Every forward pass runs on an [`autograd::Graph`](crate::autograd::Graph)
//! through a [`Tape`]. The public free functions (`embed_image_tokens`,
//! `block_forward`, `encode`, ...) wrap an inference-mode tape.

use std::collections::HashMap;

use indexmap::IndexMap;
use ndarray::{Array1, Array3};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Mat, NodeId};
use crate::error::{PetlError, Result};
use crate::objectives::dropout_mask;
use crate::petl::{self, PetlStrategy};

pub const LN_EPS: f64 = 1e-5;

/// Architecture hyperparameters shared by both towers.
///
/// `Default` is the ViT-B/32 CLIP layout; [`EncoderConfig::toy`] is the
/// desk-scale model used by the tests.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub image_size: usize,
    /// Patch size, which is also the stride of the patch projection.
    pub patch_size: usize,
    pub layers: usize,
    pub vision_width: usize,
    pub text_width: usize,
    pub vision_heads: usize,
    pub text_heads: usize,
    /// Width of the joint embedding space.
    pub embed_dim: usize,
    pub context_length: usize,
    pub vocab_size: usize,
    pub mlp_ratio: usize,
    /// Causal self-attention in the text tower, as in the CLIP text encoder.
    pub causal_text: bool,
    /// Standard deviation of the random initialization.
    pub init_std: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            image_size: 224,
            patch_size: 32,
            layers: 12,
            vision_width: 768,
            text_width: 512,
            vision_heads: 12,
            text_heads: 8,
            embed_dim: 512,
            context_length: 77,
            vocab_size: 49408,
            mlp_ratio: 4,
            causal_text: true,
            init_std: 0.02,
        }
    }
}

impl EncoderConfig {
    pub fn full_scale() -> Self {
        Self::default()
    }

    /// Two-layer model with `Dᵥ = 32`, `Dₜ = 24`, `D = 16` on 16×16 images.
    ///
    /// Weights start ten times wider than the full-scale init so that the
    /// random backbone's pooled features still depend on the input.
    pub fn toy() -> Self {
        EncoderConfig {
            image_size: 16,
            patch_size: 4,
            layers: 2,
            vision_width: 32,
            text_width: 24,
            vision_heads: 2,
            text_heads: 2,
            embed_dim: 16,
            context_length: 16,
            vocab_size: 64,
            mlp_ratio: 4,
            causal_text: true,
            init_std: 0.2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(PetlError::config(m));
        if self.patch_size == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return fail(format!(
                "image_size {} must be a positive multiple of patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.layers == 0 {
            return fail("layers must be at least 1".into());
        }
        for (name, width, heads) in [
            ("vision", self.vision_width, self.vision_heads),
            ("text", self.text_width, self.text_heads),
        ] {
            if heads == 0 || width == 0 || width % heads != 0 {
                return fail(format!("{name} width {width} not divisible by {heads} heads"));
            }
        }
        if self.embed_dim == 0 || self.mlp_ratio == 0 {
            return fail("embed_dim and mlp_ratio must be positive".into());
        }
        if self.context_length < 3 {
            return fail(format!("context_length {} < 3", self.context_length));
        }
        if self.vocab_size < 3 {
            return fail("vocab_size must cover the special tokens".into());
        }
        if !(self.init_std.is_finite() && self.init_std >= 0.0) {
            return fail("init_std must be finite and nonnegative".into());
        }
        Ok(())
    }

    /// Image sequence length `1 + (H/s)·(W/s)`.
    pub fn vision_tokens(&self) -> usize {
        let side = self.image_size / self.patch_size;
        1 + side * side
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }

    pub fn width(&self, modality: Modality) -> usize {
        match modality {
            Modality::Image => self.vision_width,
            Modality::Text => self.text_width,
        }
    }

    pub fn heads(&self, modality: Modality) -> usize {
        match modality {
            Modality::Image => self.vision_heads,
            Modality::Text => self.text_heads,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Image,
    Text,
}

impl Modality {
    /// Parameter name prefix of the tower.
    pub fn prefix(self) -> &'static str {
        match self {
            Modality::Image => "visual",
            Modality::Text => "text",
        }
    }
}

/// Token matrix of one input, `N × D_modality`.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub tokens: Mat,
    pub modality: Modality,
    /// Row of the `[EOS]` token; text only.
    pub eos_index: Option<usize>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.nrows() == 0
    }

    /// Row that is pooled into the global embedding.
    pub fn pooled_row(&self) -> Result<usize> {
        match self.modality {
            Modality::Image => Ok(0),
            Modality::Text => {
                let eos = self
                    .eos_index
                    .ok_or_else(|| PetlError::input("text sequence has no EOS index"))?;
                if eos >= self.len() {
                    return Err(PetlError::input(format!(
                        "EOS index {eos} outside sequence of length {}",
                        self.len()
                    )));
                }
                Ok(eos)
            }
        }
    }
}

/// Unit-norm vector in the joint space.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding(pub Array1<f64>);

impl Embedding {
    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice().expect("embedding is contiguous")
    }

    pub fn norm(&self) -> f64 {
        self.0.dot(&self.0).sqrt()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Mat,
    pub trainable: bool,
}

/// How a tensor is initialized.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Normal(f64),
    Zeros,
    Ones,
    Identity,
}

/// Name, shape and initializer of one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: (usize, usize),
    pub init: Init,
}

impl TensorSpec {
    fn new(name: impl Into<String>, shape: (usize, usize), init: Init) -> Self {
        TensorSpec {
            name: name.into(),
            shape,
            init,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.0 * self.shape.1
    }

    pub fn materialize(&self, rng: &mut impl RngCore) -> Mat {
        match self.init {
            Init::Zeros => Mat::zeros(self.shape),
            Init::Ones => Mat::ones(self.shape),
            Init::Identity => Mat::eye(self.shape.0),
            Init::Normal(0.0) => Mat::zeros(self.shape),
            Init::Normal(std) => {
                let dist = Normal::new(0.0, std).expect("finite std");
                Mat::from_shape_simple_fn(self.shape, || dist.sample(rng))
            }
        }
    }
}

fn block_specs(out: &mut Vec<TensorSpec>, prefix: &str, width: usize, cfg: &EncoderConfig) {
    let std = cfg.init_std;
    let hidden = width * cfg.mlp_ratio;
    for l in 0..cfg.layers {
        let p = format!("{prefix}.blocks.{l}");
        out.push(TensorSpec::new(format!("{p}.ln1.gain"), (1, width), Init::Ones));
        out.push(TensorSpec::new(format!("{p}.ln1.bias"), (1, width), Init::Zeros));
        out.push(TensorSpec::new(
            format!("{p}.attn.w_qkv"),
            (width, 3 * width),
            Init::Normal(std),
        ));
        out.push(TensorSpec::new(format!("{p}.attn.b_qkv"), (1, 3 * width), Init::Zeros));
        out.push(TensorSpec::new(
            format!("{p}.attn.w_out"),
            (width, width),
            Init::Normal(std),
        ));
        out.push(TensorSpec::new(format!("{p}.attn.b_out"), (1, width), Init::Zeros));
        out.push(TensorSpec::new(format!("{p}.ln2.gain"), (1, width), Init::Ones));
        out.push(TensorSpec::new(format!("{p}.ln2.bias"), (1, width), Init::Zeros));
        out.push(TensorSpec::new(
            format!("{p}.mlp.w1"),
            (width, hidden),
            Init::Normal(std),
        ));
        out.push(TensorSpec::new(format!("{p}.mlp.b1"), (1, hidden), Init::Zeros));
        out.push(TensorSpec::new(
            format!("{p}.mlp.w2"),
            (hidden, width),
            Init::Normal(std),
        ));
        out.push(TensorSpec::new(format!("{p}.mlp.b2"), (1, width), Init::Zeros));
    }
}

/// Backbone tensors in checkpoint order.
pub fn backbone_specs(cfg: &EncoderConfig) -> Vec<TensorSpec> {
    let std = cfg.init_std;
    let (dv, dt, d) = (cfg.vision_width, cfg.text_width, cfg.embed_dim);
    let mut out = vec![
        TensorSpec::new("visual.patch_proj", (cfg.patch_dim(), dv), Init::Normal(std)),
        TensorSpec::new("visual.cls", (1, dv), Init::Normal(std)),
        TensorSpec::new("visual.pos", (cfg.vision_tokens(), dv), Init::Normal(std)),
        TensorSpec::new("visual.ln_pre.gain", (1, dv), Init::Ones),
        TensorSpec::new("visual.ln_pre.bias", (1, dv), Init::Zeros),
    ];
    block_specs(&mut out, "visual", dv, cfg);
    out.push(TensorSpec::new("visual.ln_post.gain", (1, dv), Init::Ones));
    out.push(TensorSpec::new("visual.ln_post.bias", (1, dv), Init::Zeros));
    out.push(TensorSpec::new("visual.proj", (dv, d), Init::Normal(std)));
    out.push(TensorSpec::new(
        "text.token_embedding",
        (cfg.vocab_size, dt),
        Init::Normal(std),
    ));
    out.push(TensorSpec::new("text.pos", (cfg.context_length, dt), Init::Normal(std)));
    block_specs(&mut out, "text", dt, cfg);
    out.push(TensorSpec::new("text.ln_post.gain", (1, dt), Init::Ones));
    out.push(TensorSpec::new("text.ln_post.bias", (1, dt), Init::Zeros));
    out.push(TensorSpec::new("text.proj", (dt, d), Init::Normal(std)));
    out
}

/// Ordered named parameters with their trainability flags.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: IndexMap<String, Param>,
}

impl ParamStore {
    pub fn insert(&mut self, name: impl Into<String>, value: Mat, trainable: bool) {
        self.entries.insert(name.into(), Param { value, trainable });
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.entries.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.iter()
            .filter(|(_, p)| p.trainable)
            .map(|(n, _)| n.to_string())
            .collect()
    }

    fn key_value(&self, name: &str) -> Option<(&String, &Param)> {
        self.entries.get_key_value(name)
    }
}

/// Both towers, their projections and any attached PETL tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct DualEncoderModel {
    config: EncoderConfig,
    params: ParamStore,
    strategy: Option<PetlStrategy>,
}

impl DualEncoderModel {
    /// Randomly initialized backbone, every tensor trainable until a strategy
    /// is attached.
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::default();
        for spec in backbone_specs(&config) {
            let value = spec.materialize(&mut rng);
            params.insert(spec.name, value, true);
        }
        Ok(DualEncoderModel {
            config,
            params,
            strategy: None,
        })
    }

    /// Assembles a model from named tensors, checking names and shapes against
    /// the config (and the strategy, when given).
    pub fn from_tensors(
        config: EncoderConfig,
        strategy: Option<PetlStrategy>,
        mut tensors: HashMap<String, Mat>,
        trainable: &[String],
    ) -> Result<Self> {
        config.validate()?;
        let mut specs = backbone_specs(&config);
        if let Some(s) = &strategy {
            s.validate(&config)?;
            specs.extend(petl::petl_specs(&config, s));
        }
        let mut params = ParamStore::default();
        for spec in specs {
            let value = tensors
                .remove(&spec.name)
                .ok_or_else(|| PetlError::input(format!("missing tensor {}", spec.name)))?;
            if value.dim() != spec.shape {
                return Err(PetlError::input(format!(
                    "tensor {} has shape {:?}, expected {:?}",
                    spec.name,
                    value.dim(),
                    spec.shape
                )));
            }
            let flag = trainable.contains(&spec.name);
            params.insert(spec.name, value, flag);
        }
        if let Some(extra) = tensors.keys().next() {
            return Err(PetlError::input(format!("unexpected tensor {extra}")));
        }
        Ok(DualEncoderModel {
            config,
            params,
            strategy,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn strategy(&self) -> Option<&PetlStrategy> {
        self.strategy.as_ref()
    }

    pub(crate) fn set_strategy(&mut self, strategy: PetlStrategy) {
        self.strategy = Some(strategy);
    }

    pub fn param(&self, name: &str) -> Result<&Mat> {
        self.params
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| PetlError::config(format!("model has no parameter {name}")))
    }

    pub fn set_param(&mut self, name: &str, value: Mat) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| PetlError::config(format!("model has no parameter {name}")))?;
        if p.value.dim() != value.dim() {
            return Err(PetlError::config(format!(
                "shape mismatch for {name}: {:?} vs {:?}",
                p.value.dim(),
                value.dim()
            )));
        }
        p.value = value;
        Ok(())
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.params.trainable_names()
    }
}

/// Dropout applied to the embedded token matrix.
pub struct Augment<'r> {
    pub p: f64,
    pub rng: &'r mut dyn RngCore,
}

pub enum EncoderInput<'a> {
    /// `H × W × 3` normalized pixels.
    Image(&'a Array3<f64>),
    /// Token ids including BOS and EOS.
    Text(&'a [usize]),
}

impl EncoderInput<'_> {
    pub fn modality(&self) -> Modality {
        match self {
            EncoderInput::Image(_) => Modality::Image,
            EncoderInput::Text(_) => Modality::Text,
        }
    }
}

/// A graph bound to a model; parameters become leaves on first use.
pub struct Tape<'m> {
    pub graph: Graph,
    model: &'m DualEncoderModel,
    leaves: HashMap<&'m str, NodeId>,
}

impl<'m> Tape<'m> {
    pub fn new(model: &'m DualEncoderModel) -> Self {
        Tape {
            graph: Graph::new(),
            model,
            leaves: HashMap::new(),
        }
    }

    pub fn inference(model: &'m DualEncoderModel) -> Self {
        Tape {
            graph: Graph::inference(),
            model,
            leaves: HashMap::new(),
        }
    }

    pub fn model(&self) -> &'m DualEncoderModel {
        self.model
    }

    /// Leaf node of a named parameter.
    pub fn param(&mut self, name: &str) -> Result<NodeId> {
        let (key, p) = self
            .model
            .params
            .key_value(name)
            .ok_or_else(|| PetlError::config(format!("model has no parameter {name}")))?;
        if let Some(id) = self.leaves.get(key.as_str()) {
            return Ok(*id);
        }
        let id = self.graph.variable(p.value.clone(), p.trainable);
        self.leaves.insert(key.as_str(), id);
        Ok(id)
    }

    /// Parameters that entered the graph, by name.
    pub fn leaves(&self) -> impl Iterator<Item = (&'m str, NodeId)> + '_ {
        self.leaves.iter().map(|(k, v)| (*k, *v))
    }

    pub fn embed_image(&mut self, image: &Array3<f64>) -> Result<NodeId> {
        let cfg = &self.model.config;
        let (h, w, c) = image.dim();
        if h != cfg.image_size || w != cfg.image_size || c != 3 {
            return Err(PetlError::config(format!(
                "image of shape {h}x{w}x{c} does not match configured {0}x{0}x3",
                cfg.image_size
            )));
        }
        if image.iter().any(|v| !v.is_finite()) {
            return Err(PetlError::input("image contains non-finite pixels"));
        }
        let patches = self.graph.constant(patchify(image, cfg.patch_size));
        let proj = self.param("visual.patch_proj")?;
        let tokens = self.graph.matmul(patches, proj);
        let cls = self.param("visual.cls")?;
        let seq = self.graph.concat_rows(&[cls, tokens]);
        let pos = self.param("visual.pos")?;
        Ok(self.graph.add(seq, pos))
    }

    /// Returns the token matrix and the EOS row.
    pub fn embed_text(&mut self, ids: &[usize]) -> Result<(NodeId, usize)> {
        let cfg = &self.model.config;
        if ids.len() < 2 {
            return Err(PetlError::input("token ids must include BOS and EOS"));
        }
        if ids.len() > cfg.context_length {
            return Err(PetlError::input(format!(
                "sequence of {} tokens exceeds context length {}",
                ids.len(),
                cfg.context_length
            )));
        }
        if let Some(bad) = ids.iter().find(|&&i| i >= cfg.vocab_size) {
            return Err(PetlError::input(format!(
                "token id {bad} outside vocabulary of {}",
                cfg.vocab_size
            )));
        }
        let table = self.param("text.token_embedding")?;
        let words = self.graph.gather_rows(table, ids);
        let pos_table = self.param("text.pos")?;
        let pos = self.graph.slice_rows(pos_table, 0, ids.len());
        Ok((self.graph.add(words, pos), ids.len() - 1))
    }

    /// One transformer block including any attached adapters.
    pub fn block(&mut self, x: NodeId, layer: usize, modality: Modality) -> Result<NodeId> {
        let cfg = &self.model.config;
        if layer >= cfg.layers {
            return Err(PetlError::config(format!(
                "layer {layer} out of range for {} layers",
                cfg.layers
            )));
        }
        let width = cfg.width(modality);
        let heads = cfg.heads(modality);
        if self.graph.value(x).ncols() != width {
            return Err(PetlError::config(format!(
                "token width {} does not match {} width {width}",
                self.graph.value(x).ncols(),
                modality.prefix()
            )));
        }
        let causal = modality == Modality::Text && cfg.causal_text;
        let p = format!("{}.blocks.{layer}", modality.prefix());

        let h = self.layer_norm(x, &format!("{p}.ln1"))?;
        let attn = self.attention(h, &p, width, heads, causal)?;
        let attn = petl::graph_sequential_adapter(self, attn, layer, modality, "attn")?;
        let x_hat = self.graph.add(attn, x);

        let h2 = self.layer_norm(x_hat, &format!("{p}.ln2"))?;
        let w1 = self.param(&format!("{p}.mlp.w1"))?;
        let b1 = self.param(&format!("{p}.mlp.b1"))?;
        let w2 = self.param(&format!("{p}.mlp.w2"))?;
        let b2 = self.param(&format!("{p}.mlp.b2"))?;
        let m = self.graph.matmul(h2, w1);
        let m = self.graph.add_row(m, b1);
        let m = self.graph.quick_gelu(m);
        let m = self.graph.matmul(m, w2);
        let m = self.graph.add_row(m, b2);
        let m = petl::graph_sequential_adapter(self, m, layer, modality, "mlp")?;
        let mut out = self.graph.add(m, x_hat);

        if let Some(delta) = petl::graph_mrs_delta(self, x_hat, layer, modality)? {
            out = self.graph.add(out, delta);
        }
        Ok(out)
    }

    fn layer_norm(&mut self, x: NodeId, prefix: &str) -> Result<NodeId> {
        let g = self.param(&format!("{prefix}.gain"))?;
        let b = self.param(&format!("{prefix}.bias"))?;
        Ok(self.graph.layer_norm(x, g, b, LN_EPS))
    }

    fn attention(&mut self, h: NodeId, prefix: &str, width: usize, heads: usize, causal: bool) -> Result<NodeId> {
        let w_qkv = self.param(&format!("{prefix}.attn.w_qkv"))?;
        let b_qkv = self.param(&format!("{prefix}.attn.b_qkv"))?;
        let w_out = self.param(&format!("{prefix}.attn.w_out"))?;
        let b_out = self.param(&format!("{prefix}.attn.b_out"))?;
        let qkv = self.graph.matmul(h, w_qkv);
        let qkv = self.graph.add_row(qkv, b_qkv);
        let head_dim = width / heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for i in 0..heads {
            let q = self.graph.slice_cols(qkv, i * head_dim, head_dim);
            let q = self.graph.scale(q, scale);
            let k = self.graph.slice_cols(qkv, width + i * head_dim, head_dim);
            let v = self.graph.slice_cols(qkv, 2 * width + i * head_dim, head_dim);
            let scores = self.graph.matmul_nt(q, k);
            let probs = self.graph.softmax_rows(scores, causal);
            outs.push(self.graph.matmul(probs, v));
        }
        let merged = if heads == 1 {
            outs[0]
        } else {
            self.graph.concat_cols(&outs)
        };
        let o = self.graph.matmul(merged, w_out);
        Ok(self.graph.add_row(o, b_out))
    }

    /// Pools `row`, applies the final norm, the projection (and probe head,
    /// if attached), then L2-normalizes. Returns a `1 × D` node.
    pub fn pool_and_project(&mut self, x: NodeId, row: usize, modality: Modality) -> Result<NodeId> {
        let prefix = modality.prefix();
        let pooled = self.graph.slice_rows(x, row, 1);
        let pooled = self.layer_norm(pooled, &format!("{prefix}.ln_post"))?;
        let proj = self.param(&format!("{prefix}.proj"))?;
        let mut z = self.graph.matmul(pooled, proj);
        z = petl::graph_probe_head(self, z, modality)?;
        self.normalize(z)
    }

    fn normalize(&mut self, z: NodeId) -> Result<NodeId> {
        let norm = self.graph.value(z).iter().map(|v| v * v).sum::<f64>().sqrt();
        if !norm.is_finite() || norm == 0.0 {
            return Err(PetlError::numerical(format!(
                "cannot normalize projected embedding with norm {norm}"
            )));
        }
        Ok(self.graph.l2_normalize_rows(z))
    }

    /// Full pipeline for one input; returns a `1 × D` unit-norm node.
    pub fn encode(&mut self, input: &EncoderInput<'_>, augment: Option<Augment<'_>>) -> Result<NodeId> {
        let modality = input.modality();
        let (mut x, mut pooled) = match input {
            EncoderInput::Image(img) => (self.embed_image(img)?, 0),
            EncoderInput::Text(ids) => self.embed_text(ids)?,
        };
        if let Some(aug) = augment {
            if !(0.0..1.0).contains(&aug.p) {
                return Err(PetlError::config(format!(
                    "dropout probability {} outside [0, 1)",
                    aug.p
                )));
            }
            if aug.p > 0.0 {
                let mask = dropout_mask(self.graph.value(x).dim(), aug.p, aug.rng);
                x = self.graph.mul_const(x, mask);
            }
        }
        let seq_len = self.graph.value(x).nrows();
        let placement = petl::prompt_placement(self.model, modality, seq_len, pooled)?;
        if let Some(pl) = &placement {
            x = petl::graph_insert_prompts(self, x, pl, 0, modality)?;
            pooled = pl.pooled_row;
        }
        if modality == Modality::Image {
            x = self.layer_norm(x, "visual.ln_pre")?;
        }
        for layer in 0..self.model.config.layers {
            if layer > 0 {
                if let Some(pl) = placement.as_ref().filter(|p| p.deep) {
                    x = petl::graph_replace_prompts(self, x, pl, layer, modality)?;
                }
            }
            x = self.block(x, layer, modality)?;
        }
        self.pool_and_project(x, pooled, modality)
    }
}

/// Splits an `H × W × 3` image into row-major patches, each flattened in
/// (channel, row, column) order.
pub fn patchify(image: &Array3<f64>, patch: usize) -> Mat {
    let (h, w, _) = image.dim();
    let (ph, pw) = (h / patch, w / patch);
    let mut out = Mat::zeros((ph * pw, 3 * patch * patch));
    for py in 0..ph {
        for px in 0..pw {
            let mut row = out.row_mut(py * pw + px);
            let mut k = 0;
            for c in 0..3 {
                for dy in 0..patch {
                    for dx in 0..patch {
                        row[k] = image[[py * patch + dy, px * patch + dx, c]];
                        k += 1;
                    }
                }
            }
        }
    }
    out
}

pub fn embed_image_tokens(image: &Array3<f64>, model: &DualEncoderModel) -> Result<TokenSequence> {
    let mut tape = Tape::inference(model);
    let x = tape.embed_image(image)?;
    Ok(TokenSequence {
        tokens: tape.graph.value(x).clone(),
        modality: Modality::Image,
        eos_index: None,
    })
}

pub fn embed_text_tokens(ids: &[usize], model: &DualEncoderModel) -> Result<TokenSequence> {
    let mut tape = Tape::inference(model);
    let (x, eos) = tape.embed_text(ids)?;
    Ok(TokenSequence {
        tokens: tape.graph.value(x).clone(),
        modality: Modality::Text,
        eos_index: Some(eos),
    })
}

/// `x̂ = MHA(LN(x)) + x`, `out = MLP(LN(x̂)) + x̂` plus the MRS-Adapter delta
/// when one is attached.
pub fn block_forward(x: &TokenSequence, layer_index: usize, model: &DualEncoderModel) -> Result<TokenSequence> {
    let mut tape = Tape::inference(model);
    let input = tape.graph.constant(x.tokens.clone());
    let out = tape.block(input, layer_index, x.modality)?;
    Ok(TokenSequence {
        tokens: tape.graph.value(out).clone(),
        modality: x.modality,
        eos_index: x.eos_index,
    })
}

pub fn pool_and_project(x: &TokenSequence, model: &DualEncoderModel) -> Result<Embedding> {
    let row = x.pooled_row()?;
    let width = model.config().width(x.modality);
    if x.tokens.ncols() != width {
        return Err(PetlError::config(format!(
            "token width {} does not match {width}",
            x.tokens.ncols()
        )));
    }
    let mut tape = Tape::inference(model);
    let input = tape.graph.constant(x.tokens.clone());
    let z = tape.pool_and_project(input, row, x.modality)?;
    Ok(Embedding(tape.graph.value(z).row(0).to_owned()))
}

/// Deterministic unless `augment` is given.
pub fn encode(input: &EncoderInput<'_>, model: &DualEncoderModel, augment: Option<Augment<'_>>) -> Result<Embedding> {
    let mut tape = Tape::inference(model);
    let z = tape.encode(input, augment)?;
    Ok(Embedding(tape.graph.value(z).row(0).to_owned()))
}

/// Normalizes a projected vector, failing on a zero vector.
pub fn l2_normalize(v: &Array1<f64>) -> Result<Embedding> {
    let norm = v.dot(v).sqrt();
    if !norm.is_finite() || norm == 0.0 {
        return Err(PetlError::numerical(format!(
            "cannot normalize vector with norm {norm}"
        )));
    }
    Ok(Embedding(v / norm))
}
