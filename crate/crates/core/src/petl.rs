//! Parameter-efficient transfer strategies.
//!
//! Each [`StrategyKind`] decides which tensors train. Attaching a strategy
//! freezes the backbone (except for full fine-tuning), adds the strategy's
//! tensors under the `petl.` prefix and records the strategy on the model so
//! the forward pass routes through them.
//!
//! The MRS-Adapter runs in parallel with each block's FFN and returns a delta
//! `[ReLU(x̂·W_down)·W_up^branch ; ReLU(x̂·W_down)·W_up^share]` whose last `r`
//! columns come from an up-projection shared by both towers.

use ndarray::concatenate;
use ndarray::Axis;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Mat, NodeId};
use crate::encoder::{
    backbone_specs, DualEncoderModel, EncoderConfig, Init, Modality, Tape, TensorSpec, TokenSequence,
};
use crate::error::{PetlError, Result};

pub const DOWN_INIT_STD: f64 = 0.01;
pub const PROMPT_INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    ZeroShot,
    LinearProbe,
    FullFinetune,
    AdapterSequential,
    MrsAdapter,
    MrsNoShare,
    TextPrompt,
    VisualPrompt,
    VlPrompt,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 9] = [
        StrategyKind::ZeroShot,
        StrategyKind::LinearProbe,
        StrategyKind::FullFinetune,
        StrategyKind::AdapterSequential,
        StrategyKind::MrsAdapter,
        StrategyKind::MrsNoShare,
        StrategyKind::TextPrompt,
        StrategyKind::VisualPrompt,
        StrategyKind::VlPrompt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::ZeroShot => "zero_shot",
            StrategyKind::LinearProbe => "linear_probe",
            StrategyKind::FullFinetune => "full_finetune",
            StrategyKind::AdapterSequential => "adapter_sequential",
            StrategyKind::MrsAdapter => "mrs_adapter",
            StrategyKind::MrsNoShare => "mrs_no_share",
            StrategyKind::TextPrompt => "text_prompt",
            StrategyKind::VisualPrompt => "visual_prompt",
            StrategyKind::VlPrompt => "vl_prompt",
        }
    }

    fn prompts(self, modality: Modality) -> bool {
        matches!(
            (self, modality),
            (StrategyKind::TextPrompt, Modality::Text)
                | (StrategyKind::VisualPrompt, Modality::Image)
                | (StrategyKind::VlPrompt, _)
        )
    }

    fn is_mrs(self) -> bool {
        matches!(self, StrategyKind::MrsAdapter | StrategyKind::MrsNoShare)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptDepth {
    /// Prompts enter at the first block only.
    #[default]
    Shallow,
    /// Fresh prompt rows replace the previous ones at every block input.
    Deep,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptPosition {
    /// All prompt rows right after `[BOS]`, content tokens last.
    #[default]
    End,
    /// Prompt rows split around the content tokens.
    Mid,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrategyParams {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tie_across_layers: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_length: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_depth: Option<PromptDepth>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_position: Option<PromptPosition>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PetlStrategy {
    pub kind: StrategyKind,
    #[serde(default)]
    pub params: StrategyParams,
}

impl PetlStrategy {
    pub fn new(kind: StrategyKind) -> Self {
        PetlStrategy {
            kind,
            params: StrategyParams::default(),
        }
    }

    pub fn zero_shot() -> Self {
        Self::new(StrategyKind::ZeroShot)
    }

    pub fn full_finetune() -> Self {
        Self::new(StrategyKind::FullFinetune)
    }

    pub fn linear_probe() -> Self {
        Self::new(StrategyKind::LinearProbe)
    }

    /// Tied MRS-Adapter with bottleneck `d` and shared width `r`.
    pub fn mrs_adapter(d: usize, r: usize) -> Self {
        PetlStrategy {
            kind: StrategyKind::MrsAdapter,
            params: StrategyParams {
                d: Some(d),
                r: Some(r),
                ..Default::default()
            },
        }
    }

    pub fn mrs_no_share(d: usize, r: usize) -> Self {
        PetlStrategy {
            kind: StrategyKind::MrsNoShare,
            ..Self::mrs_adapter(d, r)
        }
    }

    pub fn adapter_sequential(d: usize) -> Self {
        PetlStrategy {
            kind: StrategyKind::AdapterSequential,
            params: StrategyParams {
                d: Some(d),
                ..Default::default()
            },
        }
    }

    pub fn prompt(kind: StrategyKind, length: usize, depth: PromptDepth) -> Self {
        PetlStrategy {
            kind,
            params: StrategyParams {
                prompt_length: Some(length),
                prompt_depth: Some(depth),
                ..Default::default()
            },
        }
    }

    pub fn with_tie(mut self, tie: bool) -> Self {
        self.params.tie_across_layers = Some(tie);
        self
    }

    pub fn with_position(mut self, position: PromptPosition) -> Self {
        self.params.prompt_position = Some(position);
        self
    }

    pub fn tied(&self) -> bool {
        self.params.tie_across_layers.unwrap_or(true)
    }

    pub fn scale(&self) -> f64 {
        self.params.scale.unwrap_or(1.0)
    }

    pub fn depth(&self) -> PromptDepth {
        self.params.prompt_depth.unwrap_or_default()
    }

    pub fn position(&self) -> PromptPosition {
        self.params.prompt_position.unwrap_or_default()
    }

    /// Short label used in result tables.
    pub fn label(&self) -> String {
        self.kind.name().to_string()
    }

    /// Checks that exactly the hyperparameters this kind needs are present and
    /// compatible with the encoder dimensions.
    pub fn validate(&self, cfg: &EncoderConfig) -> Result<()> {
        use StrategyKind::*;
        let p = &self.params;
        let kind = self.kind.name();
        let allowed: &[&str] = match self.kind {
            ZeroShot | LinearProbe | FullFinetune => &[],
            AdapterSequential => &["d", "scale"],
            MrsAdapter | MrsNoShare => &["d", "r", "tie_across_layers"],
            TextPrompt | VlPrompt => &["prompt_length", "prompt_depth", "prompt_position"],
            VisualPrompt => &["prompt_length", "prompt_depth"],
        };
        let present = [
            ("d", p.d.is_some()),
            ("r", p.r.is_some()),
            ("tie_across_layers", p.tie_across_layers.is_some()),
            ("scale", p.scale.is_some()),
            ("prompt_length", p.prompt_length.is_some()),
            ("prompt_depth", p.prompt_depth.is_some()),
            ("prompt_position", p.prompt_position.is_some()),
        ];
        for (name, set) in present {
            if set && !allowed.contains(&name) {
                return Err(PetlError::config(format!("{kind} does not take parameter {name}")));
            }
        }
        let min_width = cfg.vision_width.min(cfg.text_width);
        let need = |v: Option<usize>, name: &str| {
            v.ok_or_else(|| PetlError::config(format!("{kind} requires parameter {name}")))
        };
        match self.kind {
            AdapterSequential | MrsAdapter | MrsNoShare => {
                let d = need(p.d, "d")?;
                if d == 0 || d >= min_width {
                    return Err(PetlError::config(format!(
                        "bottleneck d={d} must satisfy 0 < d < {min_width}"
                    )));
                }
                if self.kind.is_mrs() {
                    let r = need(p.r, "r")?;
                    if r == 0 || r >= min_width {
                        return Err(PetlError::config(format!(
                            "share dimension r={r} must satisfy 0 < r < {min_width}"
                        )));
                    }
                }
                if let Some(s) = p.scale {
                    if !s.is_finite() {
                        return Err(PetlError::config("adapter scale must be finite"));
                    }
                }
            }
            TextPrompt | VisualPrompt | VlPrompt => {
                let len = need(p.prompt_length, "prompt_length")?;
                if len == 0 {
                    return Err(PetlError::config("prompt_length must be at least 1"));
                }
                if self.kind.prompts(Modality::Text) && len + 3 > cfg.context_length {
                    return Err(PetlError::config(format!(
                        "prompt_length {len} leaves no room for text within context length {}",
                        cfg.context_length
                    )));
                }
            }
            ZeroShot | LinearProbe | FullFinetune => {}
        }
        Ok(())
    }
}

/// Sequential bottleneck adapter `s·ReLU(x·W_down)·W_up + x`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterParams {
    pub w_down: Mat,
    pub w_up: Mat,
    pub scale: f64,
}

pub fn adapter_forward(x: &Mat, a: &AdapterParams) -> Result<Mat> {
    let width = a.w_down.nrows();
    if x.ncols() != width || a.w_up.dim() != (a.w_down.ncols(), width) {
        return Err(PetlError::config(format!(
            "adapter expects width {width}, got input of width {}",
            x.ncols()
        )));
    }
    let down = x.dot(&a.w_down).mapv(|v| v.max(0.0));
    Ok(down.dot(&a.w_up) * a.scale + x)
}

/// MRS-Adapter weights. Without `w_up_share` (the no-share ablation) the
/// branch up-projections span the full width.
#[derive(Clone, Debug, PartialEq)]
pub struct MrsAdapterParams {
    pub w_down_v: Mat,
    pub w_down_t: Mat,
    pub w_up_v: Mat,
    pub w_up_t: Mat,
    pub w_up_share: Option<Mat>,
    pub tie_across_layers: bool,
}

impl MrsAdapterParams {
    /// All-zero weights with the shapes for `(Dᵥ, Dₜ, d, r)`.
    pub fn zeros(dv: usize, dt: usize, d: usize, r: usize) -> Result<Self> {
        if d == 0 || d >= dv.min(dt) || r == 0 || r >= dv.min(dt) {
            return Err(PetlError::config(format!(
                "invalid MRS-Adapter sizes d={d}, r={r} for widths {dv}/{dt}"
            )));
        }
        Ok(MrsAdapterParams {
            w_down_v: Mat::zeros((dv, d)),
            w_down_t: Mat::zeros((dt, d)),
            w_up_v: Mat::zeros((d, dv - r)),
            w_up_t: Mat::zeros((d, dt - r)),
            w_up_share: Some(Mat::zeros((d, r))),
            tie_across_layers: true,
        })
    }

    pub fn bottleneck(&self) -> usize {
        self.w_down_v.ncols()
    }

    pub fn share_dim(&self) -> usize {
        self.w_up_share.as_ref().map_or(0, |w| w.ncols())
    }

    pub fn numel(&self) -> usize {
        let share = self.w_up_share.as_ref().map_or(0, |w| w.len());
        self.w_down_v.len() + self.w_down_t.len() + self.w_up_v.len() + self.w_up_t.len() + share
    }
}

/// Returns the adapter delta only; the caller adds it to the block output.
pub fn mrs_adapter_forward(x: &Mat, m: &MrsAdapterParams, branch: Modality) -> Result<Mat> {
    let (down_w, up_w) = match branch {
        Modality::Image => (&m.w_down_v, &m.w_up_v),
        Modality::Text => (&m.w_down_t, &m.w_up_t),
    };
    let width = down_w.nrows();
    if x.ncols() != width {
        return Err(PetlError::config(format!(
            "MRS-Adapter {} branch expects width {width}, got {}",
            branch.prefix(),
            x.ncols()
        )));
    }
    let down = x.dot(down_w).mapv(|v| v.max(0.0));
    let own = down.dot(up_w);
    let delta = match &m.w_up_share {
        Some(share) => concatenate![Axis(1), own, down.dot(share)],
        None => own,
    };
    if delta.ncols() != width {
        return Err(PetlError::config(format!(
            "MRS-Adapter up-projections produce width {}, expected {width}",
            delta.ncols()
        )));
    }
    Ok(delta)
}

fn mrs_name(tensor: &str, layer: usize, tied: bool) -> String {
    if tied {
        format!("petl.mrs.{tensor}")
    } else {
        format!("petl.mrs.{layer}.{tensor}")
    }
}

fn adapter_name(modality: Modality, layer: usize, site: &str, tensor: &str) -> String {
    format!("petl.adapter.{}.{layer}.{site}.{tensor}", modality.prefix())
}

fn prompt_name(modality: Modality, layer: usize) -> String {
    format!("petl.prompt.{}.{layer}", modality.prefix())
}

fn probe_name(modality: Modality, tensor: &str) -> String {
    format!("petl.probe.{}.{tensor}", modality.prefix())
}

/// Tensors a strategy adds on top of the backbone.
pub fn petl_specs(cfg: &EncoderConfig, strategy: &PetlStrategy) -> Vec<TensorSpec> {
    use StrategyKind::*;
    let (dv, dt) = (cfg.vision_width, cfg.text_width);
    let p = &strategy.params;
    let mut out = Vec::new();
    let spec = |name: String, shape, init| TensorSpec { name, shape, init };
    match strategy.kind {
        ZeroShot | FullFinetune => {}
        LinearProbe => {
            let d = cfg.embed_dim;
            for m in [Modality::Image, Modality::Text] {
                out.push(spec(probe_name(m, "weight"), (d, d), Init::Identity));
                out.push(spec(probe_name(m, "bias"), (1, d), Init::Zeros));
            }
        }
        AdapterSequential => {
            let d = p.d.unwrap_or(0);
            for m in [Modality::Image, Modality::Text] {
                let w = cfg.width(m);
                for l in 0..cfg.layers {
                    for site in ["attn", "mlp"] {
                        out.push(spec(
                            adapter_name(m, l, site, "w_down"),
                            (w, d),
                            Init::Normal(DOWN_INIT_STD),
                        ));
                        out.push(spec(adapter_name(m, l, site, "w_up"), (d, w), Init::Zeros));
                    }
                }
            }
        }
        MrsAdapter | MrsNoShare => {
            let d = p.d.unwrap_or(0);
            let r = p.r.unwrap_or(0);
            let share = strategy.kind == MrsAdapter;
            let instances = if strategy.tied() { 1 } else { cfg.layers };
            for l in 0..instances {
                let name = |t: &str| mrs_name(t, l, strategy.tied());
                out.push(spec(name("w_down_v"), (dv, d), Init::Normal(DOWN_INIT_STD)));
                out.push(spec(name("w_down_t"), (dt, d), Init::Normal(DOWN_INIT_STD)));
                if share {
                    out.push(spec(name("w_up_v"), (d, dv - r), Init::Zeros));
                    out.push(spec(name("w_up_t"), (d, dt - r), Init::Zeros));
                    out.push(spec(name("w_up_share"), (d, r), Init::Zeros));
                } else {
                    out.push(spec(name("w_up_v"), (d, dv), Init::Zeros));
                    out.push(spec(name("w_up_t"), (d, dt), Init::Zeros));
                }
            }
        }
        TextPrompt | VisualPrompt | VlPrompt => {
            let len = p.prompt_length.unwrap_or(0);
            let layers = match strategy.depth() {
                PromptDepth::Shallow => 1,
                PromptDepth::Deep => cfg.layers,
            };
            for m in [Modality::Image, Modality::Text] {
                if strategy.kind.prompts(m) {
                    for l in 0..layers {
                        out.push(spec(
                            prompt_name(m, l),
                            (len, cfg.width(m)),
                            Init::Normal(PROMPT_INIT_STD),
                        ));
                    }
                }
            }
        }
    }
    out
}

/// Sets trainability flags for `strategy` and adds its tensors.
pub fn attach_strategy(model: &mut DualEncoderModel, strategy: &PetlStrategy, seed: u64) -> Result<()> {
    if let Some(existing) = model.strategy() {
        return Err(PetlError::config(format!(
            "model already has strategy {} attached",
            existing.kind.name()
        )));
    }
    strategy.validate(model.config())?;
    let train_backbone = strategy.kind == StrategyKind::FullFinetune;
    for (_, p) in model.params_mut().iter_mut() {
        p.trainable = train_backbone;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for spec in petl_specs(model.config(), strategy) {
        let value = spec.materialize(&mut rng);
        model.params_mut().insert(spec.name, value, true);
    }
    model.set_strategy(strategy.clone());
    Ok(())
}

/// Trainable and total parameter counts.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamReport {
    pub trainable: u64,
    pub total: u64,
    /// `100·(1 − trainable / total_of_full_finetune)` for the same encoder.
    pub reduction_pct: f64,
}

impl ParamReport {
    fn new(trainable: u64, total: u64, full_finetune_total: u64) -> Self {
        ParamReport {
            trainable,
            total,
            reduction_pct: 100.0 * (1.0 - trainable as f64 / full_finetune_total as f64),
        }
    }
}

pub fn count_parameters(model: &DualEncoderModel) -> ParamReport {
    let (mut trainable, mut total) = (0u64, 0u64);
    for (_, p) in model.params().iter() {
        let n = p.value.len() as u64;
        total += n;
        if p.trainable {
            trainable += n;
        }
    }
    let full: u64 = backbone_specs(model.config()).iter().map(|s| s.numel() as u64).sum();
    ParamReport::new(trainable, total, full)
}

/// Same report as [`count_parameters`] on a model with `strategy` attached,
/// computed from shapes alone.
pub fn param_report_for(cfg: &EncoderConfig, strategy: &PetlStrategy) -> Result<ParamReport> {
    cfg.validate()?;
    strategy.validate(cfg)?;
    let backbone: u64 = backbone_specs(cfg).iter().map(|s| s.numel() as u64).sum();
    let extra: u64 = petl_specs(cfg, strategy).iter().map(|s| s.numel() as u64).sum();
    let trainable = if strategy.kind == StrategyKind::FullFinetune {
        backbone
    } else {
        extra
    };
    Ok(ParamReport::new(trainable, backbone + extra, backbone))
}

/// Reads the MRS-Adapter weights used at `layer` out of a model.
pub fn mrs_params(model: &DualEncoderModel, layer: usize) -> Result<MrsAdapterParams> {
    let strategy = model
        .strategy()
        .filter(|s| s.kind.is_mrs())
        .ok_or_else(|| PetlError::config("no MRS-Adapter attached"))?;
    let tied = strategy.tied();
    let get = |t: &str| model.param(&mrs_name(t, layer, tied)).cloned();
    Ok(MrsAdapterParams {
        w_down_v: get("w_down_v")?,
        w_down_t: get("w_down_t")?,
        w_up_v: get("w_up_v")?,
        w_up_t: get("w_up_t")?,
        w_up_share: match strategy.kind {
            StrategyKind::MrsAdapter => Some(get("w_up_share")?),
            _ => None,
        },
        tie_across_layers: tied,
    })
}

pub fn mrs_tensor_name(tensor: &str, layer: usize, tied: bool) -> String {
    mrs_name(tensor, layer, tied)
}

pub fn prompt_tensor_name(modality: Modality, layer: usize) -> String {
    prompt_name(modality, layer)
}

pub(crate) fn graph_mrs_delta(
    tape: &mut Tape<'_>,
    x_hat: NodeId,
    layer: usize,
    modality: Modality,
) -> Result<Option<NodeId>> {
    let Some(strategy) = tape.model().strategy().filter(|s| s.kind.is_mrs()) else {
        return Ok(None);
    };
    let tied = strategy.tied();
    let (down, up) = match modality {
        Modality::Image => ("w_down_v", "w_up_v"),
        Modality::Text => ("w_down_t", "w_up_t"),
    };
    let w_down = tape.param(&mrs_name(down, layer, tied))?;
    let w_up = tape.param(&mrs_name(up, layer, tied))?;
    let h = tape.graph.matmul(x_hat, w_down);
    let h = tape.graph.relu(h);
    let own = tape.graph.matmul(h, w_up);
    let delta = if strategy.kind == StrategyKind::MrsAdapter {
        let w_share = tape.param(&mrs_name("w_up_share", layer, tied))?;
        let shared = tape.graph.matmul(h, w_share);
        tape.graph.concat_cols(&[own, shared])
    } else {
        own
    };
    Ok(Some(delta))
}

pub(crate) fn graph_sequential_adapter(
    tape: &mut Tape<'_>,
    x: NodeId,
    layer: usize,
    modality: Modality,
    site: &str,
) -> Result<NodeId> {
    let Some(strategy) = tape
        .model()
        .strategy()
        .filter(|s| s.kind == StrategyKind::AdapterSequential)
    else {
        return Ok(x);
    };
    let scale = strategy.scale();
    let w_down = tape.param(&adapter_name(modality, layer, site, "w_down"))?;
    let w_up = tape.param(&adapter_name(modality, layer, site, "w_up"))?;
    let h = tape.graph.matmul(x, w_down);
    let h = tape.graph.relu(h);
    let h = tape.graph.matmul(h, w_up);
    let h = tape.graph.scale(h, scale);
    Ok(tape.graph.add(h, x))
}

pub(crate) fn graph_probe_head(tape: &mut Tape<'_>, z: NodeId, modality: Modality) -> Result<NodeId> {
    if tape.model().strategy().map(|s| s.kind) != Some(StrategyKind::LinearProbe) {
        return Ok(z);
    }
    let w = tape.param(&probe_name(modality, "weight"))?;
    let b = tape.param(&probe_name(modality, "bias"))?;
    let z = tape.graph.matmul(z, w);
    Ok(tape.graph.add_row(z, b))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Piece {
    /// Rows `start..start+len` of the sequence before insertion.
    Seq { start: usize, len: usize },
    /// Rows `start..start+len` of the prompt matrix.
    Prompt { start: usize, len: usize },
}

impl Piece {
    fn len(self) -> usize {
        match self {
            Piece::Seq { len, .. } | Piece::Prompt { len, .. } => len,
        }
    }
}

/// Where prompt rows sit relative to the content tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptPlacement {
    pieces: Vec<Piece>,
    /// Pooled row (CLS or EOS) after insertion.
    pub pooled_row: usize,
    pub deep: bool,
    pub total_rows: usize,
}

fn placement(
    modality: Modality,
    seq_len: usize,
    pooled: usize,
    prompt_len: usize,
    position: PromptPosition,
    max_len: Option<usize>,
) -> Result<PromptPlacement> {
    let total = seq_len + prompt_len;
    if let Some(max) = max_len {
        if total > max {
            return Err(PetlError::input(format!(
                "{seq_len} tokens plus {prompt_len} prompts exceed context length {max}"
            )));
        }
    }
    let pieces = match (modality, position) {
        (Modality::Text, PromptPosition::Mid) if pooled >= 1 => {
            let first = prompt_len / 2;
            vec![
                Piece::Seq { start: 0, len: 1 },
                Piece::Prompt { start: 0, len: first },
                Piece::Seq {
                    start: 1,
                    len: pooled - 1,
                },
                Piece::Prompt {
                    start: first,
                    len: prompt_len - first,
                },
                Piece::Seq {
                    start: pooled,
                    len: seq_len - pooled,
                },
            ]
        }
        _ => vec![
            Piece::Seq { start: 0, len: 1 },
            Piece::Prompt {
                start: 0,
                len: prompt_len,
            },
            Piece::Seq {
                start: 1,
                len: seq_len - 1,
            },
        ],
    };
    let pooled_row = match modality {
        Modality::Image => 0,
        Modality::Text => pooled + prompt_len,
    };
    Ok(PromptPlacement {
        pieces: pieces.into_iter().filter(|p| p.len() > 0).collect(),
        pooled_row,
        deep: false,
        total_rows: total,
    })
}

pub(crate) fn prompt_placement(
    model: &DualEncoderModel,
    modality: Modality,
    seq_len: usize,
    pooled: usize,
) -> Result<Option<PromptPlacement>> {
    let Some(strategy) = model.strategy().filter(|s| s.kind.prompts(modality)) else {
        return Ok(None);
    };
    let len = strategy.params.prompt_length.unwrap_or(0);
    let max = (modality == Modality::Text).then_some(model.config().context_length);
    let mut pl = placement(modality, seq_len, pooled, len, strategy.position(), max)?;
    pl.deep = strategy.depth() == PromptDepth::Deep;
    Ok(Some(pl))
}

pub(crate) fn graph_insert_prompts(
    tape: &mut Tape<'_>,
    x: NodeId,
    pl: &PromptPlacement,
    layer: usize,
    modality: Modality,
) -> Result<NodeId> {
    let prompts = tape.param(&prompt_name(modality, layer))?;
    let mut parts = Vec::with_capacity(pl.pieces.len());
    for piece in &pl.pieces {
        parts.push(match *piece {
            Piece::Seq { start, len } => tape.graph.slice_rows(x, start, len),
            Piece::Prompt { start, len } => tape.graph.slice_rows(prompts, start, len),
        });
    }
    Ok(tape.graph.concat_rows(&parts))
}

pub(crate) fn graph_replace_prompts(
    tape: &mut Tape<'_>,
    x: NodeId,
    pl: &PromptPlacement,
    layer: usize,
    modality: Modality,
) -> Result<NodeId> {
    let prompts = tape.param(&prompt_name(modality, layer))?;
    let mut parts = Vec::with_capacity(pl.pieces.len());
    let mut offset = 0;
    for piece in &pl.pieces {
        parts.push(match *piece {
            Piece::Seq { len, .. } => tape.graph.slice_rows(x, offset, len),
            Piece::Prompt { start, len } => tape.graph.slice_rows(prompts, start, len),
        });
        offset += piece.len();
    }
    Ok(tape.graph.concat_rows(&parts))
}

/// Inserts prompt rows after the CLS/BOS row. For text, `Mid` splits the
/// prompts around the content tokens. `max_len` bounds the result (the text
/// context length).
pub fn prompt_prepend(
    x: &TokenSequence,
    prompts: &Mat,
    position: PromptPosition,
    max_len: Option<usize>,
) -> Result<TokenSequence> {
    if prompts.nrows() > 0 && prompts.ncols() != x.tokens.ncols() {
        return Err(PetlError::config(format!(
            "prompt width {} does not match token width {}",
            prompts.ncols(),
            x.tokens.ncols()
        )));
    }
    let pooled = x.pooled_row()?;
    let pl = placement(x.modality, x.len(), pooled, prompts.nrows(), position, max_len)?;
    let mut out = Mat::zeros((pl.total_rows, x.tokens.ncols()));
    let mut offset = 0;
    for piece in &pl.pieces {
        let src = match *piece {
            Piece::Seq { start, len } => x.tokens.slice(ndarray::s![start..start + len, ..]),
            Piece::Prompt { start, len } => prompts.slice(ndarray::s![start..start + len, ..]),
        };
        out.slice_mut(ndarray::s![offset..offset + piece.len(), ..])
            .assign(&src);
        offset += piece.len();
    }
    Ok(TokenSequence {
        tokens: out,
        modality: x.modality,
        eos_index: x.eos_index.map(|_| pl.pooled_row),
    })
}
